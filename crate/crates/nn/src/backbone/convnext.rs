use ndarray::{Array1, Array4, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::init::Init;
use crate::layers::{Activation, ActivationKind, ChannelLayerNorm, Conv2d, GlobalAvgPool, Sequential};
use crate::{join, Mode, Module, Param, ParamVisitor, Scalar};

const LN_EPS: f64 = 1e-6;
const LAYER_SCALE: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

/// torchvision's ConvNeXt-Tiny default.
pub const STOCHASTIC_DEPTH_PROB: f64 = 0.1;

/// `x + drop_path(layer_scale * pw2(gelu(pw1(norm(dwconv(x))))))`.
///
/// The two pointwise linears act on channels and are held as 1×1
/// convolutions; their torchvision weights are `out×in` and get reshaped on load.
struct CnBlock<T> {
    block: Sequential<T>,
    layer_scale: Param<T>,
    drop_prob: f64,
    salt: u64,
    cache: Option<(Array4<T>, Array1<T>)>,
}

impl<T: Scalar> CnBlock<T> {
    fn new(init: &mut Init, dim: usize, drop_prob: f64, salt: u64) -> Self {
        let block = Sequential::new()
            .push(trunc(Conv2d::new(dim, dim, 7, 1, 3, dim, true), init))
            // torchvision numbers its Permute layers; keep indices aligned
            .push_named("1", Identity)
            .push(ChannelLayerNorm::new(dim, LN_EPS))
            .push(trunc(Conv2d::new(dim, 4 * dim, 1, 1, 0, 1, true), init))
            .push(Activation::new(ActivationKind::Gelu))
            .push(trunc(Conv2d::new(4 * dim, dim, 1, 1, 0, 1, true), init));
        CnBlock {
            block,
            layer_scale: Param::filled(&[dim, 1, 1], T::lit(LAYER_SCALE)),
            drop_prob,
            salt,
            cache: None,
        }
    }
}

fn trunc<T: Scalar>(conv: Conv2d<T>, init: &mut Init) -> Conv2d<T> {
    conv.trunc_normal(init, INIT_STD)
}

/// Parameter-free placeholder that keeps torchvision's child numbering.
struct Identity;

impl<T: Scalar> Module<T> for Identity {
    fn forward(&mut self, x: Array4<T>, _mode: Mode) -> Array4<T> {
        x
    }

    fn backward(&mut self, grad: Array4<T>) -> Array4<T> {
        grad
    }

    fn visit(&mut self, _prefix: &str, _visitor: &mut dyn ParamVisitor<T>) {}
}

impl<T: Scalar> Module<T> for CnBlock<T> {
    fn forward(&mut self, x: Array4<T>, mode: Mode) -> Array4<T> {
        let n = x.dim().0;
        let residual = self.block.forward(x.clone(), mode);
        // per-sample survival multiplier; all ones outside training
        let mut keep = Array1::<T>::ones(n);
        if let Mode::Train { seed } = mode {
            if self.drop_prob > 0.0 {
                let survival = 1.0 - self.drop_prob;
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ self.salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                for k in keep.iter_mut() {
                    *k = if rng.random::<f64>() < survival {
                        T::lit(1.0 / survival)
                    } else {
                        T::zero()
                    };
                }
            }
        }
        let mut out = residual.clone();
        for (ni, mut sample) in out.axis_iter_mut(Axis(0)).enumerate() {
            for (ci, mut plane) in sample.axis_iter_mut(Axis(0)).enumerate() {
                let s = self.layer_scale.value[[ci, 0, 0]] * keep[ni];
                plane.mapv_inplace(|v| v * s);
            }
        }
        if mode.caches() {
            self.cache = Some((residual, keep));
        }
        out + x
    }

    fn backward(&mut self, grad: Array4<T>) -> Array4<T> {
        let (residual, keep) = self.cache.take().expect("block backward without cached forward");
        let (n, c, _, _) = grad.dim();
        let mut g_res = grad.clone();
        let mut dscale = ArrayD::<T>::zeros(IxDyn(&[c, 1, 1]));
        for ni in 0..n {
            for ci in 0..c {
                let go = grad.index_axis(Axis(0), ni);
                let go = go.index_axis(Axis(0), ci);
                let r = residual.index_axis(Axis(0), ni);
                let r = r.index_axis(Axis(0), ci);
                let dot: T = go.iter().zip(r.iter()).map(|(&a, &b)| a * b).sum();
                dscale[[ci, 0, 0]] += dot * keep[ni];
                let s = self.layer_scale.value[[ci, 0, 0]] * keep[ni];
                g_res
                    .index_axis_mut(Axis(0), ni)
                    .index_axis_mut(Axis(0), ci)
                    .mapv_inplace(|v| v * s);
            }
        }
        self.layer_scale.grad += &dscale;
        self.block.backward(g_res) + grad
    }

    fn visit(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<T>) {
        self.block.visit(&join(prefix, "block"), visitor);
        visitor.param(&join(prefix, "layer_scale"), &mut self.layer_scale);
    }
}

/// ConvNeXt-Tiny trunk plus the classifier's leading `LayerNorm2d`
/// (768 features).
pub(crate) fn convnext_tiny<T: Scalar>(init: &mut Init, stochastic_depth_prob: f64) -> Sequential<T> {
    let dims = [96usize, 192, 384, 768];
    let depths = [3usize, 3, 9, 3];
    let total_blocks: usize = depths.iter().sum();
    let stem = Sequential::new()
        .push(trunc(Conv2d::new(3, dims[0], 4, 4, 0, 1, true), init))
        .push(ChannelLayerNorm::new(dims[0], LN_EPS));
    let mut features = Sequential::new().push(stem);
    let mut block_id = 0usize;
    for (stage, (&dim, &depth)) in dims.iter().zip(depths.iter()).enumerate() {
        let mut blocks = Sequential::new();
        for _ in 0..depth {
            let p = stochastic_depth_prob * block_id as f64 / (total_blocks as f64 - 1.0);
            blocks = blocks.push(CnBlock::new(init, dim, p, block_id as u64 + 1));
            block_id += 1;
        }
        features = features.push(blocks);
        if stage + 1 < dims.len() {
            let down = Sequential::new()
                .push(ChannelLayerNorm::new(dim, LN_EPS))
                .push(trunc(Conv2d::new(dim, dims[stage + 1], 2, 2, 0, 1, true), init));
            features = features.push(down);
        }
    }
    Sequential::new()
        .push_named("features", features)
        .push_anonymous(GlobalAvgPool::default())
        .push_named(
            "classifier",
            Sequential::new().push(ChannelLayerNorm::new(dims[3], LN_EPS)),
        )
}
