use ndarray::{Array4, Axis, Zip};

use crate::init::Init;
use crate::layers::{conv_bn_act, Activation, ActivationKind, Conv2d, GlobalAvgPool, Sequential};
use crate::{join, Mode, Module, ParamVisitor, Scalar};

const EPS: f64 = 0.001;
const MOMENTUM: f64 = 0.01;

fn make_divisible(v: f64, divisor: usize) -> usize {
    let d = divisor as f64;
    let mut new_v = (divisor).max(((v + d / 2.0) as usize / divisor) * divisor);
    if (new_v as f64) < 0.9 * v {
        new_v += divisor;
    }
    new_v
}

/// Squeeze-and-excitation with a hard-sigmoid gate.
struct SqueezeExcitation<T> {
    pool: GlobalAvgPool<T>,
    fc1: Conv2d<T>,
    relu: Activation<T>,
    fc2: Conv2d<T>,
    gate: Activation<T>,
    cache: Option<(Array4<T>, Array4<T>)>,
}

impl<T: Scalar> SqueezeExcitation<T> {
    fn new(init: &mut Init, channels: usize, squeeze: usize) -> Self {
        SqueezeExcitation {
            pool: GlobalAvgPool::default(),
            fc1: Conv2d::new(channels, squeeze, 1, 1, 0, 1, true).kaiming_fan_out(init),
            relu: Activation::new(ActivationKind::Relu),
            fc2: Conv2d::new(squeeze, channels, 1, 1, 0, 1, true).kaiming_fan_out(init),
            gate: Activation::new(ActivationKind::Hardsigmoid),
            cache: None,
        }
    }
}

impl<T: Scalar> Module<T> for SqueezeExcitation<T> {
    fn forward(&mut self, x: Array4<T>, mode: Mode) -> Array4<T> {
        let s = self.pool.forward(x.clone(), mode);
        let s = self.fc1.forward(s, mode);
        let s = self.relu.forward(s, mode);
        let s = self.fc2.forward(s, mode);
        let scale = self.gate.forward(s, mode);
        let y = &x * &scale;
        if mode.caches() {
            self.cache = Some((x, scale));
        }
        y
    }

    fn backward(&mut self, grad: Array4<T>) -> Array4<T> {
        let (x, scale) = self.cache.take().expect("SE backward without cached forward");
        let (n, c, _, _) = x.dim();
        let mut dscale = Array4::<T>::zeros((n, c, 1, 1));
        for ni in 0..n {
            for ci in 0..c {
                let g = grad.index_axis(Axis(0), ni);
                let g = g.index_axis(Axis(0), ci);
                let xv = x.index_axis(Axis(0), ni);
                let xv = xv.index_axis(Axis(0), ci);
                dscale[[ni, ci, 0, 0]] = g.iter().zip(xv.iter()).map(|(&a, &b)| a * b).sum();
            }
        }
        let mut dx = grad;
        Zip::from(&mut dx)
            .and_broadcast(&scale)
            .for_each(|d, &s| *d = *d * s);
        let ds = self.gate.backward(dscale);
        let ds = self.fc2.backward(ds);
        let ds = self.relu.backward(ds);
        let ds = self.fc1.backward(ds);
        dx + self.pool.backward(ds)
    }

    fn visit(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<T>) {
        self.fc1.visit(&join(prefix, "fc1"), visitor);
        self.fc2.visit(&join(prefix, "fc2"), visitor);
    }
}

struct InvertedResidual<T> {
    block: Sequential<T>,
    residual: bool,
}

struct BneckConf {
    input: usize,
    kernel: usize,
    expanded: usize,
    out: usize,
    se: bool,
    act: ActivationKind,
    stride: usize,
}

impl<T: Scalar> InvertedResidual<T> {
    fn new(init: &mut Init, cfg: &BneckConf) -> Self {
        let mut block = Sequential::new();
        if cfg.expanded != cfg.input {
            block = block.push(conv_bn_act(
                Conv2d::new(cfg.input, cfg.expanded, 1, 1, 0, 1, false).kaiming_fan_out(init),
                EPS,
                MOMENTUM,
                Some(cfg.act),
            ));
        }
        block = block.push(conv_bn_act(
            Conv2d::new(
                cfg.expanded,
                cfg.expanded,
                cfg.kernel,
                cfg.stride,
                (cfg.kernel - 1) / 2,
                cfg.expanded,
                false,
            )
            .kaiming_fan_out(init),
            EPS,
            MOMENTUM,
            Some(cfg.act),
        ));
        if cfg.se {
            let squeeze = make_divisible(cfg.expanded as f64 / 4.0, 8);
            block = block.push(SqueezeExcitation::new(init, cfg.expanded, squeeze));
        }
        block = block.push(conv_bn_act(
            Conv2d::new(cfg.expanded, cfg.out, 1, 1, 0, 1, false).kaiming_fan_out(init),
            EPS,
            MOMENTUM,
            None,
        ));
        InvertedResidual {
            block,
            residual: cfg.stride == 1 && cfg.input == cfg.out,
        }
    }
}

impl<T: Scalar> Module<T> for InvertedResidual<T> {
    fn forward(&mut self, x: Array4<T>, mode: Mode) -> Array4<T> {
        if self.residual {
            self.block.forward(x.clone(), mode) + x
        } else {
            self.block.forward(x, mode)
        }
    }

    fn backward(&mut self, grad: Array4<T>) -> Array4<T> {
        if self.residual {
            self.block.backward(grad.clone()) + grad
        } else {
            self.block.backward(grad)
        }
    }

    fn visit(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<T>) {
        self.block.visit(&join(prefix, "block"), visitor);
    }
}

/// MobileNetV3-Small trunk up to global average pooling (576 features).
pub(crate) fn mobilenet_v3_small<T: Scalar>(init: &mut Init) -> Sequential<T> {
    use ActivationKind::{Hardswish as HS, Relu as RE};
    #[rustfmt::skip]
    let settings = [
        (16, 3, 16, 16, true, RE, 2),
        (16, 3, 72, 24, false, RE, 2),
        (24, 3, 88, 24, false, RE, 1),
        (24, 5, 96, 40, true, HS, 2),
        (40, 5, 240, 40, true, HS, 1),
        (40, 5, 240, 40, true, HS, 1),
        (40, 5, 120, 48, true, HS, 1),
        (48, 5, 144, 48, true, HS, 1),
        (48, 5, 288, 96, true, HS, 2),
        (96, 5, 576, 96, true, HS, 1),
        (96, 5, 576, 96, true, HS, 1),
    ];
    let mut features = Sequential::new().push(conv_bn_act(
        Conv2d::new(3, 16, 3, 2, 1, 1, false).kaiming_fan_out(init),
        EPS,
        MOMENTUM,
        Some(HS),
    ));
    for (input, kernel, expanded, out, se, act, stride) in settings {
        let cfg = BneckConf {
            input,
            kernel,
            expanded,
            out,
            se,
            act,
            stride,
        };
        features = features.push(InvertedResidual::new(init, &cfg));
    }
    features = features.push(conv_bn_act(
        Conv2d::new(96, 576, 1, 1, 0, 1, false).kaiming_fan_out(init),
        EPS,
        MOMENTUM,
        Some(HS),
    ));
    Sequential::new()
        .push_named("features", features)
        .push_anonymous(GlobalAvgPool::default())
}

#[cfg(test)]
mod tests {
    use super::make_divisible;

    #[test]
    fn squeeze_widths_match_torchvision() {
        assert_eq!(make_divisible(16.0 / 4.0, 8), 8);
        assert_eq!(make_divisible(96.0 / 4.0, 8), 24);
        assert_eq!(make_divisible(240.0 / 4.0, 8), 64);
        assert_eq!(make_divisible(120.0 / 4.0, 8), 32);
        assert_eq!(make_divisible(144.0 / 4.0, 8), 40);
        assert_eq!(make_divisible(288.0 / 4.0, 8), 72);
        assert_eq!(make_divisible(576.0 / 4.0, 8), 144);
    }
}
