//! Channel projection, backbone and task heads.

use std::fmt;
use std::path::PathBuf;

use ndarray::{Array2, Array3, Array4, ArrayD, Axis, Ix4};
use serde::{Deserialize, Serialize};

use csicount_nn::init::Init;
use csicount_nn::layers::Linear;
use csicount_nn::{join, weights, Backbone, BackboneKind, Mode, Param, ParamVisitor};

use crate::labels::{ACTIVITIES, CLASSES, USERS};
use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Activity or ABSENT per user slot.
    IdentityDependent,
    /// Per-activity user counts.
    IdentityAgnostic,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::IdentityDependent => "identity_dependent",
            Task::IdentityAgnostic => "identity_agnostic",
        }
    }

    /// Width of the head output.
    pub fn output_dim(self) -> usize {
        match self {
            Task::IdentityDependent => USERS * CLASSES,
            Task::IdentityAgnostic => ACTIVITIES,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How the single-channel image becomes the three channels the backbone expects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelStrategy {
    /// Trainable per-channel scale and bias (a 1×1 convolution, 1 → 3).
    LearnedProjection,
    /// The image copied into all three channels.
    Replicate,
}

mod backbone_serde {
    use super::BackboneKind;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(k: &BackboneKind, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(k.as_str())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BackboneKind, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub task: Task,
    #[serde(with = "backbone_serde")]
    pub backbone: BackboneKind,
    pub pretrained: bool,
    /// safetensors export of the torchvision checkpoint; required when `pretrained`.
    pub weights: Option<PathBuf>,
    pub channel_strategy: ChannelStrategy,
    pub init_seed: u64,
}

impl ModelSpec {
    /// Identifies the parameter layout; checkpoints refuse to load across
    /// different fingerprints.
    pub fn fingerprint(&self) -> String {
        let key = format!(
            "task={};backbone={};channels={:?}",
            self.task, self.backbone, self.channel_strategy
        );
        weights::sha256_hex(key.as_bytes())
    }
}

/// `channel c = w[c]·x + b[c]`.
pub struct Projection<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Array4<T>>,
}

impl<T: Scalar> Projection<T> {
    /// torch's default 1×1 convolution init (fan-in 1).
    pub fn new(init: &mut Init) -> Self {
        Projection {
            weight: Param::new(init.torch_default(&[3, 1, 1, 1])),
            bias: Param::new(init.uniform(&[3], 1.0)),
            input: None,
        }
    }

    pub fn from_values(weight: [T; 3], bias: [T; 3]) -> Self {
        Projection {
            weight: Param::new(ArrayD::from_shape_vec(vec![3, 1, 1, 1], weight.to_vec()).expect("3 weights")),
            bias: Param::new(ArrayD::from_shape_vec(vec![3], bias.to_vec()).expect("3 biases")),
            input: None,
        }
    }

    fn w(&self, c: usize) -> T {
        self.weight.value[[c, 0, 0, 0]]
    }

    /// `N×1×R×R` → `N×3×R×R`.
    pub fn forward(&mut self, x: Array4<T>, cache: bool) -> Array4<T> {
        let (n, ch, h, w) = x.dim();
        assert_eq!(ch, 1, "projection expects one input channel");
        let mut y = Array4::zeros((n, 3, h, w));
        for c in 0..3 {
            let (wc, bc) = (self.w(c), self.bias.value[c]);
            ndarray::Zip::from(y.index_axis_mut(Axis(1), c))
                .and(x.index_axis(Axis(1), 0))
                .for_each(|o, &v| *o = wc * v + bc);
        }
        if cache {
            self.input = Some(x);
        }
        y
    }

    pub fn backward(&mut self, grad: Array4<T>) -> Array4<T> {
        let x = self.input.take().expect("projection backward without cached forward");
        let x0 = x.index_axis(Axis(1), 0);
        let mut dx = Array4::zeros(x.raw_dim());
        for c in 0..3 {
            let g = grad.index_axis(Axis(1), c);
            self.weight.grad[[c, 0, 0, 0]] += (&g * &x0).sum();
            self.bias.grad[c] += g.sum();
            dx.index_axis_mut(Axis(1), 0).scaled_add(self.w(c), &g);
        }
        dx
    }

    pub fn visit(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<T>) {
        visitor.param(&join(prefix, "weight"), &mut self.weight);
        visitor.param(&join(prefix, "bias"), &mut self.bias);
    }
}

/// Linear map from features to the task output; the counting head adds a ReLU.
pub struct Head<T> {
    pub task: Task,
    pub linear: Linear<T>,
    relu_mask: Option<Array2<bool>>,
}

impl<T: Scalar> Head<T> {
    pub fn new(task: Task, feature_dim: usize, init: &mut Init) -> Self {
        Head {
            task,
            linear: Linear::new(feature_dim, task.output_dim()).torch_default(init),
            relu_mask: None,
        }
    }

    pub fn forward(&mut self, z: Array2<T>, cache: bool) -> Array2<T> {
        let y = self.linear.forward(z, cache);
        match self.task {
            Task::IdentityDependent => y,
            Task::IdentityAgnostic => {
                if cache {
                    self.relu_mask = Some(y.mapv(|v| v > T::zero()));
                }
                y.mapv(|v| v.max(T::zero()))
            }
        }
    }

    pub fn backward(&mut self, grad: Array2<T>) -> Array2<T> {
        let grad = match self.task {
            Task::IdentityDependent => grad,
            Task::IdentityAgnostic => {
                let mask = self.relu_mask.take().expect("head backward without cached forward");
                ndarray::Zip::from(&grad).and(&mask).map_collect(|&g, &m| if m { g } else { T::zero() })
            }
        };
        self.linear.backward(grad)
    }

    pub fn visit(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<T>) {
        self.linear.visit(prefix, visitor);
    }
}

/// Learning-rate group of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Projection,
    BackboneHead,
}

pub const PROJECTION_PREFIX: &str = "projection";
pub const BACKBONE_PREFIX: &str = "backbone";
pub const HEAD_PREFIX: &str = "head";

pub fn param_group(name: &str) -> ParamGroup {
    if name.starts_with(PROJECTION_PREFIX) {
        ParamGroup::Projection
    } else {
        ParamGroup::BackboneHead
    }
}

/// Projection → backbone → head.
pub struct Model<T> {
    spec: ModelSpec,
    pub projection: Option<Projection<T>>,
    pub backbone: Backbone<T>,
    pub head: Head<T>,
    weights_checksum: Option<String>,
}

impl<T: Scalar> Model<T> {
    /// Builds the model; with `pretrained` the backbone weights are loaded
    /// from `spec.weights` and any failure is returned before training starts.
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let mut init = Init::new(spec.init_seed);
        let projection = match spec.channel_strategy {
            ChannelStrategy::LearnedProjection => Some(Projection::new(&mut init)),
            ChannelStrategy::Replicate => None,
        };
        let mut backbone = Backbone::new(spec.backbone, spec.init_seed.wrapping_add(1));
        let head = Head::new(spec.task, spec.backbone.feature_dim(), &mut init);
        let weights_checksum = if spec.pretrained {
            let path = spec
                .weights
                .as_ref()
                .ok_or_else(|| Error::Config("pretrained backbone requested but no weights file given".into()))?;
            Some(weights::load_pretrained(&mut backbone, path)?)
        } else {
            None
        };
        Ok(Model {
            spec,
            projection,
            backbone,
            head,
            weights_checksum,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn task(&self) -> Task {
        self.spec.task
    }

    pub fn fingerprint(&self) -> String {
        self.spec.fingerprint()
    }

    /// sha256 of the pretrained weights file, if one was loaded.
    pub fn weights_checksum(&self) -> Option<&str> {
        self.weights_checksum.as_deref()
    }

    /// `N×1×R×R` → `N×3×R×R`.
    pub fn project(&mut self, images: Array4<T>, cache: bool) -> Array4<T> {
        match &mut self.projection {
            Some(p) => p.forward(images, cache),
            None => {
                let (n, _, h, w) = images.dim();
                let src = images.index_axis(Axis(1), 0);
                let mut y = Array4::zeros((n, 3, h, w));
                for c in 0..3 {
                    y.index_axis_mut(Axis(1), c).assign(&src);
                }
                y
            }
        }
    }

    /// Pooled backbone features `N×d`.
    pub fn features(&mut self, images: Array4<T>, mode: Mode) -> Array2<T> {
        let x = self.project(images, mode.caches());
        self.backbone.forward(x, mode)
    }

    /// Raw head outputs: `N×60` logits or `N×9` non-negative counts.
    pub fn forward(&mut self, images: Array4<T>, mode: Mode) -> Array2<T> {
        let z = self.features(images, mode);
        self.head.forward(z, mode.caches())
    }

    /// Forward returning both features and outputs, without caches.
    pub fn infer(&mut self, images: Array4<T>) -> (Array2<T>, Array2<T>) {
        let z = self.features(images, Mode::Infer);
        let y = self.head.forward(z.clone(), false);
        (z, y)
    }

    /// Back-propagates the gradient of the loss w.r.t. the head outputs.
    pub fn backward(&mut self, grad: Array2<T>) {
        let gz = self.head.backward(grad);
        let gx = self.backbone.backward(gz);
        if let Some(p) = &mut self.projection {
            p.backward(gx);
        }
    }

    /// Visits every parameter and buffer with `projection.`, `backbone.` and
    /// `head.` prefixes.
    pub fn visit(&mut self, visitor: &mut dyn ParamVisitor<T>) {
        if let Some(p) = &mut self.projection {
            p.visit(PROJECTION_PREFIX, visitor);
        }
        self.backbone.visit(BACKBONE_PREFIX, visitor);
        self.head.visit(HEAD_PREFIX, visitor);
    }

    pub fn zero_grad(&mut self) {
        struct Zero;
        impl<T: Scalar> ParamVisitor<T> for Zero {
            fn param(&mut self, _: &str, p: &mut Param<T>) {
                p.zero_grad();
            }
        }
        self.visit(&mut Zero);
    }
}

/// Stacks `R×R` images into an `N×1×R×R` batch.
pub fn stack_images<T: Scalar>(images: &[Array2<T>]) -> Array4<T> {
    let (h, w) = images.first().map(|i| i.dim()).unwrap_or((0, 0));
    let views: Vec<_> = images.iter().map(|i| i.view().insert_axis(Axis(0))).collect();
    ndarray::stack(Axis(0), &views)
        .expect("images share a shape")
        .into_shape_with_order((images.len(), 1, h, w))
        .expect("N×1×R×R")
        .into_dimensionality::<Ix4>()
        .expect("rank 4")
}

/// `N×60` logits viewed as `N×U×K`.
pub fn slot_logits<T: Scalar>(outputs: &Array2<T>) -> Array3<T> {
    let n = outputs.nrows();
    outputs
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, USERS, CLASSES))
        .expect("N×U×K logits")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(task: Task, strategy: ChannelStrategy) -> ModelSpec {
        ModelSpec {
            task,
            backbone: BackboneKind::MobilenetV3Small,
            pretrained: false,
            weights: None,
            channel_strategy: strategy,
            init_seed: 5,
        }
    }

    #[test]
    fn projection_examples() {
        let x = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, i, j)| (i * 4 + j) as f64);
        let mut p = Projection::from_values([1.0, 1.0, 1.0], [0.0; 3]);
        let y = p.forward(x.clone(), false);
        for c in 0..3 {
            assert_eq!(y.index_axis(Axis(1), c), x.index_axis(Axis(1), 0));
        }
        let mut p = Projection::from_values([0.0; 3], [1.0, 2.0, 3.0]);
        let y = p.forward(x, false);
        for c in 0..3 {
            assert!(y.index_axis(Axis(1), c).iter().all(|&v| v == (c + 1) as f64));
        }
    }

    #[test]
    fn head_widths_and_feature_dims() {
        for (task, width) in [(Task::IdentityDependent, 60), (Task::IdentityAgnostic, 9)] {
            let mut m = Model::<f32>::new(spec(task, ChannelStrategy::LearnedProjection)).unwrap();
            let x = Array4::from_shape_fn((2, 1, 32, 32), |(n, _, i, j)| ((n + i * j) % 5) as f32);
            let (z, y) = m.infer(x);
            assert_eq!(z.dim(), (2, 576));
            assert_eq!(y.dim(), (2, width));
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        struct Collect(Vec<(String, ArrayD<f32>)>);
        impl ParamVisitor<f32> for Collect {
            fn param(&mut self, n: &str, p: &mut Param<f32>) {
                self.0.push((n.to_string(), p.value.clone()));
            }
        }
        let mut a = Collect(Vec::new());
        let mut b = Collect(Vec::new());
        Model::<f32>::new(spec(Task::IdentityAgnostic, ChannelStrategy::LearnedProjection))
            .unwrap()
            .visit(&mut a);
        Model::<f32>::new(spec(Task::IdentityAgnostic, ChannelStrategy::LearnedProjection))
            .unwrap()
            .visit(&mut b);
        assert_eq!(a.0, b.0);
        assert!(a.0.iter().any(|(n, _)| n == "projection.weight"));
        assert!(a.0.iter().any(|(n, _)| n == "head.weight"));
    }

    #[test]
    fn pretrained_without_weights_fails_early() {
        let mut s = spec(Task::IdentityAgnostic, ChannelStrategy::Replicate);
        s.pretrained = true;
        assert!(matches!(Model::<f32>::new(s.clone()), Err(Error::Config(_))));
        s.weights = Some(PathBuf::from("/nonexistent/weights.safetensors"));
        assert!(matches!(Model::<f32>::new(s), Err(Error::Nn(_))));
    }

    #[test]
    fn fingerprint_tracks_layout() {
        let a = spec(Task::IdentityAgnostic, ChannelStrategy::LearnedProjection);
        let mut b = a.clone();
        b.backbone = BackboneKind::Resnet18;
        assert_ne!(a.fingerprint(), b.fingerprint());
        let mut c = a.clone();
        c.init_seed = 99;
        assert_eq!(a.fingerprint(), c.fingerprint());
    }
}
