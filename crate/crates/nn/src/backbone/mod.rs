//! ImageNet-style feature extractors with their classifiers removed.

mod convnext;
mod mobilenet;
mod resnet;

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Array4};

pub use convnext::STOCHASTIC_DEPTH_PROB;

use crate::init::Init;
use crate::layers::Sequential;
use crate::{Mode, Module, ParamVisitor, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BackboneKind {
    ConvnextTiny,
    Resnet18,
    MobilenetV3Small,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 3] = [
        BackboneKind::ConvnextTiny,
        BackboneKind::Resnet18,
        BackboneKind::MobilenetV3Small,
    ];

    /// Length of the pooled feature vector.
    pub fn feature_dim(self) -> usize {
        match self {
            BackboneKind::ConvnextTiny => 768,
            BackboneKind::Resnet18 => 512,
            BackboneKind::MobilenetV3Small => 576,
        }
    }

    /// Smallest square input the trunk accepts.
    pub fn min_resolution(self) -> usize {
        match self {
            BackboneKind::ConvnextTiny => 32,
            BackboneKind::Resnet18 => 2,
            BackboneKind::MobilenetV3Small => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BackboneKind::ConvnextTiny => "convnext_tiny",
            BackboneKind::Resnet18 => "resnet18",
            BackboneKind::MobilenetV3Small => "mobilenet_v3_small",
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackboneKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BackboneKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown backbone `{s}`"))
    }
}

/// Convolutional trunk + global average pooling, producing `N×d` features.
pub struct Backbone<T> {
    kind: BackboneKind,
    net: Sequential<T>,
    pooled_shape: Option<(usize, usize)>,
}

impl<T: Scalar> Backbone<T> {
    /// Randomly initialized backbone using torchvision's init schemes.
    pub fn new(kind: BackboneKind, seed: u64) -> Self {
        let mut init = Init::new(seed);
        let net = match kind {
            BackboneKind::ConvnextTiny => convnext::convnext_tiny(&mut init, STOCHASTIC_DEPTH_PROB),
            BackboneKind::Resnet18 => resnet::resnet18(&mut init),
            BackboneKind::MobilenetV3Small => mobilenet::mobilenet_v3_small(&mut init),
        };
        let mut backbone = Backbone {
            kind,
            net,
            pooled_shape: None,
        };
        // fail fast if the definition and the advertised width disagree
        let probe = backbone.net.forward(
            Array4::zeros((1, 3, kind.min_resolution().max(32), kind.min_resolution().max(32))),
            Mode::Infer,
        );
        assert_eq!(probe.dim().1, kind.feature_dim(), "{kind} feature width");
        backbone
    }

    pub fn kind(&self) -> BackboneKind {
        self.kind
    }

    pub fn feature_dim(&self) -> usize {
        self.kind.feature_dim()
    }

    /// `x` is `N×3×H×W`; returns `N×d`.
    pub fn forward(&mut self, x: Array4<T>, mode: Mode) -> Array2<T> {
        let n = x.dim().0;
        assert_eq!(x.dim().1, 3, "backbone expects three input channels");
        let pooled = self.net.forward(x, mode);
        let d = pooled.dim().1;
        if mode.caches() {
            self.pooled_shape = Some((n, d));
        }
        pooled
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, d))
            .expect("pooled features")
    }

    /// Gradient w.r.t. the features → gradient w.r.t. the input image.
    pub fn backward(&mut self, grad: Array2<T>) -> Array4<T> {
        let (n, d) = self.pooled_shape.take().expect("backbone backward without cached forward");
        let g = grad
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, d, 1, 1))
            .expect("feature grad");
        self.net.backward(g)
    }

    pub fn visit(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<T>) {
        self.net.visit(prefix, visitor);
    }
}
