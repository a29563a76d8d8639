//! A small convolutional network engine, generic over the floating point
//! scalar, with explicit forward/backward passes per layer.
//!
//! Every layer caches what it needs during [`Mode::Train`] and [`Mode::Eval`]
//! forwards so that [`Module::backward`] can be called once afterwards.
//! [`Mode::Infer`] skips the caches.
//!
//! Parameter and buffer names follow torchvision's `state_dict` keys, so a
//! torchvision checkpoint exported to safetensors can be loaded directly with
//! [`weights::load_pretrained`].

pub mod backbone;
pub mod init;
pub mod layers;
mod param;
mod scalar;
pub mod weights;

pub use backbone::{Backbone, BackboneKind};
pub use param::{join, Param, ParamVisitor};
pub use scalar::{Dtype, Scalar};

use ndarray::Array4;

/// Forward-pass mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, stochastic depth active. `seed` drives every random
    /// decision taken inside the pass.
    Train { seed: u64 },
    /// Running statistics, deterministic; caches kept so gradients can be taken.
    Eval,
    /// Same as `Eval` but without caches.
    Infer,
    /// Batch statistics for normalization; batch-norm running statistics
    /// become the cumulative average over calibration batches, `batch`
    /// counting from 0. No caches, no stochastic depth.
    Calibrate { batch: usize },
}

impl Mode {
    pub fn is_train(self) -> bool {
        matches!(self, Mode::Train { .. })
    }

    pub fn caches(self) -> bool {
        matches!(self, Mode::Train { .. } | Mode::Eval)
    }

    /// Normalization layers use the statistics of the current batch.
    pub fn batch_stats(self) -> bool {
        matches!(self, Mode::Train { .. } | Mode::Calibrate { .. })
    }
}

/// A differentiable stage operating on `N×C×H×W` tensors.
pub trait Module<T: Scalar>: Send {
    fn forward(&mut self, x: Array4<T>, mode: Mode) -> Array4<T>;

    /// Propagates `grad` (same shape as the last forward output) back to the
    /// input, accumulating parameter gradients along the way.
    fn backward(&mut self, grad: Array4<T>) -> Array4<T>;

    fn visit(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<T>);
}

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("safetensors error in {path} (sha256 {checksum}): {message}")]
    Format {
        path: String,
        checksum: String,
        message: String,
    },
    #[error("weights {path} (sha256 {checksum}) lack tensor `{name}`")]
    MissingTensor {
        path: String,
        checksum: String,
        name: String,
    },
    #[error("tensor `{name}` has shape {actual:?}, expected {expected:?} (weights sha256 {checksum})")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
        checksum: String,
    },
    #[error("weights {path} (sha256 {checksum}) contain unused tensors: {names:?}")]
    UnusedTensors {
        path: String,
        checksum: String,
        names: Vec<String>,
    },
    #[error("unsupported dtype {dtype} for tensor `{name}`")]
    Dtype { name: String, dtype: String },
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;

/// Single-precision backbone, the usual training configuration.
pub type Backbone32 = Backbone<f32>;
/// Double-precision backbone, used for gradient checks.
pub type Backbone64 = Backbone<f64>;
