//! Layer building blocks.

mod activation;
mod conv;
mod linear;
mod norm;
mod pool;

pub use activation::{Activation, ActivationKind};
pub use conv::{weight4, Conv2d};
pub use linear::Linear;
pub use norm::{BatchNorm2d, ChannelLayerNorm};
pub use pool::{GlobalAvgPool, MaxPool2d};

use ndarray::Array4;

use crate::{join, Mode, Module, ParamVisitor, Scalar};

/// Ordered container; children are named for parameter paths.
pub struct Sequential<T> {
    children: Vec<(String, Box<dyn Module<T>>)>,
}

impl<T: Scalar> Default for Sequential<T> {
    fn default() -> Self {
        Sequential { children: Vec::new() }
    }
}

impl<T: Scalar> Sequential<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a child named by its position.
    pub fn push(mut self, module: impl Module<T> + 'static) -> Self {
        let name = self.children.len().to_string();
        self.children.push((name, Box::new(module)));
        self
    }

    pub fn push_named(mut self, name: &str, module: impl Module<T> + 'static) -> Self {
        self.children.push((name.to_string(), Box::new(module)));
        self
    }

    /// Appends a child without consuming a positional index; used for
    /// parameter-free stages that torchvision does not number.
    pub fn push_anonymous(mut self, module: impl Module<T> + 'static) -> Self {
        self.children.push((String::new(), Box::new(module)));
        self
    }

    pub fn len(&self) -> usize {
        self.children.len()
    }

    pub fn is_empty(&self) -> bool {
        self.children.is_empty()
    }
}

impl<T: Scalar> Module<T> for Sequential<T> {
    fn forward(&mut self, mut x: Array4<T>, mode: Mode) -> Array4<T> {
        for (_, child) in self.children.iter_mut() {
            x = child.forward(x, mode);
        }
        x
    }

    fn backward(&mut self, mut grad: Array4<T>) -> Array4<T> {
        for (_, child) in self.children.iter_mut().rev() {
            grad = child.backward(grad);
        }
        grad
    }

    fn visit(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<T>) {
        for (name, child) in self.children.iter_mut() {
            if name.is_empty() {
                child.visit(prefix, visitor);
            } else {
                child.visit(&join(prefix, name), visitor);
            }
        }
    }
}

/// Conv → norm → optional activation, torchvision's `Conv2dNormActivation`
/// with batch norm. Children are numbered `0`, `1`, (`2`).
pub fn conv_bn_act<T: Scalar>(
    conv: Conv2d<T>,
    eps: f64,
    momentum: f64,
    act: Option<ActivationKind>,
) -> Sequential<T> {
    let ch = conv.out_channels();
    let seq = Sequential::new().push(conv).push(BatchNorm2d::new(ch, eps, momentum));
    match act {
        Some(kind) => seq.push(Activation::new(kind)),
        None => seq,
    }
}
