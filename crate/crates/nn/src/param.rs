use ndarray::{ArrayD, IxDyn};

use crate::Scalar;

/// A trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub value: ArrayD<T>,
    pub grad: ArrayD<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: ArrayD<T>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Param { value, grad }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Param::new(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        Param::new(ArrayD::from_elem(IxDyn(shape), v))
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Receives every named parameter and buffer of a module tree.
pub trait ParamVisitor<T> {
    fn param(&mut self, name: &str, param: &mut Param<T>);

    /// Non-trainable state such as batch-norm running statistics.
    fn buffer(&mut self, _name: &str, _buffer: &mut ArrayD<T>) {}
}

/// Joins a dotted prefix and a child name.
pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
