use ndarray::{Array2, Axis, Ix2};

use crate::init::Init;
use crate::{join, Param, ParamVisitor, Scalar};

/// Fully connected layer on `N×in` matrices; weight is `out×in` as in torch.
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    input: Option<Array2<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        Linear {
            weight: Param::zeros(&[out_features, in_features]),
            bias: Param::zeros(&[out_features]),
            input: None,
        }
    }

    /// torch's default: weight and bias uniform in `±1/sqrt(in)`.
    pub fn torch_default(mut self, init: &mut Init) -> Self {
        let shape = self.weight.value.shape().to_vec();
        let bound = 1.0 / (shape[1] as f64).sqrt();
        self.weight.value = init.uniform(&shape, bound);
        self.bias.value = init.uniform(&[shape[0]], bound);
        self
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    fn w(&self) -> ndarray::ArrayView2<'_, T> {
        self.weight.value.view().into_dimensionality::<Ix2>().expect("2-d weight")
    }

    pub fn forward(&mut self, x: Array2<T>, cache: bool) -> Array2<T> {
        assert_eq!(x.ncols(), self.in_features(), "linear input width");
        let b = self.bias.value.view().into_dimensionality::<ndarray::Ix1>().expect("1-d bias");
        let y = x.dot(&self.w().t()) + &b;
        if cache {
            self.input = Some(x);
        }
        y
    }

    pub fn backward(&mut self, grad: Array2<T>) -> Array2<T> {
        let x = self.input.take().expect("linear backward without cached forward");
        let dw = grad.t().dot(&x);
        self.weight.grad += &dw.into_dyn();
        self.bias.grad += &grad.sum_axis(Axis(0)).into_dyn();
        grad.dot(&self.w())
    }

    pub fn visit(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<T>) {
        visitor.param(&join(prefix, "weight"), &mut self.weight);
        visitor.param(&join(prefix, "bias"), &mut self.bias);
    }
}
