use ndarray::{Array4, Zip};

use crate::{Mode, Module, ParamVisitor, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationKind {
    Relu,
    /// Exact (erf-based) GELU.
    Gelu,
    Hardswish,
    Hardsigmoid,
}

impl ActivationKind {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        let three = T::lit(3.0);
        let six = T::lit(6.0);
        match self {
            ActivationKind::Relu => x.max(T::zero()),
            ActivationKind::Gelu => x * T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf()),
            ActivationKind::Hardswish => x * (x + three).max(T::zero()).min(six) / six,
            ActivationKind::Hardsigmoid => (x + three).max(T::zero()).min(six) / six,
        }
    }

    /// Derivative at `x`; kinks take the right-hand value except where torch
    /// uses the left one (ReLU at 0 has derivative 0).
    pub fn derivative<T: Scalar>(self, x: T) -> T {
        let three = T::lit(3.0);
        match self {
            ActivationKind::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            ActivationKind::Gelu => {
                let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
                let pdf = (-(x * x) * T::lit(0.5)).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
                cdf + x * pdf
            }
            ActivationKind::Hardswish => {
                if x < -three {
                    T::zero()
                } else if x > three {
                    T::one()
                } else {
                    (x + x + three) / T::lit(6.0)
                }
            }
            ActivationKind::Hardsigmoid => {
                if x > -three && x < three {
                    T::lit(1.0 / 6.0)
                } else {
                    T::zero()
                }
            }
        }
    }
}

/// Element-wise activation layer.
pub struct Activation<T> {
    kind: ActivationKind,
    input: Option<Array4<T>>,
}

impl<T: Scalar> Activation<T> {
    pub fn new(kind: ActivationKind) -> Self {
        Activation { kind, input: None }
    }
}

impl<T: Scalar> Module<T> for Activation<T> {
    fn forward(&mut self, x: Array4<T>, mode: Mode) -> Array4<T> {
        let kind = self.kind;
        let y = x.mapv(|v| kind.apply(v));
        if mode.caches() {
            self.input = Some(x);
        }
        y
    }

    fn backward(&mut self, mut grad: Array4<T>) -> Array4<T> {
        let x = self.input.take().expect("activation backward without cached forward");
        let kind = self.kind;
        Zip::from(&mut grad).and(&x).for_each(|g, &v| *g = *g * kind.derivative(v));
        grad
    }

    fn visit(&mut self, _prefix: &str, _visitor: &mut dyn ParamVisitor<T>) {}
}
