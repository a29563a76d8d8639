use std::collections::BTreeMap;

use ndarray::ArrayD;

use csicount_nn::{Param, ParamVisitor};

use crate::model::{param_group, Model, ParamGroup};
use crate::Scalar;

/// AdamW with decoupled weight decay, matching torch's update order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Number of updates taken so far.
    pub t: u64,
    /// First and second moments by parameter name.
    pub moments: BTreeMap<String, (ArrayD<T>, ArrayD<T>)>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update; the learning rate is chosen by parameter group.
    pub fn step(&mut self, model: &mut Model<T>, lr: impl Fn(ParamGroup) -> f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut update = Update {
            opt: self,
            lr: &lr,
            bc1,
            bc2_sqrt: bc2.sqrt(),
        };
        model.visit(&mut update);
    }
}

struct Update<'a, T, F> {
    opt: &'a mut AdamW<T>,
    lr: &'a F,
    bc1: f64,
    bc2_sqrt: f64,
}

impl<T: Scalar, F: Fn(ParamGroup) -> f64> ParamVisitor<T> for Update<'_, T, F> {
    fn param(&mut self, name: &str, p: &mut Param<T>) {
        let lr = (self.lr)(param_group(name));
        let (b1, b2) = (T::lit(self.opt.beta1), T::lit(self.opt.beta2));
        let (m, v) = self
            .opt
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())));
        let decay = T::lit(1.0 - lr * self.opt.weight_decay);
        let step = T::lit(lr / self.bc1);
        let bc2_sqrt = T::lit(self.bc2_sqrt);
        let eps = T::lit(self.opt.eps);
        ndarray::Zip::from(&mut p.value)
            .and(&p.grad)
            .and(m)
            .and(v)
            .for_each(|w, &g, m, v| {
                *w = *w * decay;
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *w = *w - step * *m / (v.sqrt() / bc2_sqrt + eps);
            });
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm<T: Scalar>(model: &mut Model<T>) -> f64 {
    struct Norm(f64);
    impl<T: Scalar> ParamVisitor<T> for Norm {
        fn param(&mut self, _: &str, p: &mut Param<T>) {
            self.0 += p.grad.iter().map(|g| g.to_f64_lossy().powi(2)).sum::<f64>();
        }
    }
    let mut n = Norm(0.0);
    model.visit(&mut n);
    n.0.sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`, as torch's
/// `clip_grad_norm_`. Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(model: &mut Model<T>, max_norm: f64) -> f64 {
    let norm = grad_norm(model);
    let coef = max_norm / (norm + 1e-6);
    if coef < 1.0 {
        struct Scale<T>(T);
        impl<T: Scalar> ParamVisitor<T> for Scale<T> {
            fn param(&mut self, _: &str, p: &mut Param<T>) {
                let c = self.0;
                p.grad.mapv_inplace(|g| g * c);
            }
        }
        model.visit(&mut Scale(T::lit(coef)));
    }
    norm
}
