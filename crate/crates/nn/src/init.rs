//! Parameter initializers matching torchvision's conventions.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::Scalar;

/// Seeded source for parameter initialization. Two `Init`s built from the same
/// seed produce identical parameters when used in the same order.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> ArrayD<T> {
        let dist = Normal::new(0.0, std).expect("finite std");
        ArrayD::from_shape_simple_fn(IxDyn(shape), || T::lit(dist.sample(&mut self.rng)))
    }

    /// Normal truncated to `[-2, 2]` by redrawing, as torch's `trunc_normal_`.
    pub fn trunc_normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> ArrayD<T> {
        let dist = Normal::new(0.0, std).expect("finite std");
        ArrayD::from_shape_simple_fn(IxDyn(shape), || loop {
            let v: f64 = dist.sample(&mut self.rng);
            if (-2.0..=2.0).contains(&v) {
                break T::lit(v);
            }
        })
    }

    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], bound: f64) -> ArrayD<T> {
        if bound == 0.0 {
            return ArrayD::zeros(IxDyn(shape));
        }
        let dist = Uniform::new(-bound, bound).expect("valid bound");
        ArrayD::from_shape_simple_fn(IxDyn(shape), || T::lit(dist.sample(&mut self.rng)))
    }

    /// Kaiming normal with `mode="fan_out"` and ReLU gain. `shape[0]` is the
    /// output dimension.
    pub fn kaiming_fan_out<T: Scalar>(&mut self, shape: &[usize]) -> ArrayD<T> {
        let receptive: usize = shape[2..].iter().product();
        let fan_out = shape[0] * receptive.max(1);
        self.normal(shape, (2.0 / fan_out as f64).sqrt())
    }

    /// torch's default `Linear`/`Conv2d` weight init: uniform with bound
    /// `1/sqrt(fan_in)`.
    pub fn torch_default<T: Scalar>(&mut self, shape: &[usize]) -> ArrayD<T> {
        let fan_in = fan_in(shape);
        self.uniform(shape, 1.0 / (fan_in as f64).sqrt())
    }

    pub fn rng(&mut self) -> &mut impl Rng {
        &mut self.rng
    }
}

pub fn fan_in(shape: &[usize]) -> usize {
    let receptive: usize = shape[2..].iter().product();
    (shape.get(1).copied().unwrap_or(1) * receptive.max(1)).max(1)
}
