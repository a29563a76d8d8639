use ndarray::{Array1, Array4, ArrayD, Axis, IxDyn};

use crate::{join, Mode, Module, Param, ParamVisitor, Scalar};

/// Batch normalization over `N×H×W` per channel.
pub struct BatchNorm2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub running_mean: ArrayD<T>,
    pub running_var: ArrayD<T>,
    eps: T,
    momentum: T,
    cache: Option<BnCache<T>>,
}

struct BnCache<T> {
    xhat: Array4<T>,
    inv_std: Array1<T>,
    batch_stats: bool,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Self {
        BatchNorm2d {
            weight: Param::filled(&[channels], T::one()),
            bias: Param::zeros(&[channels]),
            running_mean: ArrayD::zeros(IxDyn(&[channels])),
            running_var: ArrayD::ones(IxDyn(&[channels])),
            eps: T::lit(eps),
            momentum: T::lit(momentum),
            cache: None,
        }
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn forward(&mut self, x: Array4<T>, mode: Mode) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        let m = n * h * w;
        let (mean, var) = if mode.batch_stats() {
            let mean = x.mean_axis(Axis(3)).unwrap().mean_axis(Axis(2)).unwrap().mean_axis(Axis(0)).unwrap();
            let mut var = Array1::<T>::zeros(c);
            for (ci, v) in var.iter_mut().enumerate() {
                let mu = mean[ci];
                let ss: T = x.index_axis(Axis(1), ci).iter().map(|&a| (a - mu) * (a - mu)).sum();
                *v = ss / T::lit(m as f64);
            }
            let one = T::one();
            let unbias = if m > 1 { T::lit(m as f64 / (m - 1) as f64) } else { one };
            let momentum = match mode {
                Mode::Calibrate { batch } => one / T::lit((batch + 1) as f64),
                _ => self.momentum,
            };
            for ci in 0..c {
                self.running_mean[ci] = (one - momentum) * self.running_mean[ci] + momentum * mean[ci];
                self.running_var[ci] = (one - momentum) * self.running_var[ci] + momentum * var[ci] * unbias;
            }
            (mean, var)
        } else {
            (
                Array1::from_iter(self.running_mean.iter().copied()),
                Array1::from_iter(self.running_var.iter().copied()),
            )
        };
        let inv_std = var.mapv(|v| T::one() / (v + self.eps).sqrt());
        let mut xhat = x;
        for (ci, mut plane) in xhat.axis_iter_mut(Axis(1)).enumerate() {
            let (mu, is) = (mean[ci], inv_std[ci]);
            plane.mapv_inplace(|a| (a - mu) * is);
        }
        let mut y = xhat.clone();
        for (ci, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
            let (g, b) = (self.weight.value[ci], self.bias.value[ci]);
            plane.mapv_inplace(|a| a * g + b);
        }
        if mode.caches() {
            self.cache = Some(BnCache {
                xhat,
                inv_std,
                batch_stats: mode.is_train(),
            });
        }
        y
    }

    fn backward(&mut self, grad: Array4<T>) -> Array4<T> {
        let BnCache { xhat, inv_std, batch_stats } =
            self.cache.take().expect("batch-norm backward without cached forward");
        let (n, c, h, w) = grad.dim();
        let m = T::lit((n * h * w) as f64);
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        for ci in 0..c {
            let go = grad.index_axis(Axis(1), ci);
            let xh = xhat.index_axis(Axis(1), ci);
            let sum_dy: T = go.iter().copied().sum();
            let sum_dy_xhat: T = go.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum();
            self.weight.grad[ci] += sum_dy_xhat;
            self.bias.grad[ci] += sum_dy;
            let gamma = self.weight.value[ci];
            let is = inv_std[ci];
            let mut dplane = dx.index_axis_mut(Axis(1), ci);
            if batch_stats {
                let k = gamma * is / m;
                ndarray::Zip::from(&mut dplane).and(&go).and(&xh).for_each(|d, &dy, &xv| {
                    *d = k * (m * dy - sum_dy - xv * sum_dy_xhat);
                });
            } else {
                let k = gamma * is;
                ndarray::Zip::from(&mut dplane).and(&go).for_each(|d, &dy| *d = k * dy);
            }
        }
        dx
    }

    fn visit(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<T>) {
        visitor.param(&join(prefix, "weight"), &mut self.weight);
        visitor.param(&join(prefix, "bias"), &mut self.bias);
        visitor.buffer(&join(prefix, "running_mean"), &mut self.running_mean);
        visitor.buffer(&join(prefix, "running_var"), &mut self.running_var);
    }
}

/// Layer normalization across channels at every spatial position of an
/// `N×C×H×W` tensor (ConvNeXt's `LayerNorm2d` and its channels-last block norm).
pub struct ChannelLayerNorm<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    eps: T,
    cache: Option<(Array4<T>, Array4<T>)>,
}

impl<T: Scalar> ChannelLayerNorm<T> {
    pub fn new(channels: usize, eps: f64) -> Self {
        ChannelLayerNorm {
            weight: Param::filled(&[channels], T::one()),
            bias: Param::zeros(&[channels]),
            eps: T::lit(eps),
            cache: None,
        }
    }
}

impl<T: Scalar> Module<T> for ChannelLayerNorm<T> {
    fn forward(&mut self, x: Array4<T>, mode: Mode) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        let hw = h * w;
        let x = x.as_standard_layout().into_owned();
        let xs = x.as_slice().expect("standard layout");
        let mut xhat = Array4::<T>::zeros((n, c, h, w));
        // inverse std per (n, position), broadcast over a dummy channel axis
        let mut inv = Array4::<T>::zeros((n, 1, h, w));
        {
            let xh = xhat.as_slice_mut().expect("fresh array");
            let is = inv.as_slice_mut().expect("fresh array");
            let cf = T::lit(c as f64);
            for ni in 0..n {
                let base = ni * c * hw;
                for pos in 0..hw {
                    let mut mean = T::zero();
                    for ci in 0..c {
                        mean += xs[base + ci * hw + pos];
                    }
                    mean /= cf;
                    let mut var = T::zero();
                    for ci in 0..c {
                        let d = xs[base + ci * hw + pos] - mean;
                        var += d * d;
                    }
                    var /= cf;
                    let inv_std = T::one() / (var + self.eps).sqrt();
                    is[ni * hw + pos] = inv_std;
                    for ci in 0..c {
                        xh[base + ci * hw + pos] = (xs[base + ci * hw + pos] - mean) * inv_std;
                    }
                }
            }
        }
        let mut y = xhat.clone();
        for (ci, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
            let (g, b) = (self.weight.value[ci], self.bias.value[ci]);
            plane.mapv_inplace(|a| a * g + b);
        }
        if mode.caches() {
            self.cache = Some((xhat, inv));
        }
        y
    }

    fn backward(&mut self, grad: Array4<T>) -> Array4<T> {
        let (xhat, inv) = self.cache.take().expect("layer-norm backward without cached forward");
        let (n, c, h, w) = grad.dim();
        let hw = h * w;
        let grad = grad.as_standard_layout().into_owned();
        let gs = grad.as_slice().expect("standard layout");
        let xh = xhat.as_slice().expect("standard layout");
        let is = inv.as_slice().expect("standard layout");
        let gamma = self.weight.value.as_slice().expect("1-d").to_vec();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        let dxs = dx.as_slice_mut().expect("fresh array");
        let cf = T::lit(c as f64);
        for ni in 0..n {
            let base = ni * c * hw;
            for pos in 0..hw {
                let mut sum_d = T::zero();
                let mut sum_dx = T::zero();
                for ci in 0..c {
                    let idx = base + ci * hw + pos;
                    let dy = gs[idx];
                    dgamma[ci] += dy * xh[idx];
                    dbeta[ci] += dy;
                    let d = dy * gamma[ci];
                    sum_d += d;
                    sum_dx += d * xh[idx];
                }
                let k = is[ni * hw + pos] / cf;
                for ci in 0..c {
                    let idx = base + ci * hw + pos;
                    let d = gs[idx] * gamma[ci];
                    dxs[idx] = k * (cf * d - sum_d - xh[idx] * sum_dx);
                }
            }
        }
        for ci in 0..c {
            self.weight.grad[ci] += dgamma[ci];
            self.bias.grad[ci] += dbeta[ci];
        }
        dx
    }

    fn visit(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<T>) {
        visitor.param(&join(prefix, "weight"), &mut self.weight);
        visitor.param(&join(prefix, "bias"), &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn calibration_averages_batch_statistics() {
        let mut bn = BatchNorm2d::<f64>::new(1, 1e-5, 0.01);
        let a = Array4::from_shape_vec((1, 1, 1, 2), vec![1.0, 3.0]).unwrap();
        let b = Array4::from_shape_vec((1, 1, 1, 2), vec![5.0, 11.0]).unwrap();
        bn.forward(a, Mode::Calibrate { batch: 0 });
        bn.forward(b, Mode::Calibrate { batch: 1 });
        // batch means 2 and 8; unbiased variances 2 and 18
        assert!((bn.running_mean[0] - 5.0).abs() < 1e-12);
        assert!((bn.running_var[0] - 10.0).abs() < 1e-12);
        assert!(bn.cache.is_none());
    }
}
