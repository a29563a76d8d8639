use ndarray::{Array4, Axis};

use crate::{Mode, Module, ParamVisitor, Scalar};

/// Max pooling with square window and implicit `-inf` padding.
pub struct MaxPool2d<T> {
    kernel: usize,
    stride: usize,
    padding: usize,
    cache: Option<(Vec<usize>, (usize, usize, usize, usize))>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> MaxPool2d<T> {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        MaxPool2d {
            kernel,
            stride,
            padding,
            cache: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<T: Scalar> Module<T> for MaxPool2d<T> {
    fn forward(&mut self, x: Array4<T>, mode: Mode) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        assert!(h + 2 * p >= k && w + 2 * p >= k, "max-pool input {h}x{w} too small");
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        let x = x.as_standard_layout().into_owned();
        let xs = x.as_slice().expect("standard layout");
        let mut out = Array4::<T>::zeros((n, c, ho, wo));
        let mut argmax = vec![0usize; n * c * ho * wo];
        let os = out.as_slice_mut().expect("fresh array");
        for plane in 0..n * c {
            let base = plane * h * w;
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut best_idx = base;
                    for ki in 0..k {
                        let ii = (oi * s + ki) as isize - p as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let jj = (oj * s + kj) as isize - p as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            let idx = base + ii as usize * w + jj as usize;
                            if xs[idx] > best {
                                best = xs[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (plane * ho + oi) * wo + oj;
                    os[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        if mode.caches() {
            self.cache = Some((argmax, (n, c, h, w)));
        }
        out
    }

    fn backward(&mut self, grad: Array4<T>) -> Array4<T> {
        let (argmax, shape) = self.cache.take().expect("max-pool backward without cached forward");
        let mut dx = Array4::<T>::zeros(shape);
        let dxs = dx.as_slice_mut().expect("fresh array");
        for (g, &idx) in grad.iter().zip(argmax.iter()) {
            dxs[idx] += *g;
        }
        dx
    }

    fn visit(&mut self, _prefix: &str, _visitor: &mut dyn ParamVisitor<T>) {}
}

/// Global average pooling to `N×C×1×1`.
pub struct GlobalAvgPool<T> {
    shape: Option<(usize, usize, usize, usize)>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> Default for GlobalAvgPool<T> {
    fn default() -> Self {
        GlobalAvgPool {
            shape: None,
            _marker: std::marker::PhantomData,
        }
    }
}

impl<T: Scalar> Module<T> for GlobalAvgPool<T> {
    fn forward(&mut self, x: Array4<T>, mode: Mode) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        let pooled = x.mean_axis(Axis(3)).unwrap().mean_axis(Axis(2)).unwrap();
        if mode.caches() {
            self.shape = Some((n, c, h, w));
        }
        pooled.into_shape_with_order((n, c, 1, 1)).expect("pooled shape")
    }

    fn backward(&mut self, grad: Array4<T>) -> Array4<T> {
        let (n, c, h, w) = self.shape.take().expect("avg-pool backward without cached forward");
        let scale = T::one() / T::lit((h * w) as f64);
        let g = grad.mapv(|v| v * scale);
        g.broadcast((n, c, h, w)).expect("broadcast pooled grad").to_owned()
    }

    fn visit(&mut self, _prefix: &str, _visitor: &mut dyn ParamVisitor<T>) {}
}
