use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView2, ArrayViewMut2, Ix4};

use crate::init::Init;
use crate::{join, Mode, Module, Param, ParamVisitor, Scalar};

/// 2-D convolution with square kernels, symmetric zero padding and groups.
///
/// Dense and grouped convolutions lower to GEMM through im2col; depthwise
/// convolutions (`groups == in == out`) use a direct loop.
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    in_channels: usize,
    out_channels: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    groups: usize,
    input: Option<Array4<T>>,
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
}

impl<T: Scalar> Conv2d<T> {
    /// Zero-initialized convolution.
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        assert!(groups >= 1 && in_channels % groups == 0 && out_channels % groups == 0);
        assert!(kernel >= 1 && stride >= 1);
        Conv2d {
            weight: Param::zeros(&[out_channels, in_channels / groups, kernel, kernel]),
            bias: bias.then(|| Param::zeros(&[out_channels])),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
            input: None,
        }
    }

    pub fn kaiming_fan_out(mut self, init: &mut Init) -> Self {
        self.weight.value = init.kaiming_fan_out(self.weight.value.shape());
        self
    }

    pub fn trunc_normal(mut self, init: &mut Init, std: f64) -> Self {
        self.weight.value = init.trunc_normal(self.weight.value.shape(), std);
        self
    }

    /// torch's default initialization for weight and bias.
    pub fn torch_default(mut self, init: &mut Init) -> Self {
        let shape = self.weight.value.shape().to_vec();
        self.weight.value = init.torch_default(&shape);
        if let Some(b) = self.bias.as_mut() {
            let bound = 1.0 / (crate::init::fan_in(&shape) as f64).sqrt();
            b.value = init.uniform(&[shape[0]], bound);
        }
        self
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel;
        let p = self.padding;
        assert!(
            h + 2 * p >= k && w + 2 * p >= k,
            "input {h}x{w} smaller than kernel {k} with padding {p}"
        );
        ((h + 2 * p - k) / self.stride + 1, (w + 2 * p - k) / self.stride + 1)
    }

    fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.groups == self.in_channels && self.groups == self.out_channels
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn geometry(&self, h: usize, w: usize) -> Geometry {
        let (ho, wo) = self.output_size(h, w);
        Geometry {
            c: self.in_channels / self.groups,
            h,
            w,
            k: self.kernel,
            s: self.stride,
            p: self.padding,
            ho,
            wo,
        }
    }

    fn weight_slice(&self) -> &[T] {
        self.weight.value.as_slice().expect("standard layout weight")
    }
}

fn im2col<T: Scalar>(x: &[T], g: Geometry) -> Array2<T> {
    let Geometry { c, h, w, k, s, p, ho, wo } = g;
    let mut cols = Array2::<T>::zeros((c * k * k, ho * wo));
    let out = cols.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * ho * wo;
                for oi in 0..ho {
                    let ii = (oi * s + ki) as isize - p as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src = &plane[ii as usize * w..(ii as usize + 1) * w];
                    let dst = &mut out[row + oi * wo..row + (oi + 1) * wo];
                    for (oj, d) in dst.iter_mut().enumerate() {
                        let jj = (oj * s + kj) as isize - p as isize;
                        if jj >= 0 && jj < w as isize {
                            *d = src[jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(cols: &Array2<T>, dx: &mut [T], g: Geometry) {
    let Geometry { c, h, w, k, s, p, ho, wo } = g;
    let src = cols.as_slice().expect("standard layout cols");
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = ((ci * k + ki) * k + kj) * ho * wo;
                for oi in 0..ho {
                    let ii = (oi * s + ki) as isize - p as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * w..(ii as usize + 1) * w];
                    let from = &src[row + oi * wo..row + (oi + 1) * wo];
                    for (oj, v) in from.iter().enumerate() {
                        let jj = (oj * s + kj) as isize - p as isize;
                        if jj >= 0 && jj < w as isize {
                            dst[jj as usize] += *v;
                        }
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Conv2d<T> {
    fn gemm_forward(&self, x: &[T], n: usize, g: Geometry) -> Array4<T> {
        let og = self.out_channels / self.groups;
        let kk = g.c * g.k * g.k;
        let hw_in = g.h * g.w;
        let hw_out = g.ho * g.wo;
        let mut out = Array4::<T>::zeros((n, self.out_channels, g.ho, g.wo));
        let out_s = out.as_slice_mut().expect("fresh array");
        let weights = self.weight_slice();
        for ni in 0..n {
            for gi in 0..self.groups {
                let x_off = (ni * self.in_channels + gi * g.c) * hw_in;
                let xg = &x[x_off..x_off + g.c * hw_in];
                let wg = ArrayView2::from_shape((og, kk), &weights[gi * og * kk..(gi + 1) * og * kk])
                    .expect("weight block");
                let o_off = (ni * self.out_channels + gi * og) * hw_out;
                let mut og_view = ArrayViewMut2::from_shape((og, hw_out), &mut out_s[o_off..o_off + og * hw_out])
                    .expect("output block");
                if self.is_pointwise() {
                    let cols = ArrayView2::from_shape((g.c, hw_in), xg).expect("input block");
                    general_mat_mul(T::one(), &wg, &cols, T::zero(), &mut og_view);
                } else {
                    let cols = im2col(xg, g);
                    general_mat_mul(T::one(), &wg, &cols, T::zero(), &mut og_view);
                }
            }
        }
        out
    }

    fn gemm_backward(&mut self, x: &[T], grad: &[T], n: usize, g: Geometry) -> Array4<T> {
        let og = self.out_channels / self.groups;
        let kk = g.c * g.k * g.k;
        let hw_in = g.h * g.w;
        let hw_out = g.ho * g.wo;
        let pointwise = self.is_pointwise();
        let mut dx = Array4::<T>::zeros((n, self.in_channels, g.h, g.w));
        let dx_s = dx.as_slice_mut().expect("fresh array");
        let weights = self.weight.value.as_slice().expect("standard layout weight");
        let dweights = self.weight.grad.as_slice_mut().expect("standard layout grad");
        for ni in 0..n {
            for gi in 0..self.groups {
                let x_off = (ni * self.in_channels + gi * g.c) * hw_in;
                let xg = &x[x_off..x_off + g.c * hw_in];
                let o_off = (ni * self.out_channels + gi * og) * hw_out;
                let go = ArrayView2::from_shape((og, hw_out), &grad[o_off..o_off + og * hw_out])
                    .expect("grad block");
                let wg = ArrayView2::from_shape((og, kk), &weights[gi * og * kk..(gi + 1) * og * kk])
                    .expect("weight block");
                let mut dwg =
                    ArrayViewMut2::from_shape((og, kk), &mut dweights[gi * og * kk..(gi + 1) * og * kk])
                        .expect("weight grad block");
                let dxg = &mut dx_s[x_off..x_off + g.c * hw_in];
                if pointwise {
                    let cols = ArrayView2::from_shape((g.c, hw_in), xg).expect("input block");
                    general_mat_mul(T::one(), &go, &cols.t(), T::one(), &mut dwg);
                    let mut dcols = ArrayViewMut2::from_shape((g.c, hw_in), dxg).expect("dx block");
                    general_mat_mul(T::one(), &wg.t(), &go, T::one(), &mut dcols);
                } else {
                    let cols = im2col(xg, g);
                    general_mat_mul(T::one(), &go, &cols.t(), T::one(), &mut dwg);
                    let mut dcols = Array2::<T>::zeros((kk, hw_out));
                    general_mat_mul(T::one(), &wg.t(), &go, T::zero(), &mut dcols);
                    col2im_add(&dcols, dxg, g);
                }
            }
        }
        dx
    }

    fn depthwise_forward(&self, x: &[T], n: usize, g: Geometry) -> Array4<T> {
        let Geometry { h, w, k, s, p, ho, wo, .. } = g;
        let c = self.in_channels;
        let mut out = Array4::<T>::zeros((n, c, ho, wo));
        let out_s = out.as_slice_mut().expect("fresh array");
        let weights = self.weight_slice();
        for ni in 0..n {
            for ci in 0..c {
                let plane = &x[(ni * c + ci) * h * w..(ni * c + ci + 1) * h * w];
                let dst = &mut out_s[(ni * c + ci) * ho * wo..(ni * c + ci + 1) * ho * wo];
                let wk = &weights[ci * k * k..(ci + 1) * k * k];
                for ki in 0..k {
                    for kj in 0..k {
                        let wv = wk[ki * k + kj];
                        for oi in 0..ho {
                            let ii = (oi * s + ki) as isize - p as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            let row = &plane[ii as usize * w..(ii as usize + 1) * w];
                            let drow = &mut dst[oi * wo..(oi + 1) * wo];
                            for (oj, d) in drow.iter_mut().enumerate() {
                                let jj = (oj * s + kj) as isize - p as isize;
                                if jj >= 0 && jj < w as isize {
                                    *d += wv * row[jj as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn depthwise_backward(&mut self, x: &[T], grad: &[T], n: usize, g: Geometry) -> Array4<T> {
        let Geometry { h, w, k, s, p, ho, wo, .. } = g;
        let c = self.in_channels;
        let mut dx = Array4::<T>::zeros((n, c, h, w));
        let dx_s = dx.as_slice_mut().expect("fresh array");
        let weights = self.weight.value.as_slice().expect("standard layout weight");
        let dweights = self.weight.grad.as_slice_mut().expect("standard layout grad");
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * h * w;
                let plane = &x[base..base + h * w];
                let dplane = &mut dx_s[base..base + h * w];
                let go = &grad[(ni * c + ci) * ho * wo..(ni * c + ci + 1) * ho * wo];
                for ki in 0..k {
                    for kj in 0..k {
                        let wv = weights[ci * k * k + ki * k + kj];
                        let mut acc = T::zero();
                        for oi in 0..ho {
                            let ii = (oi * s + ki) as isize - p as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            let r0 = ii as usize * w;
                            let grow = &go[oi * wo..(oi + 1) * wo];
                            for (oj, gv) in grow.iter().enumerate() {
                                let jj = (oj * s + kj) as isize - p as isize;
                                if jj >= 0 && jj < w as isize {
                                    acc += *gv * plane[r0 + jj as usize];
                                    dplane[r0 + jj as usize] += wv * *gv;
                                }
                            }
                        }
                        dweights[ci * k * k + ki * k + kj] += acc;
                    }
                }
            }
        }
        dx
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn forward(&mut self, x: Array4<T>, mode: Mode) -> Array4<T> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv expected {} input channels", self.in_channels);
        let x = x.as_standard_layout().into_owned();
        let g = self.geometry(h, w);
        let xs = x.as_slice().expect("standard layout");
        let mut out = if self.is_depthwise() {
            self.depthwise_forward(xs, n, g)
        } else {
            self.gemm_forward(xs, n, g)
        };
        if let Some(b) = &self.bias {
            for (mut plane, bv) in out
                .axis_iter_mut(ndarray::Axis(1))
                .zip(b.value.iter())
            {
                plane.mapv_inplace(|v| v + *bv);
            }
        }
        if mode.caches() {
            self.input = Some(x);
        }
        out
    }

    fn backward(&mut self, grad: Array4<T>) -> Array4<T> {
        let x = self.input.take().expect("conv backward without cached forward");
        let (n, _, h, w) = x.dim();
        let g = self.geometry(h, w);
        let grad = grad.as_standard_layout().into_owned();
        if let Some(b) = self.bias.as_mut() {
            let sums = grad.sum_axis(ndarray::Axis(3)).sum_axis(ndarray::Axis(2)).sum_axis(ndarray::Axis(0));
            b.grad += &sums.into_dyn();
        }
        let xs = x.as_slice().expect("standard layout");
        let gs = grad.as_slice().expect("standard layout");
        if self.is_depthwise() {
            self.depthwise_backward(xs, gs, n, g)
        } else {
            self.gemm_backward(xs, gs, n, g)
        }
    }

    fn visit(&mut self, prefix: &str, visitor: &mut dyn ParamVisitor<T>) {
        visitor.param(&join(prefix, "weight"), &mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            visitor.param(&join(prefix, "bias"), b);
        }
    }
}

/// Reinterprets a dynamic weight as 4-D; used by tests and weight import.
pub fn weight4<T: Scalar>(p: &Param<T>) -> ndarray::ArrayView4<'_, T> {
    p.value.view().into_dimensionality::<Ix4>().expect("4-d weight")
}
