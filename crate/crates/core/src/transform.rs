//! Amplitude → single-channel image preprocessing.
//!
//! `flatten → (warp) → fix_length → resize → standardize`, exposed as
//! [`preprocess`]. Only the warp is random, and only when a generator is
//! passed in.

use ndarray::{s, Array2, ArrayView2, ArrayView4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::CHANNELS;
use crate::{Error, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    Bicubic,
    Bilinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformConfig {
    pub target_length: usize,
    pub resolution: usize,
    pub interpolation: Interpolation,
    pub warp_probability: f64,
    pub warp_scale_range: [f64; 2],
    pub warp_enabled: bool,
    pub standardize: bool,
}

impl TransformConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.warp_scale_range;
        if self.target_length == 0 {
            return Err(Error::Config("target_length must be at least 1".into()));
        }
        if self.resolution < 2 {
            return Err(Error::Config("resolution must be at least 2".into()));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("warp_scale_range [{lo}, {hi}] must be a positive interval")));
        }
        if !(0.0..=1.0).contains(&self.warp_probability) {
            return Err(Error::Config("warp_probability must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// `T×3×3×30` → `T×270` with column `30·(3·tx + rx) + sc`.
pub fn flatten_spatial<T: Scalar>(amplitude: ArrayView4<'_, T>) -> Result<Array2<T>> {
    let (t, tx, rx, sc) = amplitude.dim();
    if (tx, rx, sc) != (3, 3, 30) {
        return Err(Error::Contract(format!(
            "amplitude trailing shape must be 3×3×30, got {tx}×{rx}×{sc}"
        )));
    }
    Ok(amplitude
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((t, CHANNELS))
        .expect("row-major reshape"))
}

/// Resamples the time axis to `rows` rows by per-column linear interpolation.
/// The first and last input rows map onto the first and last output rows.
pub fn resample_rows<T: Scalar>(m: ArrayView2<'_, T>, rows: usize) -> Array2<T> {
    let (n, c) = m.dim();
    assert!(n >= 1 && rows >= 1, "resample of an empty matrix");
    let mut out = Array2::zeros((rows, c));
    for i in 0..rows {
        let pos = if rows == 1 { 0.0 } else { i as f64 * (n - 1) as f64 / (rows - 1) as f64 };
        let lo = (pos.floor() as usize).min(n - 1);
        let hi = (lo + 1).min(n - 1);
        let frac = T::lit(pos - lo as f64);
        let a = m.row(lo);
        let b = m.row(hi);
        ndarray::Zip::from(out.row_mut(i))
            .and(&a)
            .and(&b)
            .for_each(|o, &av, &bv| *o = av + (bv - av) * frac);
    }
    out
}

/// Warp with a known scale: `round(T'·s)` rows, at least one.
pub fn warp_with_scale<T: Scalar>(m: ArrayView2<'_, T>, scale: f64) -> Array2<T> {
    let rows = ((m.nrows() as f64 * scale).round() as usize).max(1);
    if rows == m.nrows() {
        return m.to_owned();
    }
    resample_rows(m, rows)
}

/// Training-time augmentation. With probability `warp_probability` draws a
/// scale from `warp_scale_range` and resamples; otherwise returns the input.
pub fn temporal_warp<T: Scalar, R: Rng + ?Sized>(
    m: ArrayView2<'_, T>,
    rng: &mut R,
    cfg: &TransformConfig,
) -> Result<Array2<T>> {
    if !cfg.warp_enabled {
        return Err(Error::Contract("temporal warp requested with warping disabled".into()));
    }
    let apply = rng.random::<f64>() < cfg.warp_probability;
    let [lo, hi] = cfg.warp_scale_range;
    // always consume the scale draw so the stream position does not depend on the coin
    let scale = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    Ok(if apply { warp_with_scale(m, scale) } else { m.to_owned() })
}

/// Index into `0..n` under reflection without repeating the edge.
fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let j = i % period;
    if j < n {
        j
    } else {
        period - j
    }
}

/// Truncates to, or reflect-pads up to, exactly `target` rows.
pub fn fix_length<T: Scalar>(m: ArrayView2<'_, T>, target: usize) -> Result<Array2<T>> {
    let n = m.nrows();
    if n == 0 {
        return Err(Error::Contract("cannot fix the length of an empty matrix".into()));
    }
    if target == 0 {
        return Err(Error::Contract("target length must be at least 1".into()));
    }
    if n >= target {
        return Ok(m.slice(s![..target, ..]).to_owned());
    }
    let mut out = Array2::zeros((target, m.ncols()));
    for i in 0..target {
        out.row_mut(i).assign(&m.row(reflect_index(i, n)));
    }
    Ok(out)
}

/// Convolution weights for one axis: for each output index, the first input
/// index and the normalized weights starting there.
struct AxisWeights {
    start: Vec<usize>,
    weights: Vec<Vec<f64>>,
}

fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x < 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        (((x - 5.0) * x + 8.0) * x - 4.0) * A
    } else {
        0.0
    }
}

fn triangle(x: f64) -> f64 {
    (1.0 - x.abs()).max(0.0)
}

/// Separable anti-aliased resampling weights (half-pixel centres). When
/// shrinking, the kernel is stretched by the scale factor so it low-passes.
fn axis_weights(input: usize, output: usize, interpolation: Interpolation) -> AxisWeights {
    let (kernel, radius): (fn(f64) -> f64, f64) = match interpolation {
        Interpolation::Bicubic => (cubic, 2.0),
        Interpolation::Bilinear => (triangle, 1.0),
    };
    let scale = input as f64 / output as f64;
    let stretch = scale.max(1.0);
    let support = radius * stretch;
    let mut start = Vec::with_capacity(output);
    let mut weights = Vec::with_capacity(output);
    for i in 0..output {
        let center = scale * (i as f64 + 0.5);
        let lo = ((center - support + 0.5) as i64).max(0) as usize;
        let hi = ((center + support + 0.5) as i64).min(input as i64) as usize;
        let mut w: Vec<f64> = (lo..hi)
            .map(|j| kernel((j as f64 - center + 0.5) / stretch))
            .collect();
        let total: f64 = w.iter().sum();
        if total != 0.0 {
            w.iter_mut().for_each(|v| *v /= total);
        }
        start.push(lo);
        weights.push(w);
    }
    AxisWeights { start, weights }
}

fn resize_rows<T: Scalar>(m: ArrayView2<'_, T>, rows: usize, interpolation: Interpolation) -> Array2<T> {
    let table = axis_weights(m.nrows(), rows, interpolation);
    let mut out = Array2::zeros((rows, m.ncols()));
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        for (k, &w) in table.weights[i].iter().enumerate() {
            let w = T::lit(w);
            row.scaled_add(w, &m.row(table.start[i] + k));
        }
    }
    out
}

/// `L×270` → `R×R` with the configured kernel, anti-aliased when shrinking.
pub fn spatial_resize<T: Scalar>(m: ArrayView2<'_, T>, cfg: &TransformConfig) -> Result<Array2<T>> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(Error::Contract("cannot resize an empty matrix".into()));
    }
    let r = cfg.resolution;
    let tall = resize_rows(m, r, cfg.interpolation);
    let wide = resize_rows(tall.t(), r, cfg.interpolation);
    Ok(wide.reversed_axes().as_standard_layout().into_owned())
}

/// Zero mean, unit (population) variance; near-constant input maps to zeros.
pub fn standardize<T: Scalar>(img: ArrayView2<'_, T>) -> Array2<T> {
    let n = img.len() as f64;
    let mean = img.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n;
    let var = img.iter().map(|v| (v.to_f64_lossy() - mean).powi(2)).sum::<f64>() / n;
    if var < 1e-12 {
        return Array2::zeros(img.raw_dim());
    }
    let inv = 1.0 / var.sqrt();
    img.mapv(|v| T::lit((v.to_f64_lossy() - mean) * inv))
}

/// The whole chain. `warp_rng` is supplied only for training samples; the
/// warp runs when it is present and `cfg.warp_enabled` is set.
pub fn preprocess<T: Scalar, R: Rng + ?Sized>(
    amplitude: ArrayView4<'_, T>,
    cfg: &TransformConfig,
    warp_rng: Option<&mut R>,
) -> Result<Array2<T>> {
    let mut m = flatten_spatial(amplitude)?;
    if let (Some(rng), true) = (warp_rng, cfg.warp_enabled) {
        m = temporal_warp(m.view(), rng, cfg)?;
    }
    let m = fix_length(m.view(), cfg.target_length)?;
    let img = spatial_resize(m.view(), cfg)?;
    Ok(if cfg.standardize { standardize(img.view()) } else { img })
}

/// Eval-mode [`preprocess`].
pub fn preprocess_eval<T: Scalar>(amplitude: ArrayView4<'_, T>, cfg: &TransformConfig) -> Result<Array2<T>> {
    preprocess::<T, rand_chacha::ChaCha8Rng>(amplitude, cfg, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn cfg(resolution: usize, target_length: usize) -> TransformConfig {
        TransformConfig {
            target_length,
            resolution,
            interpolation: Interpolation::Bicubic,
            warp_probability: 0.5,
            warp_scale_range: [0.95, 1.05],
            warp_enabled: true,
            standardize: true,
        }
    }

    #[test]
    fn flatten_marker_lands_on_documented_column() {
        let mut a = Array4::<f64>::zeros((2, 3, 3, 30));
        a[[0, 1, 2, 5]] = 7.0;
        let m = flatten_spatial(a.view()).unwrap();
        assert_eq!(m[[0, 155]], 7.0);
        assert_eq!(m.sum(), 7.0);
        // unflatten every column and compare
        let b = Array4::from_shape_fn((1, 3, 3, 30), |(t, tx, rx, sc)| (t * 1000 + tx * 100 + rx * 30 + sc) as f64);
        let m = flatten_spatial(b.view()).unwrap();
        for tx in 0..3 {
            for rx in 0..3 {
                for sc in 0..30 {
                    assert_eq!(m[[0, 30 * (3 * tx + rx) + sc]], b[[0, tx, rx, sc]]);
                }
            }
        }
    }

    #[test]
    fn flatten_rejects_wrong_shape() {
        let a = Array4::<f32>::zeros((2, 3, 3, 29));
        assert!(flatten_spatial(a.view()).is_err());
    }

    #[test]
    fn identity_warp_and_forced_shrink() {
        let m = Array2::from_shape_fn((3000, 4), |(t, c)| (t as f64 * 0.01).sin() + c as f64);
        assert_eq!(warp_with_scale(m.view(), 1.0), m);
        let w = warp_with_scale(m.view(), 0.95);
        assert_eq!(w.nrows(), 2850);
        for i in [0usize, 1, 17, 1424, 2849] {
            let pos = i as f64 * 2999.0 / 2849.0;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(2999);
            let f = pos - lo as f64;
            for c in 0..4 {
                let expected = m[[lo, c]] * (1.0 - f) + m[[hi, c]] * f;
                assert!((w[[i, c]] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn warp_refuses_when_disabled() {
        let mut c = cfg(8, 10);
        c.warp_enabled = false;
        let m = Array2::<f64>::zeros((5, 3));
        assert!(temporal_warp(m.view(), &mut ChaCha8Rng::seed_from_u64(0), &c).is_err());
    }

    #[test]
    fn warp_is_seed_determined() {
        let m = Array2::from_shape_fn((500, 3), |(t, c)| (t * 3 + c) as f64);
        let mut c = cfg(8, 10);
        c.warp_probability = 1.0;
        let a = temporal_warp(m.view(), &mut ChaCha8Rng::seed_from_u64(9), &c).unwrap();
        let b = temporal_warp(m.view(), &mut ChaCha8Rng::seed_from_u64(9), &c).unwrap();
        assert_eq!(a, b);
        assert!((475..=525).contains(&a.nrows()));
    }

    #[test]
    fn reflect_pad_mirrors_without_edge() {
        let m = Array2::from_shape_fn((2850, 2), |(t, c)| (t * 2 + c) as f64);
        let p = fix_length(m.view(), 3000).unwrap();
        assert_eq!(p.nrows(), 3000);
        for k in 0..150 {
            assert_eq!(p.row(2850 + k), m.row(2848 - k));
        }
        let long = Array2::from_shape_fn((3100, 1), |(t, _)| t as f64);
        assert_eq!(fix_length(long.view(), 3000).unwrap(), long.slice(s![..3000, ..]));
        assert!(fix_length(Array2::<f64>::zeros((0, 3)).view(), 10).is_err());
        let one = Array2::from_elem((1, 3), 2.0);
        assert_eq!(fix_length(one.view(), 4).unwrap(), Array2::from_elem((4, 3), 2.0));
    }

    #[test]
    fn resize_preserves_constants_and_identity_axis() {
        for interpolation in [Interpolation::Bicubic, Interpolation::Bilinear] {
            let mut c = cfg(17, 10);
            c.interpolation = interpolation;
            let m = Array2::from_elem((300, 270), 3.25f64);
            let r = spatial_resize(m.view(), &c).unwrap();
            assert_eq!(r.dim(), (17, 17));
            assert!(r.iter().all(|v| (v - 3.25).abs() < 1e-6));
        }
        let m = Array2::from_shape_fn((270, 270), |(t, c)| ((t * 7 + c * 13) % 31) as f64);
        let r = spatial_resize(m.view(), &cfg(270, 270)).unwrap();
        assert!(r.iter().zip(m.iter()).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn standardize_properties() {
        assert!(standardize(Array2::from_elem((5, 5), 4.0).view()).iter().all(|&v| v == 0.0));
        let x = Array2::from_shape_fn((9, 9), |(i, j)| ((i * 5 + j * 3) % 7) as f64 + 0.1 * i as f64);
        let z = standardize(x.view());
        let mean = z.mean().unwrap();
        let std = (z.mapv(|v| (v - mean).powi(2)).mean().unwrap()).sqrt();
        assert!(mean.abs() < 1e-6 && (std - 1.0).abs() < 1e-4);
        let shifted = standardize(x.mapv(|v| 3.5 * v - 20.0).view());
        assert!(shifted.iter().zip(z.iter()).all(|(a, b)| (a - b).abs() < 1e-9));
    }
}
