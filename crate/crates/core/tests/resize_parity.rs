//! Spatial resize against torch's anti-aliased `interpolate`.

use csicount::transform::{spatial_resize, Interpolation, TransformConfig};
use ndarray::Array2;
use serde::Deserialize;

#[derive(Deserialize)]
struct Case {
    rows: usize,
    cols: usize,
    resolution: usize,
    bicubic: Vec<f64>,
    bilinear: Vec<f64>,
}

fn source(rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |(i, j)| (0.37 * i as f64 + 0.11 * j as f64).sin() + 0.01 * i as f64)
}

fn config(resolution: usize, interpolation: Interpolation) -> TransformConfig {
    TransformConfig {
        target_length: 1,
        resolution,
        interpolation,
        warp_probability: 0.0,
        warp_scale_range: [1.0, 1.0],
        warp_enabled: false,
        standardize: false,
    }
}

#[test]
fn matches_torch_reference() {
    let cases: Vec<Case> = serde_json::from_str(include_str!("fixtures/resize_reference.json")).unwrap();
    for c in &cases {
        let m = source(c.rows, c.cols);
        for (mode, expected) in [(Interpolation::Bicubic, &c.bicubic), (Interpolation::Bilinear, &c.bilinear)] {
            let out = spatial_resize(m.view(), &config(c.resolution, mode)).unwrap();
            assert_eq!(out.dim(), (c.resolution, c.resolution));
            let worst = out.iter().zip(expected.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(
                worst < 1e-9,
                "{}x{} -> {} {mode:?}: max deviation {worst:e}",
                c.rows,
                c.cols,
                c.resolution
            );
        }
    }
}
