use std::iter::Sum;

use ndarray::NdFloat;
use num_traits::FromPrimitive;

/// Element type stored in checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

/// Floating point scalar the engine computes in.
///
/// Implemented for `f32` (training) and `f64` (gradient checks and oracles).
pub trait Scalar: NdFloat + FromPrimitive + Default + Sum + 'static {
    const DTYPE: Dtype;

    fn erf(self) -> Self;

    /// Converts a literal; panics only for values the type cannot hold.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn write_le(values: &[Self], out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Vec<Self>;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn erf(self) -> Self {
        libm::erff(self)
    }

    fn write_le(values: &[Self], out: &mut Vec<u8>) {
        out.reserve(values.len() * 4);
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read_le(bytes: &[u8]) -> Vec<Self> {
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn erf(self) -> Self {
        libm::erf(self)
    }

    fn write_le(values: &[Self], out: &mut Vec<u8>) {
        out.reserve(values.len() * 8);
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read_le(bytes: &[u8]) -> Vec<Self> {
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect()
    }
}
