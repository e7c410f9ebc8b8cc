use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps};
use safetensors::Dtype;

/// Floating-point element type for tensors, networks and heatmaps.
///
/// Matrix products go through `ndarray`'s GEMM path, which dispatches to
/// BLAS-grade kernels for `f32` and `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumAssignOps
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Storage dtype used in checkpoint files.
    const DTYPE: Dtype;

    /// Converts an `f64` literal. Panics only if the value cannot be represented at all.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("scalar literal out of range")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn write_le(values: &[Self], out: &mut Vec<u8>);

    /// Decodes little-endian bytes of any supported float dtype into `Self`.
    fn read_le(dtype: Dtype, bytes: &[u8]) -> Option<Vec<Self>> {
        match dtype {
            Dtype::F32 => Some(
                bytes
                    .chunks_exact(4)
                    .map(|c| Self::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                    .collect(),
            ),
            Dtype::F64 => Some(
                bytes
                    .chunks_exact(8)
                    .map(|c| {
                        let mut b = [0u8; 8];
                        b.copy_from_slice(c);
                        Self::lit(f64::from_le_bytes(b))
                    })
                    .collect(),
            ),
            _ => None,
        }
    }
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn write_le(values: &[Self], out: &mut Vec<u8>) {
        out.reserve(values.len() * 4);
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn read_le(dtype: Dtype, bytes: &[u8]) -> Option<Vec<Self>> {
        match dtype {
            // exact path, no round trip through f64
            Dtype::F32 => Some(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            ),
            Dtype::F64 => Some(
                bytes
                    .chunks_exact(8)
                    .map(|c| {
                        let mut b = [0u8; 8];
                        b.copy_from_slice(c);
                        f64::from_le_bytes(b) as f32
                    })
                    .collect(),
            ),
            _ => None,
        }
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;

    fn write_le(values: &[Self], out: &mut Vec<u8>) {
        out.reserve(values.len() * 8);
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}
