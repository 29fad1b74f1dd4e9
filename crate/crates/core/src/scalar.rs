//! Floating-point scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

/// Element type tag written into tensor archives and manifests.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Display for Dtype {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Dtype::F32 => f.write_str("f32"),
            Dtype::F64 => f.write_str("f64"),
        }
    }
}

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: Dtype;

    /// Lossy conversion from an `f64` literal.
    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn write_le(data: &[Self], out: &mut Vec<u8>);

    /// Decodes little-endian bytes; `None` when the length is not a multiple of the element size.
    fn read_le(bytes: &[u8]) -> Option<Vec<Self>>;
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr, $size:expr) => {
        impl Scalar for $t {
            const DTYPE: Dtype = $dtype;

            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            fn write_le(data: &[Self], out: &mut Vec<u8>) {
                out.reserve(data.len() * $size);
                for v in data {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }

            fn read_le(bytes: &[u8]) -> Option<Vec<Self>> {
                if bytes.len() % $size != 0 {
                    return None;
                }
                Some(
                    bytes
                        .chunks_exact($size)
                        .map(|c| <$t>::from_le_bytes(c.try_into().expect("chunk size")))
                        .collect(),
                )
            }
        }
    };
}

impl_scalar!(f32, Dtype::F32, 4);
impl_scalar!(f64, Dtype::F64, 8);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn le_round_trip_is_bit_exact() {
        let xs = [0.1f32, -0.0, f32::MIN_POSITIVE, 3.5e30];
        let mut buf = Vec::new();
        f32::write_le(&xs, &mut buf);
        let back = f32::read_le(&buf).unwrap();
        for (a, b) in xs.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(f64::read_le(&buf[..3]).is_none());
    }
}
