//! Scalar element types backing tensors: `f32` for normal runs, `f64` for
//! verification runs (gradient checks need the extra headroom).

use std::fmt::{Debug, Display};
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// Width tag recorded in checkpoints so a file is never reinterpreted at a
/// different precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn bits(self) -> u8 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }

    pub fn from_bits(bits: u8) -> Option<Self> {
        match bits {
            32 => Some(Precision::F32),
            64 => Some(Precision::F64),
            _ => None,
        }
    }
}

/// Floating point scalar usable as tensor element.
pub trait Element:
    Copy
    + Debug
    + Display
    + Default
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;

    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite(self) -> bool;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn powi(self, n: i32) -> Self;
    fn abs(self) -> Self;
    fn max(self, other: Self) -> Self;

    /// Raw bit pattern, widened to u64, for bitwise-equality checks and
    /// checkpoint serialization.
    fn to_bits_u64(self) -> u64;
    fn from_bits_u64(bits: u64) -> Self;

    /// Uniform in `[2^-24, 1 - 2^-24]` from one random word (the clamp
    /// keeps logs of it finite).
    fn unit_open(bits: u64) -> Self;

    /// Natural log tuned for the noise-sampling hot loop: full-precision
    /// for `f64` (verification runs), a ~1 ulp polynomial for `f32`.
    fn ln_noise(self) -> Self;

    /// C = A(m,k) * B(k,n), optionally reading either operand transposed
    /// (the transposed operand is stored as its own (k,m)/(n,k) row-major
    /// buffer and read through swapped strides).
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
    );

    fn sigmoid(self) -> Self {
        Self::one() / (Self::one() + (-self).exp())
    }
}

/// `ln` for positive normal f32 inputs: mantissa reduced into
/// `[sqrt(1/2), sqrt(2))`, then the atanh series
/// `ln m = 2t (1 + t^2/3 + t^4/5 + t^6/7 + t^8/9)` with `t = (m-1)/(m+1)`.
/// `|t| <= 0.172`, so the truncation error sits below f32 rounding; values
/// near 1 stay exact because no exponent term is added there.
#[inline]
fn ln_f32_poly(x: f32) -> f32 {
    debug_assert!(x > 0.0 && x.is_finite());
    let bits = x.to_bits();
    let mut e = ((bits >> 23) as i32) - 127;
    let mut m = f32::from_bits((bits & 0x007F_FFFF) | 0x3F80_0000);
    if m > std::f32::consts::SQRT_2 {
        m *= 0.5;
        e += 1;
    }
    let t = (m - 1.0) / (m + 1.0);
    let t2 = t * t;
    let p = 1.0 + t2 * (1.0 / 3.0 + t2 * (1.0 / 5.0 + t2 * (1.0 / 7.0 + t2 * (1.0 / 9.0))));
    2.0 * t * p + e as f32 * std::f32::consts::LN_2
}

const UNIT_EPS: f64 = 1.0 / (1u64 << 24) as f64;

macro_rules! impl_element {
    ($t:ty, $prec:expr, $gemm:path, $bits:ty) => {
        impl Element for $t {
            const PRECISION: Precision = $prec;

            fn zero() -> Self {
                0.0
            }
            fn one() -> Self {
                1.0
            }
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn powi(self, n: i32) -> Self {
                <$t>::powi(self, n)
            }
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            fn to_bits_u64(self) -> u64 {
                self.to_bits() as u64
            }
            fn from_bits_u64(bits: u64) -> Self {
                <$t>::from_bits(bits as $bits)
            }
            #[inline]
            fn unit_open(bits: u64) -> Self {
                // 53 uniform bits, clamped away from both endpoints
                let u = (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
                u.clamp(UNIT_EPS, 1.0 - UNIT_EPS) as $t
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                c: &mut [Self],
            ) {
                assert_eq!(a.len(), m * k);
                assert_eq!(b.len(), k * n);
                assert_eq!(c.len(), m * n);
                // Row-major strides; a transposed operand swaps its pair.
                let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        0.0,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_element!(f32, Precision::F32, matrixmultiply::sgemm, u32);
impl_element!(f64, Precision::F64, matrixmultiply::dgemm, u64);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_small_known_product() {
        // [1 2 3; 4 5 6] * [7 8; 9 10; 11 12] = [58 64; 139 154]
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 3, 2, &a, false, &b, false, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn gemm_transposed_operands() {
        // Same product but with A stored transposed (3x2) and B transposed (2x3).
        let a_t = [1.0f32, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b_t = [7.0f32, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c = [0.0f32; 4];
        f32::gemm(2, 3, 2, &a_t, true, &b_t, true, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn bit_roundtrip_preserves_values() {
        for &x in &[0.0f32, -1.5, f32::MIN_POSITIVE, 1e30] {
            assert_eq!(f32::from_bits_u64(x.to_bits_u64()), x);
        }
        for &x in &[0.0f64, -1.5, f64::MIN_POSITIVE, 1e300] {
            assert_eq!(f64::from_bits_u64(x.to_bits_u64()), x);
        }
    }
}
