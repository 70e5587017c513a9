//! Scalar codecs: OFP8 E4M3 (1 sign, 4 exponent, 3 mantissa bits, bias 7,
//! no infinities, NaN only at `S.1111.111`) and value-level BF16 rounding.
//!
//! BF16 is never stored as a separate type inside the matrices; a BF16 tensor
//! is a tensor of `f32` whose 16 low mantissa bits are zero.

use std::fmt;
use std::sync::LazyLock;

use thiserror::Error;

/// Largest finite E4M3 magnitude.
pub const E4M3_MAX: f32 = 448.0;

/// Smallest positive (subnormal) E4M3 magnitude, 2^-9.
pub const E4M3_MIN_SUBNORMAL: f32 = 1.0 / 512.0;

/// Smallest positive normal E4M3 magnitude, 2^-6.
pub const E4M3_MIN_NORMAL: f32 = 1.0 / 64.0;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum CodecError {
    #[error("cannot encode non-finite value {0} as E4M3")]
    NonFinite(f32),
}

/// One-byte E4M3 encoding.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Default, PartialOrd, Ord)]
#[repr(transparent)]
pub struct Fp8Code(pub u8);

impl Fp8Code {
    pub const ZERO: Self = Self(0x00);
    pub const NEG_ZERO: Self = Self(0x80);
    pub const ONE: Self = Self(0x38);
    pub const MAX: Self = Self(0x7E);
    pub const NAN: Self = Self(0x7F);

    #[inline]
    pub const fn bits(self) -> u8 {
        self.0
    }

    #[inline]
    pub const fn is_nan(self) -> bool {
        self.0 & 0x7F == 0x7F
    }

    #[inline]
    pub const fn is_zero(self) -> bool {
        self.0 & 0x7F == 0
    }

    #[inline]
    pub fn to_f32(self) -> f32 {
        DECODE_LUT[self.0 as usize]
    }
}

impl fmt::Debug for Fp8Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fp8Code(0x{:02X} = {})", self.0, self.to_f32())
    }
}

/// Decode table for all 256 codes.
pub static DECODE_LUT: LazyLock<[f32; 256]> = LazyLock::new(|| {
    let mut lut = [0.0f32; 256];
    for (code, slot) in lut.iter_mut().enumerate() {
        *slot = decode_bits(code as u8);
    }
    lut
});

fn decode_bits(bits: u8) -> f32 {
    let negative = bits & 0x80 != 0;
    let exp = ((bits >> 3) & 0x0F) as i32;
    let mant = (bits & 0x07) as f32;
    if exp == 0x0F && bits & 0x07 == 0x07 {
        return f32::NAN;
    }
    let magnitude = if exp == 0 {
        mant * E4M3_MIN_SUBNORMAL
    } else {
        (1.0 + mant / 8.0) * 2f32.powi(exp - 7)
    };
    if negative {
        -magnitude
    } else {
        magnitude
    }
}

/// Exact E4M3 value of a code; NaN codes decode to NaN.
#[inline]
pub fn decode_e4m3(code: Fp8Code) -> f32 {
    code.to_f32()
}

/// Round-to-nearest-even onto the E4M3 grid, saturating at ±448.
pub fn encode_e4m3(x: f32) -> Result<Fp8Code, CodecError> {
    if !x.is_finite() {
        return Err(CodecError::NonFinite(x));
    }
    Ok(encode_finite(x))
}

/// Encoding for inputs already known to be finite.
#[inline]
pub(crate) fn encode_finite(x: f32) -> Fp8Code {
    let sign = ((x.to_bits() >> 24) & 0x80) as u8;
    let a = x.abs();
    if a >= E4M3_MAX {
        return Fp8Code(sign | Fp8Code::MAX.0);
    }
    let unbiased = ((a.to_bits() >> 23) & 0xFF) as i32 - 127;
    let exp = unbiased.max(-6);
    // Spacing of the grid in this binade; scaling by a power of two is exact.
    let quantum = 2f32.powi(exp - 3);
    let steps = (a / quantum).round_ties_even() as u32;
    if steps == 0 {
        return Fp8Code(sign);
    }
    if exp == -6 && steps < 8 {
        return Fp8Code(sign | steps as u8);
    }
    let (exp, steps) = if steps == 16 { (exp + 1, 8) } else { (exp, steps) };
    let field = (exp + 7) as u8;
    Fp8Code(sign | (field << 3) | (steps - 8) as u8)
}

/// Round to the nearest BF16 value (8 significand bits, ties to even).
#[inline]
pub fn round_bf16(x: f32) -> f32 {
    half::bf16::from_f32(x).to_f32()
}

/// Rounds every element in place.
pub fn round_bf16_slice(xs: &mut [f32]) {
    for x in xs {
        *x = round_bf16(*x);
    }
}

/// True when `x` carries no information below the BF16 mantissa.
#[inline]
pub fn is_bf16(x: f32) -> bool {
    x.to_bits() & 0xFFFF == 0
}

/// A single-precision value known to be BF16-representable.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Default)]
pub struct Bf16Value(f32);

impl Bf16Value {
    pub fn new(x: f32) -> Self {
        Self(round_bf16(x))
    }

    pub fn from_bits(bits: u16) -> Self {
        Self(half::bf16::from_bits(bits).to_f32())
    }

    pub fn get(self) -> f32 {
        self.0
    }

    pub fn to_bits(self) -> u16 {
        (self.0.to_bits() >> 16) as u16
    }
}
