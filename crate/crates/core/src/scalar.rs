use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Storage precision of a tensor, parameter store or checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn flag(self) -> u8 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    pub fn from_flag(flag: u8) -> Option<Self> {
        match flag {
            4 => Some(Precision::F32),
            8 => Some(Precision::F64),
            _ => None,
        }
    }
}

/// Floating point element type of the tape.
pub trait Real:
    Float
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    // Transcendentals go through libm even when num-traits has `std` on, so
    // results do not depend on which crates share the build.
    fn soft_exp(self) -> Self;

    fn soft_tanh(self) -> Self;

    fn soft_ln_1p(self) -> Self;
}

impl Real for f32 {
    const PRECISION: Precision = Precision::F32;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline]
    fn soft_exp(self) -> Self {
        libm::expf(self)
    }

    #[inline]
    fn soft_tanh(self) -> Self {
        libm::tanhf(self)
    }

    #[inline]
    fn soft_ln_1p(self) -> Self {
        libm::log1pf(self)
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::F64;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline]
    fn soft_exp(self) -> Self {
        libm::exp(self)
    }

    #[inline]
    fn soft_tanh(self) -> Self {
        libm::tanh(self)
    }

    #[inline]
    fn soft_ln_1p(self) -> Self {
        libm::log1p(self)
    }
}
