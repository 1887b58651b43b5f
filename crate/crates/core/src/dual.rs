//! Dual numbers for forward-mode differentiation with respect to a single
//! scalar input.

use std::ops::{Add, Mul, Neg, Sub};

/// `value + tangent·ε` with `ε² = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DualScalar {
    pub value: f64,
    pub tangent: f64,
}

impl DualScalar {
    pub const fn new(value: f64, tangent: f64) -> Self {
        Self { value, tangent }
    }

    pub const fn constant(value: f64) -> Self {
        Self::new(value, 0.0)
    }

    /// The independent variable: tangent seeded with 1.
    pub const fn variable(value: f64) -> Self {
        Self::new(value, 1.0)
    }

    pub fn sin(self) -> Self {
        let (s, c) = self.value.sin_cos();
        Self::new(s, self.tangent * c)
    }

    pub fn cos(self) -> Self {
        let (s, c) = self.value.sin_cos();
        Self::new(c, -self.tangent * s)
    }

    pub fn exp(self) -> Self {
        let e = self.value.exp();
        Self::new(e, self.tangent * e)
    }

    pub fn scale(self, k: f64) -> Self {
        Self::new(self.value * k, self.tangent * k)
    }
}

impl From<f64> for DualScalar {
    fn from(v: f64) -> Self {
        Self::constant(v)
    }
}

impl Add for DualScalar {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        Self::new(self.value + rhs.value, self.tangent + rhs.tangent)
    }
}

impl Sub for DualScalar {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        Self::new(self.value - rhs.value, self.tangent - rhs.tangent)
    }
}

impl Mul for DualScalar {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        Self::new(
            self.value * rhs.value,
            self.value * rhs.tangent + self.tangent * rhs.value,
        )
    }
}

impl Neg for DualScalar {
    type Output = Self;
    fn neg(self) -> Self {
        Self::new(-self.value, -self.tangent)
    }
}
