//! Scalars for forward-over-reverse differentiation.
//!
//! Network passes and logit-level loss gradients are written once over
//! [`Scalar`]. Instantiated at `f64` they are the ordinary reverse-mode code;
//! instantiated at [`Dual`] they carry a tangent through the backward pass,
//! which yields exact Hessian-vector products.

use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Scalar:
    Copy
    + std::fmt::Debug
    + PartialEq
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
{
    fn cst(v: f64) -> Self;
    fn re(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn scale(self, k: f64) -> Self {
        self * Self::cst(k)
    }
}

impl Scalar for f64 {
    #[inline]
    fn cst(v: f64) -> Self {
        v
    }
    #[inline]
    fn re(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn scale(self, k: f64) -> Self {
        self * k
    }
}

/// First-order dual number `re + eps * tan`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dual {
    pub re: f64,
    pub tan: f64,
}

impl Dual {
    pub fn new(re: f64, tan: f64) -> Self {
        Self { re, tan }
    }
}

impl Scalar for Dual {
    #[inline]
    fn cst(v: f64) -> Self {
        Dual { re: v, tan: 0.0 }
    }
    #[inline]
    fn re(self) -> f64 {
        self.re
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual {
            re: e,
            tan: e * self.tan,
        }
    }
    #[inline]
    fn ln(self) -> Self {
        Dual {
            re: self.re.ln(),
            tan: self.tan / self.re,
        }
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual {
            re: t,
            tan: (1.0 - t * t) * self.tan,
        }
    }
    #[inline]
    fn scale(self, k: f64) -> Self {
        Dual {
            re: self.re * k,
            tan: self.tan * k,
        }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual {
            re: self.re + o.re,
            tan: self.tan + o.tan,
        }
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual {
            re: self.re - o.re,
            tan: self.tan - o.tan,
        }
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual {
            re: self.re * o.re,
            tan: self.re * o.tan + self.tan * o.re,
        }
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.re;
        Dual {
            re: self.re * inv,
            tan: (self.tan * o.re - self.re * o.tan) * inv * inv,
        }
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual {
            re: -self.re,
            tan: -self.tan,
        }
    }
}

impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, o: Dual) {
        self.re += o.re;
        self.tan += o.tan;
    }
}

impl SubAssign for Dual {
    #[inline]
    fn sub_assign(&mut self, o: Dual) {
        self.re -= o.re;
        self.tan -= o.tan;
    }
}

impl MulAssign for Dual {
    #[inline]
    fn mul_assign(&mut self, o: Dual) {
        *self = *self * o;
    }
}

/// Softmax of `z / temperature` over any scalar type, max-subtracted on the
/// real part.
pub(crate) fn softmax_generic<S: Scalar>(z: &[S], temperature: f64, out: &mut [S]) {
    let max = z.iter().map(|v| v.re()).fold(f64::NEG_INFINITY, f64::max);
    let inv_t = 1.0 / temperature;
    let mut sum = S::zero();
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - S::cst(max)).scale(inv_t).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// Pulls a gradient on softmax outputs back to the logits:
/// `dz_k = p_k (g_k - sum_j p_j g_j) / temperature`.
pub(crate) fn softmax_pullback<S: Scalar>(p: &[S], g: &[S], temperature: f64, dz: &mut [S]) {
    let mut inner = S::zero();
    for (&pj, &gj) in p.iter().zip(g) {
        inner += pj * gj;
    }
    let inv_t = 1.0 / temperature;
    for ((d, &pk), &gk) in dz.iter_mut().zip(p).zip(g) {
        *d = (pk * (gk - inner)).scale(inv_t);
    }
}
