use std::fmt::Debug;
use std::ops::Neg;

use num_traits::{Float, Num, NumAssign};

/// Scalar arithmetic shared by plain floats and dual numbers.
///
/// Everything that has to be differentiated (networks, the ensemble head,
/// benchmark formulas) is written once against this trait. Plugging in
/// [`Dual`](super::Dual) gives forward-mode derivatives; nesting duals gives
/// second derivatives.
pub trait Real: Num + NumAssign + Neg<Output = Self> + Copy + Debug + 'static {
    /// Lifts a constant.
    fn cst(v: f64) -> Self;
    /// Primal (real) part.
    fn value(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn powf(self, p: f64) -> Self;
    fn sqrt(self) -> Self;
    /// `max(x, 0)`; the derivative at exactly zero is taken to be zero.
    fn relu(self) -> Self;
    /// `ln(1 + e^x)`, evaluated without overflow.
    fn softplus(self) -> Self;
    fn sigmoid(self) -> Self;

    fn powi(self, n: i32) -> Self {
        let mut acc = Self::one();
        for _ in 0..n.unsigned_abs() {
            acc *= self;
        }
        if n < 0 {
            Self::one() / acc
        } else {
            acc
        }
    }
}

fn softplus_float<F: Float>(x: F) -> F {
    if x > F::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid_float<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

macro_rules! impl_real_for_float {
    ($t:ty) => {
        impl Real for $t {
            #[inline]
            fn cst(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn value(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline]
            fn powf(self, p: f64) -> Self {
                <$t>::powf(self, p as $t)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn relu(self) -> Self {
                if self > 0.0 {
                    self
                } else {
                    0.0
                }
            }
            #[inline]
            fn softplus(self) -> Self {
                softplus_float(self)
            }
            #[inline]
            fn sigmoid(self) -> Self {
                sigmoid_float(self)
            }
            #[inline]
            fn powi(self, n: i32) -> Self {
                <$t>::powi(self, n)
            }
        }
    };
}

impl_real_for_float!(f32);
impl_real_for_float!(f64);
