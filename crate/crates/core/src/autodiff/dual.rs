use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Rem, RemAssign, Sub, SubAssign};

use num_traits::{Num, One, Zero};

use super::Real;

/// First-order dual number `re + du·ε` with `ε² = 0`.
///
/// `Dual<Dual<f64>>` carries the mixed second derivative in `du.du`.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Dual<R> {
    pub re: R,
    pub du: R,
}

impl<R: Real> Dual<R> {
    pub fn new(re: R, du: R) -> Self {
        Dual { re, du }
    }

    /// A variable seeded with unit tangent.
    pub fn variable(re: R) -> Self {
        Dual { re, du: R::one() }
    }

    pub fn constant(re: R) -> Self {
        Dual { re, du: R::zero() }
    }

    #[inline]
    fn chain(self, f: R, df: R) -> Self {
        Dual { re: f, du: self.du * df }
    }
}

impl Dual<Dual<f64>> {
    /// Seeds a hyper-dual number whose two tangents point along unit directions.
    pub fn seed(x: f64, d1: f64, d2: f64) -> Self {
        Dual::new(Dual::new(x, d1), Dual::new(d2, 0.0))
    }

    /// `(f, ∂₁f, ∂₂f, ∂₁∂₂f)`.
    pub fn parts(self) -> (f64, f64, f64, f64) {
        (self.re.re, self.re.du, self.du.re, self.du.du)
    }
}

impl<R: Real> Add for Dual<R> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Dual { re: self.re + o.re, du: self.du + o.du }
    }
}

impl<R: Real> Sub for Dual<R> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Dual { re: self.re - o.re, du: self.du - o.du }
    }
}

impl<R: Real> Mul for Dual<R> {
    type Output = Self;
    #[inline]
    fn mul(self, o: Self) -> Self {
        Dual { re: self.re * o.re, du: self.du * o.re + self.re * o.du }
    }
}

impl<R: Real> Div for Dual<R> {
    type Output = Self;
    #[inline]
    fn div(self, o: Self) -> Self {
        let inv = R::one() / o.re;
        let re = self.re * inv;
        Dual { re, du: (self.du - re * o.du) * inv }
    }
}

impl<R: Real> Rem for Dual<R> {
    type Output = Self;
    fn rem(self, o: Self) -> Self {
        let q = (self.re.value() / o.re.value()).trunc();
        let q = R::cst(q);
        Dual { re: self.re - q * o.re, du: self.du - q * o.du }
    }
}

impl<R: Real> Neg for Dual<R> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Dual { re: -self.re, du: -self.du }
    }
}

macro_rules! assign_ops {
    ($($tr:ident $m:ident $op:tt),*) => {$(
        impl<R: Real> $tr for Dual<R> {
            #[inline]
            fn $m(&mut self, o: Self) {
                *self = *self $op o;
            }
        }
    )*};
}
assign_ops!(AddAssign add_assign +, SubAssign sub_assign -, MulAssign mul_assign *, DivAssign div_assign /, RemAssign rem_assign %);

impl<R: Real> Zero for Dual<R> {
    fn zero() -> Self {
        Dual::constant(R::zero())
    }
    fn is_zero(&self) -> bool {
        self.re.is_zero() && self.du.is_zero()
    }
}

impl<R: Real> One for Dual<R> {
    fn one() -> Self {
        Dual::constant(R::one())
    }
}

impl<R: Real> Num for Dual<R> {
    type FromStrRadixErr = R::FromStrRadixErr;
    fn from_str_radix(s: &str, radix: u32) -> Result<Self, Self::FromStrRadixErr> {
        R::from_str_radix(s, radix).map(Dual::constant)
    }
}

impl<R: Real> Real for Dual<R> {
    #[inline]
    fn cst(v: f64) -> Self {
        Dual::constant(R::cst(v))
    }
    #[inline]
    fn value(self) -> f64 {
        self.re.value()
    }
    fn exp(self) -> Self {
        let e = self.re.exp();
        self.chain(e, e)
    }
    fn ln(self) -> Self {
        self.chain(self.re.ln(), R::one() / self.re)
    }
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        self.chain(t, R::one() - t * t)
    }
    fn powf(self, p: f64) -> Self {
        let f = self.re.powf(p);
        self.chain(f, R::cst(p) * self.re.powf(p - 1.0))
    }
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        self.chain(s, R::cst(0.5) / s)
    }
    fn relu(self) -> Self {
        if self.re.value() > 0.0 {
            self
        } else {
            Dual::zero()
        }
    }
    fn softplus(self) -> Self {
        self.chain(self.re.softplus(), self.re.sigmoid())
    }
    fn sigmoid(self) -> Self {
        let s = self.re.sigmoid();
        self.chain(s, s * (R::one() - s))
    }
}
