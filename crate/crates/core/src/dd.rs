//! Double-double arithmetic (about 32 significant digits) for the
//! finite-difference oracle. Error-free transformations use `mul_add`.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub(crate) struct Dd {
    hi: f64,
    lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

const LN_2: Dd = Dd { hi: std::f64::consts::LN_2, lo: 2.3190468138462996e-17 };

impl Dd {
    pub(crate) const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub(crate) const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    fn norm(hi: f64, lo: f64) -> Self {
        let (hi, lo) = quick_two_sum(hi, lo);
        Self { hi, lo }
    }

    pub(crate) fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    pub(crate) fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    pub(crate) fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Self::ZERO;
        }
        let x = self.hi.sqrt();
        let (p, e) = two_prod(x, x);
        let r = self - Dd::norm(p, e);
        Dd::norm(x, r.hi / (2.0 * x))
    }

    /// `x = k ln 2 + r`, Taylor series on `r / 64`, then six squarings.
    pub(crate) fn exp(self) -> Self {
        let k = (self.hi / LN_2.hi).round();
        let t = (self - LN_2 * k) * (1.0 / 64.0);
        let mut term = Dd::ONE;
        let mut sum = Dd::ONE;
        for n in 1..=14 {
            term = term * t / n as f64;
            sum += term;
        }
        for _ in 0..6 {
            sum = sum * sum;
        }
        sum * 2f64.powi(k as i32)
    }

    /// `ln(1 + y)` for `y >= 0`: the series `2 atanh(y / (2 + y))` below 0.5,
    /// Newton steps on [`Dd::exp`] above.
    pub(crate) fn ln_1p(self) -> Self {
        if self.hi < 0.5 {
            let u = self / (self + 2.0);
            let u2 = u * u;
            let mut power = u;
            let mut sum = u;
            for n in 1..=26 {
                power = power * u2;
                sum += power / (2 * n + 1) as f64;
            }
            return sum * 2.0;
        }
        let one_plus = self + 1.0;
        let mut l = Dd::from(self.hi.ln_1p());
        for _ in 0..2 {
            l += one_plus * (-l).exp() - 1.0;
        }
        l
    }

    /// `tanh |x| = e / (e + 2)` with `e = expm1(2 |x|)`; the series avoids
    /// cancellation near zero.
    pub(crate) fn tanh(self) -> Self {
        let y = self.abs() * 2.0;
        let e = if y.hi < 1.0 {
            let mut term = y;
            let mut sum = y;
            for n in 2..=32 {
                term = term * y / n as f64;
                sum += term;
            }
            sum
        } else {
            y.exp() - 1.0
        };
        let t = e / (e + 2.0);
        if self.hi < 0.0 {
            -t
        } else {
            t
        }
    }
}

impl From<f64> for Dd {
    fn from(v: f64) -> Self {
        Self { hi: v, lo: 0.0 }
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Dd::norm(s, e + f)
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, o: Dd) -> Dd {
        self + -o
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        Dd::norm(p, e + (self.hi * o.lo + self.lo * o.hi))
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o * q1;
        let q2 = r.hi / o.hi;
        let r = r - o * q2;
        let q3 = r.hi / o.hi;
        Dd::norm(q1, q2) + Dd::from(q3)
    }
}

impl AddAssign for Dd {
    fn add_assign(&mut self, o: Dd) {
        *self = *self + o;
    }
}

macro_rules! scalar_rhs {
    ($($tr:ident $f:ident),*) => {$(
        impl $tr<f64> for Dd {
            type Output = Dd;
            fn $f(self, o: f64) -> Dd {
                $tr::$f(self, Dd::from(o))
            }
        }
    )*};
}
scalar_rhs!(Add add, Sub sub, Mul mul, Div div);

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_dd(got: Dd, hi: f64, lo: f64, rel: f64) {
        let err = ((got - Dd::from(hi)) - Dd::from(lo)).to_f64().abs();
        assert!(err <= rel * hi.abs(), "{got:?} vs {hi:?} + {lo:?}");
    }

    #[test]
    fn arithmetic_matches_high_precision_values() {
        assert_dd(Dd::ONE / 3.0, 0.3333333333333333, 1.850371707708594e-17, 1e-31);
        let y = Dd::from(1e-9);
        assert_dd(y / (y + 2.0), 4.9999999975e-10, 3.74278203525146e-26, 1e-31);
        assert_dd(Dd::from(2.0).sqrt(), std::f64::consts::SQRT_2, -9.667293313452913e-17, 1e-31);
        assert_dd(Dd::from(0.1) * 0.1, 0.010000000000000002, -8.326672684688674e-19, 1e-31);
        assert_dd(
            Dd::from(std::f64::consts::PI) / std::f64::consts::E,
            1.1557273497909217,
            2.413117091339332e-18,
            1e-31,
        );
    }

    #[test]
    fn functions_match_high_precision_values() {
        for (x, hi, lo) in [
            (-1.7, 0.18268352405273466, -5.430659906894856e-18),
            (-8.5, 0.00020346836901064417, 5.826962619516512e-21),
            (0.3, 1.3498588075760032, -9.447314673432387e-17),
            (12.25, 208981.28886971297, -5.913889082201693e-12),
            (-30.0, 9.357622968840175e-14, -2.1170146272646406e-30),
        ] {
            assert_dd(Dd::from(x).exp(), hi, lo, 1e-29);
        }
        for (x, hi, lo) in [
            (1e-9, 9.999999995e-10, 7.493897403823754e-26),
            (0.75, 0.5596157879354227, 2.685492580212308e-17),
            (3.5, 1.5040773967762742, -9.359411037597794e-17),
            (400.0, 5.993961427306569, -1.4809971323247146e-16),
        ] {
            assert_dd(Dd::from(x).ln_1p(), hi, lo, 1e-29);
        }
        assert_eq!(Dd::ZERO.ln_1p().to_f64(), 0.0);
        for (x, hi, lo) in [
            (-1.7, -0.935409070603099, -6.160665782786146e-18),
            (1e-5, 9.999999999666668e-06, -4.5758701526937e-22),
            (0.3, 0.2913126124515909, -6.4602656586469586e-18),
            (4.0, 0.999329299739067, 9.767046099568572e-18),
        ] {
            assert_dd(Dd::from(x).tanh(), hi, lo, 1e-29);
        }
    }

    #[test]
    fn ordering_is_lexicographic() {
        let a = Dd::ONE + 1e-20;
        assert!(a > Dd::ONE);
        assert!(Dd::from(-2.0) < Dd::ZERO);
    }
}
