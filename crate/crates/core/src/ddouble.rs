//! Double-double arithmetic (~106-bit significand) for reference evaluations.
//!
//! Only what the finite-difference reference needs: +, -, *, /, sqrt, exp, ln.
//! Algorithms follow the classic error-free transformations (two-sum,
//! fma-based two-product).

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub const fn from_f64(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn scale_pow2(self, k: i32) -> Self {
        let s = 2f64.powi(k);
        Dd {
            hi: self.hi * s,
            lo: self.lo * s,
        }
    }

    #[cfg(test)]
    fn abs(self) -> Self {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    pub fn sqrt(self) -> Self {
        if self.hi <= 0.0 {
            return Dd::ZERO;
        }
        let q = Dd::from_f64(self.hi.sqrt());
        q + (self - q * q) / (q + q)
    }

    pub fn exp(self) -> Self {
        if self.hi > 709.0 {
            return Dd::from_f64(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return Dd::ZERO;
        }
        let k = (self.hi / LN2.hi).round();
        // |r| <= ln2/2, then shrink by 2^10 so the series converges fast
        let r = (self - LN2 * Dd::from_f64(k)).scale_pow2(-10);
        let mut term = r;
        let mut sum = r;
        for n in 2..=20 {
            term = term * r / Dd::from_f64(n as f64);
            sum = sum + term;
            if term.hi.abs() < 1e-36 {
                break;
            }
        }
        // (1 + s)^2 - 1 = 2s + s^2, applied 10 times
        for _ in 0..10 {
            sum = sum + sum + sum * sum;
        }
        (sum + Dd::ONE).scale_pow2(k as i32)
    }

    pub fn ln(self) -> Self {
        debug_assert!(self.hi > 0.0);
        let mut y = Dd::from_f64(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - Dd::ONE;
        }
        y
    }
}

impl From<f64> for Dd {
    fn from(x: f64) -> Self {
        Dd::from_f64(x)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, b: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, b: Dd) -> Dd {
        self + (-b)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, b: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, b.hi);
        let e = e + (self.hi * b.lo + self.lo * b.hi);
        let (hi, lo) = quick_two_sum(p, e);
        Dd { hi, lo }
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, b: Dd) -> Dd {
        let q1 = self.hi / b.hi;
        let r = self - b * Dd::from_f64(q1);
        let q2 = r.hi / b.hi;
        let r = r - b * Dd::from_f64(q2);
        let q3 = r.hi / b.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo } + Dd::from_f64(q3)
    }
}

impl std::iter::Sum for Dd {
    fn sum<I: Iterator<Item = Dd>>(iter: I) -> Dd {
        iter.fold(Dd::ZERO, |a, b| a + b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rel(a: Dd, hi: f64, lo: f64) -> f64 {
        let d = (a - Dd { hi, lo }).to_f64();
        (d / hi).abs()
    }

    // expected values split from 50-digit mpmath results
    #[test]
    fn exp_and_ln_reach_double_double_accuracy() {
        let e = Dd::ONE.exp();
        assert!(rel(e, std::f64::consts::E, 1.445_646_891_729_250_2e-16) < 1e-30);
        let l = Dd::from_f64(10.0).ln();
        assert!(rel(l, std::f64::consts::LN_10, -2.170_756_223_382_249_4e-16) < 1e-30);
        let s = Dd::from_f64(2.0).sqrt();
        assert!(rel(s, std::f64::consts::SQRT_2, -9.667_293_313_452_913e-17) < 1e-30);
    }

    #[test]
    fn exp_ln_roundtrip() {
        for x in [-40.0, -3.25, -1e-3, 0.0, 0.7, 12.5, 33.3] {
            let d = Dd::from_f64(x);
            let back = d.exp().ln();
            assert!((back - d).abs().to_f64() < 1e-29 * (1.0 + x.abs()), "x={x}");
        }
    }

    #[test]
    fn division_inverts_multiplication() {
        let a = Dd::from_f64(3.0) / Dd::from_f64(7.0);
        let back = a * Dd::from_f64(7.0);
        assert!((back - Dd::from_f64(3.0)).abs().to_f64() < 1e-31);
    }
}
