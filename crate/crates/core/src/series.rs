//! Truncated power series `c₀ + c₁(t−t₀) + … + c_K(t−t₀)^K`.
//!
//! All arithmetic is exact modulo `(t−t₀)^{K+1}` up to floating point
//! rounding. Binary operations require equal expansion points and produce
//! a result whose order is the minimum of the operand orders.

use std::fmt;

use num_complex::Complex64;

use crate::scalar::{Coeff, EvalError, Func, Scalar};

/// Default truncation order.
pub const DEFAULT_ORDER: usize = 10;
/// Largest supported truncation order.
pub const MAX_ORDER: usize = 30;

const POINT_TOL: f64 = 1e-12;

#[derive(Clone, PartialEq)]
pub struct Series<T: Coeff = f64> {
    coeffs: Vec<T>,
    t0: f64,
}

/// Shape of a series: order and expansion point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesCtx {
    pub order: usize,
    pub t0: f64,
}

pub type ComplexSeries = Series<Complex64>;

impl<T: Coeff> fmt::Debug for Series<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Series(t0={}, {:?})", self.t0, self.coeffs)
    }
}

impl<T: Coeff> Series<T> {
    /// Builds a series from its coefficients; the order is `coeffs.len() - 1`.
    ///
    /// Panics when `coeffs` is empty.
    pub fn new(coeffs: Vec<T>, t0: f64) -> Self {
        assert!(!coeffs.is_empty(), "a series needs at least the constant coefficient");
        Series { coeffs, t0 }
    }

    pub fn constant(c: T, order: usize, t0: f64) -> Self {
        let mut coeffs = vec![T::zero(); order + 1];
        coeffs[0] = c;
        Series { coeffs, t0 }
    }

    pub fn zero(order: usize, t0: f64) -> Self {
        Self::constant(T::zero(), order, t0)
    }

    /// The series of the independent variable `t` itself around `t0`.
    pub fn variable(order: usize, t0: f64) -> Self {
        let mut coeffs = vec![T::zero(); order + 1];
        coeffs[0] = T::from_f64(t0);
        if order >= 1 {
            coeffs[1] = T::one();
        }
        Series { coeffs, t0 }
    }

    pub fn ctx(&self) -> SeriesCtx {
        SeriesCtx { order: self.order(), t0: self.t0 }
    }

    pub fn order(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn coeffs(&self) -> &[T] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<T> {
        self.coeffs
    }

    pub fn coeff(&self, k: usize) -> T {
        self.coeffs.get(k).copied().unwrap_or_else(T::zero)
    }

    pub fn set_coeff(&mut self, k: usize, v: T) {
        self.coeffs[k] = v;
    }

    /// Truncates or zero-pads to the requested order.
    pub fn with_order(&self, order: usize) -> Self {
        let mut coeffs = self.coeffs.clone();
        coeffs.resize(order + 1, T::zero());
        Series { coeffs, t0: self.t0 }
    }

    fn check_point(&self, other: &Self) -> Result<(), EvalError> {
        if (self.t0 - other.t0).abs() > POINT_TOL * (1.0 + self.t0.abs()) {
            return Err(EvalError::ExpansionMismatch(self.t0, other.t0));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self, EvalError> {
        self.check_point(other)?;
        let n = self.order().min(other.order());
        let coeffs = (0..=n).map(|k| self.coeffs[k] + other.coeffs[k]).collect();
        Ok(Series { coeffs, t0: self.t0 })
    }

    pub fn sub(&self, other: &Self) -> Result<Self, EvalError> {
        self.check_point(other)?;
        let n = self.order().min(other.order());
        let coeffs = (0..=n).map(|k| self.coeffs[k] - other.coeffs[k]).collect();
        Ok(Series { coeffs, t0: self.t0 })
    }

    /// Cauchy product truncated at the smaller order.
    pub fn mul(&self, other: &Self) -> Result<Self, EvalError> {
        self.check_point(other)?;
        let n = self.order().min(other.order());
        let a = &self.coeffs;
        let b = &other.coeffs;
        let coeffs = (0..=n)
            .map(|k| (0..=k).fold(T::zero(), |acc, j| acc + a[j] * b[k - j]))
            .collect();
        Ok(Series { coeffs, t0: self.t0 })
    }

    pub fn scale(&self, s: T) -> Self {
        Series { coeffs: self.coeffs.iter().map(|&c| c * s).collect(), t0: self.t0 }
    }

    pub fn negate(&self) -> Self {
        Series { coeffs: self.coeffs.iter().map(|&c| -c).collect(), t0: self.t0 }
    }

    pub fn add_constant(&self, c: T) -> Self {
        let mut out = self.clone();
        out.coeffs[0] = out.coeffs[0] + c;
        out
    }

    /// `1/a`, defined when the constant term is nonzero.
    pub fn reciprocal(&self) -> Result<Self, EvalError> {
        let a = &self.coeffs;
        if a[0].modulus() == 0.0 {
            return Err(EvalError::ZeroConstantTerm);
        }
        let inv0 = T::one() / a[0];
        let mut b = vec![T::zero(); a.len()];
        b[0] = inv0;
        for k in 1..a.len() {
            let s = (1..=k).fold(T::zero(), |acc, j| acc + a[j] * b[k - j]);
            b[k] = -(s * inv0);
        }
        Ok(Series { coeffs: b, t0: self.t0 })
    }

    pub fn div(&self, other: &Self) -> Result<Self, EvalError> {
        self.mul(&other.reciprocal()?)
    }

    /// Derivative with respect to `t`; the order drops by one (order 0 stays 0).
    pub fn derivative(&self) -> Self {
        if self.order() == 0 {
            return Series::zero(0, self.t0);
        }
        let coeffs = (1..self.coeffs.len()).map(|k| self.coeffs[k] * k as f64).collect();
        Series { coeffs, t0: self.t0 }
    }

    /// Antiderivative vanishing at `t0`; the order grows by one.
    pub fn integral(&self) -> Self {
        let mut coeffs = Vec::with_capacity(self.coeffs.len() + 1);
        coeffs.push(T::zero());
        for (k, &c) in self.coeffs.iter().enumerate() {
            coeffs.push(c * (1.0 / (k + 1) as f64));
        }
        Series { coeffs, t0: self.t0 }
    }

    /// Multiplies by `(t−t0)^k`, keeping the order.
    pub fn shift_up(&self, k: usize) -> Self {
        let n = self.coeffs.len();
        let mut coeffs = vec![T::zero(); n];
        if k < n {
            coeffs[k..n].copy_from_slice(&self.coeffs[..n - k]);
        }
        Series { coeffs, t0: self.t0 }
    }

    /// Divides by `(t−t0)^k`, dropping the first `k` coefficients. The order
    /// drops by `k`. Returns the largest modulus among the dropped
    /// coefficients so callers can decide whether the pole was genuine.
    pub fn shift_down(&self, k: usize) -> (Self, f64) {
        assert!(k <= self.order(), "cannot shift a series of order {} down by {k}", self.order());
        let dropped = self.coeffs[..k].iter().map(|c| c.modulus()).fold(0.0, f64::max);
        (Series { coeffs: self.coeffs[k..].to_vec(), t0: self.t0 }, dropped)
    }

    /// Taylor coefficients of `outer ∘ inner`, where `inner(s0)` equals the
    /// expansion point of `outer`. The result lives at the expansion point of
    /// `inner`.
    pub fn compose(outer: &Self, inner: &Series<T>) -> Result<Self, EvalError> {
        let offset = inner.coeffs[0] - T::from_f64(outer.t0);
        if offset.modulus() > POINT_TOL * (1.0 + outer.t0.abs()) {
            return Err(EvalError::ExpansionMismatch(outer.t0, inner.coeffs[0].modulus()));
        }
        let n = outer.order().min(inner.order());
        let mut delta = inner.with_order(n);
        delta.coeffs[0] = T::zero();
        let mut acc = Series::constant(outer.coeffs[n], n, inner.t0);
        for k in (0..n).rev() {
            acc = acc.mul(&delta)?;
            acc.coeffs[0] = acc.coeffs[0] + outer.coeffs[k];
        }
        Ok(acc)
    }

    /// Horner evaluation at `t0 + dt` plus the last-retained-term heuristic
    /// `|c_K|·|dt|^K`. The heuristic is not a rigorous bound.
    pub fn eval_truncated(&self, dt: T) -> (T, f64) {
        let value = self.eval(dt);
        let k = self.order();
        let rem = self.coeffs[k].modulus() * dt.modulus().powi(k as i32);
        (value, rem)
    }

    pub fn eval(&self, dt: T) -> T {
        self.coeffs.iter().rev().fold(T::zero(), |acc, &c| acc * dt + c)
    }

    /// Integer power by repeated squaring.
    pub fn powi(&self, n: i64) -> Result<Self, EvalError> {
        let mut base = if n < 0 { self.reciprocal()? } else { self.clone() };
        let mut e = n.unsigned_abs();
        let mut acc = Series::constant(T::one(), self.order(), self.t0);
        while e > 0 {
            if e & 1 == 1 {
                acc = acc.mul(&base)?;
            }
            e >>= 1;
            if e > 0 {
                base = base.mul(&base)?;
            }
        }
        Ok(acc)
    }

    /// Elementary function applied through the standard Taylor-mode recurrences.
    pub fn apply(&self, f: Func) -> Result<Self, EvalError> {
        let a = &self.coeffs;
        let n = a.len();
        let a0 = a[0];
        let mut b = vec![T::zero(); n];
        match f {
            Func::Exp => {
                b[0] = T::apply(Func::Exp, a0)?;
                for k in 1..n {
                    let s = (1..=k).fold(T::zero(), |acc, j| acc + a[j] * b[k - j] * j as f64);
                    b[k] = s * (1.0 / k as f64);
                }
            }
            Func::Log => {
                if a0.modulus() == 0.0 {
                    return Err(EvalError::NonAnalytic("log at zero".into()));
                }
                b[0] = T::apply(Func::Log, a0)?;
                for k in 1..n {
                    let s = (1..k).fold(T::zero(), |acc, j| acc + b[j] * a[k - j] * j as f64);
                    b[k] = (a[k] - s * (1.0 / k as f64)) / a0;
                }
            }
            Func::Sqrt => {
                if a0.modulus() == 0.0 {
                    return Err(EvalError::NonAnalytic("sqrt at zero".into()));
                }
                b[0] = T::apply(Func::Sqrt, a0)?;
                let two_b0 = b[0] * 2.0;
                for k in 1..n {
                    let s = (1..k).fold(T::zero(), |acc, j| acc + b[j] * b[k - j]);
                    b[k] = (a[k] - s) / two_b0;
                }
            }
            Func::Sin | Func::Cos => {
                let (s, c) = sin_cos(a, false)?;
                b = if f == Func::Sin { s } else { c };
            }
            Func::Sinh | Func::Cosh => {
                let (s, c) = sin_cos(a, true)?;
                b = if f == Func::Sinh { s } else { c };
            }
            Func::Tan | Func::Tanh => {
                let hyperbolic = f == Func::Tanh;
                if !hyperbolic && T::apply(Func::Cos, a0)?.modulus() < 1e-300 {
                    return Err(EvalError::NonAnalytic("tan at a pole".into()));
                }
                if hyperbolic && T::apply(Func::Cosh, a0)?.modulus() < 1e-300 {
                    return Err(EvalError::NonAnalytic("tanh at a pole".into()));
                }
                b[0] = T::apply(f, a0)?;
                // w = 1 ± b², b' = w a'
                let sign = if hyperbolic { -1.0 } else { 1.0 };
                let mut w = vec![T::zero(); n];
                w[0] = T::one() + b[0] * b[0] * sign;
                for k in 1..n {
                    let s = (1..=k).fold(T::zero(), |acc, j| acc + a[j] * w[k - j] * j as f64);
                    b[k] = s * (1.0 / k as f64);
                    let sq = (0..=k).fold(T::zero(), |acc, j| acc + b[j] * b[k - j]);
                    w[k] = sq * sign;
                }
            }
        }
        if b.iter().any(|c| !c.modulus().is_finite()) {
            return Err(EvalError::NonFinite);
        }
        Ok(Series { coeffs: b, t0: self.t0 })
    }
}

/// Joint recurrence for (sin, cos) or (sinh, cosh).
fn sin_cos<T: Coeff>(a: &[T], hyperbolic: bool) -> Result<(Vec<T>, Vec<T>), EvalError> {
    let n = a.len();
    let mut s = vec![T::zero(); n];
    let mut c = vec![T::zero(); n];
    if hyperbolic {
        s[0] = T::apply(Func::Sinh, a[0])?;
        c[0] = T::apply(Func::Cosh, a[0])?;
    } else {
        s[0] = T::apply(Func::Sin, a[0])?;
        c[0] = T::apply(Func::Cos, a[0])?;
    }
    let csign = if hyperbolic { 1.0 } else { -1.0 };
    for k in 1..n {
        let inv = 1.0 / k as f64;
        let mut ss = T::zero();
        let mut cc = T::zero();
        for j in 1..=k {
            ss = ss + a[j] * c[k - j] * j as f64;
            cc = cc + a[j] * s[k - j] * j as f64;
        }
        s[k] = ss * inv;
        c[k] = cc * (inv * csign);
    }
    Ok((s, c))
}

impl<T: Coeff> Scalar for Series<T> {
    type Ctx = SeriesCtx;

    fn constant(ctx: &SeriesCtx, c: f64) -> Self {
        Series::constant(T::from_f64(c), ctx.order, ctx.t0)
    }
    fn add(&self, o: &Self) -> Result<Self, EvalError> {
        Series::add(self, o)
    }
    fn sub(&self, o: &Self) -> Result<Self, EvalError> {
        Series::sub(self, o)
    }
    fn mul(&self, o: &Self) -> Result<Self, EvalError> {
        Series::mul(self, o)
    }
    fn div(&self, o: &Self) -> Result<Self, EvalError> {
        if o.coeffs[0].modulus() == 0.0 {
            return Err(EvalError::NonAnalytic("division by a series vanishing at the expansion point".into()));
        }
        Series::div(self, o)
    }
    fn neg(&self) -> Self {
        self.negate()
    }
    fn powi(&self, n: i64) -> Result<Self, EvalError> {
        if n < 0 && self.coeffs[0].modulus() == 0.0 {
            return Err(EvalError::NonAnalytic("negative power of a series vanishing at the expansion point".into()));
        }
        Series::powi(self, n)
    }
    fn func(&self, f: Func) -> Result<Self, EvalError> {
        self.apply(f)
    }
}
