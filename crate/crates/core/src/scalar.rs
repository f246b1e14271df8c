//! Numeric abstractions shared by the expression evaluator and the series types.
//!
//! Every value the evaluator can produce (plain reals, complex numbers,
//! truncated power series, multivariate jets) implements [`Scalar`]. The
//! elementary function set is fixed and enumerated by [`Func`].

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use num_complex::Complex64;
use thiserror::Error;

/// Elementary functions understood by the expression language.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Func {
    Sin,
    Cos,
    Tan,
    Exp,
    Log,
    Sqrt,
    Sinh,
    Cosh,
    Tanh,
}

impl Func {
    pub const ALL: [Func; 9] = [
        Func::Sin,
        Func::Cos,
        Func::Tan,
        Func::Exp,
        Func::Log,
        Func::Sqrt,
        Func::Sinh,
        Func::Cosh,
        Func::Tanh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Func::Sin => "sin",
            Func::Cos => "cos",
            Func::Tan => "tan",
            Func::Exp => "exp",
            Func::Log => "log",
            Func::Sqrt => "sqrt",
            Func::Sinh => "sinh",
            Func::Cosh => "cosh",
            Func::Tanh => "tanh",
        }
    }

    pub fn from_name(name: &str) -> Option<Func> {
        Func::ALL.iter().copied().find(|f| f.name() == name)
    }
}

/// Failure while evaluating an expression or a series operation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("division by zero")]
    DivisionByZero,
    #[error("{func} is undefined at {at}")]
    Domain { func: &'static str, at: String },
    #[error("not analytic at the expansion point: {0}")]
    NonAnalytic(String),
    #[error("series expansion points differ ({0} vs {1})")]
    ExpansionMismatch(f64, f64),
    #[error("series has zero constant term")]
    ZeroConstantTerm,
    #[error("non-finite result")]
    NonFinite,
    #[error("variable index {0} is not bound")]
    Unbound(usize),
    #[error("{0}")]
    External(String),
}

/// Coefficient field of a power series: `f64` or `Complex64`.
pub trait Coeff:
    Copy
    + Debug
    + PartialEq
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Mul<f64, Output = Self>
{
    fn from_f64(x: f64) -> Self;
    fn modulus(self) -> f64;
    /// Point evaluation of an elementary function, principal branch.
    fn apply(f: Func, x: Self) -> Result<Self, EvalError>;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
}

impl Coeff for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }

    fn modulus(self) -> f64 {
        self.abs()
    }

    fn apply(f: Func, x: f64) -> Result<f64, EvalError> {
        let v = match f {
            Func::Sin => x.sin(),
            Func::Cos => x.cos(),
            Func::Tan => x.tan(),
            Func::Exp => x.exp(),
            Func::Log => {
                if x <= 0.0 {
                    return Err(EvalError::Domain { func: "log", at: format!("{x}") });
                }
                x.ln()
            }
            Func::Sqrt => {
                if x < 0.0 {
                    return Err(EvalError::Domain { func: "sqrt", at: format!("{x}") });
                }
                x.sqrt()
            }
            Func::Sinh => x.sinh(),
            Func::Cosh => x.cosh(),
            Func::Tanh => x.tanh(),
        };
        if v.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite)
        }
    }
}

impl Coeff for Complex64 {
    fn from_f64(x: f64) -> Self {
        Complex64::new(x, 0.0)
    }

    fn modulus(self) -> f64 {
        self.norm()
    }

    fn apply(f: Func, z: Complex64) -> Result<Complex64, EvalError> {
        let v = match f {
            Func::Sin => z.sin(),
            Func::Cos => z.cos(),
            Func::Tan => {
                if z.cos() == Complex64::new(0.0, 0.0) {
                    return Err(EvalError::Domain { func: "tan", at: format!("{z}") });
                }
                z.tan()
            }
            Func::Exp => z.exp(),
            Func::Log => {
                if z == Complex64::new(0.0, 0.0) {
                    return Err(EvalError::Domain { func: "log", at: format!("{z}") });
                }
                z.ln()
            }
            Func::Sqrt => z.sqrt(),
            Func::Sinh => z.sinh(),
            Func::Cosh => z.cosh(),
            Func::Tanh => z.tanh(),
        };
        if v.re.is_finite() && v.im.is_finite() {
            Ok(v)
        } else {
            Err(EvalError::NonFinite)
        }
    }
}

/// Values the expression evaluator can compute with.
///
/// `Ctx` carries whatever shape information is needed to build a constant of
/// the right kind (series order and expansion point, jet space, ...).
pub trait Scalar: Clone + Sized {
    type Ctx: Clone;

    fn constant(ctx: &Self::Ctx, c: f64) -> Self;
    fn add(&self, other: &Self) -> Result<Self, EvalError>;
    fn sub(&self, other: &Self) -> Result<Self, EvalError>;
    fn mul(&self, other: &Self) -> Result<Self, EvalError>;
    fn div(&self, other: &Self) -> Result<Self, EvalError>;
    fn neg(&self) -> Self;
    fn powi(&self, n: i64) -> Result<Self, EvalError>;
    fn func(&self, f: Func) -> Result<Self, EvalError>;
}

fn checked_div<T: Coeff>(a: T, b: T) -> Result<T, EvalError> {
    if b.modulus() == 0.0 {
        return Err(EvalError::DivisionByZero);
    }
    let v = a / b;
    if v.modulus().is_finite() {
        Ok(v)
    } else {
        Err(EvalError::NonFinite)
    }
}

fn checked_powi<T: Coeff>(x: T, n: i64) -> Result<T, EvalError> {
    if n < 0 && x.modulus() == 0.0 {
        return Err(EvalError::DivisionByZero);
    }
    let mut base = if n < 0 { T::one() / x } else { x };
    let mut e = n.unsigned_abs();
    let mut acc = T::one();
    while e > 0 {
        if e & 1 == 1 {
            acc = acc * base;
        }
        base = base * base;
        e >>= 1;
    }
    Ok(acc)
}

macro_rules! point_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            type Ctx = ();

            fn constant(_: &(), c: f64) -> Self {
                <$t as Coeff>::from_f64(c)
            }
            fn add(&self, o: &Self) -> Result<Self, EvalError> {
                Ok(*self + *o)
            }
            fn sub(&self, o: &Self) -> Result<Self, EvalError> {
                Ok(*self - *o)
            }
            fn mul(&self, o: &Self) -> Result<Self, EvalError> {
                Ok(*self * *o)
            }
            fn div(&self, o: &Self) -> Result<Self, EvalError> {
                checked_div(*self, *o)
            }
            fn neg(&self) -> Self {
                -*self
            }
            fn powi(&self, n: i64) -> Result<Self, EvalError> {
                checked_powi(*self, n)
            }
            fn func(&self, f: Func) -> Result<Self, EvalError> {
                <$t as Coeff>::apply(f, *self)
            }
        }
    };
}

point_scalar!(f64);
point_scalar!(Complex64);
