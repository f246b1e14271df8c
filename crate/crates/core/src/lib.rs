//! Regular-singular ODE systems.
//!
//! * [`expr`]: the analytic expression language used to describe
//!   coefficient functions and metric families.
//! * [`series`] / [`jet`]: truncated univariate and multivariate Taylor
//!   arithmetic.
//! * [`ode`]: adaptive Dormand–Prince 5(4) integration with dense output.
//! * [`linear_rs`]: linear systems `dY/ds + A(s)Y/s = h(s)`, their fundamental
//!   solutions on the logarithmic cover and their monodromy.
//! * [`singular_ivp`]: nonlinear singular initial value problems
//!   `ẏ = M₋₁(y)/t + M(t, y)` solved by series bootstrap plus continuation.
//! * [`geometry`]: reduction of the harmonic and biharmonic map equations of
//!   cohomogeneity-one manifolds to such singular problems.

pub mod expr;
pub mod geometry;
pub mod jet;
pub mod linalg;
pub mod linear_rs;
pub mod ode;
pub mod scalar;
pub mod series;
pub mod singular_ivp;

pub use expr::{parse, parse_with, Expr, ParseError};
pub use scalar::{EvalError, Func, Scalar};
pub use series::Series;
