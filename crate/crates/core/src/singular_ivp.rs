//! Nonlinear singular initial value problems
//!
//! ```text
//! ẏ = M₋₁(y)/t + M(t, y),   y(0) = y₀,
//! ```
//!
//! solved on `(0, T]` by a Taylor bootstrap at `t = 0` followed by adaptive
//! continuation. Also contains the toolkit for systems written as
//! `0 = Y' + f(ξ, Y)/ξ`.

use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

use crate::expr::Expr;
use crate::jet::{Jet, JetSpace};
use crate::linalg;
use crate::ode::{self, DenseSolution, OdeError, Options};
use crate::scalar::{EvalError, Scalar};
use crate::series::{Series, SeriesCtx};

/// Admissibility residual threshold.
pub const EPS_ADM: f64 = 1e-10;
/// Relative threshold on `σ_min(hI − J)`.
pub const EPS_INV: f64 = 1e-8;
/// Smallest handoff time accepted.
pub const T_FLOOR: f64 = 1e-8;
/// Interpolant defect bound of the continuation, in units of `tol`.
pub const DEFECT_FACTOR: f64 = 10.0;
pub const DEFAULT_ORDER: usize = 10;
/// Order cap for problems without Taylor-mode support.
pub const BLACK_BOX_MAX_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SingularError {
    #[error("evaluation failed: {0}")]
    Eval(#[from] EvalError),
    #[error("problem is not admissible (residual {:.3e}, offending h = {:?})", .0.residual_norm, .0.offending_h)]
    Inadmissible(Box<AdmissibilityReport>),
    #[error("bootstrap linear system is singular at order {0}")]
    SingularSolve(usize),
    #[error("no handoff time above {T_FLOOR:e} meets tol = {tol:e} with order {order}; raise the order")]
    NoHandoff { tol: f64, order: usize },
    #[error(transparent)]
    Integration(#[from] OdeError),
    #[error("{0}")]
    Precondition(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Right-hand side `ẏ = M₋₁(y)/t + M(t, y)`.
pub trait SingularSystem: Send + Sync {
    fn dim(&self) -> usize;

    /// `M₋₁(y)`.
    fn singular(&self, y: &[f64]) -> Result<Vec<f64>, EvalError>;

    /// `M(t, y)` for `t > 0`.
    fn regular(&self, t: f64, y: &[f64]) -> Result<Vec<f64>, EvalError>;

    /// Series of `t·ẏ = M₋₁(y(t)) + t·M(t, y(t))` for a given series `y(t)`
    /// at `t = 0`, to the order of `y`. `None` when Taylor mode is unsupported.
    fn scaled_rhs_series(&self, _y: &[Series]) -> Option<Result<Vec<Series>, EvalError>> {
        None
    }

    /// `∂M₋₁/∂y`; central differences unless overridden.
    fn singular_jacobian(&self, y: &[f64]) -> Result<DMatrix<f64>, EvalError> {
        central_jacobian(|y| self.singular(y), y)
    }

    fn supports_series(&self) -> bool {
        false
    }

    /// `ẏ` at `t > 0`.
    fn rhs(&self, t: f64, y: &[f64]) -> Result<Vec<f64>, EvalError> {
        let s = self.singular(y)?;
        let r = self.regular(t, y)?;
        Ok(s.iter().zip(&r).map(|(a, b)| a / t + b).collect())
    }
}

fn central_jacobian(
    f: impl Fn(&[f64]) -> Result<Vec<f64>, EvalError>,
    y: &[f64],
) -> Result<DMatrix<f64>, EvalError> {
    let k = y.len();
    let mut jac = DMatrix::zeros(0, k);
    let mut yp = y.to_vec();
    for j in 0..k {
        let h = 1e-6 * y[j].abs().max(1.0);
        yp[j] = y[j] + h;
        let fp = f(&yp)?;
        yp[j] = y[j] - h;
        let fm = f(&yp)?;
        yp[j] = y[j];
        if j == 0 {
            jac = DMatrix::zeros(fp.len(), k);
        }
        for i in 0..fp.len() {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    Ok(jac)
}

fn check_finite(v: Vec<f64>) -> Result<Vec<f64>, EvalError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(EvalError::NonFinite)
    }
}

/// Variable names `t, y1, …, yk` used by expression-backed maps.
pub fn state_var_names(k: usize) -> Vec<String> {
    std::iter::once("t".to_string()).chain((1..=k).map(|i| format!("y{i}"))).collect()
}

/// Expression-backed system; expressions use slot 0 for `t` and slots
/// `1..=k` for the state.
#[derive(Debug, Clone)]
pub struct ExprSystem {
    singular: Vec<Expr>,
    regular: Vec<Expr>,
}

impl ExprSystem {
    pub fn new(singular: Vec<Expr>, regular: Vec<Expr>) -> Result<Self, SingularError> {
        if singular.len() != regular.len() || singular.is_empty() {
            return Err(SingularError::Shape(format!(
                "M_-1 has {} components and M has {}",
                singular.len(),
                regular.len()
            )));
        }
        if let Some(i) = singular.iter().position(|e| e.uses_var(0)) {
            return Err(SingularError::Precondition(format!("M_-1 component {} depends on t", i + 1)));
        }
        Ok(ExprSystem { singular, regular })
    }

    /// Parses component strings over `t, y1, …, yk`.
    pub fn parse(singular: &[&str], regular: &[&str]) -> Result<Self, crate::expr::ParseError> {
        let names = state_var_names(singular.len());
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let p = |v: &[&str]| v.iter().map(|s| crate::expr::parse_with(s, &names)).collect::<Result<Vec<_>, _>>();
        let (s, r) = (p(singular)?, p(regular)?);
        ExprSystem::new(s, r).map_err(|e| crate::expr::ParseError {
            line: 1,
            column: 1,
            message: e.to_string(),
            expected: Vec::new(),
        })
    }

    fn eval_all(exprs: &[Expr], t: f64, y: &[f64]) -> Result<Vec<f64>, EvalError> {
        let mut vars = Vec::with_capacity(y.len() + 1);
        vars.push(t);
        vars.extend_from_slice(y);
        check_finite(exprs.iter().map(|e| e.eval_with(&vars, &())).collect::<Result<_, _>>()?)
    }
}

impl SingularSystem for ExprSystem {
    fn dim(&self) -> usize {
        self.singular.len()
    }

    fn singular(&self, y: &[f64]) -> Result<Vec<f64>, EvalError> {
        ExprSystem::eval_all(&self.singular, 0.0, y)
    }

    fn regular(&self, t: f64, y: &[f64]) -> Result<Vec<f64>, EvalError> {
        ExprSystem::eval_all(&self.regular, t, y)
    }

    fn scaled_rhs_series(&self, y: &[Series]) -> Option<Result<Vec<Series>, EvalError>> {
        let order = y.first().map_or(0, Series::order);
        let ctx = SeriesCtx { order, t0: 0.0 };
        let t = Series::variable(order, 0.0);
        let mut vars = vec![t.clone()];
        vars.extend_from_slice(y);
        Some(
            self.singular
                .iter()
                .zip(&self.regular)
                .map(|(s, r)| s.eval_with(&vars, &ctx)?.add(&t.mul(&r.eval_with(&vars, &ctx)?)?))
                .collect(),
        )
    }

    fn singular_jacobian(&self, y: &[f64]) -> Result<DMatrix<f64>, EvalError> {
        let k = y.len();
        let space = JetSpace::new(k, 1);
        let mut vars = vec![Jet::constant(&space, 0.0)];
        vars.extend((0..k).map(|i| Jet::variable(&space, i, y[i])));
        let mut jac = DMatrix::zeros(self.singular.len(), k);
        let mut e = vec![0u32; k];
        for (i, s) in self.singular.iter().enumerate() {
            let j = s.eval_with(&vars, &space)?;
            for c in 0..k {
                e[c] = 1;
                jac[(i, c)] = j.coeff(&e);
                e[c] = 0;
            }
        }
        Ok(jac)
    }

    fn supports_series(&self) -> bool {
        true
    }
}

type SingularFn = dyn Fn(&[f64]) -> Result<Vec<f64>, String> + Send + Sync;
type RegularFn = dyn Fn(f64, &[f64]) -> Result<Vec<f64>, String> + Send + Sync;

/// System given by opaque evaluators; Jacobians by central differences and
/// a low-order sampled bootstrap.
pub struct BlackBoxSystem {
    dim: usize,
    singular: Box<SingularFn>,
    regular: Box<RegularFn>,
}

impl BlackBoxSystem {
    pub fn new(
        dim: usize,
        singular: impl Fn(&[f64]) -> Result<Vec<f64>, String> + Send + Sync + 'static,
        regular: impl Fn(f64, &[f64]) -> Result<Vec<f64>, String> + Send + Sync + 'static,
    ) -> Self {
        BlackBoxSystem { dim, singular: Box::new(singular), regular: Box::new(regular) }
    }
}

impl SingularSystem for BlackBoxSystem {
    fn dim(&self) -> usize {
        self.dim
    }
    fn singular(&self, y: &[f64]) -> Result<Vec<f64>, EvalError> {
        check_finite((self.singular)(y).map_err(EvalError::External)?)
    }
    fn regular(&self, t: f64, y: &[f64]) -> Result<Vec<f64>, EvalError> {
        check_finite((self.regular)(t, y).map_err(EvalError::External)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmissibilityReport {
    /// `‖M₋₁(y₀)‖₂`.
    pub residual_norm: f64,
    pub jacobian: DMatrix<f64>,
    /// `h ≤ K` with `σ_min(hI − J) < ε_inv·(h + ‖J‖)`.
    pub offending_h: Vec<usize>,
    /// Offending `h > K`, checked explicitly only when `‖J‖ ≥ K`.
    pub offending_tail: Vec<usize>,
    pub order: usize,
    pub pass: bool,
}

/// `M₋₁(y₀) = 0` and invertibility of `hI − J` for `h = 1..K` (plus the tail
/// `h > K` when `‖J‖` does not bound it away).
pub fn check_admissibility(
    sys: &dyn SingularSystem,
    y0: &[f64],
    order: usize,
) -> Result<AdmissibilityReport, SingularError> {
    if y0.len() != sys.dim() {
        return Err(SingularError::Shape(format!("y0 has length {} but the system has dimension {}", y0.len(), sys.dim())));
    }
    let m = sys.singular(y0)?;
    let residual_norm = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let jacobian = sys.singular_jacobian(y0)?;
    let k = y0.len();
    let jn = linalg::spectral_norm(&jacobian);
    let offending = |h: usize| {
        let a = DMatrix::identity(k, k) * h as f64 - &jacobian;
        linalg::sigma_min(&a) < EPS_INV * (h as f64 + jn)
    };
    let offending_h: Vec<usize> = (1..=order).filter(|&h| offending(h)).collect();
    let offending_tail: Vec<usize> = if jn >= order as f64 {
        (order + 1..=(jn.ceil() as usize + 1)).filter(|&h| offending(h)).collect()
    } else {
        Vec::new()
    };
    let pass = residual_norm < EPS_ADM && offending_h.is_empty() && offending_tail.is_empty();
    Ok(AdmissibilityReport { residual_norm, jacobian, offending_h, offending_tail, order, pass })
}

/// Bootstrap coefficients, one series per component, holding `y₀..y_K`.
#[derive(Debug, Clone)]
pub struct Bootstrap {
    pub series: Vec<Series>,
    pub warnings: Vec<String>,
}

impl Bootstrap {
    pub fn order(&self) -> usize {
        self.series.first().map_or(0, Series::order)
    }

    /// The vector coefficient `y_h`.
    pub fn coeff(&self, h: usize) -> Vec<f64> {
        self.series.iter().map(|s| s.coeff(h)).collect()
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        self.series.iter().map(|s| s.eval(t)).collect()
    }

    pub fn eval_derivative(&self, t: f64) -> Vec<f64> {
        self.series.iter().map(|s| s.derivative().eval(t)).collect()
    }
}

fn sampled_coefficient(
    sys: &dyn SingularSystem,
    partial: &[Series],
    h: usize,
    t_end: f64,
) -> Result<Vec<f64>, EvalError> {
    const NODES: usize = 7;
    let delta = 0.02f64.min(t_end / (2.0 * NODES as f64));
    let k = partial.len();
    let mut values = DMatrix::zeros(NODES, k);
    for i in 0..NODES {
        let t = i as f64 * delta;
        let y: Vec<f64> = partial.iter().map(|s| s.eval(t)).collect();
        let v = if i == 0 {
            sys.singular(&y)?
        } else {
            let s = sys.singular(&y)?;
            let r = sys.regular(t, &y)?;
            s.iter().zip(&r).map(|(a, b)| a + t * b).collect()
        };
        for c in 0..k {
            values[(i, c)] = v[c];
        }
    }
    let vander = DMatrix::from_fn(NODES, NODES, |i, j| (i as f64).powi(j as i32));
    let coeffs = vander.lu().solve(&values).ok_or(EvalError::NonFinite)?;
    Ok((0..k).map(|c| coeffs[(h, c)] / delta.powi(h as i32)).collect())
}

/// Taylor coefficients of the smooth solution: for each `h`,
/// `(hI − J)·y_h = b_h` where `b_h` is the order-`h` coefficient of
/// `M₋₁(y) + t·M(t, y)` evaluated on the series with `y_h = 0`.
pub fn bootstrap_series(
    sys: &dyn SingularSystem,
    y0: &[f64],
    order: usize,
    t_end: f64,
) -> Result<Bootstrap, SingularError> {
    let k = y0.len();
    let jac = sys.singular_jacobian(y0)?;
    let mut warnings = Vec::new();
    let order = if sys.supports_series() || order <= BLACK_BOX_MAX_ORDER {
        order
    } else {
        warnings.push(format!(
            "order lowered from {order} to {BLACK_BOX_MAX_ORDER}: the system has no Taylor-mode support"
        ));
        BLACK_BOX_MAX_ORDER
    };
    let mut series: Vec<Series> = y0.iter().map(|&v| Series::constant(v, order, 0.0)).collect();
    for h in 1..=order {
        let b: Vec<f64> = if sys.supports_series() {
            let partial: Vec<Series> = series.iter().map(|s| s.with_order(h)).collect();
            let f = sys.scaled_rhs_series(&partial).expect("series support")?;
            f.iter().map(|s| s.coeff(h)).collect()
        } else {
            sampled_coefficient(sys, &series, h, t_end)?
        };
        let a = DMatrix::identity(k, k) * h as f64 - &jac;
        let yh = a.lu().solve(&DVector::from_vec(b)).ok_or(SingularError::SingularSolve(h))?;
        if yh.iter().any(|v| !v.is_finite()) {
            return Err(SingularError::SingularSolve(h));
        }
        for (s, v) in series.iter_mut().zip(yh.iter()) {
            s.set_coeff(h, *v);
        }
    }
    let last: f64 = series.iter().map(|s| s.coeff(order).abs()).fold(0.0, f64::max);
    if order > 0 && last.powf(1.0 / order as f64) > 1.0 / T_FLOOR {
        warnings.push(format!("series coefficients grow fast: |y_{order}| = {last:e}"));
    }
    Ok(Bootstrap { series, warnings })
}

/// Largest `t₀ ≤ min(t_max, T/2)` with `max(‖y_{K−1}‖, ‖y_K‖)·t₀^K < tol`.
///
/// The remainder estimate is a heuristic, not a bound. Using the last two
/// coefficients keeps series with vanishing odd or even terms honest.
pub fn choose_handoff(
    coeffs: &[Series],
    tol: f64,
    t_max: f64,
    t_end: f64,
) -> Result<f64, SingularError> {
    let order = coeffs.first().map_or(0, Series::order);
    let cap = t_max.min(t_end / 2.0);
    let norm = |h: usize| coeffs.iter().map(|s| s.coeff(h).abs()).fold(0.0, f64::max);
    let c = if order == 0 { 0.0 } else { norm(order).max(norm(order - 1)) };
    let t0 = if c == 0.0 { cap } else { cap.min((tol / c).powf(1.0 / order as f64)) };
    if t0 < T_FLOOR || !t0.is_finite() {
        return Err(SingularError::NoHandoff { tol, order });
    }
    Ok(t0)
}

/// Adaptive continuation on `[t₀, T]` from `y(t₀)` with local error and
/// interpolant defect control.
pub fn integrate(
    sys: &dyn SingularSystem,
    t0: f64,
    y_t0: &[f64],
    t_end: f64,
    tol: f64,
) -> Result<DenseSolution<f64>, SingularError> {
    if t0 <= 0.0 {
        return Err(SingularError::Precondition(format!("integration must start at t > 0, got {t0}")));
    }
    Ok(ode::integrate(
        |t, y: &[f64], dy: &mut [f64]| {
            let v = sys.rhs(t, y).map_err(|e| e.to_string())?;
            dy.copy_from_slice(&v);
            Ok(())
        },
        t0,
        y_t0,
        t_end,
        &Options { defect_tol: Some(DEFECT_FACTOR * tol), ..Options::with_tol(tol) },
    )?)
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub order: usize,
    pub tol: f64,
    pub t_max: f64,
    /// Overrides the handoff heuristic.
    pub handoff: Option<f64>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { order: DEFAULT_ORDER, tol: 1e-10, t_max: f64::INFINITY, handoff: None }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub evaluations: usize,
    /// Largest ODE residual over step midpoints of the continuation.
    pub max_midpoint_residual: f64,
    pub warnings: Vec<String>,
}

/// Smooth solution on `(0, T]`: series up to the handoff time, interpolant after.
#[derive(Clone)]
pub struct Trajectory {
    system: Arc<dyn SingularSystem>,
    pub bootstrap: Bootstrap,
    pub handoff: f64,
    pub y_handoff: Vec<f64>,
    pub dense: DenseSolution<f64>,
    pub t_end: f64,
    pub report: AdmissibilityReport,
    pub diagnostics: Diagnostics,
}

impl std::fmt::Debug for Trajectory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trajectory")
            .field("handoff", &self.handoff)
            .field("t_end", &self.t_end)
            .field("diagnostics", &self.diagnostics)
            .finish_non_exhaustive()
    }
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.y_handoff.len()
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        if t <= self.handoff {
            self.bootstrap.eval(t)
        } else {
            self.dense.eval(t)
        }
    }

    pub fn eval_derivative(&self, t: f64) -> Vec<f64> {
        if t <= self.handoff {
            self.bootstrap.eval_derivative(t)
        } else {
            self.dense.eval_derivative(t)
        }
    }

    /// Step boundaries of the continuation, starting at the handoff time.
    pub fn mesh(&self) -> Vec<f64> {
        self.dense.mesh()
    }

    pub fn system(&self) -> &Arc<dyn SingularSystem> {
        &self.system
    }

    /// `‖ẏ − M₋₁(y)/t − M(t, y)‖∞` of the interpolant at `t > 0`.
    pub fn residual(&self, t: f64) -> Result<f64, EvalError> {
        let y = self.eval(t);
        let dy = self.eval_derivative(t);
        let f = self.system.rhs(t, &y)?;
        Ok(dy.iter().zip(&f).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    /// `t_j = T·j/n` for `j = 1..=n`.
    pub fn uniform_grid(&self, n: usize) -> Vec<f64> {
        (1..=n).map(|j| self.t_end * j as f64 / n as f64).collect()
    }
}

/// `ẏ = M₋₁(y)/t + M(t, y)`, `y(0) = y₀` on `(0, T]`.
#[derive(Clone)]
pub struct SingularIVP {
    pub system: Arc<dyn SingularSystem>,
    pub y0: Vec<f64>,
    pub t_end: f64,
}

impl SingularIVP {
    pub fn new(system: Arc<dyn SingularSystem>, y0: Vec<f64>, t_end: f64) -> Result<Self, SingularError> {
        if y0.len() != system.dim() {
            return Err(SingularError::Shape(format!(
                "y0 has length {} but the system has dimension {}",
                y0.len(),
                system.dim()
            )));
        }
        if !(t_end > 0.0 && t_end.is_finite()) {
            return Err(SingularError::Precondition(format!("end time must be positive, got {t_end}")));
        }
        Ok(SingularIVP { system, y0, t_end })
    }

    pub fn check_admissibility(&self, order: usize) -> Result<AdmissibilityReport, SingularError> {
        check_admissibility(self.system.as_ref(), &self.y0, order)
    }

    pub fn bootstrap_series(&self, order: usize) -> Result<Bootstrap, SingularError> {
        bootstrap_series(self.system.as_ref(), &self.y0, order, self.t_end)
    }

    pub fn solve(&self, opts: &SolveOptions) -> Result<Trajectory, SingularError> {
        let report = self.check_admissibility(opts.order)?;
        if !report.pass {
            return Err(SingularError::Inadmissible(Box::new(report)));
        }
        let bootstrap = self.bootstrap_series(opts.order)?;
        let handoff = match opts.handoff {
            Some(t0) if t0 > 0.0 && t0 < self.t_end => t0,
            Some(t0) => return Err(SingularError::Precondition(format!("forced handoff {t0} outside (0, T)"))),
            None => choose_handoff(&bootstrap.series, opts.tol, opts.t_max, self.t_end)?,
        };
        let y_handoff = bootstrap.eval(handoff);
        let dense = integrate(self.system.as_ref(), handoff, &y_handoff, self.t_end, opts.tol)?;
        let mut diagnostics = Diagnostics {
            accepted_steps: dense.accepted,
            rejected_steps: dense.rejected,
            evaluations: dense.evaluations,
            max_midpoint_residual: 0.0,
            warnings: bootstrap.warnings.clone(),
        };
        let mut traj = Trajectory {
            system: self.system.clone(),
            bootstrap,
            handoff,
            y_handoff,
            dense,
            t_end: self.t_end,
            report,
            diagnostics: Diagnostics::default(),
        };
        let mut worst = 0.0f64;
        for s in &traj.dense.steps {
            worst = worst.max(traj.residual(s.t + 0.5 * s.h)?);
        }
        diagnostics.max_midpoint_residual = worst;
        traj.diagnostics = diagnostics;
        Ok(traj)
    }
}

// ---------------------------------------------------------------------------
// Systems of the form 0 = Y' + f(ξ, Y)/ξ.

/// A map `f(ξ, Y)`.
pub trait XiMap: Send + Sync {
    fn dim(&self) -> usize;

    fn eval(&self, xi: f64, y: &[f64]) -> Result<Vec<f64>, EvalError>;

    /// `f(t, y(t))` for the series variable `t` at 0 and the order of `y`.
    fn series(&self, _y: &[Series]) -> Option<Result<Vec<Series>, EvalError>> {
        None
    }

    /// Mixed jet of `f` with `vars = [ξ, Y₁, …, Y_k]`.
    fn jet(&self, _vars: &[Jet], _space: &Arc<JetSpace>) -> Option<Result<Vec<Jet>, EvalError>> {
        None
    }

    /// `(∂f/∂ξ, ∂f/∂Y)`; central differences unless overridden.
    fn derivatives(&self, xi: f64, y: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>), EvalError> {
        let h = 1e-6 * xi.abs().max(1.0);
        let fp = self.eval(xi + h, y)?;
        let fm = self.eval(xi - h, y)?;
        let dxi = fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        let dy = central_jacobian(|y| self.eval(xi, y), y)?;
        Ok((dxi, dy))
    }
}

/// Expression-backed `f`, slot 0 is `ξ` and slots `1..=k` the state.
#[derive(Debug, Clone)]
pub struct ExprXiMap {
    exprs: Vec<Expr>,
}

impl ExprXiMap {
    pub fn new(exprs: Vec<Expr>) -> Self {
        ExprXiMap { exprs }
    }

    /// Parses components over `xi, y1, …, yk`.
    pub fn parse(components: &[&str]) -> Result<Self, crate::expr::ParseError> {
        let mut names = state_var_names(components.len());
        names[0] = "xi".into();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let exprs = components
            .iter()
            .map(|s| crate::expr::parse_with(s, &names))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ExprXiMap { exprs })
    }
}

impl XiMap for ExprXiMap {
    fn dim(&self) -> usize {
        self.exprs.len()
    }

    fn eval(&self, xi: f64, y: &[f64]) -> Result<Vec<f64>, EvalError> {
        ExprSystem::eval_all(&self.exprs, xi, y)
    }

    fn series(&self, y: &[Series]) -> Option<Result<Vec<Series>, EvalError>> {
        let order = y.first().map_or(0, Series::order);
        let ctx = SeriesCtx { order, t0: 0.0 };
        let mut vars = vec![Series::variable(order, 0.0)];
        vars.extend_from_slice(y);
        Some(self.exprs.iter().map(|e| e.eval_with(&vars, &ctx)).collect())
    }

    fn jet(&self, vars: &[Jet], space: &Arc<JetSpace>) -> Option<Result<Vec<Jet>, EvalError>> {
        Some(self.exprs.iter().map(|e| e.eval_with(vars, space)).collect())
    }

    fn derivatives(&self, xi: f64, y: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>), EvalError> {
        let k = y.len();
        let space = JetSpace::new(k + 1, 1);
        let mut vars = vec![Jet::variable(&space, 0, xi)];
        vars.extend((0..k).map(|i| Jet::variable(&space, i + 1, y[i])));
        let mut dxi = vec![0.0; self.exprs.len()];
        let mut dy = DMatrix::zeros(self.exprs.len(), k);
        let mut e = vec![0u32; k + 1];
        for (i, ex) in self.exprs.iter().enumerate() {
            let j = ex.eval_with(&vars, &space)?;
            for c in 0..=k {
                e[c] = 1;
                let v = j.coeff(&e);
                e[c] = 0;
                if c == 0 {
                    dxi[i] = v;
                } else {
                    dy[(i, c - 1)] = v;
                }
            }
        }
        Ok((dxi, dy))
    }
}

type XiFn = dyn Fn(f64, &[f64]) -> Result<Vec<f64>, String> + Send + Sync;

/// Opaque `f`; derivatives by central differences.
pub struct BlackBoxXiMap {
    dim: usize,
    f: Box<XiFn>,
}

impl BlackBoxXiMap {
    pub fn new(dim: usize, f: impl Fn(f64, &[f64]) -> Result<Vec<f64>, String> + Send + Sync + 'static) -> Self {
        BlackBoxXiMap { dim, f: Box::new(f) }
    }
}

impl XiMap for BlackBoxXiMap {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, xi: f64, y: &[f64]) -> Result<Vec<f64>, EvalError> {
        check_finite((self.f)(xi, y).map_err(EvalError::External)?)
    }
}

fn gauss_legendre_16() -> &'static [(f64, f64)] {
    static RULE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(16))
}

/// Nodes and weights on `[0, 1]`.
fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut rule = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        rule.push((0.5 * (1.0 + x), 0.5 * w));
    }
    rule
}

/// Below this `|ξ|` difference quotients are replaced by quadrature.
const QUADRATURE_BELOW: f64 = 0.1;

/// `0 = Y' + f(ξ, Y)/ξ` viewed as `Ẏ = M₋₁(Y)/t + M(t, Y)` with
/// `M₋₁(Y) = −f(0, Y)` and `M(t, Y) = −(f(t, Y) − f(0, Y))/t`.
pub struct XiSystem {
    map: Arc<dyn XiMap>,
}

impl XiSystem {
    pub fn new(map: Arc<dyn XiMap>) -> Self {
        XiSystem { map }
    }
}

impl SingularSystem for XiSystem {
    fn dim(&self) -> usize {
        self.map.dim()
    }

    fn singular(&self, y: &[f64]) -> Result<Vec<f64>, EvalError> {
        Ok(self.map.eval(0.0, y)?.into_iter().map(|v| -v).collect())
    }

    fn regular(&self, t: f64, y: &[f64]) -> Result<Vec<f64>, EvalError> {
        if t.abs() < QUADRATURE_BELOW {
            // −∫₀¹ ∂ξ f(st, Y) ds
            let mut acc = vec![0.0; self.dim()];
            for &(s, w) in gauss_legendre_16() {
                let (dxi, _) = self.map.derivatives(s * t, y)?;
                for (a, d) in acc.iter_mut().zip(&dxi) {
                    *a -= w * d;
                }
            }
            Ok(acc)
        } else {
            let f = self.map.eval(t, y)?;
            let f0 = self.map.eval(0.0, y)?;
            Ok(f.iter().zip(&f0).map(|(a, b)| -(a - b) / t).collect())
        }
    }

    fn scaled_rhs_series(&self, y: &[Series]) -> Option<Result<Vec<Series>, EvalError>> {
        self.map
            .series(y)
            .map(|r| r.map(|v| v.into_iter().map(|s| s.negate()).collect()))
    }

    fn singular_jacobian(&self, y: &[f64]) -> Result<DMatrix<f64>, EvalError> {
        Ok(-self.map.derivatives(0.0, y)?.1)
    }

    fn supports_series(&self) -> bool {
        self.map.series(&[]).is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitCheck {
    pub residual_norm: f64,
    pub pass: bool,
}

/// Necessary condition `f(0, Y₀) = 0` for a solution continuous at `ξ = 0`.
pub fn continuation_limit_check(f: &dyn XiMap, y0: &[f64]) -> Result<LimitCheck, SingularError> {
    let v = f.eval(0.0, y0)?;
    let residual_norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(LimitCheck { residual_norm, pass: residual_norm < EPS_ADM })
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialDerivative {
    /// `Y₁ = −(I + A₀)⁻¹ a₀`.
    pub y1: Vec<f64>,
    /// `a₀ = ∂f/∂ξ(0, Y₀)`.
    pub a0: Vec<f64>,
    /// `A₀ = ∂f/∂Y(0, Y₀)`.
    pub a0_matrix: DMatrix<f64>,
    /// Eigenvalues of `I + A₀`, reported but not gated on.
    pub spectrum: Vec<Complex64>,
}

/// The derivative at `ξ = 0` forced on any C¹ solution.
pub fn initial_derivative(f: &dyn XiMap, y0: &[f64]) -> Result<InitialDerivative, SingularError> {
    let lim = continuation_limit_check(f, y0)?;
    if !lim.pass {
        return Err(SingularError::Precondition(format!(
            "f(0, Y0) does not vanish (norm {:e})",
            lim.residual_norm
        )));
    }
    let (a0, a0_matrix) = f.derivatives(0.0, y0)?;
    let k = y0.len();
    let m = DMatrix::identity(k, k) + &a0_matrix;
    let spectrum = linalg::complex_eigenvalues(&m);
    if linalg::sigma_min(&m) < EPS_INV * (1.0 + linalg::spectral_norm(&a0_matrix)) {
        return Err(SingularError::Precondition("I + A0 is singular".into()));
    }
    let y1 = m
        .lu()
        .solve(&DVector::from_column_slice(&a0))
        .ok_or_else(|| SingularError::Precondition("I + A0 is singular".into()))?;
    Ok(InitialDerivative { y1: y1.iter().map(|v| -v).collect(), a0, a0_matrix, spectrum })
}

/// `f̂(ξ, Ŷ) = Ŷ + ∫₀¹ [∂ξf + ∂Yf·Ŷ](sξ, Y₀ + sξŶ) ds`, the map governing
/// `Ŷ = (Y − Y₀)/ξ`.
pub struct HatMap {
    base: Arc<dyn XiMap>,
    y0: Vec<f64>,
}

impl HatMap {
    pub fn base_point(&self) -> &[f64] {
        &self.y0
    }

    /// The reduced problem with its admissible initial value `Ŷ(0) = Y₁`.
    pub fn into_problem(self, t_end: f64) -> Result<SingularIVP, SingularError> {
        let y1 = initial_derivative(self.base.as_ref(), &self.y0)?.y1;
        SingularIVP::new(Arc::new(XiSystem::new(Arc::new(self))), y1, t_end)
    }
}

impl XiMap for HatMap {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn eval(&self, xi: f64, yh: &[f64]) -> Result<Vec<f64>, EvalError> {
        let inner = |s: f64| -> Vec<f64> { self.y0.iter().zip(yh).map(|(a, b)| a + s * xi * b).collect() };
        if xi.abs() < QUADRATURE_BELOW {
            let mut acc = yh.to_vec();
            for &(s, w) in gauss_legendre_16() {
                let (dxi, dy) = self.base.derivatives(s * xi, &inner(s))?;
                let dyv = dy * DVector::from_column_slice(yh);
                for i in 0..acc.len() {
                    acc[i] += w * (dxi[i] + dyv[i]);
                }
            }
            Ok(acc)
        } else {
            let f = self.base.eval(xi, &inner(1.0))?;
            let f0 = self.base.eval(0.0, &self.y0)?;
            Ok((0..f.len()).map(|i| yh[i] + (f[i] - f0[i]) / xi).collect())
        }
    }

    fn series(&self, yh: &[Series]) -> Option<Result<Vec<Series>, EvalError>> {
        let order = yh.first().map_or(0, Series::order);
        let t = Series::variable(order + 1, 0.0);
        let inner: Result<Vec<Series>, EvalError> = yh
            .iter()
            .zip(&self.y0)
            .map(|(s, &c)| Ok(t.mul(&s.with_order(order + 1))?.add_constant(c)))
            .collect();
        let inner = match inner {
            Ok(v) => v,
            Err(e) => return Some(Err(e)),
        };
        let f = self.base.series(&inner)?;
        Some(f.and_then(|f| {
            f.iter()
                .zip(yh)
                .map(|(fs, y)| fs.shift_down(1).0.with_order(order).add(y))
                .collect()
        }))
    }
}

/// Reduction to `Ŷ = (Y − Y₀)/ξ`; requires `f(0, Y₀) = 0`.
pub fn reduce_hat(f: Arc<dyn XiMap>, y0: &[f64]) -> Result<HatMap, SingularError> {
    let lim = continuation_limit_check(f.as_ref(), y0)?;
    if !lim.pass {
        return Err(SingularError::Precondition(format!(
            "f(0, Y0) does not vanish (norm {:e})",
            lim.residual_norm
        )));
    }
    Ok(HatMap { base: f, y0: y0.to_vec() })
}

/// `f̃(ξ, Ỹ) = f(ξ, Ỹ + Y₀)`.
pub struct Normalized {
    base: Arc<dyn XiMap>,
    y0: Vec<f64>,
}

impl Normalized {
    fn shift(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.y0).map(|(a, b)| a + b).collect()
    }
}

impl XiMap for Normalized {
    fn dim(&self) -> usize {
        self.base.dim()
    }

    fn eval(&self, xi: f64, y: &[f64]) -> Result<Vec<f64>, EvalError> {
        self.base.eval(xi, &self.shift(y))
    }

    fn series(&self, y: &[Series]) -> Option<Result<Vec<Series>, EvalError>> {
        let shifted: Vec<Series> = y.iter().zip(&self.y0).map(|(s, &c)| s.add_constant(c)).collect();
        self.base.series(&shifted)
    }

    fn jet(&self, vars: &[Jet], space: &Arc<JetSpace>) -> Option<Result<Vec<Jet>, EvalError>> {
        let mut shifted = vars.to_vec();
        for (j, &c) in shifted[1..].iter_mut().zip(&self.y0) {
            *j = match j.add(&Jet::constant(space, c)) {
                Ok(v) => v,
                Err(e) => return Some(Err(e)),
            };
        }
        self.base.jet(&shifted, space)
    }

    fn derivatives(&self, xi: f64, y: &[f64]) -> Result<(Vec<f64>, DMatrix<f64>), EvalError> {
        self.base.derivatives(xi, &self.shift(y))
    }
}

pub fn normalize(f: Arc<dyn XiMap>, y0: &[f64]) -> Normalized {
    Normalized { base: f, y0: y0.to_vec() }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeakNonlinearity {
    pub pass: bool,
    /// First offending component and exponent vector over `(ξ, Y₁, …, Y_k)`.
    pub witness: Option<(usize, Vec<u32>)>,
    pub coefficient: f64,
}

/// Checks that every monomial `ξ⁰·Y^α` with `|α| ≥ 2` of the expansion of
/// `f` at `(0, 0)` vanishes, up to total degree `order`.
pub fn check_weakly_nonlinear(f: &dyn XiMap, order: usize) -> Result<WeakNonlinearity, SingularError> {
    let k = f.dim();
    let space = JetSpace::new(k + 1, order);
    let vars: Vec<Jet> = (0..=k).map(|i| Jet::variable(&space, i, 0.0)).collect();
    let jets = f
        .jet(&vars, &space)
        .ok_or_else(|| SingularError::Precondition("weak non-linearity needs an expression-backed map".into()))??;
    for (comp, j) in jets.iter().enumerate() {
        for idx in 0..space.len() {
            let m = space.monomial(idx);
            if m[0] == 0 && space.degree(idx) >= 2 && j.coeffs()[idx].abs() >= EPS_ADM {
                return Ok(WeakNonlinearity {
                    pass: false,
                    witness: Some((comp, m.to_vec())),
                    coefficient: j.coeffs()[idx],
                });
            }
        }
    }
    Ok(WeakNonlinearity { pass: true, witness: None, coefficient: 0.0 })
}
