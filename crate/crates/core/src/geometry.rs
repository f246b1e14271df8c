//! Harmonic and biharmonic equivariant maps of cohomogeneity-one manifolds.
//!
//! Along a normal geodesic the metric is described by a family of symmetric
//! endomorphisms `P_t` with `P_t|𝔭 = t²·I + O(t⁴)` on the collapsing block.
//! The tension of the map `t ↦ r(t)` is
//!
//! ```text
//! τ(r) = r̈ + ½Tr(P_t⁻¹Ṗ_t)·ṙ − ½Tr(P_t⁻¹Ṗ_{r})
//! ```
//!
//! and with `r = t·a(t)` the equation becomes a singular first-order system.
//!
//! Near `t = 0` all traces are computed from the regular factor
//! `Q = D⁻¹PD⁻¹`, `D = diag(t·I_𝔭, I_𝔪)`, with truncated Taylor series so
//! that the poles `dim 𝔭/t` and `dim 𝔭·ρ/t²` cancel exactly.

use std::sync::Arc;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::expr::Expr;
use crate::scalar::EvalError;
use crate::series::Series;
use crate::singular_ivp::{SingularError, SingularIVP, SingularSystem, SolveOptions, Trajectory};

pub const DEFAULT_T_SWITCH: f64 = 1e-2;
/// Order of the cached Taylor data of `Q`.
const Q_ORDER: usize = 40;
/// Order of the series evaluation used below `t_switch`.
const NEAR_ORDER: usize = 14;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("metric is not symmetric at t = {t}")]
    NotSymmetric { t: f64 },
    #[error("metric is not positive definite at t = {t}")]
    NotPositiveDefinite { t: f64 },
    #[error("pole coefficient mismatch: t*drift tends to {measured}, expected dim_p = {expected}")]
    PoleMismatch { expected: usize, measured: f64 },
    #[error("metric expansion at t = 0 failed: {0}")]
    Expansion(EvalError),
    #[error("the reduced system is not regular at t = 0: {0}")]
    NotRegular(String),
    #[error("the biharmonic system requires a diagonal metric without conformal factor")]
    Unsupported,
    #[error("evaluation failed: {0}")]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Solve(#[from] SingularError),
}

#[derive(Debug, Clone)]
pub enum MetricForm {
    /// `dim_p + dim_m` diagonal entries, the first `dim_p` on 𝔭.
    Diagonal(Vec<Expr>),
    /// `P|𝔭 = t²I + t⁴B(t)`, `P|𝔪 = A₀ + tA₁ + t²A(t)`, `P|𝔭𝔪 = t²C₀ + t³C(t)`.
    Block {
        a0: DMatrix<f64>,
        a1: DMatrix<f64>,
        c0: DMatrix<f64>,
        b: Vec<Vec<Expr>>,
        a: Vec<Vec<Expr>>,
        c: Vec<Vec<Expr>>,
    },
}

/// Conformal change of the domain metric: adds `n·α̇(t)·ṙ` to the tension.
#[derive(Debug, Clone)]
pub struct Conformal {
    pub alpha: Expr,
    pub n: usize,
}

#[derive(Debug, Clone)]
pub struct MetricSpec {
    pub dim_p: usize,
    pub dim_m: usize,
    pub form: MetricForm,
    pub conformal: Option<Conformal>,
    /// Upper end of the positive-definiteness validation grid.
    pub t_validate: f64,
    pub t_switch: f64,
}

/// Validated metric family with cached Taylor data at `t = 0`.
#[derive(Debug, Clone)]
pub struct MetricFamily {
    dim_p: usize,
    n: usize,
    diagonal: bool,
    p: Vec<Expr>,
    dp: Vec<Expr>,
    ddp: Vec<Expr>,
    q: Vec<Series>,
    dq: Vec<Series>,
    ddq: Vec<Series>,
    /// `½Tr(Q⁻¹Q̇)`, the regular part of the drift.
    delta: Series,
    conformal: Option<ConformalData>,
    t_switch: f64,
}

#[derive(Debug, Clone)]
struct ConformalData {
    n: f64,
    dalpha: Expr,
    dalpha_series: Series,
}

fn t_var() -> Expr {
    Expr::var(0, "t")
}

fn eval_matrix(exprs: &[Expr], n: usize, x: f64) -> Result<DMatrix<f64>, EvalError> {
    let mut m = DMatrix::zeros(n, n);
    for (k, e) in exprs.iter().enumerate() {
        m[(k / n, k % n)] = e.eval_real(x)?;
    }
    Ok(m)
}

/// Gauss–Jordan inverse of a matrix of series with invertible constant term.
fn series_inverse(m: &[Series], n: usize) -> Result<Vec<Series>, EvalError> {
    let order = m[0].order();
    let mut a = m.to_vec();
    let mut inv: Vec<Series> = (0..n * n)
        .map(|k| Series::constant(if k / n == k % n { 1.0 } else { 0.0 }, order, 0.0))
        .collect();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i * n + col].coeff(0).abs().total_cmp(&a[j * n + col].coeff(0).abs()))
            .unwrap();
        if a[piv * n + col].coeff(0) == 0.0 {
            return Err(EvalError::ZeroConstantTerm);
        }
        if piv != col {
            for j in 0..n {
                a.swap(piv * n + j, col * n + j);
                inv.swap(piv * n + j, col * n + j);
            }
        }
        let r = a[col * n + col].reciprocal()?;
        for j in 0..n {
            a[col * n + j] = a[col * n + j].mul(&r)?;
            inv[col * n + j] = inv[col * n + j].mul(&r)?;
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let f = a[i * n + col].clone();
            if f.coeffs().iter().all(|&c| c == 0.0) {
                continue;
            }
            for j in 0..n {
                a[i * n + j] = a[i * n + j].sub(&f.mul(&a[col * n + j])?)?;
                inv[i * n + j] = inv[i * n + j].sub(&f.mul(&inv[col * n + j])?)?;
            }
        }
    }
    Ok(inv)
}

fn series_det(m: &[Series], n: usize) -> Result<Series, EvalError> {
    let order = m[0].order();
    let mut a = m.to_vec();
    let mut det = Series::constant(1.0, order, 0.0);
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i * n + col].coeff(0).abs().total_cmp(&a[j * n + col].coeff(0).abs()))
            .unwrap();
        if a[piv * n + col].coeff(0) == 0.0 {
            return Err(EvalError::ZeroConstantTerm);
        }
        if piv != col {
            for j in 0..n {
                a.swap(piv * n + j, col * n + j);
            }
            det = det.negate();
        }
        let d = a[col * n + col].clone();
        det = det.mul(&d)?;
        let r = d.reciprocal()?;
        for i in col + 1..n {
            let f = a[i * n + col].mul(&r)?;
            for j in col..n {
                a[i * n + j] = a[i * n + j].sub(&f.mul(&a[col * n + j])?)?;
            }
        }
    }
    Ok(det)
}

/// Validates the family and caches its Taylor data at `t = 0`.
pub fn build_metric_family(spec: &MetricSpec) -> Result<MetricFamily, GeometryError> {
    let (p, m) = (spec.dim_p, spec.dim_m);
    let n = p + m;
    if n == 0 {
        return Err(GeometryError::Shape("dim_p + dim_m must be positive".into()));
    }
    // Power of t relating P_ij to Q_ij.
    let k_of = |i: usize, j: usize| (i < p) as usize + (j < p) as usize;
    let (p_exprs, diagonal) = match &spec.form {
        MetricForm::Diagonal(d) => {
            if d.len() != n {
                return Err(GeometryError::Shape(format!("{} diagonal entries for dimension {n}", d.len())));
            }
            let mut v = vec![Expr::num(0.0); n * n];
            for (i, e) in d.iter().enumerate() {
                v[i * n + i] = e.clone();
            }
            (v, true)
        }
        MetricForm::Block { a0, a1, c0, b, a, c } => {
            let dims = |rows: usize, cols: usize, r: usize, cc: usize, what: &str| {
                if rows != r || cols != cc {
                    Err(GeometryError::Shape(format!("{what} is {rows}x{cols}, expected {r}x{cc}")))
                } else {
                    Ok(())
                }
            };
            dims(a0.nrows(), a0.ncols(), m, m, "A0")?;
            dims(a1.nrows(), a1.ncols(), m, m, "A1")?;
            dims(c0.nrows(), c0.ncols(), p, m, "C0")?;
            let shape = |x: &Vec<Vec<Expr>>| (x.len(), x.first().map_or(0, Vec::len));
            let ((br, bc), (ar, ac), (cr, ccc)) = (shape(b), shape(a), shape(c));
            dims(br, if br == 0 { 0 } else { bc }, p, p, "B")?;
            dims(ar, if ar == 0 { 0 } else { ac }, m, m, "A")?;
            dims(cr, if cr == 0 || m == 0 { m * cr.min(1) } else { ccc }, p, if p == 0 { 0 } else { m }, "C")?;
            if b.iter().any(|r| r.len() != p) || a.iter().any(|r| r.len() != m) || c.iter().any(|r| r.len() != m) {
                return Err(GeometryError::Shape("ragged block matrix".into()));
            }
            let t = t_var;
            let t2 = || t().powf(2.0);
            let mut q = vec![Expr::num(0.0); n * n];
            for i in 0..n {
                for j in 0..n {
                    q[i * n + j] = match (i < p, j < p) {
                        (true, true) => Expr::num(if i == j { 1.0 } else { 0.0 }).plus(t2().times(b[i][j].clone())),
                        (true, false) => t().times(Expr::num(c0[(i, j - p)])).plus(t2().times(c[i][j - p].clone())),
                        (false, true) => t().times(Expr::num(c0[(j, i - p)])).plus(t2().times(c[j][i - p].clone())),
                        (false, false) => {
                            let (ii, jj) = (i - p, j - p);
                            Expr::num(a0[(ii, jj)])
                                .plus(t().times(Expr::num(a1[(ii, jj)])))
                                .plus(t2().times(a[ii][jj].clone()))
                        }
                    };
                }
            }
            let pe = (0..n * n)
                .map(|idx| {
                    let k = k_of(idx / n, idx % n);
                    if k == 0 {
                        q[idx].clone()
                    } else {
                        t().powf(k as f64).times(q[idx].clone())
                    }
                })
                .collect();
            (pe, false)
        }
    };
    let dp: Vec<Expr> = p_exprs.iter().map(Expr::differentiate).collect();
    let ddp: Vec<Expr> = dp.iter().map(Expr::differentiate).collect();

    let mut fam = MetricFamily {
        dim_p: p,
        n,
        diagonal,
        p: p_exprs,
        dp,
        ddp,
        q: Vec::new(),
        dq: Vec::new(),
        ddq: Vec::new(),
        delta: Series::zero(0, 0.0),
        conformal: None,
        t_switch: spec.t_switch,
    };

    // Positive definiteness and symmetry on a log-spaced grid.
    let (lo, hi) = (1e-3f64, spec.t_validate);
    if hi > lo {
        for i in 0..50 {
            let t = lo * (hi / lo).powf(i as f64 / 49.0);
            let pm = eval_matrix(&fam.p, n, t)?;
            if (&pm - pm.transpose()).amax() > 1e-12 * (1.0 + pm.amax()) {
                return Err(GeometryError::NotSymmetric { t });
            }
            if pm.cholesky().is_none() {
                return Err(GeometryError::NotPositiveDefinite { t });
            }
        }
    }

    let measured = |fam: &MetricFamily| fam.trace_drift_direct(1e-4).map(|d| 1e-4 * d).unwrap_or(f64::NAN);
    let mut q = Vec::with_capacity(n * n);
    for idx in 0..n * n {
        let k = k_of(idx / n, idx % n);
        let s = fam.p[idx].taylor(0.0, Q_ORDER + k).map_err(GeometryError::Expansion)?;
        let (qs, dropped) = s.shift_down(k);
        let scale = 1.0 + qs.coeffs().iter().take(4).map(|c| c.abs()).fold(0.0, f64::max);
        if dropped > 1e-12 * scale {
            return Err(GeometryError::PoleMismatch { expected: p, measured: measured(&fam) });
        }
        q.push(qs);
    }
    fam.dq = q.iter().map(Series::derivative).collect();
    fam.ddq = fam.dq.iter().map(Series::derivative).collect();
    let det = series_det(&q, n).map_err(GeometryError::Expansion)?;
    if det.coeff(0) <= 0.0 {
        return Err(GeometryError::NotPositiveDefinite { t: 0.0 });
    }
    fam.delta = det
        .apply(crate::scalar::Func::Log)
        .map_err(GeometryError::Expansion)?
        .derivative()
        .scale(0.5);
    fam.q = q;

    if let Some(c) = &spec.conformal {
        let dalpha = c.alpha.differentiate();
        let dalpha_series = dalpha.taylor(0.0, Q_ORDER).map_err(GeometryError::Expansion)?;
        fam.conformal = Some(ConformalData { n: c.n as f64, dalpha, dalpha_series });
    }

    for &t in &[1e-3, 1e-4] {
        let td = t * fam.trace_drift_series(t)?;
        if (td - p as f64).abs() >= 1e-2 {
            return Err(GeometryError::PoleMismatch { expected: p, measured: td });
        }
    }
    Ok(fam)
}

/// Series-valued intermediate results of the reduction for a given `a(t)`.
struct Numerators {
    /// `t·pot(t, t·a) − p·a − t·(δ + nα̇)(a + t·u)`.
    nu: Series,
    /// `b·(t²·pot2(t, t·a) − p) − t·δ·(b + t·c)`.
    nc: Option<Series>,
}

impl MetricFamily {
    pub fn dim_p(&self) -> usize {
        self.dim_p
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn is_diagonal(&self) -> bool {
        self.diagonal
    }

    pub fn has_conformal(&self) -> bool {
        self.conformal.is_some()
    }

    pub fn t_switch(&self) -> f64 {
        self.t_switch
    }

    pub fn metric(&self, t: f64) -> Result<DMatrix<f64>, EvalError> {
        eval_matrix(&self.p, self.n, t)
    }

    /// `n·α̇(t)`, zero without conformal factor.
    pub fn conformal_drift(&self, t: f64) -> Result<f64, EvalError> {
        match &self.conformal {
            None => Ok(0.0),
            Some(c) if t < self.t_switch => Ok(c.n * c.dalpha_series.eval(t)),
            Some(c) => Ok(c.n * c.dalpha.eval_real(t)?),
        }
    }

    fn solve_p(&self, t: f64, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>, EvalError> {
        let pt = self.metric(t)?;
        pt.lu().solve(rhs).ok_or(EvalError::DivisionByZero)
    }

    /// `½Tr(P_t⁻¹Ṗ_t)` by LU on `P(t)`.
    pub fn trace_drift_direct(&self, t: f64) -> Result<f64, EvalError> {
        let x = self.solve_p(t, &eval_matrix(&self.dp, self.n, t)?)?;
        Ok(0.5 * x.trace())
    }

    /// `(p + t·δ(t))/t` from the cached series.
    pub fn trace_drift_series(&self, t: f64) -> Result<f64, EvalError> {
        Ok(self.dim_p as f64 / t + self.delta.eval(t))
    }

    /// `½Tr(P_t⁻¹Ṗ_t)`, series path below `t_switch`.
    pub fn trace_drift(&self, t: f64) -> Result<f64, EvalError> {
        if t < self.t_switch {
            self.trace_drift_series(t)
        } else {
            self.trace_drift_direct(t)
        }
    }

    /// `½Tr(P_t⁻¹Ṗ_ρ)` by LU on `P(t)`.
    pub fn trace_potential_direct(&self, t: f64, rho: f64) -> Result<f64, EvalError> {
        let x = self.solve_p(t, &eval_matrix(&self.dp, self.n, rho)?)?;
        Ok(0.5 * x.trace())
    }

    /// `½Tr(P_t⁻¹P̈_ρ)` by LU on `P(t)`.
    pub fn trace_potential2_direct(&self, t: f64, rho: f64) -> Result<f64, EvalError> {
        let x = self.solve_p(t, &eval_matrix(&self.ddp, self.n, rho)?)?;
        Ok(0.5 * x.trace())
    }

    /// Pole-free series of `t·pot` and `t²·pot2` along `ρ = t·a(t)`.
    fn potential_series(&self, a: &Series, second: bool) -> Result<(Series, Option<Series>), EvalError> {
        let n = self.n;
        let p = self.dim_p;
        let m = a.order();
        let t = Series::variable(m, 0.0);
        let rho = t.mul(a)?;
        let qt: Vec<Series> = self.q.iter().map(|s| s.with_order(m)).collect();
        let x = series_inverse(&qt, n)?;
        let compose = |v: &[Series]| v.iter().map(|s| Series::compose(s, &rho)).collect::<Result<Vec<_>, _>>();
        let qr = compose(&self.q)?;
        let dqr = compose(&self.dq)?;
        let one = Series::constant(1.0, m, 0.0);
        let zero = Series::zero(m, 0.0);
        let s = |i: usize| if i < p { a } else { &one };
        let e = |i: usize| i < p;
        // w_ij = e_j·s_i + s_j·e_i
        let w = |i: usize, j: usize| -> Result<Series, EvalError> {
            let mut acc = zero.clone();
            if e(j) {
                acc = acc.add(s(i))?;
            }
            if e(i) {
                acc = acc.add(s(j))?;
            }
            Ok(acc)
        };
        let mut sum1 = zero.clone();
        let mut sum2 = zero.clone();
        for i in 0..n {
            for j in 0..n {
                let xij = &x[i * n + j];
                if e(i) || e(j) {
                    sum1 = sum1.add(&xij.mul(&qr[j * n + i])?.mul(&w(i, j)?)?)?;
                }
                sum2 = sum2.add(&xij.mul(&s(i).mul(s(j))?)?.mul(&dqr[j * n + i])?)?;
            }
        }
        let tpot = sum1.scale(0.5).add(&t.mul(&sum2)?.scale(0.5))?;
        if !second {
            return Ok((tpot, None));
        }
        let ddqr = compose(&self.ddq)?;
        let (mut s1, mut s2, mut s3) = (zero.clone(), zero.clone(), zero.clone());
        for i in 0..n {
            for j in 0..n {
                let xij = &x[i * n + j];
                if e(i) && e(j) {
                    s1 = s1.add(&xij.mul(&qr[j * n + i])?)?;
                }
                if e(i) || e(j) {
                    s2 = s2.add(&xij.mul(&dqr[j * n + i])?.mul(&w(i, j)?)?)?;
                }
                s3 = s3.add(&xij.mul(&s(i).mul(s(j))?)?.mul(&ddqr[j * n + i])?)?;
            }
        }
        let t2pot2 = s1.add(&t.mul(&s2)?)?.add(&t.mul(&t)?.mul(&s3)?.scale(0.5))?;
        Ok((tpot, Some(t2pot2)))
    }

    /// `½Tr(P_t⁻¹Ṗ_ρ)` with the pole `p·ρ/t²` cancelled in series arithmetic.
    pub fn trace_potential_series(&self, t: f64, rho: f64) -> Result<f64, EvalError> {
        let a = Series::constant(rho / t, NEAR_ORDER, 0.0);
        Ok(self.potential_series(&a, false)?.0.eval(t) / t)
    }

    pub fn trace_potential2_series(&self, t: f64, rho: f64) -> Result<f64, EvalError> {
        let a = Series::constant(rho / t, NEAR_ORDER, 0.0);
        Ok(self.potential_series(&a, true)?.1.expect("second potential").eval(t) / (t * t))
    }

    /// `½Tr(P_t⁻¹Ṗ_ρ)`, series path below `t_switch`.
    pub fn trace_potential(&self, t: f64, rho: f64) -> Result<f64, EvalError> {
        if t < self.t_switch {
            self.trace_potential_series(t, rho)
        } else {
            self.trace_potential_direct(t, rho)
        }
    }

    /// `½Tr(P_t⁻¹P̈_ρ)`, series path below `t_switch`.
    pub fn trace_potential2(&self, t: f64, rho: f64) -> Result<f64, EvalError> {
        if t < self.t_switch {
            self.trace_potential2_series(t, rho)
        } else {
            self.trace_potential2_direct(t, rho)
        }
    }

    fn numerators(
        &self,
        a: &Series,
        u: &Series,
        bc: Option<(&Series, &Series)>,
    ) -> Result<Numerators, EvalError> {
        let m = a.order();
        let p = self.dim_p as f64;
        let t = Series::variable(m, 0.0);
        let (tpot, t2pot2) = self.potential_series(a, bc.is_some())?;
        let rdot = a.add(&t.mul(u)?)?;
        let nu = tpot.sub(&a.scale(p))?.sub(&t.mul(&self.delta.with_order(m).mul(&rdot)?)?)?;
        let nu = match &self.conformal {
            Some(c) => nu.sub(&t.mul(&c.dalpha_series.with_order(m).scale(c.n).mul(&rdot)?)?)?,
            None => nu,
        };
        let nc = match (bc, t2pot2) {
            (Some((b, c)), Some(t2)) => {
                let fdot = b.add(&t.mul(c)?)?;
                Some(b.mul(&t2.add_constant(-p))?.sub(&t.mul(&self.delta.with_order(m).mul(&fdot)?)?)?)
            }
            _ => None,
        };
        Ok(Numerators { nu, nc })
    }

    /// `τ = r̈ + (½Tr P_t⁻¹Ṗ_t + n·α̇)·ṙ − ½Tr P_t⁻¹Ṗ_r`, evaluated directly on
    /// the second-order form.
    pub fn tension_residual(&self, t: f64, r: f64, rdot: f64, rddot: f64) -> Result<f64, EvalError> {
        let drift = self.trace_drift(t)? + self.conformal_drift(t)?;
        Ok(rddot + drift * rdot - self.trace_potential(t, r)?)
    }

    /// `(F − τ(r), F̈ + ½Tr(P_t⁻¹Ṗ_t)·Ḟ − ½Tr(P_t⁻¹P̈_r)·F)`.
    #[allow(clippy::too_many_arguments)]
    pub fn biharmonic_residual(
        &self,
        t: f64,
        r: f64,
        rdot: f64,
        rddot: f64,
        f: f64,
        fdot: f64,
        fddot: f64,
    ) -> Result<(f64, f64), EvalError> {
        let drift = self.trace_drift(t)?;
        let def = f - self.tension_residual(t, r, rdot, rddot)?;
        let eq = fddot + drift * fdot - self.trace_potential2(t, r)? * f;
        Ok((def, eq))
    }
}

/// Reduced system in `(a, u)` or `(a, u, b, c)` with `r = t·a`, `u = ȧ`,
/// `F = t·b`, `c = ḃ`.
struct ReducedSystem {
    fam: Arc<MetricFamily>,
    biharmonic: bool,
}

impl ReducedSystem {
    fn constant(v: f64, order: usize) -> Series {
        Series::constant(v, order, 0.0)
    }

    fn numerators_at(&self, y: &[f64], order: usize) -> Result<Numerators, EvalError> {
        let c = |i: usize| Self::constant(y[i], order);
        let (a, u) = (c(0), c(1));
        if self.biharmonic {
            let (b, cc) = (c(2), c(3));
            self.fam.numerators(&a, &u, Some((&b, &cc)))
        } else {
            self.fam.numerators(&a, &u, None)
        }
    }

    fn direct_rhs(&self, t: f64, y: &[f64]) -> Result<Vec<f64>, EvalError> {
        let fam = &self.fam;
        let (a, u) = (y[0], y[1]);
        let r = t * a;
        let rdot = a + t * u;
        let pt = fam.metric(t)?.lu();
        let trace = |m: DMatrix<f64>| pt.solve(&m).map(|x| 0.5 * x.trace()).ok_or(EvalError::DivisionByZero);
        let drift = trace(eval_matrix(&fam.dp, fam.n, t)?)?;
        let pot = trace(eval_matrix(&fam.dp, fam.n, r)?)?;
        let mut rddot = pot - (drift + fam.conformal_drift(t)?) * rdot;
        if !self.biharmonic {
            return Ok(vec![u, (rddot - 2.0 * u) / t]);
        }
        let (b, c) = (y[2], y[3]);
        rddot += t * b;
        let pot2 = trace(eval_matrix(&fam.ddp, fam.n, r)?)?;
        let f = t * b;
        let fdot = b + t * c;
        let fddot = pot2 * f - drift * fdot;
        Ok(vec![u, (rddot - 2.0 * u) / t, c, (fddot - 2.0 * c) / t])
    }
}

impl SingularSystem for ReducedSystem {
    fn dim(&self) -> usize {
        if self.biharmonic {
            4
        } else {
            2
        }
    }

    fn singular(&self, y: &[f64]) -> Result<Vec<f64>, EvalError> {
        let k = self.fam.dim_p as f64 + 2.0;
        let num = self.numerators_at(y, 1)?;
        let mut out = vec![0.0, -k * y[1] + num.nu.coeff(1)];
        if let Some(nc) = num.nc {
            out.extend([0.0, -k * y[3] + nc.coeff(1)]);
        }
        Ok(out)
    }

    fn regular(&self, t: f64, y: &[f64]) -> Result<Vec<f64>, EvalError> {
        if t >= self.fam.t_switch {
            let full = self.direct_rhs(t, y)?;
            let s = self.singular(y)?;
            return Ok(full.iter().zip(&s).map(|(f, s)| f - s / t).collect());
        }
        let num = self.numerators_at(y, NEAR_ORDER + 2)?;
        let mu = num.nu.shift_down(2).0.eval(t);
        if self.biharmonic {
            let mc = num.nc.expect("biharmonic numerator").shift_down(2).0.eval(t);
            Ok(vec![y[1], mu + y[2], y[3], mc])
        } else {
            Ok(vec![y[1], mu])
        }
    }

    fn rhs(&self, t: f64, y: &[f64]) -> Result<Vec<f64>, EvalError> {
        if t >= self.fam.t_switch {
            return self.direct_rhs(t, y);
        }
        let s = self.singular(y)?;
        let r = self.regular(t, y)?;
        Ok(s.iter().zip(&r).map(|(a, b)| a / t + b).collect())
    }

    fn scaled_rhs_series(&self, y: &[Series]) -> Option<Result<Vec<Series>, EvalError>> {
        Some((|| {
            let order = y[0].order();
            let up: Vec<Series> = y.iter().map(|s| s.with_order(order + 1)).collect();
            let k = self.fam.dim_p as f64 + 2.0;
            let t = Series::variable(order, 0.0);
            let num = if self.biharmonic {
                self.fam.numerators(&up[0], &up[1], Some((&up[2], &up[3])))?
            } else {
                self.fam.numerators(&up[0], &up[1], None)?
            };
            let fa = t.mul(&y[1])?;
            let mut fu = num.nu.shift_down(1).0.sub(&y[1].scale(k))?;
            if !self.biharmonic {
                return Ok(vec![fa, fu]);
            }
            fu = fu.add(&t.mul(&y[2])?)?;
            let fb = t.mul(&y[3])?;
            let fc = num.nc.expect("biharmonic numerator").shift_down(1).0.sub(&y[3].scale(k))?;
            Ok(vec![fa, fu, fb, fc])
        })())
    }

    /// `M₋₁` is at most quadratic in the state, so a unit central difference
    /// is exact up to rounding.
    fn singular_jacobian(&self, y: &[f64]) -> Result<DMatrix<f64>, EvalError> {
        let k = y.len();
        let mut jac = DMatrix::zeros(k, k);
        let mut yp = y.to_vec();
        for j in 0..k {
            yp[j] = y[j] + 1.0;
            let fp = self.singular(&yp)?;
            yp[j] = y[j] - 1.0;
            let fm = self.singular(&yp)?;
            yp[j] = y[j];
            for i in 0..k {
                jac[(i, j)] = 0.5 * (fp[i] - fm[i]);
            }
        }
        Ok(jac)
    }

    fn supports_series(&self) -> bool {
        true
    }
}

fn check_regular(sys: &ReducedSystem, probe: &[f64]) -> Result<(), GeometryError> {
    let num = sys.numerators_at(probe, 2)?;
    let scale = 1.0 + probe.iter().map(|v| v.abs()).fold(0.0, f64::max);
    if num.nu.coeff(0).abs() > 1e-8 * scale {
        return Err(GeometryError::NotRegular(format!(
            "t*potential does not tend to dim_p*a (defect {:e})",
            num.nu.coeff(0)
        )));
    }
    Ok(())
}

/// Harmonic map problem `τ(r) = 0`, `r(0) = 0`, `ṙ(0) = v`, in the state
/// `(a, u)`. The initial `u(0)` is the unique value making `M₋₁` vanish; it
/// is zero whenever the regular part of the drift vanishes at `t = 0`.
pub fn assemble_harmonic(fam: &Arc<MetricFamily>, v: f64, t_end: f64) -> Result<SingularIVP, GeometryError> {
    let sys = ReducedSystem { fam: fam.clone(), biharmonic: false };
    check_regular(&sys, &[v, 0.0])?;
    check_regular(&sys, &[1.0, 0.0])?;
    let k = fam.dim_p as f64 + 2.0;
    let g = sys.singular(&[v, 0.0])?[1];
    let y0 = vec![v, g / k];
    Ok(SingularIVP::new(Arc::new(sys), y0, t_end)?)
}

/// Biharmonic problem with `ṙ(0) = v`, `Ḟ(0) = w` in the state `(a, u, b, c)`.
pub fn assemble_biharmonic(
    fam: &Arc<MetricFamily>,
    v: f64,
    w: f64,
    t_end: f64,
) -> Result<SingularIVP, GeometryError> {
    if !fam.diagonal || fam.conformal.is_some() {
        return Err(GeometryError::Unsupported);
    }
    let sys = ReducedSystem { fam: fam.clone(), biharmonic: true };
    check_regular(&sys, &[v, 0.0, w, 0.0])?;
    check_regular(&sys, &[1.0, 0.0, 1.0, 0.0])?;
    let k = fam.dim_p as f64 + 2.0;
    let s = sys.singular(&[v, 0.0, w, 0.0])?;
    let y0 = vec![v, s[1] / k, w, s[3] / k];
    Ok(SingularIVP::new(Arc::new(sys), y0, t_end)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicSample {
    pub t: f64,
    pub r: f64,
    pub r_dot: f64,
    pub r_ddot: f64,
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct HarmonicSolution {
    pub v: f64,
    pub samples: Vec<HarmonicSample>,
    pub max_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiharmonicSample {
    pub t: f64,
    pub r: f64,
    pub r_dot: f64,
    pub r_ddot: f64,
    pub f: f64,
    pub f_dot: f64,
    pub f_ddot: f64,
    pub res_def: f64,
    pub res_eq: f64,
}

#[derive(Debug, Clone)]
pub struct BiharmonicSolution {
    pub v: f64,
    pub w: f64,
    /// `r̈(0)` and `r⃛(0)` from the bootstrap series.
    pub r_ddot0: f64,
    pub r_dddot0: f64,
    pub samples: Vec<BiharmonicSample>,
    pub max_res_def: f64,
    pub max_res_eq: f64,
}

/// `r = t·a`, `ṙ = a + t·u`, `r̈ = 2u + t·u̇` at the requested times, with
/// tension residuals from the independent second-order checker.
pub fn recover_harmonic(
    fam: &MetricFamily,
    traj: &Trajectory,
    times: &[f64],
) -> Result<HarmonicSolution, GeometryError> {
    let mut samples = Vec::with_capacity(times.len());
    let mut max_residual = 0.0f64;
    for &t in times {
        let y = traj.eval(t);
        let dy = traj.eval_derivative(t);
        let (a, u) = (y[0], y[1]);
        let r = t * a;
        let r_dot = a + t * u;
        let r_ddot = 2.0 * u + t * dy[1];
        let residual = fam.tension_residual(t, r, r_dot, r_ddot)?;
        max_residual = max_residual.max(residual.abs());
        samples.push(HarmonicSample { t, r, r_dot, r_ddot, residual });
    }
    Ok(HarmonicSolution { v: traj.bootstrap.coeff(0)[0], samples, max_residual })
}

pub fn recover_biharmonic(
    fam: &MetricFamily,
    traj: &Trajectory,
    times: &[f64],
) -> Result<BiharmonicSolution, GeometryError> {
    let mut samples = Vec::with_capacity(times.len());
    let (mut max_res_def, mut max_res_eq) = (0.0f64, 0.0f64);
    for &t in times {
        let y = traj.eval(t);
        let dy = traj.eval_derivative(t);
        let (a, u, b, c) = (y[0], y[1], y[2], y[3]);
        let r = t * a;
        let r_dot = a + t * u;
        let r_ddot = 2.0 * u + t * dy[1];
        let f = t * b;
        let f_dot = b + t * c;
        let f_ddot = 2.0 * c + t * dy[3];
        let (res_def, res_eq) = fam.biharmonic_residual(t, r, r_dot, r_ddot, f, f_dot, f_ddot)?;
        max_res_def = max_res_def.max(res_def.abs());
        max_res_eq = max_res_eq.max(res_eq.abs());
        samples.push(BiharmonicSample { t, r, r_dot, r_ddot, f, f_dot, f_ddot, res_def, res_eq });
    }
    let a = &traj.bootstrap.series[0];
    Ok(BiharmonicSolution {
        v: a.coeff(0),
        w: traj.bootstrap.series[2].coeff(0),
        r_ddot0: 2.0 * a.coeff(1),
        r_dddot0: 6.0 * a.coeff(2),
        samples,
        max_res_def,
        max_res_eq,
    })
}

/// Assembles and solves the harmonic problem.
pub fn solve_harmonic(
    fam: &Arc<MetricFamily>,
    v: f64,
    t_end: f64,
    opts: &SolveOptions,
) -> Result<Trajectory, GeometryError> {
    Ok(assemble_harmonic(fam, v, t_end)?.solve(opts)?)
}

pub fn solve_biharmonic(
    fam: &Arc<MetricFamily>,
    v: f64,
    w: f64,
    t_end: f64,
    opts: &SolveOptions,
) -> Result<Trajectory, GeometryError> {
    Ok(assemble_biharmonic(fam, v, w, t_end)?.solve(opts)?)
}

/// Schur complement identity
/// `det P = det(P_pp)·det(P_mm − P_mp P_pp⁻¹ P_pm)`.
pub fn schur_determinant(pm: &DMatrix<f64>, p: usize) -> Option<f64> {
    let n = pm.nrows();
    let m = n - p;
    let ppp = pm.view((0, 0), (p, p)).into_owned();
    let ppm = pm.view((0, p), (p, m)).into_owned();
    let pmp = pm.view((p, 0), (m, p)).into_owned();
    let pmm = pm.view((p, p), (m, m)).into_owned();
    let lu = ppp.clone().lu();
    let x = lu.solve(&ppm)?;
    Some(ppp.determinant() * (pmm - pmp * x).determinant())
}

/// Convenience for diagonal families.
pub fn diagonal_spec(dim_p: usize, entries: Vec<Expr>, t_validate: f64) -> MetricSpec {
    MetricSpec {
        dim_p,
        dim_m: entries.len().saturating_sub(dim_p),
        form: MetricForm::Diagonal(entries),
        conformal: None,
        t_validate,
        t_switch: DEFAULT_T_SWITCH,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse;
    use std::f64::consts::PI;

    fn diag(p: usize, entries: &[&str]) -> Result<MetricFamily, GeometryError> {
        build_metric_family(&diagonal_spec(p, entries.iter().map(|s| parse(s).unwrap()).collect(), 2.0))
    }

    #[test]
    fn build_examples() {
        let flat = diag(2, &["t^2", "t^2"]).unwrap();
        assert!((1e-3 * flat.trace_drift(1e-3).unwrap() - 2.0).abs() < 1e-12);
        diag(2, &["sin(t)^2", "sin(t)^2"]).unwrap();
        match diag(2, &["t^2", "t"]) {
            Err(GeometryError::PoleMismatch { expected: 2, measured }) => assert!((measured - 1.5).abs() < 1e-3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn drift_examples() {
        let flat = diag(2, &["t^2", "t^2"]).unwrap();
        assert!((flat.trace_drift(0.5).unwrap() - 4.0).abs() < 1e-14);
        let sphere = diag(2, &["sin(t)^2", "sin(t)^2"]).unwrap();
        assert!((sphere.trace_drift(PI / 4.0).unwrap() - 2.0).abs() < 1e-14);
        let mixed = diag(1, &["t^2", "1+t"]).unwrap();
        assert!((mixed.trace_drift(1.0).unwrap() - 1.25).abs() < 1e-14);
        assert!((mixed.trace_drift(1e-3).unwrap() - (1e3 + 0.5 / 1.001)).abs() < 1e-9);
    }

    #[test]
    fn potential_examples() {
        let flat = diag(2, &["t^2", "t^2"]).unwrap();
        assert!((flat.trace_potential(1.0, 0.5).unwrap() - 1.0).abs() < 1e-14);
        let sphere = diag(2, &["sin(t)^2", "sin(t)^2"]).unwrap();
        assert!((sphere.trace_potential(PI / 2.0, PI / 4.0).unwrap() - 1.0).abs() < 1e-14);
        assert_eq!(sphere.trace_potential(0.3, 0.0).unwrap(), 0.0);
        assert!((flat.trace_potential2(1.0, 0.7).unwrap() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn two_paths_agree_near_switch() {
        let sphere = diag(2, &["sin(t)^2", "sin(t)^2"]).unwrap();
        for &t in &[0.006, 0.01, 0.017] {
            for &a in &[-1.3, 0.4, 2.0] {
                let d = sphere.trace_drift_direct(t).unwrap();
                let s = sphere.trace_drift_series(t).unwrap();
                assert!((d - s).abs() < 1e-11 * d.abs());
                let d = sphere.trace_potential_direct(t, a * t).unwrap();
                let s = sphere.trace_potential_series(t, a * t).unwrap();
                assert!((d - s).abs() < 1e-10 * d.abs(), "{t} {a}: {d} {s}");
                let d = sphere.trace_potential2_direct(t, a * t).unwrap();
                let s = sphere.trace_potential2_series(t, a * t).unwrap();
                assert!((d - s).abs() < 1e-10 * d.abs(), "{t} {a}: {d} {s}");
            }
        }
    }

    #[test]
    fn tension_examples() {
        let sphere = diag(2, &["sin(t)^2", "sin(t)^2"]).unwrap();
        assert!(sphere.tension_residual(0.7, 0.7, 1.0, 0.0).unwrap().abs() < 1e-12);
        let flat = diag(2, &["t^2", "t^2"]).unwrap();
        assert!(flat.tension_residual(1.0, 1.0, 1.0, 0.0).unwrap().abs() < 1e-14);
        assert!((flat.tension_residual(1.0, 0.0, 1.0, 0.0).unwrap() - 2.0).abs() < 1e-14);
    }

    #[test]
    fn biharmonic_residual_examples() {
        let flat = diag(2, &["t^2", "t^2"]).unwrap();
        let t: f64 = 0.5;
        let (r, rd, rdd) = (t.powi(3) / 10.0, 0.3 * t * t, 0.6 * t);
        let (d, e) = flat.biharmonic_residual(t, r, rd, rdd, t, 1.0, 0.0).unwrap();
        assert!(d.abs() < 1e-12 && e.abs() < 1e-12, "{d} {e}");
        let (d, e) = flat.biharmonic_residual(t, t, 1.0, 0.0, 0.0, 0.0, 0.0).unwrap();
        assert!(d.abs() < 1e-12 && e.abs() < 1e-12);
        let (d, _) = flat.biharmonic_residual(t, 0.3, 0.1, 0.2, 0.4, 0.1, 0.0).unwrap();
        assert!(d.abs() > 0.1);
    }

    #[test]
    fn flat_harmonic_is_linear() {
        let fam = Arc::new(diag(2, &["t^2", "t^2"]).unwrap());
        let traj = solve_harmonic(&fam, 1.0, 2.0, &SolveOptions::default()).unwrap();
        for h in 1..=10 {
            assert_eq!(traj.bootstrap.coeff(h), vec![0.0, 0.0]);
        }
        let sol = recover_harmonic(&fam, &traj, &[0.5, 1.0, 2.0]).unwrap();
        assert!((sol.samples[1].r - 1.0).abs() < 1e-14);
        assert!((sol.samples[1].r_dot - 1.0).abs() < 1e-14);
    }

    #[test]
    fn sphere_identity_map() {
        let fam = Arc::new(diag(2, &["sin(t)^2", "sin(t)^2"]).unwrap());
        let traj = solve_harmonic(&fam, 1.0, 1.5, &SolveOptions::default()).unwrap();
        let sol = recover_harmonic(&fam, &traj, &[0.3, 1.0, 1.5]).unwrap();
        assert!((sol.samples[2].r - 1.5).abs() < 1e-8);
        assert!(sol.max_residual < 1e-8);
    }

    #[test]
    fn sphere_general_slope_has_small_residual() {
        let fam = Arc::new(diag(2, &["sin(t)^2", "sin(t)^2"]).unwrap());
        let traj = solve_harmonic(&fam, 0.6, 1.5, &SolveOptions::default()).unwrap();
        let times: Vec<f64> = (1..=64).map(|i| 1.5 * i as f64 / 64.0).collect();
        let sol = recover_harmonic(&fam, &traj, &times).unwrap();
        assert!(sol.max_residual < 1e-8, "{}", sol.max_residual);
    }

    #[test]
    fn conformal_flat_matches_direct_formula() {
        let mut spec = diagonal_spec(2, vec![parse("t^2").unwrap(), parse("t^2").unwrap()], 2.0);
        spec.conformal = Some(Conformal { alpha: parse("t").unwrap(), n: 2 });
        let fam = Arc::new(build_metric_family(&spec).unwrap());
        let p = assemble_harmonic(&fam, 1.0, 1.0).unwrap();
        let (t, r, rd) = (0.3, 0.2, 1.1);
        let (a, u) = (r / t, (rd - r / t) / t);
        let dy = p.system.rhs(t, &[a, u]).unwrap();
        let rdd = 2.0 * u + t * dy[1];
        let direct = rdd + (2.0 / t + 2.0) * rd - 2.0 * r / (t * t);
        assert!(direct.abs() < 1e-12, "{direct}");
        assert!((p.y0[1] + 2.0 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn non_minimal_drift_is_absorbed() {
        let fam = Arc::new(diag(1, &["t^2", "1+t"]).unwrap());
        let traj = solve_harmonic(&fam, 0.5, 1.0, &SolveOptions::default()).unwrap();
        let times: Vec<f64> = (1..=32).map(|i| i as f64 / 32.0).collect();
        let sol = recover_harmonic(&fam, &traj, &times).unwrap();
        assert!(sol.max_residual < 1e-8, "{}", sol.max_residual);
        assert!((traj.y_handoff[0] - traj.eval(traj.handoff)[0]).abs() == 0.0);
    }

    #[test]
    fn flat_biharmonic_family() {
        let fam = Arc::new(diag(2, &["t^2", "t^2"]).unwrap());
        let traj = solve_biharmonic(&fam, 0.0, 10.0, 1.0, &SolveOptions::default()).unwrap();
        let sol = recover_biharmonic(&fam, &traj, &[0.5, 1.0]).unwrap();
        assert!((sol.samples[1].r - 1.0).abs() < 1e-12);
        assert!((sol.samples[1].r_dot - 3.0).abs() < 1e-12);
        assert_eq!(sol.r_ddot0, 0.0);
        assert!((sol.r_dddot0 - 6.0).abs() < 1e-14);
    }

    #[test]
    fn block_family_matches_diagonal() {
        let spec = MetricSpec {
            dim_p: 1,
            dim_m: 1,
            form: MetricForm::Block {
                a0: DMatrix::from_element(1, 1, 2.0),
                a1: DMatrix::zeros(1, 1),
                c0: DMatrix::zeros(1, 1),
                b: vec![vec![parse("1").unwrap()]],
                a: vec![vec![parse("1").unwrap()]],
                c: vec![vec![parse("0").unwrap()]],
            },
            conformal: None,
            t_validate: 1.0,
            t_switch: DEFAULT_T_SWITCH,
        };
        let block = build_metric_family(&spec).unwrap();
        let d = diag(1, &["t^2 + t^4", "2 + t^2"]).unwrap();
        for &t in &[0.003, 0.3, 0.9] {
            assert!((block.trace_drift(t).unwrap() - d.trace_drift(t).unwrap()).abs() < 1e-12);
            assert!((block.trace_potential(t, 0.5 * t).unwrap() - d.trace_potential(t, 0.5 * t).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn schur_identity() {
        let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.5, 0.2, 0.1, 0.2, 1.0]);
        assert!((schur_determinant(&m, 1).unwrap() - m.determinant()).abs() < 1e-14);
    }
}
