//! Linear systems with a regular singular point at the origin,
//!
//! ```text
//! dY/ds + A(s)·Y/s = h(s),
//! ```
//!
//! handled on the logarithmic cover `s = e^z`, where they become the regular
//! system `dŶ/dz + Â(z)Ŷ = e^z ĥ(z)`.

use std::f64::consts::PI;

use num_complex::Complex64;
use thiserror::Error;

use crate::expr::Expr;
use crate::linalg::{self, CMatrix, CVector};
use crate::ode::{self, OdeError, Options};
use crate::scalar::EvalError;

pub const MAX_DIM: usize = 64;

const I: Complex64 = Complex64::new(0.0, 1.0);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinearError {
    #[error("dimension {0} is outside 1..=64")]
    Dimension(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("radius of validity must be positive, got {0}")]
    Radius(f64),
    #[error("entry {what} is not analytic at s = 0: {source}")]
    NotAnalytic { what: String, source: EvalError },
    #[error("path leaves the domain: Re z = {re} but must stay below ln(rho) = {bound}")]
    OutOfDomain { re: f64, bound: f64 },
    #[error("sigma = {sigma} must satisfy 0 <= sigma < rho = {rho}")]
    Sigma { sigma: f64, rho: f64 },
    #[error("integration failed: {0}")]
    Integration(#[from] OdeError),
}

/// `dY/ds + A(s)·Y/s = h(s)` with coefficients holomorphic on `|s| < rho`.
///
/// Expressions are in the single variable slot 0 (conventionally `s`).
#[derive(Debug, Clone)]
pub struct LinearRSSystem {
    n: usize,
    a: Vec<Expr>,
    h: Option<Vec<Expr>>,
    rho: f64,
}

#[derive(Debug, Clone)]
pub struct FundamentalSolution {
    pub u: CMatrix,
    /// 2-norm condition number of `u`.
    pub condition: f64,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct MonodromyResult {
    pub sigma: f64,
    pub m: CMatrix,
    /// Coefficients of `det(xI − M)`, highest degree first.
    pub charpoly: Vec<Complex64>,
    pub path_steps: usize,
    /// `|det M − exp(−2πi·tr A(0))|`, which vanishes for the exact monodromy.
    pub est_error: f64,
    /// Largest entry of `charpoly(M)` evaluated at `M`.
    pub charpoly_residual: f64,
}

impl LinearRSSystem {
    /// `a` is given row by row; `h` may be omitted for the homogeneous system.
    pub fn new(a: Vec<Vec<Expr>>, h: Option<Vec<Expr>>, rho: f64) -> Result<Self, LinearError> {
        let n = a.len();
        if n == 0 || n > MAX_DIM {
            return Err(LinearError::Dimension(n));
        }
        if let Some(row) = a.iter().find(|r| r.len() != n) {
            return Err(LinearError::Shape(format!("A has a row of length {} but {} rows", row.len(), n)));
        }
        if let Some(h) = &h {
            if h.len() != n {
                return Err(LinearError::Shape(format!("h has length {} but A is {n}x{n}", h.len())));
            }
        }
        if rho.is_nan() || rho <= 0.0 {
            return Err(LinearError::Radius(rho));
        }
        let a: Vec<Expr> = a.into_iter().flatten().collect();
        for (k, e) in a.iter().enumerate() {
            e.taylor_complex(Complex64::new(0.0, 0.0), 1).map_err(|source| LinearError::NotAnalytic {
                what: format!("A[{}][{}]", k / n, k % n),
                source,
            })?;
        }
        if let Some(h) = &h {
            for (k, e) in h.iter().enumerate() {
                e.taylor_complex(Complex64::new(0.0, 0.0), 1)
                    .map_err(|source| LinearError::NotAnalytic { what: format!("h[{k}]"), source })?;
            }
        }
        Ok(LinearRSSystem { n, a, h, rho })
    }

    /// Adapter for the Euler form `dY/ds = A₀(s)·Y/s`, stored as `A := −A₀`.
    pub fn from_euler_form(a0: Vec<Vec<Expr>>, rho: f64) -> Result<Self, LinearError> {
        let a = a0
            .into_iter()
            .map(|row| row.into_iter().map(|e| Expr::num(0.0).minus(e)).collect())
            .collect();
        LinearRSSystem::new(a, None, rho)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn has_inhomogeneity(&self) -> bool {
        self.h.is_some()
    }

    /// `A(s)` at a complex point.
    pub fn a_at(&self, s: Complex64) -> Result<CMatrix, String> {
        let n = self.n;
        let mut m = CMatrix::zeros(n, n);
        for (k, e) in self.a.iter().enumerate() {
            m[(k / n, k % n)] = eval(e, s)?;
        }
        Ok(m)
    }

    pub fn h_at(&self, s: Complex64) -> Result<CVector, String> {
        let mut v = CVector::zeros(self.n);
        if let Some(h) = &self.h {
            for (k, e) in h.iter().enumerate() {
                v[k] = eval(e, s)?;
            }
        }
        Ok(v)
    }

    fn check_segment(&self, z0: Complex64, z1: Complex64) -> Result<(), LinearError> {
        let bound = self.rho.ln();
        let re = z0.re.max(z1.re);
        if re >= bound || !re.is_finite() {
            return Err(LinearError::OutOfDomain { re, bound });
        }
        Ok(())
    }
}

fn eval(e: &Expr, s: Complex64) -> Result<Complex64, String> {
    let v = e.eval_complex(s).map_err(|err| err.to_string())?;
    if v.re.is_finite() && v.im.is_finite() {
        Ok(v)
    } else {
        Err(format!("non-finite coefficient at s = {s}"))
    }
}

fn unpack(y: &[Complex64], n: usize, offset: usize) -> CMatrix {
    CMatrix::from_column_slice(n, n, &y[offset..offset + n * n])
}

/// `Û(z1)` for `dÛ/dz + A(e^z)Û = 0`, `Û(z0) = I`, along the straight segment.
pub fn fundamental_solution(
    sys: &LinearRSSystem,
    z0: Complex64,
    z1: Complex64,
    tol: f64,
) -> Result<FundamentalSolution, LinearError> {
    sys.check_segment(z0, z1)?;
    let n = sys.n;
    let id = CMatrix::identity(n, n);
    if z0 == z1 {
        return Ok(FundamentalSolution { u: id, condition: 1.0, steps: 0 });
    }
    let dz = z1 - z0;
    let sol = ode::integrate(
        |tau, y: &[Complex64], dy: &mut [Complex64]| {
            let z = z0 + dz * tau;
            let a = sys.a_at(z.exp())?;
            let u = unpack(y, n, 0);
            let du = -(a * u) * dz;
            dy.copy_from_slice(du.as_slice());
            Ok(())
        },
        0.0,
        id.as_slice(),
        1.0,
        &Options::with_tol(tol),
    )?;
    let u = unpack(&sol.y_end, n, 0);
    Ok(FundamentalSolution { condition: linalg::condition(&u), u, steps: sol.accepted })
}

/// Monodromy `M(σ) = U(σ, 2π)` of `dU/dθ + i·A(σe^{iθ})·U = 0`, `U(σ, 0) = I`.
pub fn monodromy_at(sys: &LinearRSSystem, sigma: f64, tol: f64) -> Result<MonodromyResult, LinearError> {
    if !(sigma >= 0.0 && sigma < sys.rho) {
        return Err(LinearError::Sigma { sigma, rho: sys.rho });
    }
    let n = sys.n;
    let a0 = sys.a_at(Complex64::new(0.0, 0.0)).map_err(|m| LinearError::Integration(OdeError::Rhs { t: 0.0, message: m }))?;
    let (m, steps) = if sigma == 0.0 {
        (monodromy_generator(&a0), 0)
    } else {
        let sol = ode::integrate(
            |theta, y: &[Complex64], dy: &mut [Complex64]| {
                let s = Complex64::from_polar(sigma, theta);
                let a = sys.a_at(s)?;
                let u = unpack(y, n, 0);
                let du = -(a * u) * I;
                dy.copy_from_slice(du.as_slice());
                Ok(())
            },
            0.0,
            CMatrix::identity(n, n).as_slice(),
            2.0 * PI,
            &Options::with_tol(tol),
        )?;
        (unpack(&sol.y_end, n, 0), sol.accepted)
    };
    let expected_det = (-2.0 * PI * I * a0.trace()).exp();
    let est_error = (m.determinant() - expected_det).norm();
    let charpoly = conjugacy_invariants(&m);
    let charpoly_residual = linalg::max_abs(&linalg::polyval_matrix(&charpoly, &m));
    Ok(MonodromyResult { sigma, m, charpoly, path_steps: steps, est_error, charpoly_residual })
}

/// `exp(−2πi·A₀)`, the monodromy at the puncture.
pub fn monodromy_generator(a0: &CMatrix) -> CMatrix {
    linalg::expm(&(a0 * (-2.0 * PI * I)))
}

/// Characteristic polynomial of `M`, highest degree first.
pub fn conjugacy_invariants(m: &CMatrix) -> Vec<Complex64> {
    linalg::charpoly(m)
}

/// Solution of `dŶ/dz + Â(z)Ŷ = e^z ĥ(z)`, `Ŷ(z0) = Y0`, at `z1`.
///
/// Variation of constants with the quadrature carried along:
/// the state holds `Û`, `Û⁻¹` and `W = ∫ e^ξ Û(ξ)⁻¹ ĥ(ξ) dξ`, and the result is
/// `Û(z1)·(Y0 + W(z1))`.
pub fn solve_inhomogeneous(
    sys: &LinearRSSystem,
    z0: Complex64,
    y0: &[Complex64],
    z1: Complex64,
    tol: f64,
) -> Result<CVector, LinearError> {
    let n = sys.n;
    if y0.len() != n {
        return Err(LinearError::Shape(format!("Y0 has length {} but the system has dimension {n}", y0.len())));
    }
    sys.check_segment(z0, z1)?;
    let y0 = CVector::from_column_slice(y0);
    if z0 == z1 {
        return Ok(y0);
    }
    let dz = z1 - z0;
    let nn = n * n;
    let mut init = vec![Complex64::new(0.0, 0.0); 2 * nn + n];
    let id = CMatrix::identity(n, n);
    init[..nn].copy_from_slice(id.as_slice());
    init[nn..2 * nn].copy_from_slice(id.as_slice());
    let sol = ode::integrate(
        |tau, y: &[Complex64], dy: &mut [Complex64]| {
            let z = z0 + dz * tau;
            let s = z.exp();
            let a = sys.a_at(s)?;
            let h = sys.h_at(s)?;
            let u = unpack(y, n, 0);
            let uinv = unpack(y, n, nn);
            let du = -(&a * u) * dz;
            let duinv = (&uinv * &a) * dz;
            let dw = (uinv * h) * (s * dz);
            dy[..nn].copy_from_slice(du.as_slice());
            dy[nn..2 * nn].copy_from_slice(duinv.as_slice());
            dy[2 * nn..].copy_from_slice(dw.as_slice());
            Ok(())
        },
        0.0,
        &init,
        1.0,
        &Options::with_tol(tol),
    )?;
    let u = unpack(&sol.y_end, n, 0);
    let w = CVector::from_column_slice(&sol.y_end[2 * nn..]);
    Ok(u * (y0 + w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_with;

    fn sys(a: &[&[&str]], h: Option<&[&str]>, rho: f64) -> LinearRSSystem {
        let p = |s: &&str| parse_with(s, &["s"]).unwrap();
        LinearRSSystem::new(
            a.iter().map(|r| r.iter().map(p).collect()).collect(),
            h.map(|h| h.iter().map(p).collect()),
            rho,
        )
        .unwrap()
    }

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    #[test]
    fn constant_scalar_exponential() {
        let s = sys(&[&["1"]], None, f64::INFINITY);
        let f = fundamental_solution(&s, c(0.0), c(1.0), 1e-12).unwrap();
        assert!((f.u[(0, 0)] - c((-1.0f64).exp())).norm() < 1e-10);
    }

    #[test]
    fn zero_coefficient_gives_identity() {
        let s = sys(&[&["0", "0"], &["0", "0"]], None, f64::INFINITY);
        let f = fundamental_solution(&s, c(0.0), Complex64::new(0.3, 2.0), 1e-10).unwrap();
        assert!((f.u - CMatrix::identity(2, 2)).norm() < 1e-14);
        let m = monodromy_at(&s, 0.5, 1e-10).unwrap();
        assert!((m.m - CMatrix::identity(2, 2)).norm() < 1e-14);
    }

    #[test]
    fn half_integer_monodromy() {
        let s = sys(&[&["1/2"]], None, f64::INFINITY);
        let m = monodromy_at(&s, 0.7, 1e-12).unwrap();
        assert!((m.m[(0, 0)] + 1.0).norm() < 1e-10);
        let m0 = monodromy_at(&s, 0.0, 1e-12).unwrap();
        assert!((m0.m[(0, 0)] + 1.0).norm() < 1e-14);
    }

    #[test]
    fn generator_examples() {
        let g = monodromy_generator(&CMatrix::from_diagonal(&CVector::from_vec(vec![c(0.0), c(1.0)])));
        assert!((g - CMatrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn domain_is_enforced() {
        let s = sys(&[&["1/(1-s)"]], None, 1.0);
        assert!(matches!(
            fundamental_solution(&s, c(-1.0), c(0.1), 1e-8),
            Err(LinearError::OutOfDomain { .. })
        ));
        assert!(matches!(monodromy_at(&s, 1.0, 1e-8), Err(LinearError::Sigma { .. })));
    }

    #[test]
    fn non_analytic_coefficient_rejected() {
        let r = LinearRSSystem::new(vec![vec![parse_with("1/s", &["s"]).unwrap()]], None, 1.0);
        assert!(matches!(r, Err(LinearError::NotAnalytic { .. })));
    }

    #[test]
    fn inhomogeneous_examples() {
        let s = sys(&[&["1"]], Some(&["1"]), f64::INFINITY);
        let y = solve_inhomogeneous(&s, c(0.0), &[c(0.5)], c(2f64.ln()), 1e-12).unwrap();
        assert!((y[0] - 1.0).norm() < 1e-10);
        let s = sys(&[&["0"]], Some(&["1"]), f64::INFINITY);
        let y = solve_inhomogeneous(&s, c(0.0), &[c(0.0)], c(2f64.ln()), 1e-12).unwrap();
        assert!((y[0] - 1.0).norm() < 1e-10);
    }

    #[test]
    fn euler_adapter_flips_sign() {
        let a0 = vec![vec![parse_with("1/2", &["s"]).unwrap()]];
        let s = LinearRSSystem::from_euler_form(a0, f64::INFINITY).unwrap();
        let a = s.a_at(c(0.0)).unwrap();
        assert_eq!(a[(0, 0)], c(-0.5));
    }
}
