//! Dormand–Prince 5(4) with PI step-size control and continuous output.
//!
//! The integrator is generic over the component type so the same code drives
//! real systems (singular IVP continuation) and complex systems (fundamental
//! solutions, monodromy along circles).

use std::ops::{Add, Mul, Sub};

use num_complex::Complex64;
use thiserror::Error;

/// Component type of an ODE state vector.
pub trait OdeValue:
    Copy + Send + Sync + Default + 'static + Add<Output = Self> + Sub<Output = Self> + Mul<f64, Output = Self>
{
    fn modulus(self) -> f64;
}

impl OdeValue for f64 {
    fn modulus(self) -> f64 {
        self.abs()
    }
}

impl OdeValue for Complex64 {
    fn modulus(self) -> f64 {
        self.norm()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OdeError {
    #[error("step size underflow at t = {t}")]
    StepUnderflow { t: f64 },
    #[error("step limit of {max} exceeded at t = {t}")]
    TooManySteps { t: f64, max: usize },
    #[error("right-hand side failed at t = {t}: {message}")]
    Rhs { t: f64, message: String },
}

impl OdeError {
    /// Last time the integration reached successfully.
    pub fn last_time(&self) -> f64 {
        match self {
            OdeError::StepUnderflow { t } | OdeError::TooManySteps { t, .. } | OdeError::Rhs { t, .. } => *t,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Options {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: Option<f64>,
    pub h_max: f64,
    pub max_steps: usize,
    /// When set, accepted steps must also keep the interpolant defect
    /// `|ẏ_dense − f(t, y_dense)| ≤ defect_tol·(1 + |y|)` at interior points.
    pub defect_tol: Option<f64>,
}

impl Options {
    /// Mixed absolute/relative control with `atol = rtol = tol`.
    pub fn with_tol(tol: f64) -> Self {
        Options { rtol: tol, atol: tol, ..Default::default() }
    }
}

impl Default for Options {
    fn default() -> Self {
        Options { rtol: 1e-10, atol: 1e-10, h_init: None, h_max: f64::INFINITY, max_steps: 200_000, defect_tol: None }
    }
}

// Dormand–Prince tableau.
const C2: f64 = 0.2;
const C3: f64 = 0.3;
const C4: f64 = 0.8;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 0.2;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
// Continuous extension (quartic in θ).
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

const SAFETY: f64 = 0.9;
const ALPHA: f64 = 0.7 / 5.0;
const BETA: f64 = 0.4 / 5.0;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 5.0;

/// One accepted step with its continuous-extension coefficients.
#[derive(Debug, Clone)]
pub struct DenseStep<T> {
    pub t: f64,
    pub h: f64,
    rcont: [Vec<T>; 5],
}

impl<T: OdeValue> DenseStep<T> {
    fn theta(&self, t: f64) -> f64 {
        (t - self.t) / self.h
    }

    pub fn eval(&self, t: f64) -> Vec<T> {
        let th = self.theta(t);
        let th1 = 1.0 - th;
        let [c1, c2, c3, c4, c5] = &self.rcont;
        (0..c1.len())
            .map(|i| c1[i] + (c2[i] + (c3[i] + (c4[i] + c5[i] * th1) * th) * th1) * th)
            .collect()
    }

    /// Time derivative of the continuous extension.
    pub fn eval_derivative(&self, t: f64) -> Vec<T> {
        let th = self.theta(t);
        let th1 = 1.0 - th;
        let [_, c2, c3, c4, c5] = &self.rcont;
        (0..c2.len())
            .map(|i| {
                let g = c4[i] + c5[i] * th1;
                let dg = c5[i] * -1.0;
                let f = c3[i] + g * th;
                let df = g + dg * th;
                let e = c2[i] + f * th1;
                let de = df * th1 - f;
                (e + de * th) * (1.0 / self.h)
            })
            .collect()
    }

    pub fn start_state(&self) -> &[T] {
        &self.rcont[0]
    }
}

/// Result of an integration: step-wise continuous output on `[t_start, t_end]`.
#[derive(Debug, Clone)]
pub struct DenseSolution<T> {
    pub steps: Vec<DenseStep<T>>,
    pub t_start: f64,
    pub t_end: f64,
    pub y_end: Vec<T>,
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

impl<T: OdeValue> DenseSolution<T> {
    fn step_index(&self, t: f64) -> usize {
        match self.steps.binary_search_by(|s| s.t.partial_cmp(&t).unwrap_or(std::cmp::Ordering::Less)) {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) => i - 1,
        }
    }

    /// Interpolated state; `t` is clamped to the integration interval.
    pub fn eval(&self, t: f64) -> Vec<T> {
        if self.steps.is_empty() || t >= self.t_end {
            return self.y_end.clone();
        }
        let t = t.max(self.t_start);
        self.steps[self.step_index(t)].eval(t)
    }

    pub fn eval_derivative(&self, t: f64) -> Vec<T> {
        if self.steps.is_empty() {
            return vec![T::default(); self.y_end.len()];
        }
        let t = t.clamp(self.t_start, self.t_end);
        let i = if t >= self.t_end { self.steps.len() - 1 } else { self.step_index(t) };
        self.steps[i].eval_derivative(t)
    }

    /// Step boundaries `t_start = τ₀ < τ₁ < … < t_end`.
    pub fn mesh(&self) -> Vec<f64> {
        let mut m: Vec<f64> = self.steps.iter().map(|s| s.t).collect();
        m.push(self.t_end);
        m
    }
}

fn wrms<T: OdeValue>(v: &[T], y0: &[T], y1: &[T], opts: &Options) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let s: f64 = v
        .iter()
        .zip(y0.iter().zip(y1))
        .map(|(e, (a, b))| {
            let sc = opts.atol + opts.rtol * a.modulus().max(b.modulus());
            (e.modulus() / sc).powi(2)
        })
        .sum();
    (s / v.len() as f64).sqrt()
}

fn axpy<T: OdeValue>(y: &[T], h: f64, terms: &[(f64, &[T])]) -> Vec<T> {
    (0..y.len())
        .map(|i| {
            let mut acc = T::default();
            for (c, k) in terms {
                acc = acc + k[i] * *c;
            }
            y[i] + acc * h
        })
        .collect()
}

/// Integrates `y' = f(t, y)` forward from `t0` to `t1 > t0`.
///
/// `f` writes the derivative into its output slice.
pub fn integrate<T, F>(mut f: F, t0: f64, y0: &[T], t1: f64, opts: &Options) -> Result<DenseSolution<T>, OdeError>
where
    T: OdeValue,
    F: FnMut(f64, &[T], &mut [T]) -> Result<(), String>,
{
    assert!(t1 > t0, "integration interval must be increasing");
    let n = y0.len();
    let mut evals = 0usize;
    let mut rhs = |t: f64, y: &[T], evals: &mut usize| -> Result<Vec<T>, OdeError> {
        let mut out = vec![T::default(); n];
        *evals += 1;
        f(t, y, &mut out).map_err(|message| OdeError::Rhs { t, message })?;
        if out.iter().any(|v| !v.modulus().is_finite()) {
            return Err(OdeError::Rhs { t, message: "non-finite derivative".into() });
        }
        Ok(out)
    };

    let mut t = t0;
    let mut y = y0.to_vec();
    let mut k1 = rhs(t, &y, &mut evals)?;

    let span = t1 - t0;
    let mut h = match opts.h_init {
        Some(h) => h,
        None => {
            let d0 = wrms(&y, &y, &y, opts);
            let d1 = wrms(&k1, &y, &y, opts);
            let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
            let h0 = h0.min(span);
            let y1 = axpy(&y, h0, &[(1.0, &k1)]);
            let f1 = rhs(t + h0, &y1, &mut evals)?;
            let diff: Vec<T> = f1.iter().zip(&k1).map(|(a, b)| *a - *b).collect();
            let d2 = wrms(&diff, &y, &y, opts) / h0;
            let m = d1.max(d2);
            let h1 = if m <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / m).powf(0.2) };
            (100.0 * h0).min(h1)
        }
    }
    .min(opts.h_max)
    .min(span);

    let mut steps = Vec::new();
    let (mut accepted, mut rejected) = (0usize, 0usize);
    let mut err_prev = 1e-4f64;
    let mut last_rejected = false;

    loop {
        if accepted + rejected >= opts.max_steps {
            return Err(OdeError::TooManySteps { t, max: opts.max_steps });
        }
        let remaining = t1 - t;
        let last = h >= remaining * (1.0 - 1e-12);
        if last {
            h = remaining;
        }
        if h.abs() <= 16.0 * f64::EPSILON * t.abs().max(span) {
            return Err(OdeError::StepUnderflow { t });
        }

        let y2 = axpy(&y, h, &[(A21, &k1)]);
        let k2 = rhs(t + C2 * h, &y2, &mut evals)?;
        let y3 = axpy(&y, h, &[(A31, &k1), (A32, &k2)]);
        let k3 = rhs(t + C3 * h, &y3, &mut evals)?;
        let y4 = axpy(&y, h, &[(A41, &k1), (A42, &k2), (A43, &k3)]);
        let k4 = rhs(t + C4 * h, &y4, &mut evals)?;
        let y5 = axpy(&y, h, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]);
        let k5 = rhs(t + C5 * h, &y5, &mut evals)?;
        let y6 = axpy(&y, h, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]);
        let t_new = if last { t1 } else { t + h };
        let k6 = rhs(t_new, &y6, &mut evals)?;
        let y_new = axpy(&y, h, &[(A71, &k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)]);
        let k7 = rhs(t_new, &y_new, &mut evals)?;

        let err_vec = axpy(
            &vec![T::default(); n],
            h,
            &[(E1, &k1), (E3, &k3), (E4, &k4), (E5, &k5), (E6, &k6), (E7, &k7)],
        );
        let err = wrms(&err_vec, &y, &y_new, opts);

        if err <= 1.0 {
            let ydiff: Vec<T> = y_new.iter().zip(&y).map(|(a, b)| *a - *b).collect();
            let bspl: Vec<T> = (0..n).map(|i| k1[i] * h - ydiff[i]).collect();
            let r4: Vec<T> = (0..n).map(|i| ydiff[i] - k7[i] * h - bspl[i]).collect();
            let r5 = axpy(
                &vec![T::default(); n],
                h,
                &[(D1, &k1), (D3, &k3), (D4, &k4), (D5, &k5), (D6, &k6), (D7, &k7)],
            );
            let step = DenseStep { t, h, rcont: [y.clone(), ydiff, bspl, r4, r5] };
            let mut defect_fac = FAC_MAX;
            if let Some(dtol) = opts.defect_tol {
                let mut d = 0.0f64;
                for theta in [0.25, 0.5, 0.75] {
                    let tt = t + theta * h;
                    let yi = step.eval(tt);
                    let fi = rhs(tt, &yi, &mut evals)?;
                    for ((a, b), yv) in step.eval_derivative(tt).iter().zip(&fi).zip(&yi) {
                        d = d.max((*a - *b).modulus() / (dtol * (1.0 + yv.modulus())));
                    }
                }
                if d > 1.0 {
                    rejected += 1;
                    last_rejected = true;
                    h *= (SAFETY * d.powf(-0.25)).max(FAC_MIN);
                    continue;
                }
                if d > 0.0 {
                    defect_fac = SAFETY * d.powf(-0.25);
                }
            }
            steps.push(step);
            accepted += 1;
            t = t_new;
            y = y_new;
            k1 = k7;
            if last {
                return Ok(DenseSolution {
                    steps,
                    t_start: t0,
                    t_end: t1,
                    y_end: y,
                    accepted,
                    rejected,
                    evaluations: evals,
                });
            }
            let mut fac = if err == 0.0 {
                FAC_MAX
            } else {
                (SAFETY * err.powf(-ALPHA) * err_prev.powf(BETA)).clamp(FAC_MIN, FAC_MAX)
            };
            fac = fac.min(defect_fac.max(FAC_MIN));
            if last_rejected {
                fac = fac.min(1.0);
            }
            err_prev = err.max(1e-4);
            last_rejected = false;
            h = (h * fac).min(opts.h_max);
        } else {
            rejected += 1;
            last_rejected = true;
            let fac = (SAFETY * err.powf(-0.2)).max(FAC_MIN);
            h *= fac;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exponential_decay() {
        let sol = integrate(
            |_, y: &[f64], dy: &mut [f64]| {
                dy[0] = -y[0];
                Ok(())
            },
            0.0,
            &[1.0],
            2.0,
            &Options::with_tol(1e-12),
        )
        .unwrap();
        assert!((sol.y_end[0] - (-2.0f64).exp()).abs() < 1e-11);
    }

    #[test]
    fn dense_output_tracks_solution() {
        let sol = integrate(
            |_, y: &[f64], dy: &mut [f64]| {
                dy[0] = y[1];
                dy[1] = -y[0];
                Ok(())
            },
            0.0,
            &[0.0, 1.0],
            6.0,
            &Options::with_tol(1e-10),
        )
        .unwrap();
        for i in 0..=60 {
            let t = 0.1 * i as f64;
            let y = sol.eval(t);
            assert!((y[0] - t.sin()).abs() < 5e-9, "t={t}");
            let dy = sol.eval_derivative(t);
            assert!((dy[0] - t.cos()).abs() < 1e-7, "t={t}: {}", dy[0] - t.cos());
        }
    }

    #[test]
    fn complex_rotation() {
        let i = Complex64::new(0.0, 1.0);
        let sol = integrate(
            |_, y: &[Complex64], dy: &mut [Complex64]| {
                dy[0] = y[0] * i;
                Ok(())
            },
            0.0,
            &[Complex64::new(1.0, 0.0)],
            std::f64::consts::PI,
            &Options::with_tol(1e-12),
        )
        .unwrap();
        assert!((sol.y_end[0] + 1.0).norm() < 1e-10);
    }

    #[test]
    fn blow_up_reports_last_time() {
        let err = integrate(
            |_, y: &[f64], dy: &mut [f64]| {
                dy[0] = y[0] * y[0];
                Ok(())
            },
            0.0,
            &[1.0],
            2.0,
            &Options::with_tol(1e-10),
        )
        .unwrap_err();
        assert!(err.last_time() < 1.0 && err.last_time() > 0.99, "{err}");
    }
}
