//! Dense complex linear algebra helpers: matrix exponential, characteristic
//! and minimal polynomials.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Maximum absolute column sum.
pub fn norm1(m: &CMatrix) -> f64 {
    m.column_iter().map(|c| c.iter().map(|z| z.norm()).sum::<f64>()).fold(0.0, f64::max)
}

pub fn max_abs(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring with a Taylor kernel.
///
/// The matrix is scaled by `2^-s` until its 1-norm is below 0.5.
pub fn expm(a: &CMatrix) -> CMatrix {
    let n = a.nrows();
    let nrm = norm1(a);
    let mut s = 0i32;
    while nrm / 2f64.powi(s) >= 0.5 {
        s += 1;
    }
    let scaled = a * Complex64::new(2f64.powi(-s), 0.0);
    let mut sum = CMatrix::identity(n, n);
    let mut term = CMatrix::identity(n, n);
    for k in 1..40 {
        term = &term * &scaled * Complex64::new(1.0 / k as f64, 0.0);
        sum += &term;
        if max_abs(&term) <= f64::EPSILON * 1e-2 * max_abs(&sum) {
            break;
        }
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

/// Coefficients of `det(xI − M)`, highest degree first (leading 1).
///
/// Computed from the Hessenberg form with the standard three-term expansion.
pub fn charpoly(m: &CMatrix) -> Vec<Complex64> {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "charpoly of a non-square matrix");
    if n == 0 {
        return vec![ONE];
    }
    let h = m.clone().hessenberg().h();
    // p[k] holds det(xI − H[..k, ..k]), lowest degree first.
    let mut p: Vec<Vec<Complex64>> = vec![vec![ONE]];
    for k in 1..=n {
        let prev = &p[k - 1];
        let mut pk = vec![ZERO; k + 1];
        for (d, &c) in prev.iter().enumerate() {
            pk[d + 1] += c;
            pk[d] -= h[(k - 1, k - 1)] * c;
        }
        let mut prod = ONE;
        for i in (1..k).rev() {
            prod *= h[(i, i - 1)];
            let f = prod * h[(i - 1, k - 1)];
            for (d, &c) in p[i - 1].iter().enumerate() {
                pk[d] -= f * c;
            }
        }
        p.push(pk);
    }
    let mut out = p.pop().unwrap();
    out.reverse();
    out
}

/// Faddeev–LeVerrier recursion; highest degree first.
pub fn charpoly_faddeev(m: &CMatrix) -> Vec<Complex64> {
    let n = m.nrows();
    let mut coeffs = vec![ONE];
    let mut mk = CMatrix::zeros(n, n);
    let id = CMatrix::identity(n, n);
    for k in 1..=n {
        mk = m * (&mk + &id * coeffs[k - 1]);
        let c = -mk.trace() / k as f64;
        coeffs.push(c);
    }
    coeffs
}

/// `p(M)` for coefficients given highest degree first.
pub fn polyval_matrix(coeffs: &[Complex64], m: &CMatrix) -> CMatrix {
    let n = m.nrows();
    let mut acc = CMatrix::zeros(n, n);
    for &c in coeffs {
        acc = &acc * m + CMatrix::identity(n, n) * c;
    }
    acc
}

/// Numerical minimal polynomial (monic, highest degree first).
///
/// Finds the smallest `k` for which `M^k` lies in the span of
/// `I, M, …, M^{k−1}` up to the relative tolerance `rel_tol`.
pub fn minimal_polynomial(m: &CMatrix, rel_tol: f64) -> Vec<Complex64> {
    let n = m.nrows();
    let scale = norm1(m).max(1.0);
    let ms = m / Complex64::new(scale, 0.0);
    let mut powers = vec![CMatrix::identity(n, n)];
    for k in 1..=n {
        let next = &powers[k - 1] * &ms;
        let basis = CMatrix::from_fn(n * n, k, |r, c| powers[c][r]);
        let target = CVector::from_iterator(n * n, next.iter().copied());
        let svd = basis.clone().svd(true, true);
        let x = svd.solve(&target, 1e-13).expect("svd solve");
        let resid = (&basis * &x - &target).norm();
        powers.push(next);
        if resid <= rel_tol * target.norm().max(1e-300) || k == n {
            // (M/s)^k = Σ x_j (M/s)^j  ⇒  M^k − Σ x_j s^{k−j} M^j = 0
            let mut coeffs = vec![ONE];
            for j in (0..k).rev() {
                coeffs.push(-x[j] * scale.powi((k - j) as i32));
            }
            return coeffs;
        }
    }
    unreachable!()
}

/// Condition number estimate in the 2-norm from singular values.
pub fn condition(m: &CMatrix) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Smallest singular value of a real matrix.
pub fn sigma_min(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    m.clone().singular_values().iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Largest singular value of a real matrix.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().singular_values().iter().cloned().fold(0.0, f64::max)
}

pub fn complex_eigenvalues(m: &DMatrix<f64>) -> Vec<Complex64> {
    if m.is_empty() {
        return Vec::new();
    }
    m.complex_eigenvalues().iter().copied().collect()
}
