//! Multivariate truncated Taylor polynomials ("jets") in a fixed number of
//! variables, truncated at a total degree.
//!
//! Used where individual mixed monomial coefficients matter, e.g. deciding
//! whether the higher-order part of a vector field carries an explicit
//! factor of the singular variable.

use std::collections::HashMap;
use std::sync::Arc;

use crate::scalar::{EvalError, Func, Scalar};
use crate::series::Series;

/// Monomial basis of all exponent vectors with total degree ≤ `order`.
#[derive(Debug)]
pub struct JetSpace {
    nvars: usize,
    order: usize,
    monomials: Vec<Vec<u32>>,
    index: HashMap<Vec<u32>, usize>,
}

impl JetSpace {
    pub fn new(nvars: usize, order: usize) -> Arc<JetSpace> {
        let mut monomials = Vec::new();
        for deg in 0..=order {
            let mut cur = vec![0u32; nvars];
            enumerate(&mut monomials, &mut cur, 0, deg as u32);
        }
        let index = monomials.iter().enumerate().map(|(i, m)| (m.clone(), i)).collect();
        Arc::new(JetSpace { nvars, order, monomials, index })
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn len(&self) -> usize {
        self.monomials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.monomials.is_empty()
    }

    pub fn monomial(&self, i: usize) -> &[u32] {
        &self.monomials[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.monomials[i].iter().sum::<u32>() as usize
    }

    pub fn index_of(&self, exps: &[u32]) -> Option<usize> {
        self.index.get(exps).copied()
    }
}

fn enumerate(out: &mut Vec<Vec<u32>>, cur: &mut Vec<u32>, var: usize, remaining: u32) {
    if var + 1 >= cur.len() {
        if let Some(last) = cur.len().checked_sub(1) {
            cur[last] = remaining;
            out.push(cur.clone());
            cur[last] = 0;
        } else if remaining == 0 {
            out.push(Vec::new());
        }
        return;
    }
    for k in (0..=remaining).rev() {
        cur[var] = k;
        enumerate(out, cur, var + 1, remaining - k);
    }
    cur[var] = 0;
}

#[derive(Debug, Clone)]
pub struct Jet {
    space: Arc<JetSpace>,
    coeffs: Vec<f64>,
}

impl Jet {
    pub fn constant(space: &Arc<JetSpace>, c: f64) -> Jet {
        let mut coeffs = vec![0.0; space.len()];
        coeffs[0] = c;
        Jet { space: space.clone(), coeffs }
    }

    /// The jet of `x_var` expanded around `at`.
    pub fn variable(space: &Arc<JetSpace>, var: usize, at: f64) -> Jet {
        let mut j = Jet::constant(space, at);
        if space.order >= 1 {
            let mut e = vec![0u32; space.nvars];
            e[var] = 1;
            let i = space.index_of(&e).expect("degree-one monomial");
            j.coeffs[i] = 1.0;
        }
        j
    }

    pub fn space(&self) -> &Arc<JetSpace> {
        &self.space
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeff(&self, exps: &[u32]) -> f64 {
        self.space.index_of(exps).map_or(0.0, |i| self.coeffs[i])
    }

    fn same_space(&self, o: &Jet) -> Result<(), EvalError> {
        if Arc::ptr_eq(&self.space, &o.space)
            || (self.space.nvars == o.space.nvars && self.space.order == o.space.order)
        {
            Ok(())
        } else {
            Err(EvalError::ExpansionMismatch(self.space.order as f64, o.space.order as f64))
        }
    }

    fn zip(&self, o: &Jet, f: impl Fn(f64, f64) -> f64) -> Result<Jet, EvalError> {
        self.same_space(o)?;
        let coeffs = self.coeffs.iter().zip(&o.coeffs).map(|(&a, &b)| f(a, b)).collect();
        Ok(Jet { space: self.space.clone(), coeffs })
    }

    fn product(&self, o: &Jet) -> Result<Jet, EvalError> {
        self.same_space(o)?;
        let sp = &self.space;
        let mut out = vec![0.0; sp.len()];
        let mut e = vec![0u32; sp.nvars];
        for (i, &a) in self.coeffs.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let di = sp.degree(i);
            for (j, &b) in o.coeffs.iter().enumerate() {
                if b == 0.0 || di + sp.degree(j) > sp.order {
                    continue;
                }
                for (k, slot) in e.iter_mut().enumerate() {
                    *slot = sp.monomials[i][k] + sp.monomials[j][k];
                }
                out[sp.index[&e]] += a * b;
            }
        }
        Ok(Jet { space: sp.clone(), coeffs: out })
    }

    /// `Σ φ_k δ^k` with `δ = self − self(0)` and `φ` the univariate Taylor
    /// coefficients of the outer function at the constant term.
    fn compose_univariate(&self, phi: &Series) -> Result<Jet, EvalError> {
        let mut delta = self.clone();
        delta.coeffs[0] = 0.0;
        let n = self.space.order;
        let mut acc = Jet::constant(&self.space, phi.coeff(n));
        for k in (0..n).rev() {
            acc = acc.product(&delta)?;
            acc.coeffs[0] += phi.coeff(k);
        }
        Ok(acc)
    }

    fn outer_series(&self, f: impl Fn(&Series) -> Result<Series, EvalError>) -> Result<Series, EvalError> {
        f(&Series::variable(self.space.order, self.coeffs[0]))
    }
}

impl Scalar for Jet {
    type Ctx = Arc<JetSpace>;

    fn constant(ctx: &Arc<JetSpace>, c: f64) -> Self {
        Jet::constant(ctx, c)
    }
    fn add(&self, o: &Self) -> Result<Self, EvalError> {
        self.zip(o, |a, b| a + b)
    }
    fn sub(&self, o: &Self) -> Result<Self, EvalError> {
        self.zip(o, |a, b| a - b)
    }
    fn mul(&self, o: &Self) -> Result<Self, EvalError> {
        self.product(o)
    }
    fn div(&self, o: &Self) -> Result<Self, EvalError> {
        if o.coeffs[0] == 0.0 {
            return Err(EvalError::NonAnalytic("division by a jet vanishing at the expansion point".into()));
        }
        let phi = o.outer_series(|s| s.reciprocal())?;
        self.product(&o.compose_univariate(&phi)?)
    }
    fn neg(&self) -> Self {
        Jet { space: self.space.clone(), coeffs: self.coeffs.iter().map(|c| -c).collect() }
    }
    fn powi(&self, n: i64) -> Result<Self, EvalError> {
        if n < 0 && self.coeffs[0] == 0.0 {
            return Err(EvalError::NonAnalytic("negative power of a jet vanishing at the expansion point".into()));
        }
        let phi = self.outer_series(|s| s.powi(n))?;
        self.compose_univariate(&phi)
    }
    fn func(&self, f: Func) -> Result<Self, EvalError> {
        let phi = self.outer_series(|s| s.apply(f))?;
        self.compose_univariate(&phi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::parse_with;

    #[test]
    fn basis_size() {
        // C(n + K, K)
        assert_eq!(JetSpace::new(2, 3).len(), 10);
        assert_eq!(JetSpace::new(3, 4).len(), 35);
        assert_eq!(JetSpace::new(1, 5).len(), 6);
    }

    #[test]
    fn mixed_coefficients_of_product() {
        let sp = JetSpace::new(2, 4);
        let x = Jet::variable(&sp, 0, 0.0);
        let y = Jet::variable(&sp, 1, 0.0);
        let p = x.add(&y).unwrap().powi(3).unwrap();
        assert_eq!(p.coeff(&[2, 1]), 3.0);
        assert_eq!(p.coeff(&[0, 3]), 1.0);
        assert_eq!(p.coeff(&[1, 1]), 0.0);
    }

    #[test]
    fn exp_of_sum_factorizes() {
        let sp = JetSpace::new(2, 5);
        let e = parse_with("exp(x + y)", &["x", "y"]).unwrap();
        let j = e
            .eval_with(&[Jet::variable(&sp, 0, 0.0), Jet::variable(&sp, 1, 0.0)], &sp)
            .unwrap();
        // coefficient of x^a y^b is 1/(a! b!)
        assert!((j.coeff(&[2, 3]) - 1.0 / 12.0).abs() < 1e-15);
        assert!((j.coeff(&[1, 1]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn division_around_nonzero_point() {
        let sp = JetSpace::new(1, 4);
        let x = Jet::variable(&sp, 0, 2.0);
        let one = Jet::constant(&sp, 1.0);
        let r = one.div(&x).unwrap();
        // 1/(2+d) = 1/2 - d/4 + d²/8 - ...
        assert!((r.coeff(&[2]) - 0.125).abs() < 1e-16);
    }
}
