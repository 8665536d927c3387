//! EM solver for the ADMM H-subproblem
//!
//! `min_h  -sum_i log f_{r_i}(a_i^T h) + (rho/2) ||h - u||^2`.
//!
//! Rows are whitened by their noise level so every likelihood term has unit
//! variance. Each M-step is the ridge solve `(A^T A + rho I) h = A^T g + rho u`,
//! carried out in measurement space through the push-through identity so only
//! an R x R system is factored, once per subproblem instance.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{dim_check, Error, Result};
use crate::feedback::MeasurementOperator;
use crate::gaussian::cell_moments;
use crate::quantize::Quantizer;

#[derive(Debug, Clone)]
pub struct EmSubproblem {
    /// Whitened operator, R x 2MN.
    a: DMatrix<f64>,
    /// `A A^T`
    gram: DMatrix<f64>,
    /// Cholesky factor of `A A^T + rho I`.
    chol: Cholesky<f64, Dyn>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    rho: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmOutput {
    pub h: DVector<f64>,
    pub iterations: usize,
    /// Subproblem objective before the first and after every M-step.
    pub objective_history: Vec<f64>,
}

impl EmSubproblem {
    pub fn new(indices: &[usize], op: &MeasurementOperator, q: &Quantizer, rho: f64) -> Result<Self> {
        let rows = op.rows();
        dim_check(indices.len() == rows && op.sigmas.len() == rows, || {
            format!("{} indices, {} operator rows, {} sigmas", indices.len(), rows, op.sigmas.len())
        })?;
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(Error::InvalidParameter(format!("rho must be positive, got {rho}")));
        }
        if let Some(s) = op.sigmas.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::InvalidParameter(format!("noise levels must be positive, got {s}")));
        }
        if let Some(r) = indices.iter().find(|&&r| r >= q.num_levels()) {
            return Err(Error::InvalidParameter(format!("index {r} >= Q = {}", q.num_levels())));
        }
        let mut a = op.matrix.clone();
        for (i, mut row) in a.row_iter_mut().enumerate() {
            row /= op.sigmas[i];
        }
        let lo = indices.iter().enumerate().map(|(i, &r)| q.lower_bounds()[r] / op.sigmas[i]).collect();
        let hi = indices.iter().enumerate().map(|(i, &r)| q.upper_bounds()[r] / op.sigmas[i]).collect();
        let gram = &a * a.transpose();
        let mut c = gram.clone();
        for i in 0..rows {
            c[(i, i)] += rho;
        }
        let chol = Cholesky::new(c).ok_or_else(|| Error::Numerical("EM system matrix is not positive definite".into()))?;
        Ok(Self { a, gram, chol, lo, hi, rho })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn dim(&self) -> usize {
        self.a.ncols()
    }

    /// Negative log-likelihood of the whitened measurements `y = A h`.
    fn nll(&self, y: &DVector<f64>) -> f64 {
        y.iter()
            .enumerate()
            .map(|(i, &yi)| -cell_moments(self.lo[i] - yi, self.hi[i] - yi).log_mass)
            .sum()
    }

    /// `-sum log f(a_i^T h) + (rho/2)||h - u||^2` evaluated directly.
    pub fn objective(&self, h: &DVector<f64>, u: &DVector<f64>) -> f64 {
        self.nll(&(&self.a * h)) + 0.5 * self.rho * (h - u).norm_squared()
    }

    /// Runs at most `max_iters` EM steps from `h = u`.
    pub fn solve(&self, u: &DVector<f64>, max_iters: usize) -> Result<EmOutput> {
        dim_check(u.len() == self.dim(), || format!("target has length {}, expected {}", u.len(), self.dim()))?;
        let rho = self.rho;
        let w = &self.a * u;
        let u_sq = u.norm_squared();
        // h = u + A^T c / rho; only y = A h and c are tracked in the loop
        let mut c = DVector::zeros(w.len());
        let mut y = w.clone();
        let penalty = |c: &DVector<f64>| 0.5 * c.dot(&(&self.gram * c)) / rho;
        let mut history = vec![self.nll(&y)];
        let mut iterations = 0;
        for _ in 0..max_iters {
            let g = DVector::from_iterator(
                y.len(),
                y.iter().enumerate().map(|(i, &yi)| yi + cell_moments(self.lo[i] - yi, self.hi[i] - yi).mean),
            );
            let y_new = self.chol.solve(&(&self.gram * &g + &w * rho));
            let c_new = &g - &y_new;
            let dc = &c_new - &c;
            let step_sq = dc.dot(&(&self.gram * &dc)) / (rho * rho);
            c = c_new;
            y = y_new;
            iterations += 1;
            let obj = self.nll(&y) + penalty(&c);
            if !obj.is_finite() {
                return Err(Error::Numerical("EM objective is not finite".into()));
            }
            history.push(obj);
            let h_sq = u_sq + 2.0 * w.dot(&c) / rho + c.dot(&(&self.gram * &c)) / (rho * rho);
            if step_sq <= 1e-12 * h_sq.max(f64::MIN_POSITIVE) {
                break;
            }
        }
        let h = u + self.a.tr_mul(&c) / rho;
        Ok(EmOutput { h, iterations, objective_history: history })
    }
}

/// One-shot EM solve; builds and factors the subproblem on every call.
pub fn em_solve(
    indices: &[usize],
    op: &MeasurementOperator,
    u: &DVector<f64>,
    rho: f64,
    q: &Quantizer,
    max_iters: usize,
) -> Result<DVector<f64>> {
    Ok(EmSubproblem::new(indices, op, q, rho)?.solve(u, max_iters)?.h)
}
