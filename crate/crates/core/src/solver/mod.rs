//! BS-side channel recovery from quantized feedback.

mod admm;
mod em;
mod gd;
mod relax;

use std::io::Write;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::ChannelParams;
use crate::error::{Error, Result};

pub use admm::{redeem_solve, redeem_solve_traced};
pub use em::{em_solve, EmOutput, EmSubproblem};
pub use gd::{gd_baseline, gd_baseline_traced, GdConfig};
pub use relax::{hr_objective_and_grad, mod_relax, RelaxSolver};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub rho: f64,
    pub max_outer: usize,
    pub outer_tol: f64,
    pub relax_bcd_max: usize,
    pub relax_bcd_tol: f64,
    pub ga_max: usize,
    pub em_max: usize,
    pub fft_oversample: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            max_outer: 30,
            outer_tol: 1e-4,
            relax_bcd_max: 60,
            relax_bcd_tol: 1e-3,
            ga_max: 20,
            em_max: 60,
            fft_oversample: 8,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = self.rho > 0.0
            && self.rho.is_finite()
            && self.max_outer > 0
            && self.outer_tol > 0.0
            && self.relax_bcd_max > 0
            && self.relax_bcd_tol > 0.0
            && self.ga_max > 0
            && self.em_max > 0
            && self.fft_oversample > 0;
        if positive {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("solver settings must all be positive: {self:?}")))
        }
    }
}

/// ADMM iterates after the final outer iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub z: ChannelParams,
    pub h: DMatrix<Complex64>,
    pub lambda: DMatrix<Complex64>,
    pub residual_history: Vec<f64>,
}

/// One row of a convergence trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub residual: f64,
    pub nmse: Option<f64>,
}

pub fn write_trace_csv<W: Write>(w: W, trace: &[TraceRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for rec in trace {
        wr.serialize(rec)?;
    }
    wr.flush()?;
    Ok(())
}

/// `||est - truth||_F^2 / ||truth||_F^2`
pub(crate) fn nmse_of(est: &DMatrix<Complex64>, truth: &DMatrix<Complex64>) -> f64 {
    let err: f64 = est.iter().zip(truth.iter()).map(|(a, b)| (a - b).norm_sqr()).sum();
    err / truth.iter().map(|c| c.norm_sqr()).sum::<f64>()
}
