//! REDEEM: ADMM over the splitting `H = G(z)`.
//!
//! z-update fits K paths to `H - Lambda/rho` with Mod-RELAX, H-update solves
//! the likelihood-plus-proximity subproblem with EM, then a dual ascent step.

use nalgebra::DMatrix;
use num_complex::Complex64;

use super::em::EmSubproblem;
use super::relax::RelaxSolver;
use super::{nmse_of, SolverConfig, SolverState, TraceRecord};
use crate::channel::{real_embed_stacked, un_embed_stacked, ChannelMatrix, ChannelParams};
use crate::error::{dim_check, Error, Result};
use crate::feedback::{FeedbackPayload, MeasurementOperator};
use crate::quantize::Quantizer;

fn frobenius(m: &DMatrix<Complex64>) -> f64 {
    m.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}

pub fn redeem_solve(
    payload: &FeedbackPayload,
    op: &MeasurementOperator,
    q: &Quantizer,
    cfg: &SolverConfig,
    num_paths: usize,
    spacing_ratio: f64,
) -> Result<(ChannelParams, ChannelMatrix, SolverState)> {
    let (z, h, state, _) = redeem_solve_traced(payload, op, q, cfg, num_paths, spacing_ratio, None)?;
    Ok((z, h, state))
}

/// As [`redeem_solve`], also returning a per-iteration trace. When `truth`
/// is given the trace carries the NMSE of `G(z)` at each iteration.
pub fn redeem_solve_traced(
    payload: &FeedbackPayload,
    op: &MeasurementOperator,
    q: &Quantizer,
    cfg: &SolverConfig,
    num_paths: usize,
    spacing_ratio: f64,
    truth: Option<&ChannelMatrix>,
) -> Result<(ChannelParams, ChannelMatrix, SolverState, Vec<TraceRecord>)> {
    cfg.validate()?;
    if num_paths == 0 {
        return Err(Error::InvalidParameter("number of paths must be at least 1".into()));
    }
    payload.validate()?;
    let (m, n) = (op.num_rx, op.num_tx);
    dim_check(payload.num_rx == m && payload.num_tx == n && payload.measurements == op.rows(), || {
        format!(
            "payload is {}x{} with {} measurements, operator is {}x{} with {} rows",
            payload.num_rx, payload.num_tx, payload.measurements, m, n, op.rows()
        )
    })?;
    dim_check(op.matrix.ncols() == 2 * m * n, || {
        format!("operator has {} columns, expected {}", op.matrix.ncols(), 2 * m * n)
    })?;
    if let Some(t) = truth {
        dim_check(t.num_rx() == m && t.num_tx() == n, || "reference channel has the wrong shape".into())?;
    }

    let rho = cfg.rho;
    let inv_rho = Complex64::new(1.0 / rho, 0.0);
    let rho_c = Complex64::new(rho, 0.0);
    let em = EmSubproblem::new(&payload.indices, op, q, rho)?;
    let mut relax = RelaxSolver::new(m, n, spacing_ratio, cfg);

    let mut z = ChannelParams::zeros(num_paths);
    let mut h = DMatrix::<Complex64>::zeros(m, n);
    let mut lambda = DMatrix::<Complex64>::zeros(m, n);
    let mut g = DMatrix::<Complex64>::zeros(m, n);
    let mut residuals = Vec::with_capacity(cfg.max_outer);
    let mut trace = Vec::with_capacity(cfg.max_outer);

    for iteration in 1..=cfg.max_outer {
        let zeta = &h - &lambda * inv_rho;
        z = relax.solve(&zeta, num_paths);
        g = z.synthesize(m, n, spacing_ratio).0;

        let target = ChannelMatrix(&g + &lambda * inv_rho);
        let out = em.solve(&real_embed_stacked(&target), cfg.em_max)?;
        let h_new = un_embed_stacked(&out.h, m, n)?.0;

        let primal = &g - &h_new;
        lambda += &primal * rho_c;
        let residual = frobenius(&primal);
        if !residual.is_finite() {
            return Err(Error::Numerical("ADMM residual is not finite".into()));
        }
        residuals.push(residual);
        trace.push(TraceRecord { iteration, residual, nmse: truth.map(|t| nmse_of(&g, &t.0)) });

        let prev_norm = frobenius(&h);
        let change = frobenius(&(&h_new - &h));
        h = h_new;
        if prev_norm > 0.0 && change < cfg.outer_tol * prev_norm {
            break;
        }
    }

    let state = SolverState { z: z.clone(), h, lambda, residual_history: residuals };
    Ok((z, ChannelMatrix(g), state, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{sample_channel_params, ArrayConfig, DEFAULT_AMP_RANGE, DEFAULT_ANGLE_RANGE};
    use crate::feedback::{encode_scheme1, make_compressor_scheme1, Scheme};
    use crate::quantize::calibrate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fine_feedback_recovers_channel() {
        let (m, n, k) = (8, 8, 2);
        let cfg_arr = ArrayConfig::new(m, n, k);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truth = sample_channel_params(&mut rng, &cfg_arr, DEFAULT_AMP_RANGE, DEFAULT_ANGLE_RANGE)
            .unwrap()
            .synthesize(m, n, 0.5);
        let comp = make_compressor_scheme1(5, 128, 128).unwrap();
        let x = &comp.matrix * real_embed_stacked(&truth);
        let q = calibrate(x.as_slice(), 64, 1e-3).unwrap();
        let payload = encode_scheme1(&truth, &comp, &q, &mut rng).unwrap();
        let op = MeasurementOperator::scheme1(&comp, &q, m, n).unwrap();
        let (z, est, state, trace) =
            redeem_solve_traced(&payload, &op, &q, &SolverConfig::default(), k, 0.5, Some(&truth)).unwrap();
        assert_eq!(z.num_paths(), k);
        assert_eq!(state.residual_history.len(), trace.len());
        let e = nmse_of(&est.0, &truth.0);
        assert!(e < 1e-2, "nmse {e}");
    }

    #[test]
    fn rejects_mismatched_operator() {
        let q = calibrate(&[-1.0, 1.0], 4, 0.25).unwrap();
        let comp = make_compressor_scheme1(0, 6, 2 * 2 * 3).unwrap();
        let op = MeasurementOperator::scheme1(&comp, &q, 2, 3).unwrap();
        let payload = FeedbackPayload {
            scheme: Scheme::Scheme1,
            num_levels: 4,
            indices: vec![0; 5],
            seed: 0,
            num_rx: 2,
            num_tx: 3,
            measurements: 5,
            noise_sigma: None,
        };
        let cfg = SolverConfig::default();
        assert!(redeem_solve(&payload, &op, &q, &cfg, 1, 0.5).is_err());
        let ok = FeedbackPayload { indices: vec![0; 6], measurements: 6, ..payload };
        assert!(redeem_solve(&ok, &op, &q, &cfg, 0, 0.5).is_err());
        assert!(redeem_solve(&ok, &op, &q, &cfg, 1, 0.5).is_ok());
    }
}
