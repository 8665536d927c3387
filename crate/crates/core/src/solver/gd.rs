//! Baseline: gradient descent on the negative log-likelihood directly over
//! the path parameters `(theta, phi, Re beta, Im beta)`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{real_embed_stacked, steering_vector, ChannelParams};
use crate::error::{dim_check, Error, Result};
use crate::feedback::{FeedbackPayload, MeasurementOperator};
use crate::gaussian::cell_moments;
use crate::quantize::Quantizer;

const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GdConfig {
    pub step_size: f64,
    pub max_iters: usize,
}

impl Default for GdConfig {
    fn default() -> Self {
        Self { step_size: 1e-3, max_iters: 1800 }
    }
}

struct Likelihood {
    a: DMatrix<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    num_rx: usize,
    num_tx: usize,
    spacing: f64,
}

impl Likelihood {
    fn value(&self, z: &ChannelParams) -> f64 {
        let y = &self.a * real_embed_stacked(&z.synthesize(self.num_rx, self.num_tx, self.spacing));
        y.iter()
            .enumerate()
            .map(|(i, &yi)| -cell_moments(self.lo[i] - yi, self.hi[i] - yi).log_mass)
            .sum()
    }

    /// Objective and gradient in the `to_real_vec` ordering.
    fn value_and_grad(&self, z: &ChannelParams) -> (f64, Vec<f64>) {
        let (m, n, k) = (self.num_rx, self.num_tx, z.num_paths());
        let y = &self.a * real_embed_stacked(&z.synthesize(m, n, self.spacing));
        let mut value = 0.0;
        let mut dy = DVector::zeros(y.len());
        for (i, &yi) in y.iter().enumerate() {
            let c = cell_moments(self.lo[i] - yi, self.hi[i] - yi);
            value -= c.log_mass;
            dy[i] = -c.mean;
        }
        let gh = self.a.tr_mul(&dy);
        // conj of the complex gradient Re + j Im, laid out as H
        let gc = DMatrix::from_fn(m, n, |row, col| Complex64::new(gh[2 * m * col + row], -gh[2 * m * col + m + row]));
        let kd = 2.0 * PI * self.spacing;
        let j = Complex64::new(0.0, 1.0);
        let mut grad = vec![0.0; 4 * k];
        for p in 0..k {
            let ar = steering_vector(z.aoa[p], m, self.spacing);
            let at = steering_vector(z.aod[p], n, self.spacing);
            let (mut s, mut s_theta, mut s_phi) = (Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
            for col in 0..n {
                let atc = at[col].conj();
                for row in 0..m {
                    let t = gc[(row, col)] * ar[row] * atc;
                    s += t;
                    s_theta += t * row as f64;
                    s_phi += t * col as f64;
                }
            }
            let beta = z.gains[p];
            grad[p] = (beta * s_theta * (-j) * kd * z.aoa[p].cos()).re;
            grad[k + p] = (beta * s_phi * j * kd * z.aod[p].cos()).re;
            grad[2 * k + p] = s.re;
            grad[3 * k + p] = -s.im;
        }
        (value, grad)
    }
}

pub fn gd_baseline(
    payload: &FeedbackPayload,
    op: &MeasurementOperator,
    q: &Quantizer,
    num_paths: usize,
    spacing_ratio: f64,
    cfg: &GdConfig,
) -> Result<ChannelParams> {
    Ok(gd_baseline_traced(payload, op, q, num_paths, spacing_ratio, cfg)?.0)
}

/// Returns the final parameters and the objective after every accepted step
/// (the first entry is the objective at the zero start).
pub fn gd_baseline_traced(
    payload: &FeedbackPayload,
    op: &MeasurementOperator,
    q: &Quantizer,
    num_paths: usize,
    spacing_ratio: f64,
    cfg: &GdConfig,
) -> Result<(ChannelParams, Vec<f64>)> {
    if !(cfg.step_size > 0.0) || num_paths == 0 {
        return Err(Error::InvalidParameter("step size and number of paths must be positive".into()));
    }
    payload.validate()?;
    dim_check(payload.measurements == op.rows() && op.sigmas.len() == op.rows(), || {
        format!("payload has {} measurements, operator has {} rows", payload.measurements, op.rows())
    })?;
    dim_check(payload.num_levels == q.num_levels(), || "quantizer does not match payload".into())?;
    let mut a = op.matrix.clone();
    for (i, mut row) in a.row_iter_mut().enumerate() {
        row /= op.sigmas[i];
    }
    let lik = Likelihood {
        a,
        lo: payload.indices.iter().enumerate().map(|(i, &r)| q.lower_bounds()[r] / op.sigmas[i]).collect(),
        hi: payload.indices.iter().enumerate().map(|(i, &r)| q.upper_bounds()[r] / op.sigmas[i]).collect(),
        num_rx: op.num_rx,
        num_tx: op.num_tx,
        spacing: spacing_ratio,
    };

    let mut z = ChannelParams::zeros(num_paths);
    let (mut f, mut g) = lik.value_and_grad(&z);
    let mut history = vec![f];
    for _ in 0..cfg.max_iters {
        let x = z.to_real_vec();
        let mut step = cfg.step_size;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let cand: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - step * gi).collect();
            let cz = ChannelParams::from_real_vec(&cand)?;
            let cf = lik.value(&cz);
            if cf < f {
                accepted = Some(cz);
                break;
            }
            step *= 0.5;
        }
        match accepted {
            Some(cz) => {
                z = cz;
                (f, g) = lik.value_and_grad(&z);
                if !f.is_finite() {
                    return Err(Error::Numerical("GD objective is not finite".into()));
                }
                history.push(f);
            }
            None => break,
        }
    }
    Ok((z, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{sample_channel_params, ArrayConfig, DEFAULT_AMP_RANGE, DEFAULT_ANGLE_RANGE};
    use crate::feedback::{encode_scheme1, make_compressor_scheme1};
    use crate::quantize::calibrate;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (FeedbackPayload, MeasurementOperator, Quantizer) {
        let (m, n) = (4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let truth = sample_channel_params(&mut rng, &ArrayConfig::new(m, n, 2), DEFAULT_AMP_RANGE, DEFAULT_ANGLE_RANGE)
            .unwrap()
            .synthesize(m, n, 0.5);
        let comp = make_compressor_scheme1(9, 30, 2 * m * n).unwrap();
        let x = &comp.matrix * real_embed_stacked(&truth);
        let q = calibrate(x.as_slice(), 4, 0.25).unwrap();
        let p = encode_scheme1(&truth, &comp, &q, &mut rng).unwrap();
        let op = MeasurementOperator::scheme1(&comp, &q, m, n).unwrap();
        (p, op, q)
    }

    fn likelihood(p: &FeedbackPayload, op: &MeasurementOperator, q: &Quantizer) -> Likelihood {
        let mut a = op.matrix.clone();
        for (i, mut row) in a.row_iter_mut().enumerate() {
            row /= op.sigmas[i];
        }
        Likelihood {
            a,
            lo: p.indices.iter().enumerate().map(|(i, &r)| q.lower_bounds()[r] / op.sigmas[i]).collect(),
            hi: p.indices.iter().enumerate().map(|(i, &r)| q.upper_bounds()[r] / op.sigmas[i]).collect(),
            num_rx: op.num_rx,
            num_tx: op.num_tx,
            spacing: 0.5,
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (p, op, q) = setup();
        let lik = likelihood(&p, &op, &q);
        let z = ChannelParams::new(vec![0.3, -0.7], vec![0.1, 1.0], vec![Complex64::new(0.4, -0.2), Complex64::new(-0.3, 0.5)]).unwrap();
        let (_, g) = lik.value_and_grad(&z);
        let x = z.to_real_vec();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            let fd = (lik.value(&ChannelParams::from_real_vec(&xp).unwrap()) - lik.value(&ChannelParams::from_real_vec(&xm).unwrap())) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-5 * fd.abs().max(1.0), "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn accepted_steps_never_increase_objective() {
        let (p, op, q) = setup();
        let (_, hist) = gd_baseline_traced(&p, &op, &q, 2, 0.5, &GdConfig { step_size: 1e-2, max_iters: 200 }).unwrap();
        assert!(hist.len() > 1);
        assert!(hist.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn first_step_moves_against_gradient() {
        let (p, op, q) = setup();
        let lik = likelihood(&p, &op, &q);
        let (_, g) = lik.value_and_grad(&ChannelParams::zeros(2));
        let z = gd_baseline(&p, &op, &q, 2, 0.5, &GdConfig { step_size: 1e-3, max_iters: 1 }).unwrap();
        let x = z.to_real_vec();
        let dot: f64 = x.iter().zip(&g).map(|(a, b)| a * b).sum();
        assert!(dot < 0.0);
        for (xi, gi) in x.iter().zip(&g) {
            assert!(*xi == 0.0 || xi.signum() == -gi.signum());
        }
    }
}
