//! Dithered uniform scalar quantization and the likelihood it induces.
//!
//! With Gaussian dither `v ~ N(0, sigma^2)` the probability of reporting level
//! `r` for input `x` is
//!
//! ```text
//! f_r(x) = Phi((ub[r] - x) / sigma) - Phi((lb[r] - x) / sigma)
//! ```
//!
//! The outermost cells extend to +-infinity so the likelihood stays proper
//! when dithered samples leave the calibration range.

use serde::{Deserialize, Serialize};

use crate::error::{dim_check, Error, Result};
use crate::gaussian::{self, CellMoments};

/// Fraction of the peak calibration amplitude used as dither level.
pub const DEFAULT_DITHER_FRACTION: f64 = 0.25;
/// Floor applied to probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;
/// Default grid size for [`likelihood_constants`].
pub const DEFAULT_GRID_POINTS: usize = 10_001;

#[derive(Debug, Clone, PartialEq)]
pub struct Quantizer {
    levels: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    dither_sigma: f64,
}

/// Text form of a [`Quantizer`]; only the finite interior boundaries are
/// stored since the outer sentinels are implied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerRecord {
    pub levels: Vec<f64>,
    pub boundaries: Vec<f64>,
    pub dither_sigma: f64,
}

impl Quantizer {
    /// Builds a quantizer from its `Q - 1` interior boundaries.
    pub fn from_boundaries(levels: Vec<f64>, boundaries: Vec<f64>, dither_sigma: f64) -> Result<Self> {
        let q = levels.len();
        if q < 2 {
            return Err(Error::InvalidParameter(format!("need at least 2 levels, got {q}")));
        }
        dim_check(boundaries.len() + 1 == q, || {
            format!("{} levels need {} boundaries, got {}", q, q - 1, boundaries.len())
        })?;
        if !(dither_sigma > 0.0 && dither_sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "dither sigma must be positive, got {dither_sigma}"
            )));
        }
        if boundaries.iter().any(|b| !b.is_finite()) || boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter("boundaries must be finite and strictly increasing".into()));
        }
        let mut lower = Vec::with_capacity(q);
        let mut upper = Vec::with_capacity(q);
        lower.push(f64::NEG_INFINITY);
        lower.extend_from_slice(&boundaries);
        upper.extend_from_slice(&boundaries);
        upper.push(f64::INFINITY);
        for (i, l) in levels.iter().enumerate() {
            if !(*l >= lower[i] && *l <= upper[i]) {
                return Err(Error::InvalidParameter(format!("level {i} = {l} lies outside its cell")));
            }
        }
        Ok(Self {
            levels,
            lower,
            upper,
            dither_sigma,
        })
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn lower_bounds(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper_bounds(&self) -> &[f64] {
        &self.upper
    }

    /// Finite interior boundaries.
    pub fn boundaries(&self) -> &[f64] {
        &self.upper[..self.upper.len() - 1]
    }

    pub fn dither_sigma(&self) -> f64 {
        self.dither_sigma
    }

    pub fn with_dither_sigma(&self, sigma: f64) -> Result<Self> {
        Self::from_boundaries(self.levels.clone(), self.boundaries().to_vec(), sigma)
    }

    /// Bits needed to report one index.
    pub fn bits_per_index(&self) -> usize {
        bits_per_index(self.num_levels())
    }

    pub fn to_record(&self) -> QuantizerRecord {
        QuantizerRecord {
            levels: self.levels.clone(),
            boundaries: self.boundaries().to_vec(),
            dither_sigma: self.dither_sigma,
        }
    }

    pub fn from_record(r: QuantizerRecord) -> Result<Self> {
        Self::from_boundaries(r.levels, r.boundaries, r.dither_sigma)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_record())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_record(serde_json::from_str(s)?)
    }

    /// Index of the cell `[lb, ub)` containing `x + dither`.
    pub fn quantize(&self, x: f64, dither: f64) -> usize {
        let y = x + dither;
        self.boundaries().partition_point(|b| *b <= y)
    }

    /// Standardized bounds of cell `index` for input `x` and noise `sigma`.
    fn standardized(&self, index: usize, x: f64, sigma: f64) -> (f64, f64) {
        ((self.lower[index] - x) / sigma, (self.upper[index] - x) / sigma)
    }

    pub fn cell_moments(&self, index: usize, x: f64, sigma: f64) -> CellMoments {
        let (lo, hi) = self.standardized(index, x, sigma);
        gaussian::cell_moments(lo, hi)
    }

    /// `log f_r(x)` under dither level `sigma`, without the probability floor.
    pub fn log_cell_prob_with(&self, index: usize, x: f64, sigma: f64) -> f64 {
        self.cell_moments(index, x, sigma).log_mass
    }

    /// `f_r(x)` under the quantizer's own dither level.
    pub fn cell_prob(&self, index: usize, x: f64) -> f64 {
        self.log_cell_prob_with(index, x, self.dither_sigma).exp()
    }

    /// `f_r'(x)` under dither level `sigma`.
    pub fn cell_prob_derivative_with(&self, index: usize, x: f64, sigma: f64) -> f64 {
        let (lo, hi) = self.standardized(index, x, sigma);
        (gaussian::pdf(lo) - gaussian::pdf(hi)) / sigma
    }
}

pub fn bits_per_index(num_levels: usize) -> usize {
    (usize::BITS - (num_levels.max(1) - 1).leading_zeros()) as usize
}

/// Equal-width quantizer spanning the sample range, with dither level
/// `dither_fraction * max |sample|`.
pub fn calibrate(samples: &[f64], num_levels: usize, dither_fraction: f64) -> Result<Quantizer> {
    if num_levels < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 levels, got {num_levels}")));
    }
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::Degenerate("calibration samples must be finite".into()));
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::Degenerate(format!(
            "calibration samples span no range (min {lo}, max {hi})"
        )));
    }
    let width = (hi - lo) / num_levels as f64;
    let boundaries: Vec<f64> = (1..num_levels).map(|i| lo + i as f64 * width).collect();
    let levels: Vec<f64> = (0..num_levels).map(|i| lo + (i as f64 + 0.5) * width).collect();
    let peak = lo.abs().max(hi.abs());
    Quantizer::from_boundaries(levels, boundaries, dither_fraction * peak)
}

/// `(1/R) sum_i -log f_{r_i}(x_i)` with per-measurement dither levels.
pub fn neg_log_likelihood(indices: &[usize], x: &[f64], sigmas: &[f64], q: &Quantizer) -> Result<f64> {
    check_lengths(indices, x, sigmas, q)?;
    let total: f64 = indices
        .iter()
        .zip(x)
        .zip(sigmas)
        .map(|((&r, &xi), &s)| -q.log_cell_prob_with(r, xi, s).max(PROB_FLOOR.ln()))
        .sum();
    Ok(total / indices.len() as f64)
}

/// Gradient of [`neg_log_likelihood`] with respect to `x`.
pub fn neg_log_likelihood_grad(indices: &[usize], x: &[f64], sigmas: &[f64], q: &Quantizer) -> Result<Vec<f64>> {
    check_lengths(indices, x, sigmas, q)?;
    let scale = 1.0 / indices.len() as f64;
    // d/dx [-log f] = -E[xi | cell] / sigma
    Ok(indices
        .iter()
        .zip(x)
        .zip(sigmas)
        .map(|((&r, &xi), &s)| -scale * q.cell_moments(r, xi, s).mean / s)
        .collect())
}

fn check_lengths(indices: &[usize], x: &[f64], sigmas: &[f64], q: &Quantizer) -> Result<()> {
    dim_check(indices.len() == x.len() && x.len() == sigmas.len(), || {
        format!(
            "indices ({}), inputs ({}) and sigmas ({}) must have equal length",
            indices.len(),
            x.len(),
            sigmas.len()
        )
    })?;
    if indices.is_empty() {
        return Err(Error::Dimension("no measurements".into()));
    }
    if let Some(r) = indices.iter().find(|&&r| r >= q.num_levels()) {
        return Err(Error::InvalidParameter(format!("index {r} >= Q = {}", q.num_levels())));
    }
    if sigmas.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidParameter("sigmas must be positive".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikelihoodConstants {
    pub u_f: f64,
    pub l_f: f64,
    pub f_f: f64,
    pub domain: (f64, f64),
    pub grid_points: usize,
}

impl LikelihoodConstants {
    pub fn l_over_f(&self) -> f64 {
        self.l_f / self.f_f
    }

    pub fn u_over_f(&self) -> f64 {
        self.u_f / self.f_f
    }
}

/// Grid estimates of U_f, L_f and F_f over `domain` at the quantizer's dither
/// level.
pub fn likelihood_constants(q: &Quantizer, domain: (f64, f64), grid_points: usize) -> Result<LikelihoodConstants> {
    if grid_points < 100 {
        return Err(Error::InvalidParameter(format!("grid_points must be >= 100, got {grid_points}")));
    }
    let (a, b) = domain;
    if !(a.is_finite() && b.is_finite() && a < b) {
        return Err(Error::InvalidParameter(format!("invalid domain ({a}, {b})")));
    }
    let sigma = q.dither_sigma();
    let mut u_f = f64::NEG_INFINITY;
    let mut l_f: f64 = 0.0;
    let mut f_f = f64::INFINITY;
    let step = (b - a) / (grid_points - 1) as f64;
    for i in 0..grid_points {
        let x = if i + 1 == grid_points { b } else { a + i as f64 * step };
        let mut best_fisher: f64 = 0.0;
        for r in 0..q.num_levels() {
            let m = q.cell_moments(r, x, sigma);
            let log_f = m.log_mass.max(PROB_FLOOR.ln());
            u_f = u_f.max(-log_f);
            // f'/f = -mean / sigma;  f'^2 / f = f * (mean / sigma)^2
            let score = m.mean / sigma;
            l_f = l_f.max(score.abs());
            best_fisher = best_fisher.max(log_f.exp() * score * score);
        }
        f_f = f_f.min(best_fisher);
    }
    Ok(LikelihoodConstants {
        u_f,
        l_f,
        f_f,
        domain,
        grid_points,
    })
}
