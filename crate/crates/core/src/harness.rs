//! Seeded Monte Carlo trials, metrics, sweeps and validation studies.

use std::io::Write;
use std::time::Instant;

use nalgebra::DVector;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{
    lipschitz_bound, real_embed_block, real_embed_stacked, sample_channel_params, ArrayConfig, ChannelMatrix,
    DEFAULT_ANGLE_RANGE,
};
use crate::config::{ExperimentConfig, OneOrMany};
use crate::error::{dim_check, Error, Result};
use crate::feedback::{
    compress_received, encode_scheme1, encode_scheme2, ls_estimate, make_compressor_scheme1, make_pilots,
    noise_sigma_for_snr, simulate_downlink, FeedbackPayload, MeasurementOperator, PilotKind, Scheme, Scheme2Setup,
};
use crate::quantize::{bits_per_index, calibrate, likelihood_constants, Quantizer};
use crate::solver::{gd_baseline, redeem_solve_traced, TraceRecord};

const CHANNEL_STREAM: u64 = 10;
const NOISE_STREAM: u64 = 11;
const DITHER_STREAM: u64 = 12;
const CALIBRATION_TAG: u64 = 0x5ca1_ab1e;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of trial `index` under `master`. Every sweep point reuses the same
/// trial seeds, so points are compared on common random channels.
pub fn trial_seed(master: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master) ^ index)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn frob_sq(h: &ChannelMatrix) -> f64 {
    h.norm_sqr()
}

/// `||H - H_hat||_F^2 / ||H||_F^2`
pub fn nmse(truth: &ChannelMatrix, est: &ChannelMatrix) -> Result<f64> {
    dim_check(truth.0.shape() == est.0.shape(), || "channel shapes differ".into())?;
    let t = frob_sq(truth);
    if t == 0.0 {
        return Err(Error::Degenerate("NMSE is undefined for a zero channel".into()));
    }
    Ok((&truth.0 - &est.0).iter().map(|c| c.norm_sqr()).sum::<f64>() / t)
}

/// `|tr(H_hat^H H)|^2 / ||H_hat||_F^2`
pub fn bgain(truth: &ChannelMatrix, est: &ChannelMatrix) -> Result<f64> {
    dim_check(truth.0.shape() == est.0.shape(), || "channel shapes differ".into())?;
    let e = frob_sq(est);
    if e == 0.0 {
        return Err(Error::Degenerate("beamforming gain is undefined for a zero estimate".into()));
    }
    let tr: Complex64 = est.0.iter().zip(truth.0.iter()).map(|(a, b)| a.conj() * b).sum();
    Ok(tr.norm_sqr() / e)
}

/// `||h - h_hat||^2 / (MN)` over the stacked real embedding.
pub fn embedded_mse(truth: &ChannelMatrix, est: &ChannelMatrix) -> Result<f64> {
    dim_check(truth.0.shape() == est.0.shape(), || "channel shapes differ".into())?;
    let d = real_embed_stacked(truth) - real_embed_stacked(est);
    Ok(d.norm_squared() / (truth.num_rx() * truth.num_tx()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Redeem,
    Gd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub scheme: Scheme,
    pub method: Method,
    pub seed: u64,
    pub nmse: f64,
    pub bgain: f64,
    pub mse: f64,
    pub bits: usize,
    pub wall_time: f64,
}

/// One resolved point of the experiment grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub label: String,
    pub q: usize,
    pub measurements: usize,
    pub snr_db: f64,
    pub array: ArrayConfig,
    pub assumed_k: usize,
    pub amp_min: f64,
}

fn fmt_value(v: f64) -> String {
    format!("{v}")
}

/// Cartesian product of all configured axes, in a fixed order.
pub fn sweep_points(cfg: &ExperimentConfig) -> Result<Vec<SweepPoint>> {
    struct Axis {
        name: &'static str,
        values: Vec<f64>,
        swept: bool,
    }
    fn axis<T: Clone + Into<f64>>(name: &'static str, v: &OneOrMany<T>) -> Axis {
        Axis { name, values: v.values().into_iter().map(Into::into).collect(), swept: v.is_sweep() }
    }
    let as_f = |v: &OneOrMany<usize>| match v {
        OneOrMany::One(x) => OneOrMany::One(*x as f64),
        OneOrMany::Many(xs) => OneOrMany::Many(xs.iter().map(|x| *x as f64).collect()),
    };
    let budget = cfg.bits.as_ref();
    let axes = [
        match budget {
            Some(b) => axis("bits", &as_f(b)),
            None => axis("measurements", &as_f(&cfg.measurements)),
        },
        axis("q", &as_f(&cfg.q)),
        axis("snr_db", &cfg.snr_db),
        axis("num_tx", &as_f(cfg.num_tx.as_ref().unwrap_or(&OneOrMany::One(cfg.array.num_tx)))),
        axis("assumed_k", &as_f(cfg.assumed_k.as_ref().unwrap_or(&OneOrMany::One(cfg.array.num_paths)))),
        axis("amp_min", &cfg.amp_min),
    ];
    let mut combos: Vec<Vec<f64>> = vec![vec![]];
    for a in &axes {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                a.values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push(*v);
                    c
                })
            })
            .collect();
    }
    combos
        .into_iter()
        .map(|c| {
            let label_parts: Vec<String> = axes
                .iter()
                .zip(&c)
                .filter(|(a, _)| a.swept)
                .map(|(a, v)| format!("{}={}", a.name, fmt_value(*v)))
                .collect();
            let label = if label_parts.is_empty() { "point".to_string() } else { label_parts.join(";") };
            let q = c[1] as usize;
            let measurements = match budget {
                Some(_) => (c[0] as usize) / bits_per_index(q),
                None => c[0] as usize,
            };
            if measurements == 0 {
                return Err(Error::Config(format!("bit budget {} is below one index at Q = {q}", c[0])));
            }
            let mut array = cfg.array.clone();
            array.num_tx = c[3] as usize;
            array.validate()?;
            Ok(SweepPoint { label, q, measurements, snr_db: c[2], array, assumed_k: c[4] as usize, amp_min: c[5] })
        })
        .collect()
}

fn sample_truth(point: &SweepPoint, rng: &mut ChaCha8Rng) -> Result<ChannelMatrix> {
    let a = &point.array;
    let params = sample_channel_params(rng, a, (point.amp_min, a.amp_max), DEFAULT_ANGLE_RANGE)?;
    Ok(params.synthesize(a.num_rx, a.num_tx, a.spacing_ratio))
}

/// Quantizer for one (point, scheme): equal-width cells over the range of
/// `calibration_samples` values of the quantity the UE actually quantizes,
/// each drawn from an independent channel and compressor row.
pub fn calibrate_quantizer(cfg: &ExperimentConfig, point: &SweepPoint, scheme: Scheme) -> Result<Quantizer> {
    calibrate_quantizer_for(cfg, point, scheme, None)
}

/// As [`calibrate_quantizer`]; a fixed channel replaces the random draws.
pub fn calibrate_quantizer_for(
    cfg: &ExperimentConfig,
    point: &SweepPoint,
    scheme: Scheme,
    fixed: Option<&ChannelMatrix>,
) -> Result<Quantizer> {
    let a = &point.array;
    let (m, n) = (a.num_rx, a.num_tx);
    let tag = match scheme {
        Scheme::Scheme1 => 1,
        Scheme::Scheme2 => 2,
    };
    let mut rng = stream_rng(splitmix64(cfg.master_seed ^ CALIBRATION_TAG) ^ tag, 0);
    let snr = 10f64.powf(point.snr_db / 10.0);
    let mut samples = Vec::with_capacity(cfg.calibration_samples);
    for _ in 0..cfg.calibration_samples {
        let h = match fixed {
            Some(h) => h.clone(),
            None => sample_truth(point, &mut rng)?,
        };
        let x = match scheme {
            Scheme::Scheme1 => {
                let s = make_pilots(PilotKind::Orthogonal, n, cfg.pilot_factor * n, &mut rng)?;
                let sigma = noise_sigma_for_snr(&h, &s, point.snr_db);
                let est = ls_estimate(&simulate_downlink(&h, &s, sigma, &mut rng)?, &s)?;
                let scale = 1.0 / (point.measurements as f64).sqrt();
                real_embed_stacked(&est)
                    .iter()
                    .map(|v| v * scale * rng.sample::<f64, _>(StandardNormal))
                    .sum()
            }
            Scheme::Scheme2 => {
                // one received column; E||H s||^2 = ||H||_F^2 sets the noise level
                let s = make_pilots(PilotKind::Gaussian, n, 1, &mut rng)?;
                let sigma = (h.norm_sqr() / (m as f64 * snr)).sqrt();
                let y = simulate_downlink(&h, &s, sigma, &mut rng)?;
                let scale = 1.0 / point.measurements as f64;
                let mut acc = 0.0;
                for c in y.iter() {
                    let (ar, ai): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
                    acc += scale * (ar * c.re + ai * c.im);
                }
                acc
            }
        };
        samples.push(x);
    }
    calibrate(&samples, point.q, cfg.dither_fraction)
}

/// Everything the BS sees in one trial, plus the ground truth.
struct TrialInstance {
    truth: ChannelMatrix,
    payload: FeedbackPayload,
    op: MeasurementOperator,
}

fn build_instance(
    cfg: &ExperimentConfig,
    point: &SweepPoint,
    scheme: Scheme,
    q: &Quantizer,
    seed: u64,
    fixed: Option<&ChannelMatrix>,
) -> Result<TrialInstance> {
    let a = &point.array;
    let (m, n) = (a.num_rx, a.num_tx);
    let truth = match fixed {
        Some(h) => h.clone(),
        None => sample_truth(point, &mut stream_rng(seed, CHANNEL_STREAM))?,
    };
    let mut noise_rng = stream_rng(seed, NOISE_STREAM);
    let mut dither_rng = stream_rng(seed, DITHER_STREAM);
    let payload = match scheme {
        Scheme::Scheme1 => {
            let s = make_pilots(PilotKind::Orthogonal, n, cfg.pilot_factor * n, &mut noise_rng)?;
            let sigma = noise_sigma_for_snr(&truth, &s, point.snr_db);
            let est = ls_estimate(&simulate_downlink(&truth, &s, sigma, &mut noise_rng)?, &s)?;
            let comp = make_compressor_scheme1(seed, point.measurements, 2 * m * n)?;
            encode_scheme1(&est, &comp, q, &mut dither_rng)?
        }
        Scheme::Scheme2 => {
            let setup = Scheme2Setup::generate(seed, m, n, point.measurements)?;
            let sigma = noise_sigma_for_snr(&truth, &setup.pilots, point.snr_db);
            let y = simulate_downlink(&truth, &setup.pilots, sigma, &mut noise_rng)?;
            encode_scheme2(&y, &setup, q, sigma, &mut dither_rng)?
        }
    };
    // the BS rebuilds its operator from the seed in the payload
    let op = MeasurementOperator::from_payload(&payload, q)?;
    Ok(TrialInstance { truth, payload, op })
}

fn metrics(scheme: Scheme, method: Method, seed: u64, inst: &TrialInstance, est: &ChannelMatrix, start: Instant) -> Result<TrialResult> {
    let bg = if est.norm_sqr() > 0.0 { bgain(&inst.truth, est)? } else { 0.0 };
    Ok(TrialResult {
        scheme,
        method,
        seed,
        nmse: nmse(&inst.truth, est)?,
        bgain: bg,
        mse: embedded_mse(&inst.truth, est)?,
        bits: inst.payload.bits(),
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Runs one REDEEM trial; deterministic in `seed`.
pub fn run_trial(cfg: &ExperimentConfig, point: &SweepPoint, scheme: Scheme, q: &Quantizer, seed: u64) -> Result<TrialResult> {
    Ok(run_trial_traced(cfg, point, scheme, q, seed)?.0)
}

pub fn run_trial_traced(
    cfg: &ExperimentConfig,
    point: &SweepPoint,
    scheme: Scheme,
    q: &Quantizer,
    seed: u64,
) -> Result<(TrialResult, Vec<TraceRecord>)> {
    run_trial_on(cfg, point, scheme, q, seed, None)
}

/// Trial on a fixed channel when `fixed` is given; pilots, noise,
/// compressors and dither still come from `seed`.
pub fn run_trial_on(
    cfg: &ExperimentConfig,
    point: &SweepPoint,
    scheme: Scheme,
    q: &Quantizer,
    seed: u64,
    fixed: Option<&ChannelMatrix>,
) -> Result<(TrialResult, Vec<TraceRecord>)> {
    let start = Instant::now();
    let inst = build_instance(cfg, point, scheme, q, seed, fixed)?;
    let (_, est, _, trace) = redeem_solve_traced(
        &inst.payload,
        &inst.op,
        q,
        &cfg.solver,
        point.assumed_k,
        point.array.spacing_ratio,
        Some(&inst.truth),
    )?;
    Ok((metrics(scheme, Method::Redeem, seed, &inst, &est, start)?, trace))
}

/// Same trial instance solved by the gradient-descent baseline.
pub fn run_trial_gd(cfg: &ExperimentConfig, point: &SweepPoint, scheme: Scheme, q: &Quantizer, seed: u64) -> Result<TrialResult> {
    let start = Instant::now();
    let gd = cfg.gd.clone().unwrap_or_default();
    let inst = build_instance(cfg, point, scheme, q, seed, None)?;
    let z = gd_baseline(&inst.payload, &inst.op, q, point.assumed_k, point.array.spacing_ratio, &gd)?;
    let est = z.synthesize(point.array.num_rx, point.array.num_tx, point.array.spacing_ratio);
    metrics(scheme, Method::Gd, seed, &inst, &est, start)
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub axis: String,
    pub scheme: String,
    pub mean_nmse: f64,
    pub se_nmse: f64,
    pub mean_bgain: f64,
    pub bits: usize,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointResult {
    pub point: SweepPoint,
    pub scheme: Scheme,
    pub method: Method,
    pub trials: Vec<TrialResult>,
}

impl PointResult {
    pub fn mean_nmse(&self) -> (f64, f64) {
        mean_se(&self.trials.iter().map(|t| t.nmse).collect::<Vec<_>>())
    }

    pub fn mean_mse(&self) -> (f64, f64) {
        mean_se(&self.trials.iter().map(|t| t.mse).collect::<Vec<_>>())
    }

    pub fn summary(&self) -> SummaryRow {
        let (mean_nmse, se_nmse) = self.mean_nmse();
        let scheme = match self.method {
            Method::Redeem => self.scheme.to_string(),
            Method::Gd => format!("{}-gd", self.scheme),
        };
        SummaryRow {
            axis: self.point.label.clone(),
            scheme,
            mean_nmse,
            se_nmse,
            mean_bgain: self.trials.iter().map(|t| t.bgain).sum::<f64>() / self.trials.len() as f64,
            bits: self.trials.first().map_or(0, |t| t.bits),
            trials: self.trials.len(),
        }
    }
}

/// Runs `trials` seeds in parallel; results come back in seed order.
fn run_point<F>(cfg: &ExperimentConfig, f: F) -> Result<Vec<TrialResult>>
where
    F: Fn(u64) -> Result<TrialResult> + Sync,
{
    (0..cfg.trials as u64)
        .into_par_iter()
        .map(|i| f(trial_seed(cfg.master_seed, i)))
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

/// Runs every point of the grid for every configured scheme (and the GD
/// baseline when configured).
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<PointResult>> {
    let mut out = Vec::new();
    for point in sweep_points(cfg)? {
        for scheme in cfg.scheme.schemes() {
            let q = calibrate_quantizer(cfg, &point, scheme)?;
            let trials = run_point(cfg, |seed| run_trial(cfg, &point, scheme, &q, seed))?;
            out.push(PointResult { point: point.clone(), scheme, method: Method::Redeem, trials });
            if cfg.gd.is_some() {
                let trials = run_point(cfg, |seed| run_trial_gd(cfg, &point, scheme, &q, seed))?;
                out.push(PointResult { point: point.clone(), scheme, method: Method::Gd, trials });
            }
        }
    }
    Ok(out)
}

/// Runs every grid point against one fixed channel, e.g. an imported
/// ray-traced matrix. The channel shape overrides the configured array.
pub fn run_on_channel(cfg: &ExperimentConfig, channel: &ChannelMatrix) -> Result<Vec<PointResult>> {
    let mut cfg = cfg.clone();
    cfg.array.num_rx = channel.num_rx();
    cfg.array.num_tx = channel.num_tx();
    cfg.num_tx = None;
    if channel.norm_sqr() == 0.0 {
        return Err(Error::Degenerate("imported channel is all zeros".into()));
    }
    let mut out = Vec::new();
    for point in sweep_points(&cfg)? {
        for scheme in cfg.scheme.schemes() {
            let q = calibrate_quantizer_for(&cfg, &point, scheme, Some(channel))?;
            let trials = run_point(&cfg, |seed| Ok(run_trial_on(&cfg, &point, scheme, &q, seed, Some(channel))?.0))?;
            out.push(PointResult { point: point.clone(), scheme, method: Method::Redeem, trials });
        }
    }
    Ok(out)
}

/// As [`run_experiment`] but requires at least one swept axis.
pub fn sweep(cfg: &ExperimentConfig) -> Result<Vec<PointResult>> {
    let swept = cfg.q.is_sweep()
        || cfg.bits.as_ref().map_or(cfg.measurements.is_sweep(), OneOrMany::is_sweep)
        || cfg.snr_db.is_sweep()
        || cfg.num_tx.as_ref().is_some_and(OneOrMany::is_sweep)
        || cfg.assumed_k.as_ref().is_some_and(OneOrMany::is_sweep)
        || cfg.amp_min.is_sweep();
    if !swept {
        return Err(Error::Config("sweep needs at least one axis with more than one value".into()));
    }
    run_experiment(cfg)
}

pub fn write_summary_csv<W: Write>(w: W, results: &[PointResult]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in results {
        wr.serialize(r.summary())?;
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub scheme: Scheme,
    pub measurements: usize,
    pub mean_mse: f64,
    pub se_mse: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateFit {
    pub scheme: Scheme,
    pub points: Vec<RatePoint>,
    pub slope: f64,
    pub slope_se: f64,
}

/// Least-squares slope of `log y` against `log x`, with the standard error
/// propagated from per-point standard errors of `y` (delta method).
pub fn loglog_slope(x: &[f64], y: &[f64], y_se: &[f64]) -> Result<(f64, f64)> {
    if x.len() < 2 || x.len() != y.len() || y.len() != y_se.len() {
        return Err(Error::InvalidParameter("slope fit needs matching series of length >= 2".into()));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidParameter("log-log fit needs positive values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidParameter("slope fit needs distinct x values".into()));
    }
    let slope = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / sxx;
    let var: f64 = lx
        .iter()
        .zip(y.iter().zip(y_se))
        .map(|(a, (yv, se))| ((a - mx) / sxx).powi(2) * (se / yv).powi(2))
        .sum();
    Ok((slope, var.sqrt()))
}

/// MSE-versus-measurements study for one scheme over the configured
/// measurement list.
pub fn validate_rate(cfg: &ExperimentConfig, scheme: Scheme) -> Result<RateFit> {
    if cfg.bits.is_some() {
        return Err(Error::Config("rate validation sweeps measurements, not bit budgets".into()));
    }
    let ms = cfg.measurements.values();
    if ms.len() < 4 {
        return Err(Error::Config(format!("rate validation needs at least 4 measurement values, got {}", ms.len())));
    }
    let mut single = cfg.clone();
    single.q = OneOrMany::One(cfg.q.values()[0]);
    single.snr_db = OneOrMany::One(cfg.snr_db.values()[0]);
    single.num_tx = None;
    single.assumed_k = cfg.assumed_k.as_ref().map(|k| OneOrMany::One(k.values()[0]));
    single.amp_min = OneOrMany::One(cfg.amp_min.values()[0]);
    single.gd = None;
    let mut points = Vec::new();
    for point in sweep_points(&single)? {
        let q = calibrate_quantizer(&single, &point, scheme)?;
        let trials = run_point(&single, |seed| run_trial(&single, &point, scheme, &q, seed))?;
        let pr = PointResult { point: point.clone(), scheme, method: Method::Redeem, trials };
        let (mean_mse, se_mse) = pr.mean_mse();
        points.push(RatePoint { scheme, measurements: point.measurements, mean_mse, se_mse, trials: pr.trials.len() });
    }
    let x: Vec<f64> = points.iter().map(|p| p.measurements as f64).collect();
    let y: Vec<f64> = points.iter().map(|p| p.mean_mse).collect();
    let se: Vec<f64> = points.iter().map(|p| p.se_mse).collect();
    let (slope, slope_se) = loglog_slope(&x, &y, &se)?;
    Ok(RateFit { scheme, points, slope, slope_se })
}

pub fn write_rate_csv<W: Write>(w: W, fits: &[RateFit]) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        scheme: Scheme,
        measurements: usize,
        mean_mse: f64,
        se_mse: f64,
        trials: usize,
        slope: f64,
        slope_se: f64,
    }
    let mut wr = csv::Writer::from_writer(w);
    for f in fits {
        for p in &f.points {
            wr.serialize(Row {
                scheme: p.scheme,
                measurements: p.measurements,
                mean_mse: p.mean_mse,
                se_mse: p.se_mse,
                trials: p.trials,
                slope: f.slope,
                slope_se: f.slope_se,
            })?;
        }
    }
    wr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DitherRow {
    pub sigma: f64,
    pub l_over_f: f64,
    pub u_over_f: f64,
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| if n == 1 { lo } else { (a + (b - a) * i as f64 / (n - 1) as f64).exp() })
        .collect()
}

/// Ratio curves `L_f/F_f` and `U_f/F_f` of `base` as its dither level varies.
pub fn validate_dither_curve(base: &Quantizer, sigmas: &[f64], domain: (f64, f64), grid_points: usize) -> Result<Vec<DitherRow>> {
    sigmas
        .iter()
        .map(|&s| {
            let c = likelihood_constants(&base.with_dither_sigma(s)?, domain, grid_points)?;
            Ok(DitherRow { sigma: s, l_over_f: c.l_over_f(), u_over_f: c.u_over_f() })
        })
        .collect()
}

/// Q-level quantizer calibrated on a symmetric sample set over `[-r, r]`.
pub fn symmetric_quantizer(q: usize, half_range: f64) -> Result<Quantizer> {
    let samples: Vec<f64> = (0..101).map(|i| -half_range + 2.0 * half_range * i as f64 / 100.0).collect();
    calibrate(&samples, q, 0.25)
}

/// True if the minimum of `v` is strictly inside the sequence.
pub fn has_interior_minimum(v: &[f64]) -> bool {
    if v.len() < 3 {
        return false;
    }
    let (imin, vmin) = v
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, x)| if *x < acc.1 { (i, *x) } else { acc });
    imin > 0 && imin < v.len() - 1 && vmin < v[0] && vmin < v[v.len() - 1]
}

pub fn write_dither_csv<W: Write>(w: W, rows: &[DitherRow]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

/// Measurement count from the order expressions at multiplier `c`:
/// `c K log(sqrt(kappa) L K)` for Scheme 1, `c K^2 log^2(sqrt(kappa) L K)`
/// for Scheme 2.
pub fn srec_measurements(array: &ArrayConfig, scheme: Scheme, c: f64) -> usize {
    let k = array.num_paths as f64;
    let log_term = (array.amp_max.sqrt() * lipschitz_bound(array) * k).ln().max(1.0);
    let v = match scheme {
        Scheme::Scheme1 => c * k * log_term,
        Scheme::Scheme2 => c * k * k * log_term * log_term,
    };
    v.ceil() as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SrecResult {
    pub scheme: Scheme,
    pub measurements: usize,
    pub pairs: usize,
    pub passed: usize,
    pub pass_rate: f64,
    pub min_ratio: f64,
}

/// Empirical S-REC check: fraction of random channel pairs with
/// `||Op(h - h')|| >= gamma ||h - h'|| - 1/K` under a single draw of the
/// operator. Scheme 2 rows are rescaled by `sqrt(2T)` so the operator is
/// norm-preserving in expectation on the block embedding.
pub fn validate_srec(cfg: &ExperimentConfig, scheme: Scheme, measurements: usize, pairs: usize) -> Result<SrecResult> {
    if measurements == 0 || pairs == 0 {
        return Err(Error::InvalidParameter("S-REC check needs measurements and pairs >= 1".into()));
    }
    let array = &cfg.array;
    let (m, n) = (array.num_rx, array.num_tx);
    let eps = 1.0 / array.num_paths as f64;
    let gamma = cfg.srec.gamma;
    let seed = splitmix64(cfg.master_seed ^ 0x05ec);
    let amp = (cfg.amp_min.values()[0], array.amp_max);
    let mut rng = stream_rng(seed, CHANNEL_STREAM);
    let draw = |rng: &mut ChaCha8Rng| -> Result<ChannelMatrix> {
        let p = sample_channel_params(rng, array, amp, DEFAULT_ANGLE_RANGE)?;
        Ok(p.synthesize(m, n, array.spacing_ratio))
    };

    enum Op {
        Dense(nalgebra::DMatrix<f64>),
        Pilot(Scheme2Setup),
    }
    let op = match scheme {
        Scheme::Scheme1 => Op::Dense(make_compressor_scheme1(seed, measurements, 2 * m * n)?.matrix),
        Scheme::Scheme2 => Op::Pilot(Scheme2Setup::generate(seed, m, n, measurements)?),
    };

    let mut passed = 0;
    let mut min_ratio = f64::INFINITY;
    for _ in 0..pairs {
        let d = ChannelMatrix(&draw(&mut rng)?.0 - &draw(&mut rng)?.0);
        let (lhs, norm) = match &op {
            Op::Dense(a) => {
                let v: DVector<f64> = real_embed_stacked(&d);
                ((a * &v).norm(), v.norm())
            }
            Op::Pilot(setup) => {
                // D h_block equals the noiseless per-instant compression of (H - H') S
                let y = &d.0 * &setup.pilots.entries;
                let x = compress_received(&y, setup)?;
                let scale = (2.0 * measurements as f64).sqrt();
                let lhs = scale * x.iter().map(|v| v * v).sum::<f64>().sqrt();
                (lhs, real_embed_block(&d).1.norm())
            }
        };
        if lhs >= gamma * norm - eps {
            passed += 1;
        }
        if norm > 0.0 {
            min_ratio = min_ratio.min(lhs / norm);
        }
    }
    Ok(SrecResult { scheme, measurements, pairs, passed, pass_rate: passed as f64 / pairs as f64, min_ratio })
}

pub fn write_srec_csv<W: Write>(w: W, rows: &[SrecResult]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::ChannelParams;
    use nalgebra::DMatrix;

    fn small_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.array = ArrayConfig::new(4, 8, 2);
        cfg.q = OneOrMany::One(4);
        cfg.measurements = OneOrMany::One(40);
        cfg.trials = 4;
        cfg.calibration_samples = 200;
        cfg.solver.max_outer = 5;
        cfg
    }

    fn some_channel() -> ChannelMatrix {
        ChannelParams::new(vec![0.2, -0.6], vec![0.5, 1.1], vec![Complex64::new(0.7, 0.1), Complex64::new(-0.2, 0.6)])
            .unwrap()
            .synthesize(4, 6, 0.5)
    }

    #[test]
    fn nmse_reference_values() {
        let h = some_channel();
        assert_eq!(nmse(&h, &h).unwrap(), 0.0);
        assert!((nmse(&h, &ChannelMatrix::zeros(4, 6)).unwrap() - 1.0).abs() < 1e-15);
        let twice = ChannelMatrix(&h.0 * Complex64::new(2.0, 0.0));
        assert!((nmse(&h, &twice).unwrap() - 1.0).abs() < 1e-12);
        assert!(nmse(&ChannelMatrix::zeros(4, 6), &h).is_err());
    }

    #[test]
    fn bgain_reference_values() {
        let h = some_channel();
        let p = h.norm_sqr();
        assert!((bgain(&h, &h).unwrap() - p).abs() < 1e-12 * p);
        let scaled = ChannelMatrix(&h.0 * Complex64::new(-0.3, 2.0));
        assert!((bgain(&h, &scaled).unwrap() - p).abs() < 1e-10 * p);
        let mut a = DMatrix::zeros(2, 2);
        a[(0, 0)] = Complex64::new(1.0, 0.0);
        let mut b = DMatrix::zeros(2, 2);
        b[(1, 1)] = Complex64::new(1.0, 0.0);
        assert_eq!(bgain(&ChannelMatrix(a), &ChannelMatrix(b)).unwrap(), 0.0);
        assert!(bgain(&h, &ChannelMatrix::zeros(4, 6)).is_err());
    }

    #[test]
    fn trial_seeds_are_stable_and_distinct() {
        assert_eq!(trial_seed(7, 3), trial_seed(7, 3));
        let seeds: std::collections::HashSet<u64> = (0..1000).map(|i| trial_seed(7, i)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_ne!(trial_seed(7, 0), trial_seed(8, 0));
    }

    #[test]
    fn sweep_points_resolve_bit_budgets_by_floor() {
        let mut cfg = small_cfg();
        cfg.bits = Some(OneOrMany::One(100));
        cfg.q = OneOrMany::Many(vec![2, 3, 5]);
        let pts = sweep_points(&cfg).unwrap();
        let rs: Vec<usize> = pts.iter().map(|p| p.measurements).collect();
        assert_eq!(rs, vec![100, 50, 33]);
        assert_eq!(pts[2].label, "q=5");
        cfg.bits = Some(OneOrMany::One(1));
        assert!(sweep_points(&cfg).is_err());
    }

    #[test]
    fn single_point_label_and_sweep_requirement() {
        let cfg = small_cfg();
        assert_eq!(sweep_points(&cfg).unwrap()[0].label, "point");
        assert!(sweep(&cfg).is_err());
    }

    #[test]
    fn trials_are_deterministic() {
        let cfg = small_cfg();
        let point = &sweep_points(&cfg).unwrap()[0];
        for scheme in [Scheme::Scheme1, Scheme::Scheme2] {
            let q = calibrate_quantizer(&cfg, point, scheme).unwrap();
            assert_eq!(q, calibrate_quantizer(&cfg, point, scheme).unwrap());
            let a = run_trial(&cfg, point, scheme, &q, 99).unwrap();
            let b = run_trial(&cfg, point, scheme, &q, 99).unwrap();
            assert_eq!((a.nmse, a.bgain, a.mse, a.bits), (b.nmse, b.bgain, b.mse, b.bits));
            assert_eq!(a.bits, 40 * 2);
            assert!(a.nmse.is_finite() && a.nmse >= 0.0);
        }
    }

    #[test]
    fn parallel_results_match_sequential_order() {
        let cfg = small_cfg();
        let point = &sweep_points(&cfg).unwrap()[0];
        let q = calibrate_quantizer(&cfg, point, Scheme::Scheme1).unwrap();
        let par = run_point(&cfg, |s| run_trial(&cfg, point, Scheme::Scheme1, &q, s)).unwrap();
        for (i, r) in par.iter().enumerate() {
            let seq = run_trial(&cfg, point, Scheme::Scheme1, &q, trial_seed(cfg.master_seed, i as u64)).unwrap();
            assert_eq!(r.nmse, seq.nmse);
        }
    }

    #[test]
    fn slope_fit_recovers_power_law() {
        let x = [100.0, 200.0, 400.0, 800.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-0.5)).collect();
        let se: Vec<f64> = y.iter().map(|v| 0.1 * v).collect();
        let (s, sse) = loglog_slope(&x, &y, &se).unwrap();
        assert!((s + 0.5).abs() < 1e-12);
        // equal relative SE e at every point gives e / sqrt(Sxx)
        let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
        let m = lx.iter().sum::<f64>() / 4.0;
        let sxx: f64 = lx.iter().map(|v| (v - m).powi(2)).sum();
        assert!((sse - 0.1 / sxx.sqrt()).abs() < 1e-12);
        let half: Vec<f64> = se.iter().map(|v| v / 2f64.sqrt()).collect();
        assert!((loglog_slope(&x, &y, &half).unwrap().1 * 2f64.sqrt() - sse).abs() < 1e-12);
        assert!(loglog_slope(&x[..1], &y[..1], &se[..1]).is_err());
    }

    #[test]
    fn rate_needs_four_points() {
        let cfg = small_cfg();
        assert!(validate_rate(&cfg, Scheme::Scheme1).is_err());
    }

    #[test]
    fn interior_minimum_detection() {
        assert!(has_interior_minimum(&[3.0, 1.0, 2.0]));
        assert!(!has_interior_minimum(&[1.0, 2.0, 3.0]));
        assert!(!has_interior_minimum(&[3.0, 2.0, 1.0]));
        assert!(!has_interior_minimum(&[1.0, 2.0]));
    }

    #[test]
    fn dither_curve_is_grid_stable() {
        let base = symmetric_quantizer(4, 1.0).unwrap();
        let sigmas = log_grid(1e-2, 10.0, 20);
        let a = validate_dither_curve(&base, &sigmas, (-1.0, 1.0), 2001).unwrap();
        let b = validate_dither_curve(&base, &sigmas, (-1.0, 1.0), 4001).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x.l_over_f / y.l_over_f - 1.0).abs() < 0.01);
            assert!((x.u_over_f / y.u_over_f - 1.0).abs() < 0.01);
        }
        assert!(has_interior_minimum(&a.iter().map(|r| r.l_over_f).collect::<Vec<_>>()));
        assert!(has_interior_minimum(&a.iter().map(|r| r.u_over_f).collect::<Vec<_>>()));
    }

    #[test]
    fn srec_identical_pairs_and_degenerate_operator() {
        let mut cfg = small_cfg();
        cfg.array = ArrayConfig::new(4, 8, 2);
        let r1 = validate_srec(&cfg, Scheme::Scheme1, 1, 200).unwrap();
        let big = validate_srec(&cfg, Scheme::Scheme1, srec_measurements(&cfg.array, Scheme::Scheme1, 8.0), 200).unwrap();
        assert!(r1.pass_rate < 0.9, "{r1:?}");
        assert!(big.pass_rate >= 0.99, "{big:?}");
    }
}
