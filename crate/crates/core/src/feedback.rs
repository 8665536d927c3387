//! UE-side encoders and the BS-side measurement operators they imply.
//!
//! Both sides regenerate the random compressors (and, for Scheme 2, the
//! Gaussian pilots) from the seed carried in the payload, so only level
//! indices travel over the feedback link.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::channel::{real_embed_stacked, ChannelMatrix};
use crate::error::{dim_check, Error, Result};
use crate::quantize::{bits_per_index, Quantizer};

/// Pilot length as a multiple of the BS array size.
pub const DEFAULT_PILOT_FACTOR: usize = 4;
pub const DEFAULT_SNR_DB: f64 = 25.0;

const COMPRESSOR_STREAM: u64 = 1;
const PILOT_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Scheme1,
    Scheme2,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Scheme1 => "scheme1",
            Scheme::Scheme2 => "scheme2",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PilotKind {
    Orthogonal,
    Gaussian,
}

/// N x T pilot block S.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotMatrix {
    pub entries: DMatrix<Complex64>,
    pub kind: PilotKind,
}

impl PilotMatrix {
    pub fn num_tx(&self) -> usize {
        self.entries.nrows()
    }

    pub fn len(&self) -> usize {
        self.entries.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.ncols() == 0
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn complex_normal<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> Complex64 {
    let s = sigma * std::f64::consts::FRAC_1_SQRT_2;
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(s * re, s * im)
}

/// Sylvester-ordered Walsh-Hadamard entry; rows of the order-`len` matrix are
/// the OVSF codes at spreading factor `len`.
fn walsh(row: usize, col: usize) -> f64 {
    if (row & col).count_ones() % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

pub fn make_pilots<R: Rng + ?Sized>(kind: PilotKind, num_tx: usize, len: usize, rng: &mut R) -> Result<PilotMatrix> {
    if num_tx == 0 || len == 0 {
        return Err(Error::InvalidParameter("pilot dimensions must be positive".into()));
    }
    let entries = match kind {
        PilotKind::Orthogonal => {
            if len < num_tx {
                return Err(Error::InvalidParameter(format!(
                    "orthogonal pilots need T >= N (T = {len}, N = {num_tx})"
                )));
            }
            // spreading factor: the smallest power of two >= N that divides T;
            // longer blocks repeat the code, which keeps rows orthogonal
            let sf = num_tx.next_power_of_two();
            if len % sf != 0 {
                return Err(Error::InvalidParameter(format!(
                    "pilot length {len} is not a multiple of the code length {sf}"
                )));
            }
            let scale = 1.0 / (len as f64).sqrt();
            DMatrix::from_fn(num_tx, len, |n, t| Complex64::new(scale * walsh(n, t % sf), 0.0))
        }
        PilotKind::Gaussian => DMatrix::from_fn(num_tx, len, |_, _| complex_normal(rng, 1.0)),
    };
    Ok(PilotMatrix { entries, kind })
}

/// Noise standard deviation giving `snr_db` per received entry:
/// `||H S||_F^2 / (M T sigma^2)`.
pub fn noise_sigma_for_snr(h: &ChannelMatrix, s: &PilotMatrix, snr_db: f64) -> f64 {
    let hs = &h.0 * &s.entries;
    let power = hs.iter().map(|c| c.norm_sqr()).sum::<f64>() / (hs.nrows() * hs.ncols()) as f64;
    (power / 10f64.powf(snr_db / 10.0)).sqrt()
}

/// Y = H S + N with N ~ CN(0, sigma^2) per entry.
pub fn simulate_downlink<R: Rng + ?Sized>(
    h: &ChannelMatrix,
    s: &PilotMatrix,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<DMatrix<Complex64>> {
    dim_check(h.num_tx() == s.num_tx(), || {
        format!("channel has {} tx antennas, pilots have {}", h.num_tx(), s.num_tx())
    })?;
    let mut y = &h.0 * &s.entries;
    if noise_sigma > 0.0 {
        for v in y.iter_mut() {
            *v += complex_normal(rng, noise_sigma);
        }
    }
    Ok(y)
}

/// Least-squares estimate Y S^H for row-orthogonal pilots.
pub fn ls_estimate(y: &DMatrix<Complex64>, s: &PilotMatrix) -> Result<ChannelMatrix> {
    if s.kind != PilotKind::Orthogonal {
        return Err(Error::InvalidParameter("LS estimation requires orthogonal pilots".into()));
    }
    dim_check(y.ncols() == s.len(), || {
        format!("received block has {} columns, pilots have {}", y.ncols(), s.len())
    })?;
    Ok(ChannelMatrix(y * s.entries.adjoint()))
}

/// Scheme 1 compression matrix A (R x 2MN), entries N(0, 1/R).
#[derive(Debug, Clone, PartialEq)]
pub struct Scheme1Compressor {
    pub seed: u64,
    pub matrix: DMatrix<f64>,
}

pub fn make_compressor_scheme1(seed: u64, rows: usize, cols: usize) -> Result<Scheme1Compressor> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidParameter("compressor dimensions must be positive".into()));
    }
    let mut rng = stream_rng(seed, COMPRESSOR_STREAM);
    let scale = 1.0 / (rows as f64).sqrt();
    let mut matrix = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let g: f64 = rng.sample(StandardNormal);
            matrix[(i, j)] = scale * g;
        }
    }
    Ok(Scheme1Compressor { seed, matrix })
}

/// Quantized feedback as sent over the link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackPayload {
    pub scheme: Scheme,
    pub num_levels: usize,
    pub indices: Vec<usize>,
    pub seed: u64,
    pub num_rx: usize,
    pub num_tx: usize,
    /// R for Scheme 1, T for Scheme 2.
    pub measurements: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_sigma: Option<f64>,
}

impl FeedbackPayload {
    pub fn bits(&self) -> usize {
        self.indices.len() * bits_per_index(self.num_levels)
    }

    pub fn validate(&self) -> Result<()> {
        dim_check(self.indices.len() == self.measurements, || {
            format!("{} indices for {} measurements", self.indices.len(), self.measurements)
        })?;
        if let Some(r) = self.indices.iter().find(|&&r| r >= self.num_levels) {
            return Err(Error::InvalidParameter(format!("index {r} >= Q = {}", self.num_levels)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(s)?;
        p.validate()?;
        Ok(p)
    }
}

fn dither<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    let g: f64 = rng.sample(StandardNormal);
    sigma * g
}

/// x = A h_hat, r = Q(x + v).
pub fn encode_scheme1<R: Rng + ?Sized>(
    h_hat: &ChannelMatrix,
    comp: &Scheme1Compressor,
    q: &Quantizer,
    rng: &mut R,
) -> Result<FeedbackPayload> {
    let h = real_embed_stacked(h_hat);
    dim_check(comp.matrix.ncols() == h.len(), || {
        format!("compressor has {} columns, channel embeds to {}", comp.matrix.ncols(), h.len())
    })?;
    let x = &comp.matrix * h;
    let indices = x.iter().map(|xi| q.quantize(*xi, dither(rng, q.dither_sigma()))).collect();
    Ok(FeedbackPayload {
        scheme: Scheme::Scheme1,
        num_levels: q.num_levels(),
        indices,
        seed: comp.seed,
        num_rx: h_hat.num_rx(),
        num_tx: h_hat.num_tx(),
        measurements: comp.matrix.nrows(),
        noise_sigma: None,
    })
}

/// Shared Scheme 2 randomness: Gaussian pilots S (N x T) and per-instant
/// compressors a_t (rows of a T x 2M matrix, entries N(0, 1/T^2)).
#[derive(Debug, Clone, PartialEq)]
pub struct Scheme2Setup {
    pub seed: u64,
    pub pilots: PilotMatrix,
    pub compressors: DMatrix<f64>,
}

impl Scheme2Setup {
    pub fn generate(seed: u64, num_rx: usize, num_tx: usize, len: usize) -> Result<Self> {
        if num_rx == 0 {
            return Err(Error::InvalidParameter("num_rx must be positive".into()));
        }
        let pilots = make_pilots(PilotKind::Gaussian, num_tx, len, &mut stream_rng(seed, PILOT_STREAM))?;
        let mut rng = stream_rng(seed, COMPRESSOR_STREAM);
        let scale = 1.0 / len as f64;
        let mut compressors = DMatrix::zeros(len, 2 * num_rx);
        for t in 0..len {
            for i in 0..2 * num_rx {
                let g: f64 = rng.sample(StandardNormal);
                compressors[(t, i)] = scale * g;
            }
        }
        Ok(Self { seed, pilots, compressors })
    }

    pub fn num_rx(&self) -> usize {
        self.compressors.ncols() / 2
    }

    pub fn len(&self) -> usize {
        self.compressors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.compressors.nrows() == 0
    }
}

/// Per-instant compression `x_t = a_t^T [Re y_t; Im y_t]`. Each step reads
/// one received column and one compressor row, O(M) work per instant.
pub fn compress_received(y: &DMatrix<Complex64>, setup: &Scheme2Setup) -> Result<Vec<f64>> {
    let m = setup.num_rx();
    dim_check(y.nrows() == m && y.ncols() == setup.len(), || {
        format!("received block is {}x{}, expected {}x{}", y.nrows(), y.ncols(), m, setup.len())
    })?;
    Ok((0..setup.len())
        .map(|t| {
            let a = setup.compressors.row(t);
            (0..m).map(|i| a[i] * y[(i, t)].re + a[m + i] * y[(i, t)].im).sum()
        })
        .collect())
}

pub fn encode_scheme2<R: Rng + ?Sized>(
    y: &DMatrix<Complex64>,
    setup: &Scheme2Setup,
    q: &Quantizer,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<FeedbackPayload> {
    let x = compress_received(y, setup)?;
    let indices = x.iter().map(|xi| q.quantize(*xi, dither(rng, q.dither_sigma()))).collect();
    Ok(FeedbackPayload {
        scheme: Scheme::Scheme2,
        num_levels: q.num_levels(),
        indices,
        seed: setup.seed,
        num_rx: setup.num_rx(),
        num_tx: setup.pilots.num_tx(),
        measurements: setup.len(),
        noise_sigma: Some(noise_sigma),
    })
}

/// Scheme 2 operator on the block embedding: rows `s_t^T kron a_t^T`
/// (T x 4MN) and the per-row effective noise levels.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub matrix: DMatrix<f64>,
    pub sigmas: DVector<f64>,
}

pub fn build_design_matrix(setup: &Scheme2Setup, noise_sigma: f64, dither_sigma: f64) -> DesignMatrix {
    let m2 = 2 * setup.num_rx();
    let n = setup.pilots.num_tx();
    let t_len = setup.len();
    let mut matrix = DMatrix::zeros(t_len, 2 * m2 * n);
    let mut sigmas = DVector::zeros(t_len);
    for t in 0..t_len {
        let s_tilde: Vec<f64> = (0..n)
            .map(|k| setup.pilots.entries[(k, t)].re)
            .chain((0..n).map(|k| setup.pilots.entries[(k, t)].im))
            .collect();
        let a = setup.compressors.row(t);
        for (j, sj) in s_tilde.iter().enumerate() {
            for i in 0..m2 {
                matrix[(t, j * m2 + i)] = sj * a[i];
            }
        }
        sigmas[t] = effective_sigma(a.iter().map(|v| v * v).sum(), noise_sigma, dither_sigma);
    }
    DesignMatrix { matrix, sigmas }
}

/// Std of `a^T n_tilde + v` where each real component of `n_tilde` carries half
/// of the complex noise power.
fn effective_sigma(a_norm_sqr: f64, noise_sigma: f64, dither_sigma: f64) -> f64 {
    (0.5 * noise_sigma * noise_sigma * a_norm_sqr + dither_sigma * dither_sigma).sqrt()
}

/// Linear map from the stacked embedding h (length 2MN) to the quantizer
/// inputs, with one noise level per row. Scheme 2 folds the block embedding
/// into the columns so both schemes share the same solver.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementOperator {
    pub matrix: DMatrix<f64>,
    pub sigmas: DVector<f64>,
    pub num_rx: usize,
    pub num_tx: usize,
}

impl MeasurementOperator {
    pub fn scheme1(comp: &Scheme1Compressor, q: &Quantizer, num_rx: usize, num_tx: usize) -> Result<Self> {
        dim_check(comp.matrix.ncols() == 2 * num_rx * num_tx, || {
            format!("compressor has {} columns, expected {}", comp.matrix.ncols(), 2 * num_rx * num_tx)
        })?;
        Ok(Self {
            matrix: comp.matrix.clone(),
            sigmas: DVector::from_element(comp.matrix.nrows(), q.dither_sigma()),
            num_rx,
            num_tx,
        })
    }

    pub fn scheme2(setup: &Scheme2Setup, noise_sigma: f64, q: &Quantizer) -> Self {
        let d = build_design_matrix(setup, noise_sigma, q.dither_sigma());
        let (m, n) = (setup.num_rx(), setup.pilots.num_tx());
        Self {
            matrix: fold_block_columns(&d.matrix, m, n),
            sigmas: d.sigmas,
            num_rx: m,
            num_tx: n,
        }
    }

    /// Regenerates the operator from the seed carried in `payload`.
    pub fn from_payload(payload: &FeedbackPayload, q: &Quantizer) -> Result<Self> {
        payload.validate()?;
        dim_check(payload.num_levels == q.num_levels(), || {
            format!("payload has Q = {}, quantizer has {}", payload.num_levels, q.num_levels())
        })?;
        match payload.scheme {
            Scheme::Scheme1 => {
                let comp = make_compressor_scheme1(
                    payload.seed,
                    payload.measurements,
                    2 * payload.num_rx * payload.num_tx,
                )?;
                Self::scheme1(&comp, q, payload.num_rx, payload.num_tx)
            }
            Scheme::Scheme2 => {
                let setup = Scheme2Setup::generate(payload.seed, payload.num_rx, payload.num_tx, payload.measurements)?;
                Ok(Self::scheme2(&setup, payload.noise_sigma.unwrap_or(0.0), q))
            }
        }
    }

    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn apply(&self, h: &ChannelMatrix) -> DVector<f64> {
        &self.matrix * real_embed_stacked(h)
    }
}

/// Maps columns indexed by vec of the 2M x 2N block embedding onto columns
/// indexed by the stacked embedding of the same channel.
pub fn fold_block_columns(d: &DMatrix<f64>, num_rx: usize, num_tx: usize) -> DMatrix<f64> {
    let (m, n) = (num_rx, num_tx);
    let block = |row: usize, col: usize| col * 2 * m + row;
    let mut out = DMatrix::zeros(d.nrows(), 2 * m * n);
    for col in 0..n {
        for row in 0..m {
            let re_idx = 2 * m * col + row;
            let im_idx = 2 * m * col + m + row;
            for t in 0..d.nrows() {
                // Re H appears at (row, col) and (M+row, N+col);
                // Im H at (M+row, col) and, negated, at (row, N+col)
                out[(t, re_idx)] = d[(t, block(row, col))] + d[(t, block(m + row, n + col))];
                out[(t, im_idx)] = d[(t, block(m + row, col))] - d[(t, block(row, n + col))];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{real_embed_block, sample_channel_params, ArrayConfig, DEFAULT_AMP_RANGE, DEFAULT_ANGLE_RANGE};
    use crate::quantize::calibrate;
    use approx::assert_abs_diff_eq;

    fn random_channel(seed: u64, m: usize, n: usize, k: usize) -> ChannelMatrix {
        let cfg = ArrayConfig::new(m, n, k);
        let p = sample_channel_params(&mut ChaCha8Rng::seed_from_u64(seed), &cfg, DEFAULT_AMP_RANGE, DEFAULT_ANGLE_RANGE)
            .unwrap();
        p.synthesize(m, n, 0.5)
    }

    fn max_abs(m: &DMatrix<Complex64>) -> f64 {
        m.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    #[test]
    fn orthogonal_pilots_are_row_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = make_pilots(PilotKind::Orthogonal, 2, 4, &mut rng).unwrap();
        let g = &s.entries * s.entries.adjoint();
        assert_eq!(g, DMatrix::identity(2, 2));
        for (n, t) in [(32, 128), (48, 192), (5, 8)] {
            let s = make_pilots(PilotKind::Orthogonal, n, t, &mut rng).unwrap();
            let g = &s.entries * s.entries.adjoint();
            assert!(max_abs(&(g - DMatrix::identity(n, n))) < 1e-10);
        }
        assert!(make_pilots(PilotKind::Orthogonal, 8, 4, &mut rng).is_err());
        assert!(make_pilots(PilotKind::Orthogonal, 4, 6, &mut rng).is_err());
    }

    #[test]
    fn gaussian_pilots_have_unit_power() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = make_pilots(PilotKind::Gaussian, 100, 100, &mut rng).unwrap();
        let p = s.entries.iter().map(|c| c.norm_sqr()).sum::<f64>() / 1e4;
        assert!((p - 1.0).abs() < 0.05, "{p}");
    }

    #[test]
    fn noiseless_downlink_and_ls_are_exact() {
        let h = random_channel(2, 4, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = make_pilots(PilotKind::Orthogonal, 8, 32, &mut rng).unwrap();
        let y = simulate_downlink(&h, &s, 0.0, &mut rng).unwrap();
        assert_eq!(y, &h.0 * &s.entries);
        let est = ls_estimate(&y, &s).unwrap();
        assert!(max_abs(&(est.0 - &h.0)) < 1e-10);
        let zero = ls_estimate(&DMatrix::zeros(4, 32), &s).unwrap();
        assert!(zero.0.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn ls_rejects_gaussian_pilots() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = make_pilots(PilotKind::Gaussian, 4, 16, &mut rng).unwrap();
        assert!(ls_estimate(&DMatrix::zeros(2, 16), &s).is_err());
    }

    #[test]
    fn snr_and_noise_power() {
        let h = random_channel(4, 10, 10, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let s = make_pilots(PilotKind::Orthogonal, 10, 1024, &mut rng).unwrap();
        let sigma = noise_sigma_for_snr(&h, &s, 25.0);
        let clean = &h.0 * &s.entries;
        let sig_power = clean.iter().map(|c| c.norm_sqr()).sum::<f64>() / clean.len() as f64;
        assert_abs_diff_eq!(10.0 * (sig_power / (sigma * sigma)).log10(), 25.0, epsilon = 1e-9);

        let y = simulate_downlink(&h, &s, sigma, &mut rng).unwrap();
        let noise_power = (y - clean).iter().map(|c| c.norm_sqr()).sum::<f64>() / (10.0 * 1024.0);
        assert!((noise_power / (sigma * sigma) - 1.0).abs() < 0.05);
    }

    #[test]
    fn ls_error_matches_noise_level() {
        // E||Y S^H - H||_F^2 = M N sigma^2 for S S^H = I
        let (m, n) = (4, 8);
        let h = random_channel(6, m, n, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = make_pilots(PilotKind::Orthogonal, n, 32, &mut rng).unwrap();
        let sigma = 0.3;
        let trials = 2000;
        let mut acc = 0.0;
        for _ in 0..trials {
            let y = simulate_downlink(&h, &s, sigma, &mut rng).unwrap();
            let e = ls_estimate(&y, &s).unwrap();
            acc += (e.0 - &h.0).iter().map(|c| c.norm_sqr()).sum::<f64>();
        }
        let expect = (m * n) as f64 * sigma * sigma;
        assert!((acc / trials as f64 / expect - 1.0).abs() < 0.05);
    }

    #[test]
    fn compressor_is_seeded_with_variance_one_over_r() {
        let a = make_compressor_scheme1(42, 50, 200).unwrap();
        let b = make_compressor_scheme1(42, 50, 200).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.matrix, make_compressor_scheme1(43, 50, 200).unwrap().matrix);
        let var = a.matrix.iter().map(|v| v * v).sum::<f64>() / 1e4;
        assert!((var * 50.0 - 1.0).abs() < 0.05);
    }

    #[test]
    fn compressor_preserves_norm_on_average() {
        let (r, j) = (64, 128);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut acc = 0.0;
        for s in 0..1000 {
            let a = make_compressor_scheme1(s, r, j).unwrap();
            let x = DVector::from_fn(j, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &x / x.norm();
            acc += (&a.matrix * x).norm_squared();
        }
        assert!((acc / 1000.0 - 1.0).abs() < 0.05);
    }

    #[test]
    fn compressor_spectral_norm_bound() {
        let (r, j) = (40, 160);
        let bound = 2.0 + (j as f64 / r as f64).sqrt() + 0.5;
        let ok = (0..1000)
            .filter(|s| {
                let a = make_compressor_scheme1(*s, r, j).unwrap();
                a.matrix.singular_values()[0] <= bound
            })
            .count();
        assert!(ok >= 950, "{ok}");
    }

    #[test]
    fn scheme1_payload_shape_and_noiseless_limit() {
        let h = random_channel(9, 3, 4, 2);
        let comp = make_compressor_scheme1(1, 10, 24).unwrap();
        let x = &comp.matrix * real_embed_stacked(&h);
        let samples: Vec<f64> = x.iter().copied().collect();
        let q = calibrate(&samples, 8, 1e-12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = encode_scheme1(&h, &comp, &q, &mut rng).unwrap();
        assert_eq!(p.indices.len(), 10);
        assert_eq!(p.bits(), 30);
        let direct: Vec<usize> = x.iter().map(|v| q.quantize(*v, 0.0)).collect();
        // tiny dither only flips samples within ~1e-12 of a boundary
        assert_eq!(p.indices, direct);
        assert!(encode_scheme1(&ChannelMatrix::zeros(2, 2), &comp, &q, &mut rng).is_err());
    }

    #[test]
    fn scheme2_zero_signal_hits_central_cells() {
        let setup = Scheme2Setup::generate(3, 4, 8, 200).unwrap();
        let q = calibrate(&[-1.0, 1.0], 4, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = encode_scheme2(&DMatrix::zeros(4, 200), &setup, &q, 0.0, &mut rng).unwrap();
        assert_eq!(p.indices.len(), 200);
        let central = p.indices.iter().filter(|&&r| r == 1 || r == 2).count();
        assert!(central >= 195, "{central}");
    }

    #[test]
    fn effective_sigma_matches_compressed_noise() {
        // a_t^T [Re n; Im n] with n ~ CN(0, sigma^2 I) has variance sigma^2/2 ||a_t||^2
        let (m, n, t) = (8, 4, 64);
        let setup = Scheme2Setup::generate(3, m, n, t).unwrap();
        let sigma = 0.7;
        let d = build_design_matrix(&setup, sigma, 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let zero = ChannelMatrix::zeros(m, n);
        let draws = 4000;
        let mut acc = vec![0.0; t];
        for _ in 0..draws {
            let y = simulate_downlink(&zero, &setup.pilots, sigma, &mut rng).unwrap();
            for (a, x) in acc.iter_mut().zip(compress_received(&y, &setup).unwrap()) {
                *a += x * x;
            }
        }
        let ratio: f64 = acc.iter().zip(&d.sigmas).map(|(a, s)| a / draws as f64 / (s * s)).sum::<f64>() / t as f64;
        assert!((ratio - 1.0).abs() < 0.03, "{ratio}");
    }

    #[test]
    fn kronecker_rows_reproduce_bilinear_form() {
        let (m, n, t) = (3, 5, 40);
        let h = random_channel(10, m, n, 2);
        let setup = Scheme2Setup::generate(77, m, n, t).unwrap();
        let d = build_design_matrix(&setup, 0.0, 0.1);
        let (hb, hv) = real_embed_block(&h);
        let dh = &d.matrix * &hv;
        for k in 0..t {
            let s = &setup.pilots.entries.column(k);
            let s_tilde = DVector::from_iterator(2 * n, s.iter().map(|c| c.re).chain(s.iter().map(|c| c.im)));
            let a = setup.compressors.row(k).transpose();
            let direct = (a.transpose() * &hb * s_tilde)[(0, 0)];
            assert!((direct - dh[k]).abs() < 1e-12, "{direct} {}", dh[k]);
        }
        assert!(d.sigmas.iter().all(|s| *s == 0.1));
    }

    #[test]
    fn folded_operator_matches_block_operator_and_encoder() {
        let (m, n, t) = (3, 4, 30);
        let h = random_channel(12, m, n, 2);
        let setup = Scheme2Setup::generate(5, m, n, t).unwrap();
        let d = build_design_matrix(&setup, 0.0, 0.1);
        let (_, hv) = real_embed_block(&h);
        let folded = fold_block_columns(&d.matrix, m, n) * real_embed_stacked(&h);
        let block = &d.matrix * hv;
        assert!((folded - &block).amax() < 1e-12);

        let y = simulate_downlink(&h, &setup.pilots, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = compress_received(&y, &setup).unwrap();
        for k in 0..t {
            assert!((x[k] - block[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn operators_regenerate_from_payload_seed() {
        let h = random_channel(13, 2, 4, 1);
        let q = calibrate(&[-3.0, 3.0], 4, 0.25).unwrap();
        let comp = make_compressor_scheme1(99, 12, 16).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p1 = encode_scheme1(&h, &comp, &q, &mut rng).unwrap();
        let op = MeasurementOperator::from_payload(&p1, &q).unwrap();
        assert_eq!(op.matrix, comp.matrix);

        let setup = Scheme2Setup::generate(100, 2, 4, 20).unwrap();
        let y = simulate_downlink(&h, &setup.pilots, 0.1, &mut rng).unwrap();
        let p2 = encode_scheme2(&y, &setup, &q, 0.1, &mut rng).unwrap();
        let op2 = MeasurementOperator::from_payload(&p2, &q).unwrap();
        assert_eq!(op2, MeasurementOperator::scheme2(&setup, 0.1, &q));
        let d = build_design_matrix(&setup, 0.1, q.dither_sigma());
        assert_eq!(op2.sigmas, d.sigmas);
        assert!(op2.sigmas.iter().all(|s| *s > q.dither_sigma()));
    }

    #[test]
    fn payload_json_round_trip_and_validation() {
        let p = FeedbackPayload {
            scheme: Scheme::Scheme2,
            num_levels: 3,
            indices: vec![0, 2, 1],
            seed: 7,
            num_rx: 2,
            num_tx: 4,
            measurements: 3,
            noise_sigma: Some(0.01),
        };
        let s = p.to_json().unwrap();
        assert!(s.contains("\"scheme2\""));
        assert_eq!(FeedbackPayload::from_json(&s).unwrap(), p);
        assert_eq!(p.bits(), 6);
        let bad = FeedbackPayload { indices: vec![0, 3, 1], ..p.clone() };
        assert!(FeedbackPayload::from_json(&bad.to_json().unwrap()).is_err());
        let short = FeedbackPayload { indices: vec![0], ..p };
        assert!(short.validate().is_err());
    }
}
