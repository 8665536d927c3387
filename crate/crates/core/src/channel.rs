//! Double-directional ULA channel model, its real embeddings, and the
//! channel CSV exchange format.

use std::f64::consts::{FRAC_PI_2, PI};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_check, Error, Result};

/// Default path-gain amplitude range for synthetic trials.
pub const DEFAULT_AMP_RANGE: (f64, f64) = (0.5, 1.0);
/// Amplitude range for the high-dynamic-range robustness study.
pub const HIGH_DYNAMIC_AMP_RANGE: (f64, f64) = (0.01, 1.0);
/// Open angle interval used for both AoA and AoD.
pub const DEFAULT_ANGLE_RANGE: (f64, f64) = (-FRAC_PI_2, FRAC_PI_2);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayConfig {
    /// N, antennas at the BS.
    #[serde(default = "default_num_tx")]
    pub num_tx: usize,
    /// M, antennas at the UE.
    #[serde(default = "default_num_rx")]
    pub num_rx: usize,
    /// d / lambda.
    #[serde(default = "default_spacing")]
    pub spacing_ratio: f64,
    /// K, propagation paths.
    #[serde(default = "default_num_paths")]
    pub num_paths: usize,
    /// kappa, bound on |beta_k|.
    #[serde(default = "default_amp_max")]
    pub amp_max: f64,
}

fn default_num_tx() -> usize {
    32
}
fn default_num_rx() -> usize {
    16
}
fn default_spacing() -> f64 {
    0.5
}
fn default_num_paths() -> usize {
    6
}
fn default_amp_max() -> f64 {
    1.0
}

impl Default for ArrayConfig {
    fn default() -> Self {
        Self {
            num_tx: default_num_tx(),
            num_rx: default_num_rx(),
            spacing_ratio: default_spacing(),
            num_paths: default_num_paths(),
            amp_max: default_amp_max(),
        }
    }
}

impl ArrayConfig {
    pub fn new(num_rx: usize, num_tx: usize, num_paths: usize) -> Self {
        Self {
            num_rx,
            num_tx,
            num_paths,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_tx == 0 || self.num_rx == 0 {
            return Err(Error::InvalidParameter("antenna counts must be positive".into()));
        }
        if self.num_paths == 0 {
            return Err(Error::InvalidParameter("num_paths must be positive".into()));
        }
        if !(self.spacing_ratio > 0.0 && self.spacing_ratio.is_finite()) {
            return Err(Error::InvalidParameter("spacing_ratio must be > 0".into()));
        }
        if !(self.amp_max > 0.0 && self.amp_max.is_finite()) {
            return Err(Error::InvalidParameter("amp_max must be > 0".into()));
        }
        Ok(())
    }

    /// Length of the stacked real embedding, 2MN.
    pub fn stacked_len(&self) -> usize {
        2 * self.num_rx * self.num_tx
    }
}

/// Path parameters z = (theta, phi, beta).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ChannelParams {
    pub aoa: Vec<f64>,
    pub aod: Vec<f64>,
    pub gains: Vec<Complex64>,
}

impl ChannelParams {
    pub fn new(aoa: Vec<f64>, aod: Vec<f64>, gains: Vec<Complex64>) -> Result<Self> {
        dim_check(aoa.len() == aod.len() && aoa.len() == gains.len(), || {
            format!(
                "path parameter lengths differ: aoa {}, aod {}, gains {}",
                aoa.len(),
                aod.len(),
                gains.len()
            )
        })?;
        Ok(Self { aoa, aod, gains })
    }

    pub fn zeros(k: usize) -> Self {
        Self {
            aoa: vec![0.0; k],
            aod: vec![0.0; k],
            gains: vec![Complex64::new(0.0, 0.0); k],
        }
    }

    pub fn num_paths(&self) -> usize {
        self.gains.len()
    }

    /// Checks the admissibility constraints against `cfg`.
    pub fn is_admissible(&self, cfg: &ArrayConfig) -> bool {
        self.num_paths() == cfg.num_paths
            && self.gains.iter().all(|b| b.norm() <= cfg.amp_max * (1.0 + 1e-12))
            && self
                .aoa
                .iter()
                .chain(&self.aod)
                .all(|a| *a > -FRAC_PI_2 && *a <= FRAC_PI_2)
    }

    /// Concatenation (theta, phi, Re beta, Im beta).
    pub fn to_real_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(4 * self.num_paths());
        v.extend_from_slice(&self.aoa);
        v.extend_from_slice(&self.aod);
        v.extend(self.gains.iter().map(|b| b.re));
        v.extend(self.gains.iter().map(|b| b.im));
        v
    }

    pub fn from_real_vec(v: &[f64]) -> Result<Self> {
        dim_check(v.len() % 4 == 0, || format!("length {} is not a multiple of 4", v.len()))?;
        let k = v.len() / 4;
        Ok(Self {
            aoa: v[..k].to_vec(),
            aod: v[k..2 * k].to_vec(),
            gains: (0..k).map(|i| Complex64::new(v[2 * k + i], v[3 * k + i])).collect(),
        })
    }

    /// G(z) on an M x N array.
    pub fn synthesize(&self, num_rx: usize, num_tx: usize, spacing_ratio: f64) -> ChannelMatrix {
        let mut h = DMatrix::<Complex64>::zeros(num_rx, num_tx);
        for k in 0..self.num_paths() {
            let ar = steering_vector(self.aoa[k], num_rx, spacing_ratio);
            let at = steering_vector(self.aod[k], num_tx, spacing_ratio);
            add_rank_one(&mut h, self.gains[k], &ar, &at);
        }
        ChannelMatrix(h)
    }
}

/// `h += beta * a_r * a_t^H`
pub(crate) fn add_rank_one(
    h: &mut DMatrix<Complex64>,
    beta: Complex64,
    ar: &DVector<Complex64>,
    at: &DVector<Complex64>,
) {
    for n in 0..h.ncols() {
        let w = beta * at[n].conj();
        for m in 0..h.nrows() {
            h[(m, n)] += ar[m] * w;
        }
    }
}

/// Complex M x N downlink channel H.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix(pub DMatrix<Complex64>);

impl ChannelMatrix {
    pub fn zeros(num_rx: usize, num_tx: usize) -> Self {
        Self(DMatrix::zeros(num_rx, num_tx))
    }

    pub fn num_rx(&self) -> usize {
        self.0.nrows()
    }

    pub fn num_tx(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.0
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.0.iter().map(|c| c.norm_sqr()).sum()
    }
}

impl From<DMatrix<Complex64>> for ChannelMatrix {
    fn from(m: DMatrix<Complex64>) -> Self {
        Self(m)
    }
}

/// Spatial frequency 2 pi (d/lambda) sin(angle).
pub fn spatial_frequency(angle: f64, spacing_ratio: f64) -> f64 {
    2.0 * PI * spacing_ratio * angle.sin()
}

/// Principal-value angle for a spatial frequency; out-of-range values clamp
/// to endfire.
pub fn angle_from_frequency(omega: f64, spacing_ratio: f64) -> f64 {
    (omega / (2.0 * PI * spacing_ratio)).clamp(-1.0, 1.0).asin()
}

/// `[1, e^{-j w}, ..., e^{-j w (n-1)}]`
pub fn steering_from_frequency(omega: f64, num_antennas: usize) -> DVector<Complex64> {
    DVector::from_iterator(
        num_antennas,
        (0..num_antennas).map(|m| {
            if m == 0 {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::from_polar(1.0, -omega * m as f64)
            }
        }),
    )
}

pub fn steering_vector(angle: f64, num_antennas: usize, spacing_ratio: f64) -> DVector<Complex64> {
    steering_from_frequency(spatial_frequency(angle, spacing_ratio), num_antennas)
}

pub fn synthesize_channel(params: &ChannelParams, cfg: &ArrayConfig) -> Result<ChannelMatrix> {
    dim_check(params.num_paths() == cfg.num_paths, || {
        format!(
            "params carry {} paths but config expects {}",
            params.num_paths(),
            cfg.num_paths
        )
    })?;
    dim_check(
        params.aoa.len() == params.gains.len() && params.aod.len() == params.gains.len(),
        || "path parameter lengths differ".into(),
    )?;
    Ok(params.synthesize(cfg.num_rx, cfg.num_tx, cfg.spacing_ratio))
}

pub fn sample_channel_params<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &ArrayConfig,
    amp_range: (f64, f64),
    angle_range: (f64, f64),
) -> Result<ChannelParams> {
    let (amp_lo, amp_hi) = amp_range;
    if !(amp_lo > 0.0 && amp_lo <= amp_hi && amp_hi <= cfg.amp_max) {
        return Err(Error::InvalidParameter(format!(
            "amplitude range ({amp_lo}, {amp_hi}) must satisfy 0 < low <= high <= {}",
            cfg.amp_max
        )));
    }
    let (ang_lo, ang_hi) = angle_range;
    if !(ang_lo < ang_hi && ang_lo >= -FRAC_PI_2 && ang_hi <= FRAC_PI_2) {
        return Err(Error::InvalidParameter(format!(
            "angle range ({ang_lo}, {ang_hi}) must lie inside (-pi/2, pi/2)"
        )));
    }
    let k = cfg.num_paths;
    let open_angle = |rng: &mut R| loop {
        let a = rng.gen_range(ang_lo..ang_hi);
        if a > ang_lo {
            break a;
        }
    };
    let aoa: Vec<f64> = (0..k).map(|_| open_angle(rng)).collect();
    let aod: Vec<f64> = (0..k).map(|_| open_angle(rng)).collect();
    let gains = (0..k)
        .map(|_| {
            let amp = if amp_lo == amp_hi {
                amp_lo
            } else {
                rng.gen_range(amp_lo..amp_hi)
            };
            let phase = rng.gen_range(0.0..2.0 * PI);
            Complex64::from_polar(amp, phase)
        })
        .collect();
    Ok(ChannelParams { aoa, aod, gains })
}

/// h = vec([Re H; Im H]) in column-major order, length 2MN.
pub fn real_embed_stacked(h: &ChannelMatrix) -> DVector<f64> {
    let (m, n) = (h.num_rx(), h.num_tx());
    let mut v = DVector::zeros(2 * m * n);
    for col in 0..n {
        for row in 0..m {
            let c = h.0[(row, col)];
            v[2 * m * col + row] = c.re;
            v[2 * m * col + m + row] = c.im;
        }
    }
    v
}

pub fn un_embed_stacked(v: &DVector<f64>, num_rx: usize, num_tx: usize) -> Result<ChannelMatrix> {
    dim_check(v.len() == 2 * num_rx * num_tx, || {
        format!("stacked vector length {} != 2*{}*{}", v.len(), num_rx, num_tx)
    })?;
    let m = num_rx;
    Ok(ChannelMatrix(DMatrix::from_fn(num_rx, num_tx, |row, col| {
        Complex64::new(v[2 * m * col + row], v[2 * m * col + m + row])
    })))
}

/// Returns `[[Re H, -Im H], [Im H, Re H]]` and its column-major vectorization.
pub fn real_embed_block(h: &ChannelMatrix) -> (DMatrix<f64>, DVector<f64>) {
    let (m, n) = (h.num_rx(), h.num_tx());
    let mut b = DMatrix::zeros(2 * m, 2 * n);
    for col in 0..n {
        for row in 0..m {
            let c = h.0[(row, col)];
            b[(row, col)] = c.re;
            b[(row, n + col)] = -c.im;
            b[(m + row, col)] = c.im;
            b[(m + row, n + col)] = c.re;
        }
    }
    let v = DVector::from_column_slice(b.as_slice());
    (b, v)
}

pub fn un_embed_block(b: &DMatrix<f64>) -> Result<ChannelMatrix> {
    dim_check(b.nrows() % 2 == 0 && b.ncols() % 2 == 0, || {
        format!("block embedding must have even dimensions, got {}x{}", b.nrows(), b.ncols())
    })?;
    let (m, n) = (b.nrows() / 2, b.ncols() / 2);
    Ok(ChannelMatrix(DMatrix::from_fn(m, n, |row, col| {
        Complex64::new(b[(row, col)], b[(m + row, col)])
    })))
}

/// Upper bound on the Lipschitz constant of z -> G(z) over the admissible set.
pub fn lipschitz_bound(cfg: &ArrayConfig) -> f64 {
    let (k, m, n) = (cfg.num_paths as f64, cfg.num_rx as f64, cfg.num_tx as f64);
    let slope = 2.0 * PI * cfg.spacing_ratio * cfg.amp_max;
    (k * m * n).sqrt() * (1.0 + slope * slope * (m * m + n * n)).sqrt()
}

/// Sidecar record accompanying a channel CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelMeta {
    pub num_rx: usize,
    pub num_tx: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_paths: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct EntryRecord {
    m: usize,
    n: usize,
    re: f64,
    im: f64,
}

pub fn meta_path(csv_path: &Path) -> PathBuf {
    let mut p = csv_path.as_os_str().to_owned();
    p.push(".meta.json");
    PathBuf::from(p)
}

pub fn write_channel_csv<W: Write>(w: W, h: &ChannelMatrix) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for m in 0..h.num_rx() {
        for n in 0..h.num_tx() {
            let c = h.0[(m, n)];
            wr.serialize(EntryRecord { m, n, re: c.re, im: c.im })?;
        }
    }
    wr.flush()?;
    Ok(())
}

pub fn read_channel_csv<R: Read>(r: R, meta: &ChannelMeta) -> Result<ChannelMatrix> {
    let mut rd = csv::Reader::from_reader(r);
    let headers = rd.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["m", "n", "re", "im"] {
        return Err(Error::Parse(format!(
            "channel CSV header must be `m,n,re,im`, found `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut h = DMatrix::zeros(meta.num_rx, meta.num_tx);
    let mut seen = vec![false; meta.num_rx * meta.num_tx];
    for rec in rd.deserialize() {
        let e: EntryRecord = rec?;
        if e.m >= meta.num_rx || e.n >= meta.num_tx {
            return Err(Error::Dimension(format!(
                "entry ({}, {}) outside {}x{}",
                e.m, e.n, meta.num_rx, meta.num_tx
            )));
        }
        h[(e.m, e.n)] = Complex64::new(e.re, e.im);
        seen[e.m * meta.num_tx + e.n] = true;
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Parse(format!(
            "channel CSV is missing entry ({}, {})",
            missing / meta.num_tx,
            missing % meta.num_tx
        )));
    }
    Ok(ChannelMatrix(h))
}

/// Writes `path` plus its `.meta.json` sidecar.
pub fn export_channel(path: &Path, h: &ChannelMatrix, num_paths: Option<usize>) -> Result<()> {
    write_channel_csv(std::fs::File::create(path)?, h)?;
    let meta = ChannelMeta {
        num_rx: h.num_rx(),
        num_tx: h.num_tx(),
        num_paths,
    };
    std::fs::write(meta_path(path), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn import_channel(path: &Path) -> Result<(ChannelMatrix, ChannelMeta)> {
    let meta: ChannelMeta = serde_json::from_str(&std::fs::read_to_string(meta_path(path))?)?;
    let h = read_channel_csv(std::fs::File::open(path)?, &meta)?;
    Ok((h, meta))
}
