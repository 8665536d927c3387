//! TOML experiment configuration with dotted-path overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::ArrayConfig;
use crate::error::{Error, Result};
use crate::feedback::{Scheme, DEFAULT_PILOT_FACTOR, DEFAULT_SNR_DB};
use crate::quantize::DEFAULT_DITHER_FRACTION;
use crate::solver::{GdConfig, SolverConfig};

/// A scalar or a list of sweep values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn values(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }

    pub fn is_sweep(&self) -> bool {
        matches!(self, OneOrMany::Many(v) if v.len() > 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeSelection {
    Scheme1,
    Scheme2,
    Both,
}

impl SchemeSelection {
    pub fn schemes(self) -> Vec<Scheme> {
        match self {
            SchemeSelection::Scheme1 => vec![Scheme::Scheme1],
            SchemeSelection::Scheme2 => vec![Scheme::Scheme2],
            SchemeSelection::Both => vec![Scheme::Scheme1, Scheme::Scheme2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RateConfig {
    pub slope_min: f64,
    pub slope_max: f64,
}

impl Default for RateConfig {
    fn default() -> Self {
        Self { slope_min: -0.9, slope_max: -0.3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DitherConfig {
    pub q: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub points: usize,
    pub grid_points: usize,
    /// Calibration samples are spread uniformly over `[-half_range, half_range]`.
    pub half_range: f64,
}

impl Default for DitherConfig {
    fn default() -> Self {
        Self { q: 4, sigma_min: 1e-2, sigma_max: 10.0, points: 20, grid_points: 2001, half_range: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SrecConfig {
    pub pairs: usize,
    /// Multiplier on the order expressions for R and T.
    pub constant: f64,
    pub gamma: f64,
    pub min_pass_rate: f64,
    /// Explicit measurement count; the scaled order expression is used when absent.
    pub measurements: Option<usize>,
}

impl Default for SrecConfig {
    fn default() -> Self {
        Self { pairs: 1000, constant: 8.0, gamma: 0.5, min_pass_rate: 0.99, measurements: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub array: ArrayConfig,
    pub scheme: SchemeSelection,
    /// Quantizer levels Q.
    pub q: OneOrMany<usize>,
    /// R for Scheme 1, T for Scheme 2. Ignored when `bits` is set.
    pub measurements: OneOrMany<usize>,
    /// Feedback bit budget; measurements become `floor(bits / ceil(log2 Q))`.
    pub bits: Option<OneOrMany<usize>>,
    pub snr_db: OneOrMany<f64>,
    /// Overrides `array.num_tx` when present.
    pub num_tx: Option<OneOrMany<usize>>,
    /// Paths assumed by the solver; defaults to `array.num_paths`.
    pub assumed_k: Option<OneOrMany<usize>>,
    /// Lower end of the path-gain amplitude range; the upper end is `array.amp_max`.
    pub amp_min: OneOrMany<f64>,
    pub trials: usize,
    pub master_seed: u64,
    pub dither_fraction: f64,
    pub calibration_samples: usize,
    /// Scheme 1 pilot length as a multiple of N.
    pub pilot_factor: usize,
    pub solver: SolverConfig,
    /// Also runs the gradient-descent baseline when present.
    pub gd: Option<GdConfig>,
    pub rate: RateConfig,
    pub dither: DitherConfig,
    pub srec: SrecConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            array: ArrayConfig::default(),
            scheme: SchemeSelection::Both,
            q: OneOrMany::One(3),
            measurements: OneOrMany::One(300),
            bits: None,
            snr_db: OneOrMany::One(DEFAULT_SNR_DB),
            num_tx: None,
            assumed_k: None,
            amp_min: OneOrMany::One(0.5),
            trials: 100,
            master_seed: 0,
            dither_fraction: DEFAULT_DITHER_FRACTION,
            calibration_samples: 1000,
            pilot_factor: DEFAULT_PILOT_FACTOR,
            solver: SolverConfig::default(),
            gd: None,
            rate: RateConfig::default(),
            dither: DitherConfig::default(),
            srec: SrecConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        Self::from_toml_with_overrides(s, &[])
    }

    /// Parses `s` and applies `key=value` overrides before validation.
    pub fn from_toml_with_overrides(s: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = s.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.array.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.solver.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.q.values().is_empty() || self.q.values().iter().any(|q| *q < 2) {
            return bad("q must list values >= 2".into());
        }
        if self.bits.is_none() && (self.measurements.values().is_empty() || self.measurements.values().contains(&0)) {
            return bad("measurements must list values >= 1".into());
        }
        if let Some(b) = &self.bits {
            if b.values().is_empty() || b.values().contains(&0) {
                return bad("bits must list values >= 1".into());
            }
        }
        if self.snr_db.values().is_empty() || self.snr_db.values().iter().any(|s| !s.is_finite()) {
            return bad("snr_db must list finite values".into());
        }
        if let Some(n) = &self.num_tx {
            if n.values().is_empty() || n.values().contains(&0) {
                return bad("num_tx must list values >= 1".into());
            }
        }
        if let Some(k) = &self.assumed_k {
            if k.values().is_empty() || k.values().contains(&0) {
                return bad("assumed_k must list values >= 1".into());
            }
        }
        let amps = self.amp_min.values();
        if amps.is_empty() || amps.iter().any(|a| !(*a > 0.0 && *a <= self.array.amp_max)) {
            return bad(format!("amp_min values must lie in (0, {}]", self.array.amp_max));
        }
        if !(self.dither_fraction > 0.0) {
            return bad("dither_fraction must be positive".into());
        }
        if self.calibration_samples < 2 {
            return bad("calibration_samples must be at least 2".into());
        }
        if self.pilot_factor == 0 {
            return bad("pilot_factor must be positive".into());
        }
        if let Some(gd) = &self.gd {
            if !(gd.step_size > 0.0) || gd.max_iters == 0 {
                return bad("gd.step_size and gd.max_iters must be positive".into());
            }
        }
        if self.rate.slope_min > self.rate.slope_max {
            return bad("rate.slope_min exceeds rate.slope_max".into());
        }
        let d = &self.dither;
        if d.q < 2 || !(d.sigma_min > 0.0 && d.sigma_min < d.sigma_max) || d.points < 3 || d.grid_points < 100 || !(d.half_range > 0.0) {
            return bad("dither section is inconsistent".into());
        }
        let s = &self.srec;
        if s.pairs == 0 || !(s.constant > 0.0) || !(s.gamma > 0.0) || !(0.0..=1.0).contains(&s.min_pass_rate) {
            return bad("srec section is inconsistent".into());
        }
        Ok(())
    }
}

/// Sets `a.b.c = value` in `table`. The value is read as a TOML literal and
/// falls back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override `{spec}` has an empty key")));
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{spec}`: `{part}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.array.num_rx, 16);
        assert_eq!(cfg.solver.rho, 1.0);
    }

    #[test]
    fn scalar_and_list_axes() {
        let cfg = ExperimentConfig::from_toml_str("q = [2, 3, 4]\nmeasurements = 250\n[array]\nnum_rx = 8\n").unwrap();
        assert_eq!(cfg.q.values(), vec![2, 3, 4]);
        assert!(cfg.q.is_sweep());
        assert!(!cfg.measurements.is_sweep());
        assert_eq!(cfg.array.num_rx, 8);
        assert_eq!(cfg.array.num_tx, 32);
    }

    #[test]
    fn overrides_apply_by_dotted_path() {
        let cfg = ExperimentConfig::from_toml_with_overrides(
            "trials = 20",
            &["trials=10".into(), "solver.rho = 2.0".into(), "scheme=scheme1".into(), "bits=[300, 600]".into()],
        )
        .unwrap();
        assert_eq!(cfg.trials, 10);
        assert_eq!(cfg.solver.rho, 2.0);
        assert_eq!(cfg.scheme, SchemeSelection::Scheme1);
        assert_eq!(cfg.bits.unwrap().values(), vec![300, 600]);
    }

    #[test]
    fn rejects_unknown_and_invalid_fields() {
        assert!(ExperimentConfig::from_toml_str("tirals = 3").is_err());
        assert!(ExperimentConfig::from_toml_str("trials = 0").is_err());
        assert!(ExperimentConfig::from_toml_str("q = 1").is_err());
        assert!(ExperimentConfig::from_toml_str("[solver]\nrho = -1.0").is_err());
        assert!(ExperimentConfig::from_toml_str("not toml [").is_err());
        assert!(ExperimentConfig::from_toml_with_overrides("", &["trials".into()]).is_err());
        assert!(ExperimentConfig::from_toml_with_overrides("trials = 3", &["trials.x=1".into()]).is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = ExperimentConfig::default();
        cfg.gd = Some(GdConfig::default());
        cfg.assumed_k = Some(OneOrMany::Many(vec![4, 6, 8]));
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
