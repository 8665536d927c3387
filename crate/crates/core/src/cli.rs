//! Command-line front end. `run` returns the process exit code:
//! 0 on success, 1 on a failed validation or runtime error, 2 on a usage or
//! configuration error.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::channel::import_channel;
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::feedback::Scheme;
use crate::harness::{
    calibrate_quantizer, has_interior_minimum, log_grid, run_experiment, run_on_channel, run_trial_traced,
    srec_measurements, sweep, sweep_points, symmetric_quantizer, trial_seed, validate_dither_curve, validate_rate,
    validate_srec, write_dither_csv, write_rate_csv, write_srec_csv, write_summary_csv,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "csi-feedback", version, about = "Quantized CSI feedback simulation and recovery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML experiment config; defaults apply to every omitted field.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// `key=value` override on a dotted config path, e.g. `solver.rho=2`.
    #[arg(long = "override", short = 'o', value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// CSV destination; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every configured point and write the summary table.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Also write the per-iteration solver trace of the first trial.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Like `simulate` but requires at least one swept axis.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the MSE decay rate against the measurement count.
    ValidateRate {
        #[command(flatten)]
        common: Common,
    },
    /// Likelihood-constant ratios across dither levels.
    ValidateDither {
        #[command(flatten)]
        common: Common,
    },
    /// Empirical restricted-eigenvalue pass rate of the compressors.
    ValidateSrec {
        #[command(flatten)]
        common: Common,
    },
    /// Run the feedback pipeline on a channel read from CSV.
    ImportChannel {
        /// Channel CSV with `m,n,re,im` rows and a `.meta.json` sidecar.
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    match &common.config {
        Some(p) => ExperimentConfig::load(p, &common.overrides),
        None => ExperimentConfig::from_toml_with_overrides("", &common.overrides),
    }
}

fn open_output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

fn simulate(common: &Common, trace: Option<&Path>, require_sweep: bool) -> Result<i32> {
    let cfg = load_config(common)?;
    let results = if require_sweep { sweep(&cfg)? } else { run_experiment(&cfg)? };
    write_summary_csv(open_output(common.output.as_deref())?, &results)?;
    if let Some(path) = trace {
        #[derive(Serialize)]
        struct Row<'a> {
            axis: &'a str,
            scheme: Scheme,
            iteration: usize,
            residual: f64,
            nmse: Option<f64>,
        }
        let mut wr = csv::Writer::from_writer(File::create(path)?);
        for point in sweep_points(&cfg)? {
            for scheme in cfg.scheme.schemes() {
                let q = calibrate_quantizer(&cfg, &point, scheme)?;
                let (_, records) = run_trial_traced(&cfg, &point, scheme, &q, trial_seed(cfg.master_seed, 0))?;
                for r in records {
                    wr.serialize(Row { axis: &point.label, scheme, iteration: r.iteration, residual: r.residual, nmse: r.nmse })?;
                }
            }
        }
        wr.flush()?;
    }
    Ok(EXIT_OK)
}

fn rate(common: &Common) -> Result<i32> {
    let cfg = load_config(common)?;
    let mut fits = Vec::new();
    let mut ok = true;
    for scheme in cfg.scheme.schemes() {
        let fit = validate_rate(&cfg, scheme)?;
        let pass = fit.slope >= cfg.rate.slope_min && fit.slope <= cfg.rate.slope_max;
        eprintln!(
            "{scheme}: slope {:.3} (se {:.3}), band [{}, {}] {}",
            fit.slope,
            fit.slope_se,
            cfg.rate.slope_min,
            cfg.rate.slope_max,
            verdict(pass)
        );
        ok &= pass;
        fits.push(fit);
    }
    write_rate_csv(open_output(common.output.as_deref())?, &fits)?;
    Ok(if ok { EXIT_OK } else { EXIT_FAILED })
}

fn dither(common: &Common) -> Result<i32> {
    let cfg = load_config(common)?;
    let d = &cfg.dither;
    let base = symmetric_quantizer(d.q, d.half_range)?;
    let sigmas = log_grid(d.sigma_min, d.sigma_max, d.points);
    let rows = validate_dither_curve(&base, &sigmas, (-d.half_range, d.half_range), d.grid_points)?;
    let l: Vec<f64> = rows.iter().map(|r| r.l_over_f).collect();
    let u: Vec<f64> = rows.iter().map(|r| r.u_over_f).collect();
    let (lp, up) = (has_interior_minimum(&l), has_interior_minimum(&u));
    eprintln!("L_f/F_f interior minimum: {}", verdict(lp));
    eprintln!("U_f/F_f interior minimum: {}", verdict(up));
    write_dither_csv(open_output(common.output.as_deref())?, &rows)?;
    Ok(if lp && up { EXIT_OK } else { EXIT_FAILED })
}

fn srec(common: &Common) -> Result<i32> {
    let cfg = load_config(common)?;
    let mut rows = Vec::new();
    let mut ok = true;
    for scheme in cfg.scheme.schemes() {
        let m = cfg.srec.measurements.unwrap_or_else(|| srec_measurements(&cfg.array, scheme, cfg.srec.constant));
        let r = validate_srec(&cfg, scheme, m, cfg.srec.pairs)?;
        let pass = r.pass_rate >= cfg.srec.min_pass_rate;
        eprintln!("{scheme}: {} measurements, pass rate {:.4} {}", m, r.pass_rate, verdict(pass));
        ok &= pass;
        rows.push(r);
    }
    write_srec_csv(open_output(common.output.as_deref())?, &rows)?;
    Ok(if ok { EXIT_OK } else { EXIT_FAILED })
}

fn import(input: &Path, common: &Common) -> Result<i32> {
    let mut cfg = load_config(common)?;
    let (h, meta) = import_channel(input)?;
    if cfg.assumed_k.is_none() {
        if let Some(k) = meta.num_paths {
            cfg.array.num_paths = k;
        }
    }
    let results = run_on_channel(&cfg, &h)?;
    write_summary_csv(open_output(common.output.as_deref())?, &results)?;
    Ok(EXIT_OK)
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let outcome = match &cli.command {
        Command::Simulate { common, trace } => simulate(common, trace.as_deref(), false),
        Command::Sweep { common } => simulate(common, None, true),
        Command::ValidateRate { common } => rate(common),
        Command::ValidateDither { common } => dither(common),
        Command::ValidateSrec { common } => srec(common),
        Command::ImportChannel { input, common } => import(input, common),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_FAILED,
            }
        }
    }
}
