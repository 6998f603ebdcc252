use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use fiberalign_core::actuator::{calibrate_gains, rad_to_arcsec, CalibrationGeometry};
use fiberalign_core::analysis::{fit_decay_model, summarize, write_jsonl, RunTrace};
use fiberalign_core::controller::read_log;
use fiberalign_core::harness::{load_scenario, read_calibration_log, read_points, run_scenario};
use fiberalign_core::plant::{FiberConfig, FiberKind, BENCH_LASER_POWER_W, BENCH_WAVELENGTH_M};

#[derive(Parser)]
#[command(
    name = "fiberalign",
    version,
    about = "Simulated fiber-coupling alignment runs and their analysis"
)]
#[command(arg_required_else_help = true)]
struct Cli {
    /// Root directory for run artifacts.
    #[arg(long, global = true, env = "FIBERALIGN_OUT_DIR", default_value = "out")]
    out_dir: PathBuf,
    /// Format of the report written to stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Jsonl)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and write per-seed artifacts plus a summary.
    Run {
        scenario: PathBuf,
        /// Replace the scenario's seed list; may be repeated.
        #[arg(long)]
        seed: Vec<u64>,
    },
    /// Metrics for a run CSV written by `run`.
    Analyze {
        csv: PathBuf,
        #[arg(long, default_value = "single_mode")]
        fiber: FiberKind,
        #[arg(long, default_value_t = BENCH_LASER_POWER_W * 1e3)]
        laser_power_mw: f64,
        #[arg(long, default_value_t = BENCH_WAVELENGTH_M)]
        wavelength_m: f64,
        /// Trailing window for the stability metrics, in samples.
        #[arg(long, default_value_t = 50)]
        window: usize,
        #[arg(long, default_value_t = 0.02)]
        rel_sd: f64,
    },
    /// Forward and reverse step gains from a centroid move log.
    Calibrate {
        log: PathBuf,
        #[arg(long, default_value_t = CalibrationGeometry::bench_default().lever_arm())]
        lever_arm_m: f64,
    },
    /// Base efficiency fitted to (angle_rad, efficiency) points.
    Fit {
        points: PathBuf,
        #[arg(long, default_value_t = FiberConfig::single_mode().effective_waist)]
        waist_m: f64,
        #[arg(long, default_value_t = BENCH_WAVELENGTH_M)]
        wavelength_m: f64,
    },
}

fn open(path: &Path) -> Result<File> {
    File::open(path).with_context(|| format!("cannot open {}", path.display()))
}

/// Nested values are written as their JSON text.
fn write_csv<W: Write>(lines: &[Value], out: W) -> Result<()> {
    let mut columns: Vec<String> = Vec::new();
    let mut seen = BTreeSet::new();
    for l in lines {
        for k in l.as_object().into_iter().flat_map(|o| o.keys()) {
            if seen.insert(k.clone()) {
                columns.push(k.clone());
            }
        }
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(&columns)?;
    for l in lines {
        w.write_record(columns.iter().map(|c| match &l[c] {
            Value::Null => String::new(),
            Value::String(s) => s.clone(),
            v => v.to_string(),
        }))?;
    }
    w.flush()?;
    Ok(())
}

fn emit(lines: &[Value], format: Format) -> Result<()> {
    let out = io::stdout().lock();
    match format {
        Format::Jsonl => write_jsonl(lines, out)?,
        Format::Csv => write_csv(lines, out)?,
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { scenario, seed } => {
            let mut s = load_scenario(&scenario)?;
            if !seed.is_empty() {
                s.seeds = seed;
            }
            let batch = run_scenario(&s, Some(&cli.out_dir))?;
            emit(&batch.summary(), cli.format)?;
            let errors: Vec<String> = batch
                .seeds
                .iter()
                .filter_map(|(seed, r)| r.as_ref().err().map(|e| format!("seed {seed}: {e}")))
                .collect();
            if !errors.is_empty() {
                bail!("{} seed(s) failed:\n{}", errors.len(), errors.join("\n"));
            }
        }
        Command::Analyze {
            csv,
            fiber,
            laser_power_mw,
            wavelength_m,
            window,
            rel_sd,
        } => {
            let records =
                read_log(open(&csv)?).with_context(|| format!("reading {}", csv.display()))?;
            let fiber = match fiber {
                FiberKind::SingleMode => FiberConfig::single_mode(),
                FiberKind::MultiMode => FiberConfig::multi_mode(),
            };
            let model = fiber.coupling(wavelength_m)?;
            let trace =
                RunTrace::from_records(&records, laser_power_mw * 1e-3, fiber.base_efficiency)?;
            emit(&summarize(&trace, &model, window, rel_sd), cli.format)?;
        }
        Command::Calibrate { log, lever_arm_m } => {
            let moves = read_calibration_log(open(&log)?)
                .with_context(|| format!("reading {}", log.display()))?;
            let (f, r) = calibrate_gains(&moves, &CalibrationGeometry::new(lever_arm_m)?)?;
            emit(
                &[json!({
                    "forward_gain_rad": f,
                    "reverse_gain_rad": r,
                    "forward_gain_arcsec": rad_to_arcsec(f),
                    "reverse_gain_arcsec": rad_to_arcsec(r),
                    "reverse_ratio": r / f,
                    "moves": moves.len(),
                })],
                cli.format,
            )?;
        }
        Command::Fit {
            points,
            waist_m,
            wavelength_m,
        } => {
            let pts = read_points(open(&points)?)
                .with_context(|| format!("reading {}", points.display()))?;
            let fit = fit_decay_model(&pts, wavelength_m, waist_m)?;
            emit(
                &[json!({
                    "base_efficiency": fit.base_efficiency,
                    "residual_norm": fit.residual_norm,
                    "points": pts.len(),
                })],
                cli.format,
            )?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        // a reader that closes stdout early (e.g. `| head`) is not a failure
        Err(e)
            if e.chain().any(|c| {
                c.downcast_ref::<io::Error>()
                    .is_some_and(|io| io.kind() == io::ErrorKind::BrokenPipe)
            }) =>
        {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
