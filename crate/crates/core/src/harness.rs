//! Scenario files, per-seed simulation and seeded batch runs.
//!
//! A scenario file is plain text, one `section.key = value` per line, `#`
//! starting a comment. `scenario.name` picks a preset and every other key
//! overrides one field of it; the full grammar is in the README.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fmt;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Value};
use thiserror::Error;

use crate::actuator::{
    arcsec_to_rad, calibrate_gains, record_calibration_moves, ActuatorError, CalibrationError,
    CalibrationGeometry, CalibrationMove, ChannelId, PiezoChannel,
};
use crate::analysis::{
    self, angle_trajectory, efficiency_trace, fit_decay_model, stable_phase_stats,
    time_to_threshold, trailing_window, AnalysisError, JitterStats, RunTrace,
};
use crate::controller::{
    self, ClimbConfig, ClimbEvent, ClimbRecord, ClimbState, ControlError, LogError,
};
use crate::plant::{
    AxisMap, Bench, BenchConfig, FiberConfig, FiberKind, NoiseModel, PlantError,
    ScheduledPerturbation,
};
use crate::rig::Actuators;

/// Salt separating the perturbation-direction stream from the bench noise
/// stream of the same seed.
const PERTURBATION_SALT: u64 = 0xD1B5_4A32_D192_ED03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ScenarioKind {
    MmfCoarse,
    SmfFine,
    JitterSweep,
    Calibration,
    DecayFit,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 5] = [
        ScenarioKind::MmfCoarse,
        ScenarioKind::SmfFine,
        ScenarioKind::JitterSweep,
        ScenarioKind::Calibration,
        ScenarioKind::DecayFit,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::MmfCoarse => "mmf_coarse",
            ScenarioKind::SmfFine => "smf_fine",
            ScenarioKind::JitterSweep => "jitter_sweep",
            ScenarioKind::Calibration => "calibration",
            ScenarioKind::DecayFit => "decay_fit",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown scenario {s:?}"))
    }
}

/// What the loop does once the climb has terminated and samples remain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HoldMode {
    /// Keep reading the meter without moving.
    Idle,
    /// Start a fresh climb from the current position.
    Retrack,
}

impl FromStr for HoldMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "idle" => Ok(HoldMode::Idle),
            "retrack" => Ok(HoldMode::Retrack),
            other => Err(format!("expected idle or retrack, got {other:?}")),
        }
    }
}

/// Offset applied to the beam before control starts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialPerturbation {
    None,
    Offset {
        dx: f64,
        dy: f64,
    },
    /// Fixed magnitude; direction in radians, or drawn per seed if `None`.
    Polar {
        magnitude: f64,
        direction: Option<f64>,
    },
}

impl InitialPerturbation {
    pub fn resolve(&self, seed: u64) -> (f64, f64) {
        match *self {
            InitialPerturbation::None => (0.0, 0.0),
            InitialPerturbation::Offset { dx, dy } => (dx, dy),
            InitialPerturbation::Polar {
                magnitude,
                direction,
            } => {
                let phi = direction.unwrap_or_else(|| {
                    ChaCha8Rng::seed_from_u64(seed ^ PERTURBATION_SALT).random_range(0.0..TAU)
                });
                (magnitude * phi.cos(), magnitude * phi.sin())
            }
        }
    }
}

/// Efficiency `threshold` sustained within the first `within` samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReachCheck {
    pub threshold: f64,
    pub within: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checks {
    pub reach: Vec<ReachCheck>,
    /// Sample count by which the trailing window must be stable.
    pub stable_by: Option<usize>,
    pub stable_min_efficiency: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JitterSpec {
    pub steps: Vec<u32>,
    pub window_start: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSpec {
    pub step_sizes: Vec<u32>,
    pub moves_per_size: usize,
    pub lever_arm: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecaySpec {
    pub points: usize,
    pub max_angle: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub seeds: Vec<u64>,
    /// Records per climb run.
    pub samples: usize,
    pub bench: BenchConfig,
    pub climb: ClimbConfig,
    pub hold: HoldMode,
    pub perturbation: InitialPerturbation,
    pub schedule: Vec<ScheduledPerturbation>,
    pub checks: Checks,
    pub jitter: JitterSpec,
    pub calibration: CalibrationSpec,
    pub decay: DecaySpec,
}

impl Scenario {
    pub fn preset(kind: ScenarioKind) -> Self {
        let smf_perturbation = InitialPerturbation::Polar {
            magnitude: 3.3e-4,
            direction: None,
        };
        let mut s = Scenario {
            kind,
            seeds: (0..100).collect(),
            samples: 400,
            bench: BenchConfig::default(),
            climb: ClimbConfig::fine(),
            hold: HoldMode::Idle,
            perturbation: smf_perturbation,
            schedule: Vec::new(),
            checks: Checks {
                reach: Vec::new(),
                stable_by: None,
                stable_min_efficiency: 0.0,
            },
            jitter: JitterSpec {
                steps: vec![100, 50, 10, 5],
                window_start: 40.0,
            },
            calibration: CalibrationSpec {
                step_sizes: vec![10, 100, 200, 300, 400, 500],
                moves_per_size: 3,
                lever_arm: CalibrationGeometry::bench_default().lever_arm(),
                tolerance: 0.01,
            },
            decay: DecaySpec {
                points: 40,
                max_angle: 4e-4,
                tolerance: 0.02,
            },
        };
        match kind {
            ScenarioKind::SmfFine => {
                s.checks = Checks {
                    reach: vec![ReachCheck {
                        threshold: 0.70,
                        within: 100,
                    }],
                    stable_by: Some(375),
                    stable_min_efficiency: 0.70,
                };
            }
            ScenarioKind::MmfCoarse => {
                s.bench.fiber = FiberConfig::multi_mode();
                s.climb = ClimbConfig::coarse();
                // η ≈ 0.1 at the start
                s.perturbation = InitialPerturbation::Polar {
                    magnitude: 1.15e-3,
                    direction: None,
                };
                s.checks.reach = vec![
                    ReachCheck {
                        threshold: 0.80,
                        within: 75,
                    },
                    ReachCheck {
                        threshold: 0.90,
                        within: 400,
                    },
                ];
            }
            ScenarioKind::JitterSweep => {
                s.seeds = (0..20).collect();
                s.hold = HoldMode::Retrack;
            }
            ScenarioKind::Calibration => {
                s.seeds = vec![0];
                s.perturbation = InitialPerturbation::None;
            }
            ScenarioKind::DecayFit => {
                s.bench.noise = NoiseModel {
                    relative_sigma: 0.01,
                    additive_floor: 0.0,
                };
                s.perturbation = InitialPerturbation::None;
            }
        }
        s
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let invalid = |m: String| Err(ScenarioError::Invalid(m));
        if self.seeds.is_empty() {
            return invalid("seed list is empty".into());
        }
        if self.samples == 0 {
            return invalid("samples must be > 0".into());
        }
        self.bench
            .validate()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        self.climb
            .validate()
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        for c in &self.checks.reach {
            if !(c.threshold > 0.0 && c.threshold < 1.0) || c.within == 0 {
                return invalid(format!("bad reach check {}@{}", c.threshold, c.within));
            }
        }
        if self.jitter.steps.is_empty() || self.jitter.steps.contains(&0) {
            return invalid("jitter steps must be non-empty and > 0".into());
        }
        if self.calibration.step_sizes.is_empty() || self.calibration.moves_per_size == 0 {
            return invalid("calibration needs step sizes and moves per size".into());
        }
        CalibrationGeometry::new(self.calibration.lever_arm)
            .map_err(|e| ScenarioError::Invalid(e.to_string()))?;
        if self.decay.points < 5 || !(self.decay.max_angle > 0.0) {
            return invalid("decay fit needs >= 5 points and max angle > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key {key}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key} already set on line {first}")]
    Duplicate {
        line: usize,
        first: usize,
        key: String,
    },
    #[error("line {line}: {key}: {msg}")]
    Value {
        line: usize,
        key: String,
        msg: String,
    },
    #[error("missing required key {0}")]
    Missing(&'static str),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

struct Entries(BTreeMap<String, (usize, String)>);

impl Entries {
    fn take(&mut self, key: &str) -> Option<(usize, String)> {
        self.0.remove(key)
    }

    fn set<T>(
        &mut self,
        key: &str,
        target: &mut T,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<(), ScenarioError> {
        if let Some((line, v)) = self.take(key) {
            *target = parse(&v).map_err(|msg| ScenarioError::Value {
                line,
                key: key.to_string(),
                msg,
            })?;
        }
        Ok(())
    }
}

fn num<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    s.parse::<T>().map_err(|e| format!("{s:?}: {e}"))
}

fn list<T: FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(num)
        .collect()
}

fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (num(a.trim())?, num(b.trim())?);
        if a >= b {
            return Err(format!("empty seed range {s}"));
        }
        return Ok((a..b).collect());
    }
    list(s)
}

fn parse_reach(s: &str) -> Result<Vec<ReachCheck>, String> {
    s.split_whitespace()
        .map(|t| {
            let (th, n) = t
                .split_once('@')
                .ok_or_else(|| format!("expected <threshold>@<samples>, got {t:?}"))?;
            Ok(ReachCheck {
                threshold: num(th)?,
                within: num(n)?,
            })
        })
        .collect()
}

fn parse_initial(s: &str) -> Result<InitialPerturbation, String> {
    let t: Vec<&str> = s.split_whitespace().collect();
    match t.as_slice() {
        ["none"] => Ok(InitialPerturbation::None),
        ["offset", dx, dy] => Ok(InitialPerturbation::Offset {
            dx: num(dx)?,
            dy: num(dy)?,
        }),
        ["polar", m, dir] => Ok(InitialPerturbation::Polar {
            magnitude: num(m)?,
            direction: match *dir {
                "random" => None,
                deg => Some(num::<f64>(deg)?.to_radians()),
            },
        }),
        _ => Err(format!(
            "expected none | offset <dx> <dy> | polar <magnitude> <degrees|random>, got {s:?}"
        )),
    }
}

fn parse_schedule(s: &str) -> Result<Vec<ScheduledPerturbation>, String> {
    s.split(';')
        .filter(|e| !e.trim().is_empty())
        .map(|e| match list::<f64>(e)?.as_slice() {
            &[time, delta_x, delta_y] => Ok(ScheduledPerturbation {
                time,
                delta_x,
                delta_y,
            }),
            _ => Err(format!("expected <time_s> <dx> <dy>, got {e:?}")),
        })
        .collect()
}

fn parse_profile(s: &str) -> Result<Vec<u32>, String> {
    match s {
        "coarse" => Ok(ClimbConfig::coarse().stage_schedule),
        "fine" => Ok(ClimbConfig::fine().stage_schedule),
        other => Err(format!("expected coarse or fine, got {other:?}")),
    }
}

fn parse_channels(s: &str) -> Result<Vec<ChannelId>, String> {
    list::<i64>(s)?
        .into_iter()
        .map(|c| ChannelId::new(c).map_err(|e| e.to_string()))
        .collect()
}

fn optional_count(s: &str) -> Result<Option<usize>, String> {
    if s == "none" {
        Ok(None)
    } else {
        num(s).map(Some)
    }
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| ScenarioError::Syntax {
                line,
                msg: format!("expected section.key = value, got {content:?}"),
            })?;
        let (key, value) = (key.trim(), value.trim());
        let well_formed = key.split_once('.').is_some_and(|(s, k)| {
            let ok = |p: &str| {
                !p.is_empty()
                    && p.chars()
                        .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
            };
            ok(s) && ok(k)
        });
        if !well_formed {
            return Err(ScenarioError::Syntax {
                line,
                msg: format!("malformed key {key:?}"),
            });
        }
        if value.is_empty() {
            return Err(ScenarioError::Syntax {
                line,
                msg: format!("{key} has no value"),
            });
        }
        if let Some((first, _)) = map.insert(key.to_string(), (line, value.to_string())) {
            return Err(ScenarioError::Duplicate {
                line,
                first,
                key: key.to_string(),
            });
        }
    }
    let mut e = Entries(map);

    let (line, name) = e
        .take("scenario.name")
        .ok_or(ScenarioError::Missing("scenario.name"))?;
    let kind: ScenarioKind = name.parse().map_err(|msg| ScenarioError::Value {
        line,
        key: "scenario.name".into(),
        msg,
    })?;
    let mut s = Scenario::preset(kind);

    e.set("scenario.seeds", &mut s.seeds, parse_seeds)?;
    e.set("scenario.samples", &mut s.samples, num)?;

    let b = &mut s.bench;
    let mut mw = b.laser_power * 1e3;
    e.set("bench.laser_power_mw", &mut mw, num)?;
    b.laser_power = mw * 1e-3;
    e.set("bench.wavelength_m", &mut b.wavelength, num)?;
    let mut rate = 1.0 / b.sample_period;
    e.set("bench.sample_rate_hz", &mut rate, num)?;
    b.sample_period = 1.0 / rate;
    let mut gain_arcsec = f64::NAN;
    e.set("bench.step_gain_arcsec", &mut gain_arcsec, num)?;
    if !gain_arcsec.is_nan() {
        b.step_gain = arcsec_to_rad(gain_arcsec);
    }
    e.set("bench.reverse_ratio", &mut b.reverse_ratio, num)?;
    e.set("bench.step_jitter", &mut b.step_jitter, num)?;
    e.set("bench.step_limit", &mut b.step_limit, num)?;
    e.set("bench.axis_map", &mut b.axis_map, |v| {
        v.parse::<AxisMap>().map_err(|e| e.to_string())
    })?;

    e.set("fiber.kind", &mut b.fiber, |v| {
        Ok(match v.parse::<FiberKind>().map_err(|e| e.to_string())? {
            FiberKind::SingleMode => FiberConfig::single_mode(),
            FiberKind::MultiMode => FiberConfig::multi_mode(),
        })
    })?;
    e.set("fiber.effective_waist_m", &mut b.fiber.effective_waist, num)?;
    e.set("fiber.base_efficiency", &mut b.fiber.base_efficiency, num)?;
    e.set("noise.relative_sigma", &mut b.noise.relative_sigma, num)?;
    e.set("noise.additive_floor_w", &mut b.noise.additive_floor, num)?;

    let c = &mut s.climb;
    e.set("climb.profile", &mut c.stage_schedule, parse_profile)?;
    e.set("climb.schedule", &mut c.stage_schedule, list)?;
    e.set("climb.max_adjustments", &mut c.max_adjustments, num)?;
    e.set("climb.channel_order", &mut c.channel_order, parse_channels)?;
    e.set("climb.settle_reads", &mut c.settle_reads, num)?;
    e.set("climb.stability_window", &mut c.stability_window, num)?;
    e.set("climb.stability_rel_sd", &mut c.stability_rel_sd, num)?;
    e.set("climb.hold", &mut s.hold, |v| v.parse())?;

    e.set("perturbation.initial", &mut s.perturbation, parse_initial)?;
    e.set("perturbation.schedule", &mut s.schedule, parse_schedule)?;

    e.set("check.reach", &mut s.checks.reach, |v| {
        if v == "none" {
            Ok(Vec::new())
        } else {
            parse_reach(v)
        }
    })?;
    e.set("check.stable_by", &mut s.checks.stable_by, optional_count)?;
    e.set(
        "check.min_efficiency",
        &mut s.checks.stable_min_efficiency,
        num,
    )?;

    e.set("jitter.steps", &mut s.jitter.steps, list)?;
    e.set("jitter.window_start_s", &mut s.jitter.window_start, num)?;

    e.set(
        "calibration.step_sizes",
        &mut s.calibration.step_sizes,
        list,
    )?;
    e.set(
        "calibration.moves_per_size",
        &mut s.calibration.moves_per_size,
        num,
    )?;
    e.set("calibration.lever_arm_m", &mut s.calibration.lever_arm, num)?;
    e.set("calibration.tolerance", &mut s.calibration.tolerance, num)?;

    e.set("decay.points", &mut s.decay.points, num)?;
    e.set("decay.max_angle_rad", &mut s.decay.max_angle, num)?;
    e.set("decay.tolerance", &mut s.decay.tolerance, num)?;

    if let Some((key, (line, _))) = e.0.into_iter().min_by_key(|(_, (l, _))| *l) {
        return Err(ScenarioError::UnknownKey { line, key });
    }
    s.validate()?;
    Ok(s)
}

pub fn load_scenario(path: &Path) -> Result<Scenario, HarnessError> {
    let text = fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_scenario(&text).map_err(|source| HarnessError::Scenario {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Scenario {
        path: PathBuf,
        #[source]
        source: ScenarioError,
    },
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Actuator(#[from] ActuatorError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Runs the climb loop for exactly `samples` records, whatever the
/// controller's own termination does.
pub fn drive_climb(
    bench: &mut Bench,
    climb: &ClimbConfig,
    samples: usize,
    hold: HoldMode,
) -> Result<Vec<ClimbRecord>, ControlError> {
    let mut records = Vec::with_capacity(samples);
    let (mut state, first): (ClimbState, ClimbRecord) = controller::initialize(climb, bench)?;
    records.push(first);
    while records.len() < samples {
        if state.terminated().is_none() {
            records.push(controller::step(&mut state, climb, bench)?);
            continue;
        }
        match hold {
            HoldMode::Idle => {
                let s = bench.read_power();
                let ch = state.current_channel;
                records.push(ClimbRecord {
                    time: s.time,
                    channel: ch,
                    position: bench.position(ch),
                    power: s.power,
                    stage: state.stage(),
                    event: ClimbEvent::Hold,
                });
            }
            HoldMode::Retrack => {
                let (st, r) = controller::initialize(climb, bench)?;
                state = st;
                records.push(r);
            }
        }
    }
    Ok(records)
}

/// A fresh bench for `seed` with the scenario's perturbations applied.
pub fn prepare_bench(scenario: &Scenario, seed: u64) -> Result<Bench, PlantError> {
    let mut bench = Bench::new(scenario.bench.clone(), seed)?;
    let (dx, dy) = scenario.perturbation.resolve(seed);
    bench.inject_perturbation(dx, dy);
    for p in &scenario.schedule {
        bench.schedule_perturbation(*p);
    }
    Ok(bench)
}

/// One named artifact file and its bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub checks: Vec<(String, bool)>,
    pub metrics: Vec<Value>,
    pub artifacts: Vec<Artifact>,
}

impl SeedOutcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.1)
    }

    pub fn artifact(&self, name: &str) -> Option<&[u8]> {
        self.artifacts
            .iter()
            .find(|a| a.name == name)
            .map(|a| a.bytes.as_slice())
    }

    pub fn metric(&self, name: &str) -> Option<&Value> {
        self.metrics.iter().find(|m| m["metric"] == name)
    }
}

fn log_bytes(records: &[ClimbRecord]) -> Result<Vec<u8>, LogError> {
    let mut buf = Vec::new();
    controller::write_log(records, &mut buf)?;
    Ok(buf)
}

fn xy_bytes(header: (&str, &str), points: &[(f64, f64)]) -> Result<Vec<u8>, csv::Error> {
    let mut buf = Vec::new();
    analysis::write_xy_csv(header, points, &mut buf)?;
    Ok(buf)
}

fn jsonl_bytes(lines: &[Value]) -> Vec<u8> {
    let mut buf = Vec::new();
    analysis::write_jsonl(lines, &mut buf).expect("writing to memory");
    buf
}

/// Pass/fail of each configured check on one climb trace.
pub fn evaluate_checks(
    trace: &RunTrace,
    checks: &Checks,
    window: usize,
    rel_sd: f64,
) -> Vec<(String, bool)> {
    let mut out = Vec::new();
    for c in &checks.reach {
        let hit = time_to_threshold(&trace.truncated(c.within), c.threshold)
            .expect("validated threshold")
            .is_some();
        out.push((format!("reach_{}_by_{}", c.threshold, c.within), hit));
    }
    if let Some(n) = checks.stable_by {
        let ok = trailing_window(trace, n, window)
            .is_some_and(|(r, e)| r < rel_sd && e >= checks.stable_min_efficiency);
        out.push((format!("stable_by_{n}"), ok));
    }
    out
}

fn climb_seed(scenario: &Scenario, seed: u64) -> Result<SeedOutcome, HarnessError> {
    let mut bench = prepare_bench(scenario, seed)?;
    let records = drive_climb(&mut bench, &scenario.climb, scenario.samples, scenario.hold)?;
    let trace = RunTrace::from_records(
        &records,
        bench.config().laser_power,
        bench.fiber().base_efficiency,
    )?;
    let model = *bench.coupling();
    let cfg = &scenario.climb;
    let checks = evaluate_checks(
        &trace,
        &scenario.checks,
        cfg.stability_window,
        cfg.stability_rel_sd,
    );

    let mut metrics =
        analysis::summarize(&trace, &model, cfg.stability_window, cfg.stability_rel_sd);
    metrics.push(json!({"metric": "final_offset_rad", "value": bench.offset_magnitude()}));
    metrics.push(json!({"metric": "adjustments", "value": bench.commands().len()}));
    for (name, ok) in &checks {
        metrics.push(json!({"metric": "check", "name": name, "value": ok}));
    }
    let angles = angle_trajectory(&trace, &model);
    Ok(SeedOutcome {
        seed,
        artifacts: vec![
            Artifact {
                name: "run.csv".into(),
                bytes: log_bytes(&records)?,
            },
            Artifact {
                name: "efficiency.csv".into(),
                bytes: xy_bytes(("time_s", "efficiency"), &efficiency_trace(&trace))?,
            },
            Artifact {
                name: "angle.csv".into(),
                bytes: xy_bytes(("time_s", "angle_rad"), &angles.points)?,
            },
            Artifact {
                name: "analysis.jsonl".into(),
                bytes: jsonl_bytes(&metrics),
            },
        ],
        checks,
        metrics,
    })
}

/// Stable-phase statistics of one fixed-step run per configured step size.
pub fn jitter_runs(
    scenario: &Scenario,
    seed: u64,
) -> Result<Vec<(JitterStats, Vec<ClimbRecord>)>, HarnessError> {
    scenario
        .jitter
        .steps
        .iter()
        .map(|&step| {
            let mut bench = prepare_bench(scenario, seed)?;
            let climb = ClimbConfig {
                stage_schedule: vec![step],
                ..scenario.climb.clone()
            };
            let records = drive_climb(&mut bench, &climb, scenario.samples, scenario.hold)?;
            let trace = RunTrace::from_records(
                &records,
                bench.config().laser_power,
                bench.fiber().base_efficiency,
            )?;
            let stats =
                stable_phase_stats(&trace, scenario.jitter.window_start)?.with_step_size(step);
            Ok((stats, records))
        })
        .collect()
}

fn jitter_seed(scenario: &Scenario, seed: u64) -> Result<SeedOutcome, HarnessError> {
    let runs = jitter_runs(scenario, seed)?;
    let decreasing = runs
        .windows(2)
        .all(|w| w[1].0.relative_sd < w[0].0.relative_sd);
    let mut metrics: Vec<Value> = runs
        .iter()
        .map(|(st, _)| json!({"metric": "stable_phase", "stats": st}))
        .collect();
    metrics.push(json!({"metric": "check", "name": "jitter_decreasing", "value": decreasing}));
    let mut artifacts = Vec::new();
    for (st, rec) in &runs {
        artifacts.push(Artifact {
            name: format!("run_step{}.csv", st.step_size.expect("set above")),
            bytes: log_bytes(rec)?,
        });
    }
    artifacts.push(Artifact {
        name: "analysis.jsonl".into(),
        bytes: jsonl_bytes(&metrics),
    });
    Ok(SeedOutcome {
        seed,
        checks: vec![("jitter_decreasing".into(), decreasing)],
        metrics,
        artifacts,
    })
}

pub fn write_calibration_log<W: Write>(moves: &[CalibrationMove], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for m in moves {
        w.serialize(m)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_calibration_log<R: Read>(input: R) -> csv::Result<Vec<CalibrationMove>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

/// Two-column `(angle, efficiency)` CSV with a header row.
pub fn read_points<R: Read>(input: R) -> csv::Result<Vec<(f64, f64)>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

fn calibration_seed(scenario: &Scenario, seed: u64) -> Result<SeedOutcome, HarnessError> {
    let b = &scenario.bench;
    let fwd = b.step_gain;
    let rev = b.reverse_ratio * b.step_gain;
    let mut ch = PiezoChannel::new(ChannelId::ALL[0], fwd, rev)?
        .with_step_limit(b.step_limit)
        .with_step_jitter(b.step_jitter, seed)?;
    let geo = CalibrationGeometry::new(scenario.calibration.lever_arm)?;
    let moves = record_calibration_moves(
        &mut ch,
        &geo,
        &scenario.calibration.step_sizes,
        scenario.calibration.moves_per_size,
    )?;
    let (f, r) = calibrate_gains(&moves, &geo)?;
    let (ef, er) = ((f - fwd).abs() / fwd, (r - rev).abs() / rev);
    let ok = ef <= scenario.calibration.tolerance && er <= scenario.calibration.tolerance;
    let metrics = vec![
        json!({"metric": "forward_gain_rad", "value": f, "configured": fwd, "relative_error": ef}),
        json!({"metric": "reverse_gain_rad", "value": r, "configured": rev, "relative_error": er}),
        json!({"metric": "check", "name": "gains_recovered", "value": ok}),
    ];
    let mut log = Vec::new();
    write_calibration_log(&moves, &mut log)?;
    Ok(SeedOutcome {
        seed,
        checks: vec![("gains_recovered".into(), ok)],
        artifacts: vec![
            Artifact {
                name: "run.csv".into(),
                bytes: log,
            },
            Artifact {
                name: "analysis.jsonl".into(),
                bytes: jsonl_bytes(&metrics),
            },
        ],
        metrics,
    })
}

/// Efficiency measured on an open-loop angle sweep from 0 to `max_angle`.
pub fn decay_sweep(scenario: &Scenario, seed: u64) -> Result<Vec<(f64, f64)>, PlantError> {
    let mut bench = prepare_bench(scenario, seed)?;
    let d = &scenario.decay;
    let (px, py) = bench.perturbation();
    let mut points = Vec::with_capacity(d.points);
    for i in 0..d.points {
        let theta = d.max_angle * i as f64 / (d.points - 1) as f64;
        let (cx, cy) = bench.perturbation();
        bench.inject_perturbation(px + theta - cx, py - cy);
        let p = bench.read_power().power;
        points.push((bench.offset_magnitude(), p / bench.config().laser_power));
    }
    Ok(points)
}

fn decay_seed(scenario: &Scenario, seed: u64) -> Result<SeedOutcome, HarnessError> {
    let points = decay_sweep(scenario, seed)?;
    let usable: Vec<(f64, f64)> = points.iter().copied().filter(|p| p.1 > 0.0).collect();
    let fiber = scenario.bench.fiber;
    let fit = fit_decay_model(&usable, scenario.bench.wavelength, fiber.effective_waist)?;
    let err = (fit.base_efficiency - fiber.base_efficiency).abs() / fiber.base_efficiency;
    let ok = err <= scenario.decay.tolerance;
    let metrics = vec![
        json!({"metric": "fitted_base_efficiency", "value": fit.base_efficiency,
            "configured": fiber.base_efficiency, "relative_error": err}),
        json!({"metric": "residual_norm", "value": fit.residual_norm}),
        json!({"metric": "skipped_points", "value": points.len() - usable.len()}),
        json!({"metric": "check", "name": "base_efficiency_recovered", "value": ok}),
    ];
    Ok(SeedOutcome {
        seed,
        checks: vec![("base_efficiency_recovered".into(), ok)],
        artifacts: vec![
            Artifact {
                name: "run.csv".into(),
                bytes: xy_bytes(("angle_rad", "efficiency"), &points)?,
            },
            Artifact {
                name: "analysis.jsonl".into(),
                bytes: jsonl_bytes(&metrics),
            },
        ],
        metrics,
    })
}

/// Everything one seed produces. Pure in `(scenario, seed)`.
pub fn run_seed(scenario: &Scenario, seed: u64) -> Result<SeedOutcome, HarnessError> {
    match scenario.kind {
        ScenarioKind::SmfFine | ScenarioKind::MmfCoarse => climb_seed(scenario, seed),
        ScenarioKind::JitterSweep => jitter_seed(scenario, seed),
        ScenarioKind::Calibration => calibration_seed(scenario, seed),
        ScenarioKind::DecayFit => decay_seed(scenario, seed),
    }
}

#[derive(Debug)]
pub struct BatchResult {
    pub kind: ScenarioKind,
    /// In scenario seed order.
    pub seeds: Vec<(u64, Result<SeedOutcome, HarnessError>)>,
}

impl BatchResult {
    pub fn passed(&self) -> usize {
        self.seeds
            .iter()
            .filter(|(_, r)| r.as_ref().is_ok_and(SeedOutcome::passed))
            .count()
    }

    pub fn errored(&self) -> usize {
        self.seeds.iter().filter(|(_, r)| r.is_err()).count()
    }

    /// One line per seed, then one aggregate line.
    pub fn summary(&self) -> Vec<Value> {
        let mut lines = Vec::new();
        let mut per_check: BTreeMap<String, usize> = BTreeMap::new();
        for (seed, r) in &self.seeds {
            lines.push(match r {
                Ok(o) => {
                    let mut checks = serde_json::Map::new();
                    for (name, ok) in &o.checks {
                        checks.insert(name.clone(), json!(ok));
                        *per_check.entry(name.clone()).or_default() += *ok as usize;
                    }
                    json!({"seed": seed, "pass": o.passed(), "checks": checks})
                }
                Err(e) => json!({"seed": seed, "pass": false, "error": e.to_string()}),
            });
        }
        let n = self.seeds.len();
        let fractions: serde_json::Map<String, Value> = per_check
            .into_iter()
            .map(|(k, v)| (k, json!(v as f64 / n as f64)))
            .collect();
        lines.push(json!({
            "scenario": self.kind.as_str(),
            "seeds": n,
            "passed": self.passed(),
            "errored": self.errored(),
            "pass_fraction": self.passed() as f64 / n as f64,
            "check_fractions": fractions,
        }));
        lines
    }
}

/// Runs every seed in parallel and, given an output root, writes
/// `<out>/<scenario>/<seed>/...`, `<out>/<scenario>/summary.jsonl` and the
/// wall-clock sidecar `<out>/<scenario>/timing.json`.
pub fn run_scenario(scenario: &Scenario, out: Option<&Path>) -> Result<BatchResult, HarnessError> {
    scenario
        .validate()
        .map_err(|source| HarnessError::Scenario {
            path: PathBuf::new(),
            source,
        })?;
    let started = Instant::now();
    let seeds: Vec<(u64, Result<SeedOutcome, HarnessError>)> = scenario
        .seeds
        .par_iter()
        .map(|&seed| (seed, run_seed(scenario, seed)))
        .collect();
    let batch = BatchResult {
        kind: scenario.kind,
        seeds,
    };
    if let Some(root) = out {
        let dir = root.join(scenario.kind.as_str());
        let io_err = |path: &Path| {
            let path = path.to_path_buf();
            move |source| HarnessError::Io { path, source }
        };
        for (seed, r) in &batch.seeds {
            let Ok(o) = r else { continue };
            let sd = dir.join(seed.to_string());
            fs::create_dir_all(&sd).map_err(io_err(&sd))?;
            for a in &o.artifacts {
                let p = sd.join(&a.name);
                fs::write(&p, &a.bytes).map_err(io_err(&p))?;
            }
        }
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let p = dir.join("summary.jsonl");
        fs::write(&p, jsonl_bytes(&batch.summary())).map_err(io_err(&p))?;
        let unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        let timing =
            json!({"wall_clock_s": started.elapsed().as_secs_f64(), "finished_unix_s": unix});
        let p = dir.join("timing.json");
        fs::write(&p, format!("{timing}\n")).map_err(io_err(&p))?;
    }
    Ok(batch)
}
