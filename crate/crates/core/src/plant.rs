//! Simulated two-mirror alignment bench.
//!
//! Four actuator channels tilt two fold mirrors (knobs 1,2 on mirror "12",
//! knobs 3,4 on mirror "34"). Each mirror tilt deflects the beam by twice the
//! tilt, contributions add per axis, and the resulting angular offset at the
//! receiving collimator sets the coupled power through the decay law. A power
//! meter samples at a fixed rate with optional multiplicative and additive
//! Gaussian noise.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuator::{
    arcsec_to_rad, ActuatorError, ChannelId, CommandRecord, PiezoChannel, DEFAULT_REVERSE_RATIO,
    DEFAULT_STEP_GAIN_ARCSEC, DEFAULT_STEP_LIMIT,
};
use crate::optics::{CouplingModel, OpticsError};
use crate::rig::{Actuators, PowerSample, PowerSource, SourceError};

pub const BENCH_LASER_POWER_W: f64 = 16.2e-3;
pub const BENCH_WAVELENGTH_M: f64 = 780e-9;
pub const BENCH_SAMPLE_RATE_HZ: f64 = 5.0;
pub const FOLD_FACTOR: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("invalid bench parameter {name}: {value}")]
    Invalid { name: &'static str, value: f64 },
    #[error(transparent)]
    Optics(#[from] OpticsError),
    #[error(transparent)]
    Actuator(#[from] ActuatorError),
    #[error("cannot parse axis map {0:?}; expected e.g. 1:12x,2:12y,3:34x,4:34y")]
    AxisMap(String),
    #[error("unknown fiber kind {0:?}")]
    FiberKind(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FiberKind {
    SingleMode,
    MultiMode,
}

impl FromStr for FiberKind {
    type Err = PlantError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "single_mode" | "smf" => Ok(FiberKind::SingleMode),
            "multi_mode" | "mmf" => Ok(FiberKind::MultiMode),
            other => Err(PlantError::FiberKind(other.to_string())),
        }
    }
}

impl fmt::Display for FiberKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FiberKind::SingleMode => "single_mode",
            FiberKind::MultiMode => "multi_mode",
        })
    }
}

/// Receiving fiber. `effective_waist` is the acceptance parameter used in the
/// decay exponent: a multimode fiber tolerates larger angles, so its
/// effective waist is smaller than the single-mode one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FiberConfig {
    pub kind: FiberKind,
    pub effective_waist: f64,
    pub base_efficiency: f64,
}

impl FiberConfig {
    /// 1.625 mm collimated waist, 80% base efficiency.
    pub fn single_mode() -> Self {
        Self {
            kind: FiberKind::SingleMode,
            effective_waist: 1.625e-3,
            base_efficiency: 0.8,
        }
    }

    /// One fifth of the single-mode waist: at the single-mode e⁻¹ angle the
    /// multimode efficiency is still exp(-0.04) ≈ 0.96 of its base.
    pub fn multi_mode() -> Self {
        Self {
            kind: FiberKind::MultiMode,
            effective_waist: 3.25e-4,
            base_efficiency: 0.95,
        }
    }

    pub fn coupling(&self, wavelength: f64) -> Result<CouplingModel, OpticsError> {
        CouplingModel::new(self.base_efficiency, self.effective_waist, wavelength)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    /// Standard deviation of the multiplicative term.
    pub relative_sigma: f64,
    /// Standard deviation of the additive term, watts.
    pub additive_floor: f64,
}

impl NoiseModel {
    pub const NONE: NoiseModel = NoiseModel {
        relative_sigma: 0.0,
        additive_floor: 0.0,
    };
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            relative_sigma: 0.005,
            additive_floor: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mirror {
    M12,
    M34,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    X,
    Y,
}

/// Which mirror and beam axis each channel drives, indexed by channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisMap(pub [(Mirror, Axis); 4]);

impl Default for AxisMap {
    fn default() -> Self {
        AxisMap([
            (Mirror::M12, Axis::X),
            (Mirror::M12, Axis::Y),
            (Mirror::M34, Axis::X),
            (Mirror::M34, Axis::Y),
        ])
    }
}

impl AxisMap {
    pub fn route(&self, channel: ChannelId) -> (Mirror, Axis) {
        self.0[channel.index()]
    }
}

impl FromStr for AxisMap {
    type Err = PlantError;

    /// `1:12x,2:12y,3:34x,4:34y`; every channel must appear exactly once.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || PlantError::AxisMap(s.to_string());
        let mut slots: [Option<(Mirror, Axis)>; 4] = [None; 4];
        for part in s.split(',') {
            let (ch, route) = part.trim().split_once(':').ok_or_else(bad)?;
            let ch = ChannelId::new(ch.trim().parse().map_err(|_| bad())?).map_err(|_| bad())?;
            let route = route.trim().to_ascii_lowercase();
            let (mirror, axis) = route.split_at(route.len().saturating_sub(1));
            let mirror = match mirror {
                "12" => Mirror::M12,
                "34" => Mirror::M34,
                _ => return Err(bad()),
            };
            let axis = match axis {
                "x" => Axis::X,
                "y" => Axis::Y,
                _ => return Err(bad()),
            };
            if slots[ch.index()].replace((mirror, axis)).is_some() {
                return Err(bad());
            }
        }
        let mut out = [(Mirror::M12, Axis::X); 4];
        for (o, s) in out.iter_mut().zip(slots) {
            *o = s.ok_or_else(bad)?;
        }
        Ok(AxisMap(out))
    }
}

impl fmt::Display for AxisMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (m, a)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            let m = match m {
                Mirror::M12 => "12",
                Mirror::M34 => "34",
            };
            let a = match a {
                Axis::X => "x",
                Axis::Y => "y",
            };
            write!(f, "{}:{m}{a}", i + 1)?;
        }
        Ok(())
    }
}

/// A beam-angle offset applied once the bench clock reaches `time`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduledPerturbation {
    pub time: f64,
    pub delta_x: f64,
    pub delta_y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub laser_power: f64,
    pub wavelength: f64,
    pub sample_period: f64,
    pub fiber: FiberConfig,
    pub noise: NoiseModel,
    pub axis_map: AxisMap,
    /// Forward mirror tilt per step, radians.
    pub step_gain: f64,
    /// Reverse gain as a fraction of forward gain.
    pub reverse_ratio: f64,
    /// Relative per-step gain scatter; 0 disables it.
    pub step_jitter: f64,
    pub step_limit: u32,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            laser_power: BENCH_LASER_POWER_W,
            wavelength: BENCH_WAVELENGTH_M,
            sample_period: 1.0 / BENCH_SAMPLE_RATE_HZ,
            fiber: FiberConfig::single_mode(),
            noise: NoiseModel::default(),
            axis_map: AxisMap::default(),
            step_gain: arcsec_to_rad(DEFAULT_STEP_GAIN_ARCSEC),
            reverse_ratio: DEFAULT_REVERSE_RATIO,
            step_jitter: 0.0,
            step_limit: DEFAULT_STEP_LIMIT,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<(), PlantError> {
        let positive = [
            ("laser_power", self.laser_power),
            ("wavelength", self.wavelength),
            ("sample_period", self.sample_period),
            ("step_gain", self.step_gain),
            ("reverse_ratio", self.reverse_ratio),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(PlantError::Invalid { name, value });
            }
        }
        let non_negative = [
            ("noise.relative_sigma", self.noise.relative_sigma),
            ("noise.additive_floor", self.noise.additive_floor),
            ("step_jitter", self.step_jitter),
        ];
        for (name, value) in non_negative {
            if !(value.is_finite() && value >= 0.0) {
                return Err(PlantError::Invalid { name, value });
            }
        }
        self.fiber.coupling(self.wavelength)?;
        Ok(())
    }
}

/// The bench the aligner acts on. Single owner; cloning yields an
/// independent snapshot including the noise stream position.
#[derive(Debug, Clone)]
pub struct Bench {
    config: BenchConfig,
    coupling: CouplingModel,
    channels: [PiezoChannel; 4],
    perturbation: (f64, f64),
    scheduled: Vec<ScheduledPerturbation>,
    rng: ChaCha8Rng,
    rng_seed: u64,
    reads: u64,
    commands: Vec<CommandRecord>,
}

impl Bench {
    pub fn new(config: BenchConfig, rng_seed: u64) -> Result<Self, PlantError> {
        config.validate()?;
        let coupling = config.fiber.coupling(config.wavelength)?;
        let mut channels = Vec::with_capacity(4);
        for id in ChannelId::ALL {
            let ch = PiezoChannel::new(
                id,
                config.step_gain,
                config.reverse_ratio * config.step_gain,
            )?
            .with_step_limit(config.step_limit)
            // per-channel streams derived from the bench seed
            .with_step_jitter(
                config.step_jitter,
                rng_seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(id.get() as u64),
            )?;
            channels.push(ch);
        }
        let channels: [PiezoChannel; 4] = channels.try_into().expect("four channels");
        Ok(Self {
            config,
            coupling,
            channels,
            perturbation: (0.0, 0.0),
            scheduled: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            rng_seed,
            reads: 0,
            commands: Vec::new(),
        })
    }

    pub fn config(&self) -> &BenchConfig {
        &self.config
    }

    pub fn coupling(&self) -> &CouplingModel {
        &self.coupling
    }

    pub fn fiber(&self) -> &FiberConfig {
        &self.config.fiber
    }

    pub fn channel(&self, id: ChannelId) -> &PiezoChannel {
        &self.channels[id.index()]
    }

    pub fn channels(&self) -> &[PiezoChannel; 4] {
        &self.channels
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    /// Simulated seconds elapsed; exactly `reads × sample_period`.
    pub fn clock(&self) -> f64 {
        self.reads as f64 * self.config.sample_period
    }

    pub fn reads(&self) -> u64 {
        self.reads
    }

    pub fn perturbation(&self) -> (f64, f64) {
        self.perturbation
    }

    pub fn commands(&self) -> &[CommandRecord] {
        &self.commands
    }

    pub fn set_noise(&mut self, noise: NoiseModel) {
        self.config.noise = noise;
    }

    /// Beam angle `(θx, θy)` at the collimator.
    pub fn total_angular_offset(&self) -> (f64, f64) {
        let (mut tx, mut ty) = self.perturbation;
        for ch in &self.channels {
            let deflection = FOLD_FACTOR * ch.accumulated_tilt();
            match self.config.axis_map.route(ch.id()).1 {
                Axis::X => tx += deflection,
                Axis::Y => ty += deflection,
            }
        }
        (tx, ty)
    }

    pub fn offset_magnitude(&self) -> f64 {
        let (tx, ty) = self.total_angular_offset();
        tx.hypot(ty)
    }

    /// Noise-free coupling efficiency at the current offset.
    pub fn true_efficiency(&self) -> f64 {
        self.coupling.angular_efficiency(self.offset_magnitude())
    }

    pub fn inject_perturbation(&mut self, delta_x: f64, delta_y: f64) {
        self.perturbation.0 += delta_x;
        self.perturbation.1 += delta_y;
    }

    /// Queues a perturbation that lands on the first read at or after `time`.
    pub fn schedule_perturbation(&mut self, p: ScheduledPerturbation) {
        self.scheduled.push(p);
        self.scheduled
            .sort_by(|a, b| a.time.partial_cmp(&b.time).expect("finite times"));
    }

    pub fn swap_fiber(&mut self, fiber: FiberConfig) -> Result<(), PlantError> {
        self.coupling = fiber.coupling(self.config.wavelength)?;
        self.config.fiber = fiber;
        Ok(())
    }

    /// Advances the clock by one sample period and returns a meter reading.
    pub fn read_power(&mut self) -> PowerSample {
        self.reads += 1;
        let now = self.clock();
        while let Some(p) = self.scheduled.first() {
            if p.time > now {
                break;
            }
            let p = self.scheduled.remove(0);
            self.inject_perturbation(p.delta_x, p.delta_y);
        }

        let ideal = self.config.laser_power * self.true_efficiency();
        let noise = self.config.noise;
        let n1 = Normal::new(0.0, noise.relative_sigma)
            .expect("validated")
            .sample(&mut self.rng);
        let n2 = Normal::new(0.0, noise.additive_floor)
            .expect("validated")
            .sample(&mut self.rng);
        PowerSample {
            time: now,
            power: (ideal * (1.0 + n1) + n2).max(0.0),
        }
    }

    pub fn move_channel(&mut self, channel: ChannelId, steps: i32) -> Result<(), ActuatorError> {
        let ch = &mut self.channels[channel.index()];
        ch.move_by(steps)?;
        self.commands.push(CommandRecord {
            seq: self.commands.len() as u64,
            channel,
            steps,
            position_after: ch.position(),
            tilt_after_rad: ch.accumulated_tilt(),
        });
        Ok(())
    }
}

impl PowerSource for Bench {
    fn read_power(&mut self) -> Result<PowerSample, SourceError> {
        Ok(Bench::read_power(self))
    }
}

impl Actuators for Bench {
    fn move_channel(&mut self, channel: ChannelId, steps: i32) -> Result<(), ActuatorError> {
        Bench::move_channel(self, channel, steps)
    }
    fn position(&self, channel: ChannelId) -> i64 {
        self.channels[channel.index()].position()
    }
    fn set_zero(&mut self, channel: ChannelId) {
        self.channels[channel.index()].set_zero()
    }
}

/// Reads power from a text file that an external meter keeps rewriting.
/// The last non-empty line is taken as the current value in watts.
#[derive(Debug, Clone)]
pub struct PowerFileSource {
    path: PathBuf,
    sample_period: f64,
    reads: u64,
}

impl PowerFileSource {
    pub fn new(path: impl Into<PathBuf>, sample_period: f64) -> Self {
        Self {
            path: path.into(),
            sample_period,
            reads: 0,
        }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn parse_power_text(text: &str) -> Option<Result<f64, SourceError>> {
    let line = text.lines().map(str::trim).rfind(|l| !l.is_empty())?;
    Some(match line.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        Ok(v) => Err(SourceError::NonFinite(v)),
        Err(_) => Err(SourceError::Parse {
            text: line.to_string(),
        }),
    })
}

impl PowerSource for PowerFileSource {
    fn read_power(&mut self) -> Result<PowerSample, SourceError> {
        let text = fs::read_to_string(&self.path).map_err(|source| SourceError::Io {
            path: self.path.clone(),
            source,
        })?;
        let power =
            parse_power_text(&text).ok_or_else(|| SourceError::Empty(self.path.clone()))??;
        self.reads += 1;
        Ok(PowerSample {
            time: self.reads as f64 * self.sample_period,
            power,
        })
    }
}
