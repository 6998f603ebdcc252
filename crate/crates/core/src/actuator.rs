//! Stepping piezo actuators driving mirror tilt.
//!
//! Each channel counts integer steps and converts them to mirror tilt with a
//! per-direction gain. Unequal forward and reverse gains reproduce the
//! direction-dependent step size seen when a mirror is cycled back and forth.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const RAD_PER_ARCSEC: f64 = PI / 648_000.0;

/// Mirror tilt per step of the bench actuators.
pub const DEFAULT_STEP_GAIN_ARCSEC: f64 = 0.35;
pub const DEFAULT_REVERSE_RATIO: f64 = 0.95;
pub const DEFAULT_STEP_LIMIT: u32 = 1000;

pub fn arcsec_to_rad(arcsec: f64) -> f64 {
    arcsec * RAD_PER_ARCSEC
}

pub fn rad_to_arcsec(rad: f64) -> f64 {
    rad / RAD_PER_ARCSEC
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ActuatorError {
    #[error("channel id {0} is outside 1..=4")]
    BadChannel(i64),
    #[error("channel {channel}: {steps} steps exceeds the per-command limit of {limit}")]
    StepLimit {
        channel: ChannelId,
        steps: i32,
        limit: u32,
    },
    #[error("invalid gain {0} rad/step; gains must be finite and > 0")]
    BadGain(f64),
    #[error("invalid step jitter sigma {0}")]
    BadJitter(f64),
    #[error("tilt {0} rad is beyond the small-mirror range |tilt| < pi/4")]
    TiltOutOfRange(f64),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("calibration log has {found} {direction} moves; at least 3 are required")]
    MissingDirection {
        direction: &'static str,
        found: usize,
    },
    #[error("calibration log contains a non-finite displacement at row {0}")]
    NonFinite(usize),
    #[error("invalid calibration geometry: {0}")]
    Geometry(&'static str),
}

/// One of the four bench actuator channels, numbered 1 to 4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct ChannelId(u8);

impl ChannelId {
    pub const ALL: [ChannelId; 4] = [ChannelId(1), ChannelId(2), ChannelId(3), ChannelId(4)];

    pub fn new(id: i64) -> Result<Self, ActuatorError> {
        if (1..=4).contains(&id) {
            Ok(ChannelId(id as u8))
        } else {
            Err(ActuatorError::BadChannel(id))
        }
    }

    pub fn get(self) -> u8 {
        self.0
    }

    /// Zero-based slot for array indexing.
    pub fn index(self) -> usize {
        (self.0 - 1) as usize
    }
}

impl TryFrom<u8> for ChannelId {
    type Error = ActuatorError;
    fn try_from(v: u8) -> Result<Self, Self::Error> {
        ChannelId::new(v as i64)
    }
}

impl From<ChannelId> for u8 {
    fn from(c: ChannelId) -> u8 {
        c.0
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Zero-mean Gaussian scatter on each step's gain, relative to the nominal
/// gain of the commanded direction.
#[derive(Debug, Clone)]
struct StepJitter {
    relative_sigma: f64,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone)]
pub struct PiezoChannel {
    id: ChannelId,
    position: i64,
    zero_reference: i64,
    forward_gain: f64,
    reverse_gain: f64,
    accumulated_tilt: f64,
    forward_steps: u64,
    reverse_steps: u64,
    step_limit: u32,
    jitter: Option<StepJitter>,
}

impl PiezoChannel {
    /// Channel with the given per-direction gains in radians of mirror tilt
    /// per step.
    pub fn new(id: ChannelId, forward_gain: f64, reverse_gain: f64) -> Result<Self, ActuatorError> {
        for g in [forward_gain, reverse_gain] {
            if !(g.is_finite() && g > 0.0) {
                return Err(ActuatorError::BadGain(g));
            }
        }
        Ok(Self {
            id,
            position: 0,
            zero_reference: 0,
            forward_gain,
            reverse_gain,
            accumulated_tilt: 0.0,
            forward_steps: 0,
            reverse_steps: 0,
            step_limit: DEFAULT_STEP_LIMIT,
            jitter: None,
        })
    }

    /// 0.35 arcsec forward, 5% weaker in reverse.
    pub fn bench_default(id: ChannelId) -> Self {
        let g = arcsec_to_rad(DEFAULT_STEP_GAIN_ARCSEC);
        Self::new(id, g, DEFAULT_REVERSE_RATIO * g).expect("default gains are valid")
    }

    pub fn with_step_limit(mut self, limit: u32) -> Self {
        self.step_limit = limit;
        self
    }

    /// Enables per-step gain scatter with its own seeded stream.
    pub fn with_step_jitter(
        mut self,
        relative_sigma: f64,
        seed: u64,
    ) -> Result<Self, ActuatorError> {
        if !(relative_sigma.is_finite() && relative_sigma >= 0.0) {
            return Err(ActuatorError::BadJitter(relative_sigma));
        }
        self.jitter = (relative_sigma > 0.0).then(|| StepJitter {
            relative_sigma,
            rng: ChaCha8Rng::seed_from_u64(seed),
        });
        Ok(self)
    }

    pub fn id(&self) -> ChannelId {
        self.id
    }

    /// Position relative to the last `set_zero`.
    pub fn position(&self) -> i64 {
        self.position - self.zero_reference
    }

    /// Cumulative commanded steps since construction.
    pub fn raw_position(&self) -> i64 {
        self.position
    }

    pub fn zero_reference(&self) -> i64 {
        self.zero_reference
    }

    pub fn forward_gain(&self) -> f64 {
        self.forward_gain
    }

    pub fn reverse_gain(&self) -> f64 {
        self.reverse_gain
    }

    pub fn accumulated_tilt(&self) -> f64 {
        self.accumulated_tilt
    }

    pub fn step_limit(&self) -> u32 {
        self.step_limit
    }

    /// Total (forward, reverse) steps executed since construction.
    pub fn step_totals(&self) -> (u64, u64) {
        (self.forward_steps, self.reverse_steps)
    }

    /// Executes a relative move and returns the resulting tilt change.
    /// Commands beyond the step limit are rejected and leave the channel
    /// untouched.
    pub fn move_by(&mut self, steps: i32) -> Result<f64, ActuatorError> {
        if steps.unsigned_abs() > self.step_limit {
            return Err(ActuatorError::StepLimit {
                channel: self.id,
                steps,
                limit: self.step_limit,
            });
        }
        if steps == 0 {
            return Ok(0.0);
        }
        let n = steps.unsigned_abs();
        let gain = if steps > 0 {
            self.forward_steps += n as u64;
            self.forward_gain
        } else {
            self.reverse_steps += n as u64;
            self.reverse_gain
        };
        let mut delta = gain * steps as f64;
        if let Some(j) = self.jitter.as_mut() {
            // sum of n independent per-step gain errors
            let sd = j.relative_sigma * gain * (n as f64).sqrt();
            let noise = Normal::new(0.0, sd).expect("sd is finite and >= 0");
            delta += steps.signum() as f64 * noise.sample(&mut j.rng);
        }
        self.position += steps as i64;
        self.accumulated_tilt += delta;
        Ok(delta)
    }

    /// Bookkeeping only: the reported position becomes zero, tilt is kept.
    pub fn set_zero(&mut self) {
        self.zero_reference = self.position;
    }
}

/// Distances used to turn mirror tilt into spot motion at the collimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationGeometry {
    lever_arm: f64,
    fold_factor: f64,
}

impl CalibrationGeometry {
    /// Plane mirror at `lever_arm` metres from the collimator.
    pub fn new(lever_arm: f64) -> Result<Self, CalibrationError> {
        if !(lever_arm.is_finite() && lever_arm > 0.0) {
            return Err(CalibrationError::Geometry("lever arm must be > 0"));
        }
        Ok(Self {
            lever_arm,
            fold_factor: 2.0,
        })
    }

    /// The 8.5 cm mirror-to-collimator spacing of the calibration bench.
    pub fn bench_default() -> Self {
        Self::new(0.085).expect("valid")
    }

    pub fn lever_arm(&self) -> f64 {
        self.lever_arm
    }

    pub fn fold_factor(&self) -> f64 {
        self.fold_factor
    }

    pub fn displacement_for_tilt(&self, tilt: f64) -> Result<f64, ActuatorError> {
        if !(tilt.abs() < PI / 4.0) {
            return Err(ActuatorError::TiltOutOfRange(tilt));
        }
        Ok(self.lever_arm * (self.fold_factor * tilt).tan())
    }

    fn tilt_for_displacement(&self, displacement: f64) -> f64 {
        (displacement / self.lever_arm).atan() / self.fold_factor
    }
}

/// Spot centroid offset produced by the channel's current tilt.
pub fn spot_centroid_displacement(
    channel: &PiezoChannel,
    geometry: &CalibrationGeometry,
) -> Result<f64, ActuatorError> {
    geometry.displacement_for_tilt(channel.accumulated_tilt())
}

/// One row of a centroid calibration run: commanded steps and the centroid
/// shift that move produced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationMove {
    pub steps: i32,
    pub displacement: f64,
}

/// Estimates forward and reverse gains (rad/step) from a centroid log.
///
/// Centroid shifts are accumulated from the start of the log and mapped back
/// to tilt through the exact lever geometry, so large excursions do not bias
/// the estimate. Each direction is then a least-squares line through the
/// origin of tilt change against step count.
pub fn calibrate_gains(
    moves: &[CalibrationMove],
    geometry: &CalibrationGeometry,
) -> Result<(f64, f64), CalibrationError> {
    let (mut fwd_n, mut rev_n) = (0usize, 0usize);
    let (mut fwd_sxy, mut fwd_sxx, mut rev_sxy, mut rev_sxx) = (0.0, 0.0, 0.0, 0.0);

    let mut centroid = 0.0;
    let mut tilt = 0.0;
    for (row, m) in moves.iter().enumerate() {
        if !m.displacement.is_finite() {
            return Err(CalibrationError::NonFinite(row));
        }
        centroid += m.displacement;
        let next_tilt = geometry.tilt_for_displacement(centroid);
        let dtilt = next_tilt - tilt;
        tilt = next_tilt;

        let s = m.steps as f64;
        match m.steps.signum() {
            1 => {
                fwd_n += 1;
                fwd_sxy += s * dtilt;
                fwd_sxx += s * s;
            }
            -1 => {
                rev_n += 1;
                rev_sxy += s * dtilt;
                rev_sxx += s * s;
            }
            _ => {}
        }
    }

    if fwd_n < 3 {
        return Err(CalibrationError::MissingDirection {
            direction: "forward",
            found: fwd_n,
        });
    }
    if rev_n < 3 {
        return Err(CalibrationError::MissingDirection {
            direction: "reverse",
            found: rev_n,
        });
    }
    Ok((fwd_sxy / fwd_sxx, rev_sxy / rev_sxx))
}

/// Drives `channel` through `repeats` forward moves and then `repeats`
/// reverse moves at every size in `step_sizes`, recording the centroid shift
/// of each move.
pub fn record_calibration_moves(
    channel: &mut PiezoChannel,
    geometry: &CalibrationGeometry,
    step_sizes: &[u32],
    repeats: usize,
) -> Result<Vec<CalibrationMove>, ActuatorError> {
    let mut log = Vec::with_capacity(step_sizes.len() * repeats * 2);
    let mut before = spot_centroid_displacement(channel, geometry)?;
    for &size in step_sizes {
        let size = i32::try_from(size).map_err(|_| ActuatorError::StepLimit {
            channel: channel.id(),
            steps: i32::MAX,
            limit: channel.step_limit(),
        })?;
        for steps in std::iter::repeat_n(size, repeats).chain(std::iter::repeat_n(-size, repeats)) {
            channel.move_by(steps)?;
            let after = spot_centroid_displacement(channel, geometry)?;
            log.push(CalibrationMove {
                steps,
                displacement: after - before,
            });
            before = after;
        }
    }
    Ok(log)
}

/// A single executed actuator command, as exported to CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommandRecord {
    pub seq: u64,
    pub channel: ChannelId,
    pub steps: i32,
    pub position_after: i64,
    pub tilt_after_rad: f64,
}

pub const COMMAND_LOG_HEADER: [&str; 5] = [
    "seq",
    "channel_id",
    "steps",
    "position_after",
    "tilt_after_rad",
];

/// Writes `seq,channel_id,steps,position_after,tilt_after_rad` rows.
pub fn write_command_log<W: Write>(records: &[CommandRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COMMAND_LOG_HEADER)?;
    for r in records {
        w.write_record([
            r.seq.to_string(),
            r.channel.to_string(),
            r.steps.to_string(),
            r.position_after.to_string(),
            r.tilt_after_rad.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
