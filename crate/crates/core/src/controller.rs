//! Power-feedback hill climbing over the actuator channels.
//!
//! The aligner sees only power readings and actuator positions. Each stage of
//! the step schedule visits the channels in order; a visit takes a reference
//! reading, probes one step in the channel's current direction and keeps
//! stepping while the power gain `ΔP = P_new − P_old` stays positive. On
//! `ΔP ≤ 0` it steps back once. If the very first probe of a visit already
//! lost power, the opposite direction is probed from a fresh reference before
//! the channel is marked done.
//!
//! Every reading produces exactly one [`ClimbRecord`] and at most one actuator
//! command, so record times are strictly increasing.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuator::{ActuatorError, ChannelId};
use crate::rig::{Actuators, PowerSource, SourceError};

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("invalid climb configuration: {0}")]
    Config(String),
    #[error("power source unavailable at startup: {0}")]
    Startup(#[source] SourceError),
    #[error("power source failed: {0}")]
    Source(#[source] SourceError),
    #[error("power reading {0} is not finite")]
    NonFinitePower(f64),
    #[error(transparent)]
    Actuator(#[from] ActuatorError),
    #[error("the climb has already terminated")]
    Terminated,
}

/// A failed run together with every record emitted before the failure.
#[derive(Debug, Error)]
#[error("climb aborted after {} records: {source}", records.len())]
pub struct RunError {
    pub records: Vec<ClimbRecord>,
    #[source]
    pub source: ControlError,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClimbConfig {
    /// Step size of each stage, in actuator steps.
    pub stage_schedule: Vec<u32>,
    pub max_adjustments: u32,
    pub channel_order: Vec<ChannelId>,
    /// Readings averaged into one power sample.
    pub settle_reads: u32,
    /// Trailing samples used to declare the coupling stable.
    pub stability_window: usize,
    /// Relative standard deviation below which the window counts as stable.
    pub stability_rel_sd: f64,
}

impl ClimbConfig {
    fn with_schedule(schedule: &[u32]) -> Self {
        Self {
            stage_schedule: schedule.to_vec(),
            max_adjustments: 2000,
            channel_order: ChannelId::ALL.to_vec(),
            settle_reads: 1,
            stability_window: 50,
            stability_rel_sd: 0.02,
        }
    }

    /// Large steps, refine, re-explore, refine: 100-50-100-50-10.
    pub fn coarse() -> Self {
        Self::with_schedule(&[100, 50, 100, 50, 10])
    }

    /// Single-mode profile: 10-5-10-5-1.
    pub fn fine() -> Self {
        Self::with_schedule(&[10, 5, 10, 5, 1])
    }

    /// One stage at a constant step size.
    pub fn fixed(step: u32) -> Self {
        Self::with_schedule(&[step])
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        let bad = |m: &str| Err(ControlError::Config(m.to_string()));
        let Some(&last) = self.stage_schedule.last() else {
            return bad("stage schedule is empty");
        };
        if self.stage_schedule.contains(&0) {
            return bad("step sizes must be > 0");
        }
        if self.stage_schedule.iter().any(|&s| s < last) {
            return bad("the last stage must use the smallest step size");
        }
        if self.max_adjustments == 0 {
            return bad("max_adjustments must be > 0");
        }
        let mut seen = [false; 4];
        for c in &self.channel_order {
            if std::mem::replace(&mut seen[c.index()], true) {
                return bad("channel order repeats a channel");
            }
        }
        if self.channel_order.len() != 4 {
            return bad("channel order must be a permutation of 1,2,3,4");
        }
        if self.settle_reads == 0 {
            return bad("settle_reads must be > 0");
        }
        if self.stability_window < 2 {
            return bad("stability window needs at least 2 samples");
        }
        if !(self.stability_rel_sd.is_finite() && self.stability_rel_sd > 0.0) {
            return bad("stability_rel_sd must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Reverse,
}

impl Direction {
    pub fn sign(self) -> i32 {
        match self {
            Direction::Forward => 1,
            Direction::Reverse => -1,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Direction::Forward => Direction::Reverse,
            Direction::Reverse => Direction::Forward,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClimbEvent {
    Move,
    Reverse,
    StageAdvance,
    Terminate,
    /// Monitoring reading taken after the climb finished.
    Hold,
}

impl ClimbEvent {
    pub fn as_str(self) -> &'static str {
        match self {
            ClimbEvent::Move => "move",
            ClimbEvent::Reverse => "reverse",
            ClimbEvent::StageAdvance => "stage_advance",
            ClimbEvent::Terminate => "terminate",
            ClimbEvent::Hold => "hold",
        }
    }
}

impl fmt::Display for ClimbEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClimbEvent {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "move" => ClimbEvent::Move,
            "reverse" => ClimbEvent::Reverse,
            "stage_advance" => ClimbEvent::StageAdvance,
            "terminate" => ClimbEvent::Terminate,
            "hold" => ClimbEvent::Hold,
            other => return Err(format!("unknown event {other:?}")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClimbRecord {
    pub time: f64,
    pub channel: ChannelId,
    /// Position of `channel` after the command issued at this reading.
    pub position: i64,
    pub power: f64,
    pub stage: usize,
    pub event: ClimbEvent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    AdjustmentLimit,
    NoFurtherGain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    /// Next reading becomes `p_old` for a new channel visit.
    Reference { stage_advanced: bool },
    /// A move was made; next reading is compared against `p_old`.
    Probing,
    /// Schedule exhausted with no gain; next reading closes the run.
    Finishing,
}

#[derive(Debug, Clone)]
pub struct ClimbState {
    pub current_channel: ChannelId,
    pub direction: Direction,
    pub step_size: u32,
    pub p_old: f64,
    pub p_new: f64,
    /// Local search of `current_channel` in this stage has ended.
    pub move_done: bool,
    pub cycles: u32,
    pub adjustments: u32,
    stage: usize,
    order_pos: usize,
    directions: [Direction; 4],
    done: [bool; 4],
    phase: Phase,
    gained: bool,
    probed_opposite: bool,
    stage_gain: bool,
    terminated: Option<Termination>,
}

impl ClimbState {
    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn terminated(&self) -> Option<Termination> {
        self.terminated
    }

    pub fn channel_done(&self, channel: ChannelId) -> bool {
        self.done[channel.index()]
    }

    pub fn channel_direction(&self, channel: ChannelId) -> Direction {
        self.directions[channel.index()]
    }
}

fn sample<R: PowerSource>(rig: &mut R, n: u32) -> Result<(f64, f64), SourceError> {
    let mut sum = 0.0;
    let mut time = 0.0;
    for _ in 0..n {
        let s = rig.read_power()?;
        sum += s.power;
        time = s.time;
    }
    Ok((time, sum / n as f64))
}

fn command<R: Actuators>(
    rig: &mut R,
    state: &mut ClimbState,
    steps: i32,
) -> Result<(), ControlError> {
    rig.move_channel(state.current_channel, steps)?;
    state.adjustments += 1;
    Ok(())
}

/// Zeroes the actuators, takes the reference reading and makes the first
/// move of the first stage on the first channel.
pub fn initialize<R: PowerSource + Actuators>(
    config: &ClimbConfig,
    rig: &mut R,
) -> Result<(ClimbState, ClimbRecord), ControlError> {
    config.validate()?;
    for id in ChannelId::ALL {
        rig.set_zero(id);
    }
    let (time, p0) = sample(rig, config.settle_reads).map_err(ControlError::Startup)?;
    if !p0.is_finite() {
        return Err(ControlError::Startup(SourceError::NonFinite(p0)));
    }

    let first = config.channel_order[0];
    let mut state = ClimbState {
        current_channel: first,
        direction: Direction::Forward,
        step_size: config.stage_schedule[0],
        p_old: p0,
        p_new: p0,
        move_done: false,
        cycles: 0,
        adjustments: 0,
        stage: 0,
        order_pos: 0,
        directions: [Direction::Forward; 4],
        done: [false; 4],
        phase: Phase::Probing,
        gained: false,
        probed_opposite: false,
        stage_gain: false,
        terminated: None,
    };
    let first_step = state.step_size as i32;
    command(rig, &mut state, first_step)?;
    let record = ClimbRecord {
        time,
        channel: first,
        position: rig.position(first),
        power: p0,
        stage: 0,
        event: ClimbEvent::Move,
    };
    Ok((state, record))
}

/// One reading and the decision it drives.
pub fn step<R: PowerSource + Actuators>(
    state: &mut ClimbState,
    config: &ClimbConfig,
    rig: &mut R,
) -> Result<ClimbRecord, ControlError> {
    if state.terminated.is_some() {
        return Err(ControlError::Terminated);
    }
    let (time, p_new) = sample(rig, config.settle_reads).map_err(ControlError::Source)?;
    if !p_new.is_finite() {
        return Err(ControlError::NonFinitePower(p_new));
    }
    state.p_new = p_new;
    let acted = state.current_channel;
    let stage = state.stage;

    let event = match state.phase {
        Phase::Finishing => {
            state.terminated = Some(Termination::NoFurtherGain);
            ClimbEvent::Terminate
        }
        _ if state.adjustments >= config.max_adjustments => {
            state.terminated = Some(Termination::AdjustmentLimit);
            ClimbEvent::Terminate
        }
        Phase::Reference { stage_advanced } => {
            state.p_old = p_new;
            state.move_done = false;
            let s = state.direction.sign() * state.step_size as i32;
            command(rig, state, s)?;
            state.phase = Phase::Probing;
            if stage_advanced {
                ClimbEvent::StageAdvance
            } else {
                ClimbEvent::Move
            }
        }
        Phase::Probing if p_new > state.p_old => {
            state.p_old = p_new;
            state.gained = true;
            state.stage_gain = true;
            let s = state.direction.sign() * state.step_size as i32;
            command(rig, state, s)?;
            ClimbEvent::Move
        }
        Phase::Probing => {
            let s = -state.direction.sign() * state.step_size as i32;
            command(rig, state, s)?;
            if !state.gained && !state.probed_opposite {
                // first probe lost power: try the other side from a fresh reference
                state.direction = state.direction.flipped();
                state.directions[acted.index()] = state.direction;
                state.probed_opposite = true;
                state.phase = Phase::Reference {
                    stage_advanced: false,
                };
            } else {
                state.move_done = true;
                state.done[acted.index()] = true;
                next_channel(state, config);
            }
            ClimbEvent::Reverse
        }
    };

    Ok(ClimbRecord {
        time,
        channel: acted,
        position: rig.position(acted),
        power: p_new,
        stage,
        event,
    })
}

fn next_channel(state: &mut ClimbState, config: &ClimbConfig) {
    state.order_pos += 1;
    let mut stage_advanced = false;
    if state.order_pos == config.channel_order.len() {
        state.order_pos = 0;
        advance_stage(state, config);
        stage_advanced = true;
    }
    let ch = config.channel_order[state.order_pos];
    state.current_channel = ch;
    state.direction = state.directions[ch.index()];
    state.gained = false;
    state.probed_opposite = false;
    if state.phase != Phase::Finishing {
        state.phase = Phase::Reference { stage_advanced };
    }
}

/// Closes the current stage once every channel has finished its local
/// search and loads the next step size. After the last stage the final step
/// size is repeated for as long as a pass still finds gain; a pass without
/// gain marks the run for termination.
pub fn advance_stage(state: &mut ClimbState, config: &ClimbConfig) {
    debug_assert!(
        config.channel_order.iter().all(|c| state.done[c.index()]),
        "stage advanced before every channel finished"
    );
    state.done = [false; 4];
    state.cycles += 1;
    let last = config.stage_schedule.len() - 1;
    if state.stage < last {
        state.stage += 1;
    } else if !state.stage_gain {
        state.phase = Phase::Finishing;
    }
    state.stage_gain = false;
    state.step_size = config.stage_schedule[state.stage];
}

#[derive(Debug, Clone)]
pub struct ClimbRun {
    pub state: ClimbState,
    pub records: Vec<ClimbRecord>,
}

/// Climbs until the adjustment budget is spent or the final stage finds no
/// further gain.
pub fn run<R: PowerSource + Actuators>(
    config: &ClimbConfig,
    rig: &mut R,
) -> Result<ClimbRun, RunError> {
    let (mut state, first) = initialize(config, rig).map_err(|source| RunError {
        records: Vec::new(),
        source,
    })?;
    let mut records = vec![first];
    while state.terminated.is_none() {
        match step(&mut state, config, rig) {
            Ok(r) => records.push(r),
            Err(source) => return Err(RunError { records, source }),
        }
    }
    Ok(ClimbRun { state, records })
}

pub const LOG_HEADER: [&str; 6] = [
    "time_s",
    "channel",
    "position_steps",
    "power_w",
    "stage",
    "event",
];

#[derive(Debug, Error)]
pub enum LogError {
    #[error("log write failed after {records_written} of {records_total} records: {source}")]
    Write {
        records_written: usize,
        records_total: usize,
        #[source]
        source: csv::Error,
    },
    #[error("malformed log: {0}")]
    Read(#[from] csv::Error),
    #[error("malformed log row {row}: {reason}")]
    Row { row: usize, reason: String },
}

struct CountingWriter<W> {
    inner: W,
    bytes: usize,
}

impl<W: Write> Write for CountingWriter<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.bytes += n;
        Ok(n)
    }
    fn flush(&mut self) -> std::io::Result<()> {
        self.inner.flush()
    }
}

/// Writes the run log as CSV and returns the number of bytes written.
/// Floats use Rust's shortest round-trip decimal form, never exponents.
pub fn write_log<W: Write>(records: &[ClimbRecord], out: W) -> Result<usize, LogError> {
    let total = records.len();
    let fail = |written: usize| {
        move |source| LogError::Write {
            records_written: written,
            records_total: total,
            source,
        }
    };
    let mut w = csv::Writer::from_writer(CountingWriter {
        inner: out,
        bytes: 0,
    });
    w.write_record(LOG_HEADER).map_err(fail(0))?;
    for (i, r) in records.iter().enumerate() {
        w.write_record([
            r.time.to_string(),
            r.channel.to_string(),
            r.position.to_string(),
            r.power.to_string(),
            r.stage.to_string(),
            r.event.as_str().to_string(),
        ])
        .map_err(fail(i))?;
    }
    w.flush().map_err(|e| fail(total)(e.into()))?;
    let inner = w
        .into_inner()
        .map_err(|e| fail(total)(std::io::Error::other(e.to_string()).into()))?;
    Ok(inner.bytes)
}

pub fn read_log<R: Read>(input: R) -> Result<Vec<ClimbRecord>, LogError> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(LOG_HEADER.iter().copied()) {
        return Err(LogError::Row {
            row: 0,
            reason: format!("unexpected header {:?}", headers.iter().collect::<Vec<_>>()),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let field = |k: usize| rec.get(k).unwrap_or("");
        let err = |reason: String| LogError::Row { row, reason };
        let num = |k: usize| -> Result<f64, LogError> {
            field(k)
                .parse::<f64>()
                .map_err(|e| err(format!("column {}: {e}", LOG_HEADER[k])))
        };
        let channel = field(1)
            .parse::<i64>()
            .map_err(|e| err(e.to_string()))
            .and_then(|c| ChannelId::new(c).map_err(|e| err(e.to_string())))?;
        out.push(ClimbRecord {
            time: num(0)?,
            channel,
            position: field(2)
                .parse()
                .map_err(|e| err(format!("position: {e}")))?,
            power: num(3)?,
            stage: field(4).parse().map_err(|e| err(format!("stage: {e}")))?,
            event: field(5).parse().map_err(err)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actuator::PiezoChannel;
    use crate::rig::{PowerSample, SplitRig};
    use proptest::prelude::*;
    use std::collections::VecDeque;

    /// Replays a fixed list of readings.
    struct Script {
        readings: VecDeque<f64>,
        t: f64,
    }

    impl Script {
        fn new(readings: &[f64]) -> Self {
            Self {
                readings: readings.iter().copied().collect(),
                t: 0.0,
            }
        }
    }

    impl PowerSource for Script {
        fn read_power(&mut self) -> Result<PowerSample, SourceError> {
            self.t += 0.2;
            let p = self
                .readings
                .pop_front()
                .ok_or_else(|| SourceError::Parse {
                    text: "script exhausted".into(),
                })?;
            Ok(PowerSample {
                time: self.t,
                power: p,
            })
        }
    }

    fn bank() -> [PiezoChannel; 4] {
        ChannelId::ALL.map(PiezoChannel::bench_default)
    }

    fn scripted(readings: &[f64]) -> SplitRig<Script, [PiezoChannel; 4]> {
        SplitRig {
            source: Script::new(readings),
            actuators: bank(),
        }
    }

    /// Noiseless separable peak over raw channel positions.
    struct Peak {
        positions: [i64; 4],
        target: [i64; 4],
        t: f64,
        moves: Vec<(ChannelId, i32)>,
    }

    impl Peak {
        fn new(target: [i64; 4]) -> Self {
            Self {
                positions: [0; 4],
                target,
                t: 0.0,
                moves: Vec::new(),
            }
        }
        fn value(&self) -> f64 {
            let d2: f64 = self
                .positions
                .iter()
                .zip(self.target)
                .map(|(&p, t)| ((p - t) as f64 / 40.0).powi(2))
                .sum();
            (-d2).exp()
        }
    }

    impl PowerSource for Peak {
        fn read_power(&mut self) -> Result<PowerSample, SourceError> {
            self.t += 0.2;
            Ok(PowerSample {
                time: self.t,
                power: self.value(),
            })
        }
    }

    impl Actuators for Peak {
        fn move_channel(&mut self, c: ChannelId, steps: i32) -> Result<(), ActuatorError> {
            self.positions[c.index()] += steps as i64;
            self.moves.push((c, steps));
            Ok(())
        }
        fn position(&self, c: ChannelId) -> i64 {
            self.positions[c.index()]
        }
        fn set_zero(&mut self, _: ChannelId) {}
    }

    fn ch(n: i64) -> ChannelId {
        ChannelId::new(n).unwrap()
    }

    #[test]
    fn profiles_validate() {
        ClimbConfig::coarse().validate().unwrap();
        ClimbConfig::fine().validate().unwrap();
        ClimbConfig::fixed(7).validate().unwrap();
        let mut c = ClimbConfig::fine();
        c.stage_schedule.clear();
        assert!(matches!(c.validate(), Err(ControlError::Config(_))));
        let mut c = ClimbConfig::fine();
        c.stage_schedule = vec![1, 5];
        assert!(c.validate().is_err());
        let mut c = ClimbConfig::fine();
        c.max_adjustments = 0;
        assert!(c.validate().is_err());
        let mut c = ClimbConfig::fine();
        c.channel_order = vec![ch(1), ch(1), ch(2), ch(3)];
        assert!(c.validate().is_err());
        let mut c = ClimbConfig::fine();
        c.channel_order = vec![ch(1), ch(2)];
        assert!(c.validate().is_err());
    }

    #[test]
    fn first_command_follows_profile() {
        for (cfg, step) in [(ClimbConfig::coarse(), 100), (ClimbConfig::fine(), 10)] {
            let mut rig = Peak::new([0; 4]);
            let (state, rec) = initialize(&cfg, &mut rig).unwrap();
            assert_eq!(rig.moves, vec![(ch(1), step)]);
            assert_eq!(state.p_old, 1.0);
            assert_eq!(rec.event, ClimbEvent::Move);
            assert_eq!(rec.position, step as i64);
        }
        let mut cfg = ClimbConfig::fine();
        cfg.channel_order = vec![ch(3), ch(1), ch(4), ch(2)];
        let mut rig = Peak::new([0; 4]);
        initialize(&cfg, &mut rig).unwrap();
        assert_eq!(rig.moves, vec![(ch(3), 10)]);
    }

    #[test]
    fn startup_errors() {
        let mut rig = scripted(&[]);
        assert!(matches!(
            initialize(&ClimbConfig::fine(), &mut rig),
            Err(ControlError::Startup(_))
        ));
        let mut rig = scripted(&[f64::NAN]);
        assert!(matches!(
            initialize(&ClimbConfig::fine(), &mut rig),
            Err(ControlError::Startup(_))
        ));
        let mut cfg = ClimbConfig::fine();
        cfg.stage_schedule.clear();
        let mut rig = scripted(&[1.0]);
        assert!(matches!(
            initialize(&cfg, &mut rig),
            Err(ControlError::Config(_))
        ));
    }

    #[test]
    fn gain_keeps_direction() {
        let mut rig = scripted(&[5e-3, 6e-3]);
        let cfg = ClimbConfig::fine();
        let (mut st, _) = initialize(&cfg, &mut rig).unwrap();
        let rec = step(&mut st, &cfg, &mut rig).unwrap();
        assert_eq!(rec.event, ClimbEvent::Move);
        assert_eq!(st.p_old, 6e-3);
        assert_eq!(st.current_channel, ch(1));
        assert_eq!(rig.actuators[0].position(), 20);
        assert!(!st.move_done);
    }

    #[test]
    fn loss_after_gain_reverses_and_finishes() {
        let mut rig = scripted(&[5e-3, 6e-3, 5.9e-3]);
        let cfg = ClimbConfig::fine();
        let (mut st, _) = initialize(&cfg, &mut rig).unwrap();
        step(&mut st, &cfg, &mut rig).unwrap();
        let rec = step(&mut st, &cfg, &mut rig).unwrap();
        assert_eq!(rec.event, ClimbEvent::Reverse);
        assert_eq!(rec.channel, ch(1));
        assert_eq!(rec.position, 10);
        assert!(st.move_done);
        assert!(st.channel_done(ch(1)));
        assert_eq!(st.current_channel, ch(2));
        assert_eq!(st.adjustments, 3);
    }

    #[test]
    fn tie_counts_as_loss() {
        let mut rig = scripted(&[5e-3, 5e-3]);
        let cfg = ClimbConfig::fine();
        let (mut st, _) = initialize(&cfg, &mut rig).unwrap();
        let rec = step(&mut st, &cfg, &mut rig).unwrap();
        assert_eq!(rec.event, ClimbEvent::Reverse);
        assert_eq!(rig.actuators[0].position(), 0);
        // first probe failed, so the opposite side is probed next
        assert_eq!(st.direction, Direction::Reverse);
        assert!(!st.move_done);
    }

    #[test]
    fn stage_advance_loads_next_step() {
        let cfg = ClimbConfig::coarse();
        let mut rig = Peak::new([0; 4]);
        let (mut st, _) = initialize(&cfg, &mut rig).unwrap();
        let mut seen = vec![st.step_size];
        let mut cycles = vec![st.cycles];
        while st.terminated().is_none() {
            let r = step(&mut st, &cfg, &mut rig).unwrap();
            if r.event == ClimbEvent::StageAdvance {
                seen.push(st.step_size);
                cycles.push(st.cycles);
            }
        }
        assert_eq!(seen, vec![100, 50, 100, 50, 10]);
        assert_eq!(cycles, vec![0, 1, 2, 3, 4]);
        assert_eq!(st.terminated(), Some(Termination::NoFurtherGain));
    }

    #[test]
    fn advance_stage_directly() {
        let cfg = ClimbConfig::fine();
        let mut rig = Peak::new([0; 4]);
        let (mut st, _) = initialize(&cfg, &mut rig).unwrap();
        let mut sizes = vec![st.step_size];
        for k in 1..5 {
            st.done = [true; 4];
            advance_stage(&mut st, &cfg);
            assert_eq!(st.cycles, k);
            sizes.push(st.step_size);
        }
        assert_eq!(sizes, vec![10, 5, 10, 5, 1]);
        st.done = [true; 4];
        st.stage_gain = false;
        advance_stage(&mut st, &cfg);
        assert_eq!(st.phase, Phase::Finishing);
    }

    #[test]
    fn single_adjustment_budget() {
        let mut cfg = ClimbConfig::fine();
        cfg.max_adjustments = 1;
        let mut rig = Peak::new([30, 0, 0, 0]);
        let out = run(&cfg, &mut rig).unwrap();
        assert_eq!(rig.moves.len(), 1);
        assert_eq!(out.records.len(), 2);
        assert_eq!(out.records[1].event, ClimbEvent::Terminate);
        assert_eq!(out.state.terminated(), Some(Termination::AdjustmentLimit));
    }

    #[test]
    fn already_optimal_start_probes_both_ways() {
        let mut cfg = ClimbConfig::fine();
        cfg.stage_schedule = vec![1];
        let mut rig = Peak::new([0; 4]);
        let out = run(&cfg, &mut rig).unwrap();
        let expect: Vec<_> = ChannelId::ALL
            .iter()
            .flat_map(|&c| [(c, 1), (c, -1), (c, -1), (c, 1)])
            .collect();
        assert_eq!(rig.moves, expect);
        assert_eq!(rig.positions, [0; 4]);
        assert_eq!(out.state.terminated(), Some(Termination::NoFurtherGain));
    }

    #[test]
    fn climbs_to_separable_peak() {
        let target = [37, -52, 8, -3];
        let mut rig = Peak::new(target);
        let out = run(&ClimbConfig::fine(), &mut rig).unwrap();
        assert_eq!(rig.positions, target);
        assert_eq!(out.state.terminated(), Some(Termination::NoFurtherGain));
        let times: Vec<f64> = out.records.iter().map(|r| r.time).collect();
        assert!(times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn source_failure_keeps_partial_log() {
        let mut rig = scripted(&[1e-3, 2e-3, 3e-3]);
        let err = run(&ClimbConfig::fine(), &mut rig).unwrap_err();
        assert_eq!(err.records.len(), 3);
        assert!(matches!(err.source, ControlError::Source(_)));
    }

    #[test]
    fn stepping_after_termination_errors() {
        let mut cfg = ClimbConfig::fine();
        cfg.max_adjustments = 1;
        let mut rig = Peak::new([0; 4]);
        let (mut st, _) = initialize(&cfg, &mut rig).unwrap();
        step(&mut st, &cfg, &mut rig).unwrap();
        assert!(matches!(
            step(&mut st, &cfg, &mut rig),
            Err(ControlError::Terminated)
        ));
    }

    #[test]
    fn settle_reads_average() {
        let mut cfg = ClimbConfig::fine();
        cfg.settle_reads = 2;
        let mut rig = scripted(&[1.0, 3.0]);
        let (st, rec) = initialize(&cfg, &mut rig).unwrap();
        assert_eq!(st.p_old, 2.0);
        assert!((rec.time - 0.4).abs() < 1e-12);
    }

    fn sample_records() -> Vec<ClimbRecord> {
        vec![
            ClimbRecord {
                time: 0.2,
                channel: ch(1),
                position: 10,
                power: 1.2e-4,
                stage: 0,
                event: ClimbEvent::Move,
            },
            ClimbRecord {
                time: 0.4,
                channel: ch(1),
                position: 0,
                power: 1.0e-7,
                stage: 0,
                event: ClimbEvent::Reverse,
            },
            ClimbRecord {
                time: 0.6000000000000001,
                channel: ch(2),
                position: -5,
                power: 0.012_960_000_000_1,
                stage: 3,
                event: ClimbEvent::StageAdvance,
            },
        ]
    }

    #[test]
    fn log_header_only_when_empty() {
        let mut buf = Vec::new();
        let n = write_log(&[], &mut buf).unwrap();
        assert_eq!(buf, b"time_s,channel,position_steps,power_w,stage,event\n");
        assert_eq!(n, buf.len());
    }

    #[test]
    fn log_lines_and_round_trip() {
        let recs = sample_records();
        let mut buf = Vec::new();
        let n = write_log(&recs, &mut buf).unwrap();
        assert_eq!(n, buf.len());
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.contains("0.0000001"));
        for line in text.lines().skip(1) {
            let power = line.split(',').nth(3).unwrap();
            assert!(!power.contains('e'), "exponent in {power}");
        }
        assert_eq!(read_log(buf.as_slice()).unwrap(), recs);
    }

    #[test]
    fn log_write_failure_reports_progress() {
        struct Full(usize);
        impl Write for Full {
            fn write(&mut self, b: &[u8]) -> std::io::Result<usize> {
                if self.0 == 0 {
                    return Err(std::io::Error::other("disk full"));
                }
                let n = b.len().min(self.0);
                self.0 -= n;
                Ok(n)
            }
            fn flush(&mut self) -> std::io::Result<()> {
                Ok(())
            }
        }
        let err = write_log(&sample_records(), Full(10)).unwrap_err();
        assert!(matches!(
            err,
            LogError::Write {
                records_total: 3,
                ..
            }
        ));
    }

    #[test]
    fn malformed_logs_rejected() {
        assert!(read_log("a,b\n1,2\n".as_bytes()).is_err());
        let bad = "time_s,channel,position_steps,power_w,stage,event\n0.2,9,0,1,0,move\n";
        assert!(matches!(
            read_log(bad.as_bytes()),
            Err(LogError::Row { row: 1, .. })
        ));
        let bad = "time_s,channel,position_steps,power_w,stage,event\n0.2,1,0,1,0,jump\n";
        assert!(read_log(bad.as_bytes()).is_err());
    }

    /// Bench-like peak with a monotone output transform applied.
    struct Transformed<F: Fn(f64) -> f64> {
        inner: Peak,
        f: F,
    }

    impl<F: Fn(f64) -> f64> PowerSource for Transformed<F> {
        fn read_power(&mut self) -> Result<PowerSample, SourceError> {
            let s = self.inner.read_power()?;
            Ok(PowerSample {
                power: (self.f)(s.power),
                ..s
            })
        }
    }

    impl<F: Fn(f64) -> f64> Actuators for Transformed<F> {
        fn move_channel(&mut self, c: ChannelId, s: i32) -> Result<(), ActuatorError> {
            self.inner.move_channel(c, s)
        }
        fn position(&self, c: ChannelId) -> i64 {
            self.inner.position(c)
        }
        fn set_zero(&mut self, c: ChannelId) {
            self.inner.set_zero(c)
        }
    }

    proptest! {
        #[test]
        fn decisions_invariant_under_monotone_transform(
            target in proptest::array::uniform4(-80i64..80),
            scale in 0.1f64..1e3,
            offset in -5.0f64..5.0,
        ) {
            let cfg = ClimbConfig::fine();
            let mut plain = Peak::new(target);
            run(&cfg, &mut plain).unwrap();
            let mut t = Transformed { inner: Peak::new(target), f: |p: f64| scale * p.powf(3.0) + offset };
            run(&cfg, &mut t).unwrap();
            prop_assert_eq!(plain.moves, t.inner.moves);
        }

        #[test]
        fn noiseless_runs_are_monotone_between_reversals(target in proptest::array::uniform4(-80i64..80)) {
            let mut rig = Peak::new(target);
            let out = run(&ClimbConfig::fine(), &mut rig).unwrap();
            for w in out.records.windows(2) {
                if w[0].event == ClimbEvent::Move && w[1].event == ClimbEvent::Move && w[0].channel == w[1].channel {
                    prop_assert!(w[1].power >= w[0].power);
                }
            }
            prop_assert_eq!(rig.positions, target);
        }

        #[test]
        fn run_halts_within_budget(budget in 1u32..60, target in proptest::array::uniform4(-200i64..200)) {
            let mut cfg = ClimbConfig::coarse();
            cfg.max_adjustments = budget;
            let mut rig = Peak::new(target);
            let out = run(&cfg, &mut rig).unwrap();
            prop_assert!(out.state.adjustments <= budget);
            prop_assert_eq!(rig.moves.len() as u32, out.state.adjustments);
            prop_assert!(out.state.terminated().is_some());
        }
    }
}
