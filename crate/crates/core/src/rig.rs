//! The two interfaces the aligner sees: a power reading and a set of
//! stepping actuators. Nothing else about the bench is visible to it.

use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::actuator::{ActuatorError, ChannelId, PiezoChannel};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerSample {
    /// Seconds since the source was started.
    pub time: f64,
    /// Watts.
    pub power: f64,
}

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("cannot read power file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("power file {0} has no readings")]
    Empty(PathBuf),
    #[error("cannot parse power reading {text:?}")]
    Parse { text: String },
    #[error("power reading {0} is not a finite number")]
    NonFinite(f64),
}

pub trait PowerSource {
    fn read_power(&mut self) -> Result<PowerSample, SourceError>;
}

pub trait Actuators {
    fn move_channel(&mut self, channel: ChannelId, steps: i32) -> Result<(), ActuatorError>;
    /// Position relative to the channel's zero reference.
    fn position(&self, channel: ChannelId) -> i64;
    fn set_zero(&mut self, channel: ChannelId);
}

impl<T: PowerSource + ?Sized> PowerSource for &mut T {
    fn read_power(&mut self) -> Result<PowerSample, SourceError> {
        (**self).read_power()
    }
}

impl<T: Actuators + ?Sized> Actuators for &mut T {
    fn move_channel(&mut self, channel: ChannelId, steps: i32) -> Result<(), ActuatorError> {
        (**self).move_channel(channel, steps)
    }
    fn position(&self, channel: ChannelId) -> i64 {
        (**self).position(channel)
    }
    fn set_zero(&mut self, channel: ChannelId) {
        (**self).set_zero(channel)
    }
}

/// A bare bank of four channels, indexed by channel id.
impl Actuators for [PiezoChannel; 4] {
    fn move_channel(&mut self, channel: ChannelId, steps: i32) -> Result<(), ActuatorError> {
        self[channel.index()].move_by(steps).map(|_| ())
    }
    fn position(&self, channel: ChannelId) -> i64 {
        self[channel.index()].position()
    }
    fn set_zero(&mut self, channel: ChannelId) {
        self[channel.index()].set_zero()
    }
}

/// Pairs an independent power source with an independent actuator bank.
#[derive(Debug)]
pub struct SplitRig<S, A> {
    pub source: S,
    pub actuators: A,
}

impl<S: PowerSource, A> PowerSource for SplitRig<S, A> {
    fn read_power(&mut self) -> Result<PowerSample, SourceError> {
        self.source.read_power()
    }
}

impl<S, A: Actuators> Actuators for SplitRig<S, A> {
    fn move_channel(&mut self, channel: ChannelId, steps: i32) -> Result<(), ActuatorError> {
        self.actuators.move_channel(channel, steps)
    }
    fn position(&self, channel: ChannelId) -> i64 {
        self.actuators.position(channel)
    }
    fn set_zero(&mut self, channel: ChannelId) {
        self.actuators.set_zero(channel)
    }
}
