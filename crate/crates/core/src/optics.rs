//! Gaussian mode-field coupling.
//!
//! Fields are evaluated at the beam waist, where both the emitted and the
//! received fundamental modes are real, so the overlap integral reduces to a
//! real-valued quadrature. Angular misalignment is handled by the closed-form
//! decay law `η(θ) = T_base · exp(-(π ω θ / λ)²)`.

use std::f64::consts::PI;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpticsError {
    #[error("invalid {name}: {value} ({reason})")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },
    #[error("overlap integral is not finite or has a zero normalisation")]
    DegenerateIntegral,
    #[error("efficiency {efficiency} is above the base efficiency {base}")]
    AboveCeiling { efficiency: f64, base: f64 },
    #[error("efficiency {0} is not positive; no angle can produce it")]
    DeadSignal(f64),
}

fn require_positive(name: &'static str, value: f64) -> Result<f64, OpticsError> {
    if value.is_finite() && value > 0.0 {
        Ok(value)
    } else {
        Err(OpticsError::InvalidParameter {
            name,
            value,
            reason: "must be finite and > 0",
        })
    }
}

/// Fundamental Gaussian mode at its waist: `E(r) = A · exp(-r² / ω²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianBeam {
    amplitude: f64,
    waist_radius: f64,
    wavelength: f64,
}

impl GaussianBeam {
    pub fn new(amplitude: f64, waist_radius: f64, wavelength: f64) -> Result<Self, OpticsError> {
        Ok(Self {
            amplitude: require_positive("amplitude", amplitude)?,
            waist_radius: require_positive("waist_radius", waist_radius)?,
            wavelength: require_positive("wavelength", wavelength)?,
        })
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn waist_radius(&self) -> f64 {
        self.waist_radius
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    pub fn with_amplitude(self, amplitude: f64) -> Result<Self, OpticsError> {
        Self::new(amplitude, self.waist_radius, self.wavelength)
    }

    /// Field value at transverse position `(x, y)` in the waist plane.
    pub fn field(&self, x: f64, y: f64) -> f64 {
        self.field_at_radius_sq(x * x + y * y)
    }

    #[inline]
    fn field_at_radius_sq(&self, r2: f64) -> f64 {
        self.amplitude * (-r2 / (self.waist_radius * self.waist_radius)).exp()
    }
}

/// Coupling of a collimated beam into a fiber under pure angular offset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingModel {
    base_efficiency: f64,
    waist_radius: f64,
    wavelength: f64,
}

impl CouplingModel {
    pub fn new(
        base_efficiency: f64,
        waist_radius: f64,
        wavelength: f64,
    ) -> Result<Self, OpticsError> {
        if !(base_efficiency.is_finite() && base_efficiency > 0.0 && base_efficiency <= 1.0) {
            return Err(OpticsError::InvalidParameter {
                name: "base_efficiency",
                value: base_efficiency,
                reason: "must lie in (0, 1]",
            });
        }
        Ok(Self {
            base_efficiency,
            waist_radius: require_positive("waist_radius", waist_radius)?,
            wavelength: require_positive("wavelength", wavelength)?,
        })
    }

    pub fn base_efficiency(&self) -> f64 {
        self.base_efficiency
    }

    pub fn waist_radius(&self) -> f64 {
        self.waist_radius
    }

    pub fn wavelength(&self) -> f64 {
        self.wavelength
    }

    /// The e-folding angle `λ / (π ω)` of the decay law.
    pub fn rayleigh_angle(&self) -> f64 {
        self.wavelength / (PI * self.waist_radius)
    }

    pub fn angular_efficiency(&self, theta: f64) -> f64 {
        angular_efficiency(self, theta)
    }

    pub fn invert_angle(&self, efficiency: f64) -> Result<f64, OpticsError> {
        invert_angle(self, efficiency)
    }
}

/// Normalised overlap `|∬E₁E₂ dx dy|² / (∬E₁² · ∬E₂²)` by midpoint quadrature
/// on a `grid_points × grid_points` square of half-width `grid_half_width`.
pub fn mode_overlap_numeric(
    beam_a: &GaussianBeam,
    beam_b: &GaussianBeam,
    grid_half_width: f64,
    grid_points: usize,
) -> Result<f64, OpticsError> {
    let widest = beam_a.waist_radius.max(beam_b.waist_radius);
    if !(grid_half_width.is_finite() && grid_half_width >= 4.0 * widest) {
        return Err(OpticsError::InvalidParameter {
            name: "grid_half_width",
            value: grid_half_width,
            reason: "must be at least 4x the larger waist",
        });
    }
    if grid_points < 128 {
        return Err(OpticsError::InvalidParameter {
            name: "grid_points",
            value: grid_points as f64,
            reason: "need at least 128 points per axis",
        });
    }

    let h = 2.0 * grid_half_width / grid_points as f64;
    let nodes: Vec<f64> = (0..grid_points)
        .map(|i| -grid_half_width + (i as f64 + 0.5) * h)
        .collect();

    let (mut cross, mut norm_a, mut norm_b) = (0.0_f64, 0.0_f64, 0.0_f64);
    for &x in &nodes {
        for &y in &nodes {
            let r2 = x * x + y * y;
            let ea = beam_a.field_at_radius_sq(r2);
            let eb = beam_b.field_at_radius_sq(r2);
            cross += ea * eb;
            norm_a += ea * ea;
            norm_b += eb * eb;
        }
    }
    let area = h * h;
    let (cross, norm_a, norm_b) = (cross * area, norm_a * area, norm_b * area);

    let denom = norm_a * norm_b;
    let t = cross * cross / denom;
    if !t.is_finite() || denom == 0.0 {
        return Err(OpticsError::DegenerateIntegral);
    }
    Ok(t.clamp(0.0, 1.0))
}

/// Closed-form overlap of two coaxial waists: `(2 ω_a ω_b / (ω_a² + ω_b²))²`.
pub fn waist_mismatch_efficiency(waist_a: f64, waist_b: f64) -> Result<f64, OpticsError> {
    let a = require_positive("waist_a", waist_a)?;
    let b = require_positive("waist_b", waist_b)?;
    let ratio = 2.0 * a * b / (a * a + b * b);
    Ok(ratio * ratio)
}

pub fn angular_efficiency(model: &CouplingModel, theta: f64) -> f64 {
    let x = theta / model.rayleigh_angle();
    model.base_efficiency * (-(x * x)).exp()
}

/// Angle magnitude that yields `efficiency` under `model`.
pub fn invert_angle(model: &CouplingModel, efficiency: f64) -> Result<f64, OpticsError> {
    if !(efficiency > 0.0) {
        return Err(OpticsError::DeadSignal(efficiency));
    }
    if efficiency > model.base_efficiency {
        return Err(OpticsError::AboveCeiling {
            efficiency,
            base: model.base_efficiency,
        });
    }
    Ok(model.rayleigh_angle() * (model.base_efficiency / efficiency).ln().sqrt())
}
