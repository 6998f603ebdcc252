//! Post-run analytics: efficiency curves, threshold crossing, stable-phase
//! jitter, decay-law fitting and angle recovery from measured efficiency.

use std::io::Write;

use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::controller::ClimbRecord;
use crate::optics::{CouplingModel, OpticsError};

/// Consecutive samples that must stay above a threshold to count as reached.
pub const SUSTAIN_SAMPLES: usize = 3;
pub const MIN_STABLE_WINDOW: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("trace times must be strictly increasing (sample {0})")]
    NonMonotonicTime(usize),
    #[error("laser power must be > 0, got {0}")]
    LaserPower(f64),
    #[error("threshold {0} must lie in (0, 1)")]
    Threshold(f64),
    #[error("stable window has {found} samples; at least {needed} are required")]
    WindowTooShort { found: usize, needed: usize },
    #[error("fit needs at least 5 points, got {0}")]
    TooFewPoints(usize),
    #[error("fit point {0} has a non-positive or non-finite efficiency")]
    BadEfficiency(usize),
    #[error("all fit points share the same angle; the decay law is not constrained")]
    DegenerateAngles,
    #[error(transparent)]
    Optics(#[from] OpticsError),
}

/// Power samples from one run plus the normalisation needed to turn them
/// into coupling efficiency.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    samples: Vec<(f64, f64)>,
    laser_power: f64,
    base_efficiency: f64,
}

impl RunTrace {
    pub fn new(
        samples: Vec<(f64, f64)>,
        laser_power: f64,
        base_efficiency: f64,
    ) -> Result<Self, AnalysisError> {
        if !(laser_power.is_finite() && laser_power > 0.0) {
            return Err(AnalysisError::LaserPower(laser_power));
        }
        if let Some(i) = samples.windows(2).position(|w| !(w[1].0 > w[0].0)) {
            return Err(AnalysisError::NonMonotonicTime(i + 1));
        }
        Ok(Self {
            samples,
            laser_power,
            base_efficiency,
        })
    }

    pub fn from_records(
        records: &[ClimbRecord],
        laser_power: f64,
        base_efficiency: f64,
    ) -> Result<Self, AnalysisError> {
        Self::new(
            records.iter().map(|r| (r.time, r.power)).collect(),
            laser_power,
            base_efficiency,
        )
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn laser_power(&self) -> f64 {
        self.laser_power
    }

    pub fn base_efficiency(&self) -> f64 {
        self.base_efficiency
    }

    /// Same trace restricted to its first `n` samples.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            samples: self.samples[..n.min(self.samples.len())].to_vec(),
            ..self.clone()
        }
    }
}

pub fn efficiency_trace(trace: &RunTrace) -> Vec<(f64, f64)> {
    trace
        .samples
        .iter()
        .map(|&(t, p)| (t, p / trace.laser_power))
        .collect()
}

/// Time of the first sample that starts a run of [`SUSTAIN_SAMPLES`]
/// consecutive samples at or above `threshold` efficiency.
pub fn time_to_threshold(trace: &RunTrace, threshold: f64) -> Result<Option<f64>, AnalysisError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(AnalysisError::Threshold(threshold));
    }
    let eff = efficiency_trace(trace);
    let mut run = 0;
    for (i, &(_, e)) in eff.iter().enumerate() {
        if e >= threshold {
            run += 1;
            if run == SUSTAIN_SAMPLES {
                return Ok(Some(eff[i + 1 - SUSTAIN_SAMPLES].0));
            }
        } else {
            run = 0;
        }
    }
    Ok(None)
}

/// Population mean and standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct JitterStats {
    /// Step size of the run the window came from, when known.
    pub step_size: Option<u32>,
    pub mean_power: f64,
    pub sd_power: f64,
    pub relative_sd: f64,
    /// Samples more than 3 sd below the window mean.
    pub overshoot_count: usize,
}

impl JitterStats {
    pub fn with_step_size(mut self, step: u32) -> Self {
        self.step_size = Some(step);
        self
    }

    pub fn of_powers(powers: &[f64]) -> Result<Self, AnalysisError> {
        if powers.len() < MIN_STABLE_WINDOW {
            return Err(AnalysisError::WindowTooShort {
                found: powers.len(),
                needed: MIN_STABLE_WINDOW,
            });
        }
        let (mean, sd) = mean_sd(powers);
        let overshoot_count = powers.iter().filter(|&&p| p < mean - 3.0 * sd).count();
        Ok(Self {
            step_size: None,
            mean_power: mean,
            sd_power: sd,
            relative_sd: if mean > 0.0 { sd / mean } else { f64::INFINITY },
            overshoot_count,
        })
    }
}

/// Jitter statistics over every sample at or after `window_start` seconds.
pub fn stable_phase_stats(
    trace: &RunTrace,
    window_start: f64,
) -> Result<JitterStats, AnalysisError> {
    let powers: Vec<f64> = trace
        .samples
        .iter()
        .filter(|(t, _)| *t >= window_start)
        .map(|&(_, p)| p)
        .collect();
    JitterStats::of_powers(&powers)
}

/// Relative sd and mean efficiency of the `window` samples ending at
/// `end` (exclusive sample index), or `None` if the trace is too short.
pub fn trailing_window(trace: &RunTrace, end: usize, window: usize) -> Option<(f64, f64)> {
    if window == 0 || end > trace.len() || end < window {
        return None;
    }
    let powers: Vec<f64> = trace.samples[end - window..end]
        .iter()
        .map(|s| s.1)
        .collect();
    let (mean, sd) = mean_sd(&powers);
    Some((sd / mean, mean / trace.laser_power))
}

/// First time at which the trailing `window` samples have relative sd below
/// `rel_sd` and mean efficiency at least `min_efficiency`.
pub fn time_to_stable(
    trace: &RunTrace,
    window: usize,
    rel_sd: f64,
    min_efficiency: f64,
) -> Option<f64> {
    (window..=trace.len()).find_map(|end| {
        let (r, e) = trailing_window(trace, end, window)?;
        (r < rel_sd && e >= min_efficiency).then(|| trace.samples[end - 1].0)
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DecayFit {
    pub base_efficiency: f64,
    /// Euclidean norm of the efficiency residuals.
    pub residual_norm: f64,
}

/// Least-squares `T_B` for `η = T_B · exp(-(π ω θ / λ)²)` with `ω` and `λ`
/// held fixed. The model is linear in `T_B`, so the solution is closed form.
pub fn fit_decay_model(
    points: &[(f64, f64)],
    wavelength: f64,
    waist: f64,
) -> Result<DecayFit, AnalysisError> {
    if points.len() < 5 {
        return Err(AnalysisError::TooFewPoints(points.len()));
    }
    if let Some(i) = points
        .iter()
        .position(|&(th, e)| !(e > 0.0 && e.is_finite() && th.is_finite()))
    {
        return Err(AnalysisError::BadEfficiency(i));
    }
    let first = points[0].0;
    if points.iter().all(|&(th, _)| th == first) {
        return Err(AnalysisError::DegenerateAngles);
    }
    // T_B is only used as a scale here; 1.0 keeps the shape factor bare.
    let shape = CouplingModel::new(1.0, waist, wavelength)?;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(th, e) in points {
        let g = shape.angular_efficiency(th);
        sxy += e * g;
        sxx += g * g;
    }
    let base_efficiency = sxy / sxx;
    let residual_norm = points
        .iter()
        .map(|&(th, e)| (e - base_efficiency * shape.angular_efficiency(th)).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(DecayFit {
        base_efficiency,
        residual_norm,
    })
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AngleTrajectory {
    pub points: Vec<(f64, f64)>,
    /// Times of samples with zero or negative efficiency, which have no
    /// angle and were left out.
    pub skipped: Vec<f64>,
}

/// Inverts each efficiency sample to an angle magnitude. Readings above the
/// base efficiency are clamped to it (angle 0).
pub fn angle_trajectory(trace: &RunTrace, model: &CouplingModel) -> AngleTrajectory {
    let mut out = AngleTrajectory::default();
    for (t, e) in efficiency_trace(trace) {
        if !(e > 0.0) {
            out.skipped.push(t);
            continue;
        }
        let e = e.min(model.base_efficiency());
        match model.invert_angle(e) {
            Ok(theta) => out.points.push((t, theta)),
            Err(_) => out.skipped.push(t),
        }
    }
    out
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

/// The standard metric set for one run, one JSON object per metric.
pub fn summarize(
    trace: &RunTrace,
    model: &CouplingModel,
    stability_window: usize,
    stability_rel_sd: f64,
) -> Vec<Value> {
    let mut out = Vec::new();
    for th in [0.70, 0.80, 0.90] {
        let t = time_to_threshold(trace, th).expect("thresholds are in range");
        out.push(json!({"metric": "time_to_threshold", "threshold": th, "value": t}));
    }
    let stable = time_to_stable(trace, stability_window, stability_rel_sd, 0.0);
    out.push(json!({
        "metric": "time_to_stable",
        "window": stability_window,
        "rel_sd": stability_rel_sd,
        "value": stable,
    }));
    if let Some((rel, eff)) = trailing_window(trace, trace.len(), stability_window) {
        out.push(json!({"metric": "tail_relative_sd", "window": stability_window, "value": rel}));
        out.push(
            json!({"metric": "tail_mean_efficiency", "window": stability_window, "value": eff}),
        );
    }
    let angles = angle_trajectory(trace, model);
    let tail: Vec<f64> = angles
        .points
        .iter()
        .rev()
        .take(stability_window)
        .map(|p| p.1)
        .collect();
    out.push(json!({"metric": "tail_median_angle_rad", "window": stability_window, "value": median(&tail)}));
    out.push(
        json!({"metric": "tail_max_angle_rad", "window": stability_window,
        "value": tail.iter().copied().reduce(f64::max)}),
    );
    out.push(json!({"metric": "samples", "value": trace.len()}));
    out
}

pub fn write_jsonl<W: Write>(lines: &[Value], mut out: W) -> std::io::Result<()> {
    for l in lines {
        serde_json::to_writer(&mut out, l)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Plot-ready two-column CSV.
pub fn write_xy_csv<W: Write>(
    header: (&str, &str),
    points: &[(f64, f64)],
    out: W,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([header.0, header.1])?;
    for (x, y) in points {
        w.write_record([x.to_string(), y.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use std::f64::consts::{E, PI};

    const W: f64 = 1.625e-3;
    const L: f64 = 780e-9;

    fn model() -> CouplingModel {
        CouplingModel::new(0.8, W, L).unwrap()
    }

    fn trace(powers: &[f64], laser: f64) -> RunTrace {
        let s = powers
            .iter()
            .enumerate()
            .map(|(i, &p)| ((i + 1) as f64 * 0.2, p))
            .collect();
        RunTrace::new(s, laser, 0.8).unwrap()
    }

    #[test]
    fn flat_efficiency() {
        let t = trace(&[0.8 * 16.2e-3; 10], 16.2e-3);
        assert!(efficiency_trace(&t)
            .iter()
            .all(|&(_, e)| (e - 0.8).abs() < 1e-15));
        assert!(efficiency_trace(&trace(&[], 1.0)).is_empty());
    }

    #[test]
    fn bench_operating_point_efficiency() {
        let t = trace(&[11.46e-3], 16.2e-3);
        assert!((efficiency_trace(&t)[0].1 - 0.7074).abs() < 1e-4);
    }

    #[test]
    fn trace_validation() {
        assert!(RunTrace::new(vec![(0.2, 1.0), (0.2, 1.0)], 1.0, 0.8).is_err());
        assert!(RunTrace::new(vec![], 0.0, 0.8).is_err());
    }

    #[test]
    fn threshold_crossing() {
        // steps to 0.75 efficiency at t = 18 s
        let s: Vec<(f64, f64)> = (1..=150)
            .map(|i| {
                let t = i as f64 * 0.2;
                (t, if t >= 18.0 - 1e-9 { 0.75 } else { 0.1 })
            })
            .collect();
        let tr = RunTrace::new(s, 1.0, 0.8).unwrap();
        let t = time_to_threshold(&tr, 0.70).unwrap().unwrap();
        assert!((t - 18.0).abs() < 1e-9);
        assert_eq!(time_to_threshold(&tr, 0.76).unwrap(), None);
        assert!(time_to_threshold(&tr, 1.0).is_err());
        assert!(time_to_threshold(&tr, 0.0).is_err());
    }

    #[test]
    fn single_spike_is_not_a_crossing() {
        let tr = trace(&[0.1, 0.9, 0.1, 0.9, 0.9, 0.1, 0.9, 0.9, 0.9], 1.0);
        assert!((time_to_threshold(&tr, 0.7).unwrap().unwrap() - 1.4).abs() < 1e-12);
    }

    #[test]
    fn constant_power_has_zero_jitter() {
        let st = stable_phase_stats(&trace(&[3e-3; 40], 16.2e-3), 0.0).unwrap();
        assert!(st.relative_sd < 1e-12);
        assert_eq!(st.overshoot_count, 0);
    }

    #[test]
    fn sinusoid_sd() {
        let amp = 1e-3;
        let p: Vec<f64> = (0..400)
            .map(|i| 1e-2 + amp * (2.0 * PI * i as f64 / 37.0).sin())
            .collect();
        let st = stable_phase_stats(&trace(&p, 16.2e-3), 0.0).unwrap();
        assert!((st.sd_power / (amp / 2f64.sqrt()) - 1.0).abs() < 0.02);
    }

    #[test]
    fn short_window_rejected() {
        let tr = trace(&[1.0; 30], 16.2e-3);
        assert!(matches!(
            stable_phase_stats(&tr, 3.0),
            Err(AnalysisError::WindowTooShort { found: 16, .. })
        ));
    }

    #[test]
    fn overshoots_counted() {
        let mut p = vec![1.0; 99];
        p.push(0.0);
        let st = stable_phase_stats(&trace(&p, 2.0), 0.0).unwrap();
        assert_eq!(st.overshoot_count, 1);
    }

    #[test]
    fn noiseless_fit_is_exact() {
        let m = model();
        let pts: Vec<(f64, f64)> = (0..30)
            .map(|i| {
                let th = i as f64 * 1e-5;
                (th, m.angular_efficiency(th))
            })
            .collect();
        let fit = fit_decay_model(&pts, L, W).unwrap();
        assert!((fit.base_efficiency - 0.8).abs() < 1e-10);
        assert!(fit.residual_norm < 1e-10);
    }

    #[test]
    fn fitted_curve_passes_through_anchor_points() {
        let m = model();
        let pts: Vec<(f64, f64)> = (0..12)
            .map(|i| {
                let th = i as f64 * 3e-5;
                (th, m.angular_efficiency(th))
            })
            .collect();
        let fit = fit_decay_model(&pts, L, W).unwrap();
        let fitted = CouplingModel::new(fit.base_efficiency, W, L).unwrap();
        assert!((fitted.angular_efficiency(0.0) - 0.8).abs() < 1e-10);
        assert!((fitted.angular_efficiency(1.5277e-4) - 0.8 / E).abs() < 1e-4);
        assert_relative_eq!(
            fitted.angular_efficiency(L / (PI * W)),
            0.8 / E,
            max_relative = 1e-10
        );
    }

    #[test]
    fn noisy_fit_within_two_percent() {
        let m = model();
        let noise = Normal::new(0.0, 0.01).unwrap();
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<(f64, f64)> = (0..40)
                .map(|i| {
                    let th = i as f64 * 1e-5;
                    (
                        th,
                        m.angular_efficiency(th) * (1.0 + noise.sample(&mut rng)),
                    )
                })
                .collect();
            let fit = fit_decay_model(&pts, L, W).unwrap();
            assert!(
                (fit.base_efficiency - 0.8).abs() < 0.016,
                "seed {seed}: {fit:?}"
            );
        }
    }

    #[test]
    fn fit_preconditions() {
        let pts = [(1e-5, 0.7); 6];
        assert_eq!(
            fit_decay_model(&pts, L, W),
            Err(AnalysisError::DegenerateAngles)
        );
        assert!(matches!(
            fit_decay_model(&pts[..4], L, W),
            Err(AnalysisError::TooFewPoints(4))
        ));
        let mut bad = vec![
            (0.0, 0.8),
            (1e-5, 0.79),
            (2e-5, 0.0),
            (3e-5, 0.7),
            (4e-5, 0.6),
        ];
        assert_eq!(
            fit_decay_model(&bad, L, W),
            Err(AnalysisError::BadEfficiency(2))
        );
        bad[2].1 = -0.1;
        assert!(fit_decay_model(&bad, L, W).is_err());
    }

    #[test]
    fn flat_at_base_gives_zero_angle() {
        let tr =
            RunTrace::new((1..=20).map(|i| (i as f64, 0.8 * 2.0)).collect(), 2.0, 0.8).unwrap();
        let a = angle_trajectory(&tr, &model());
        assert_eq!(a.points.len(), 20);
        assert!(a.points.iter().all(|p| p.1 == 0.0));
    }

    #[test]
    fn angle_trajectory_clamps_and_skips() {
        let tr = trace(&[0.9, 0.0, 0.4, -1e-9], 1.0);
        let a = angle_trajectory(&tr, &model());
        assert_eq!(a.points.len(), 2);
        assert_eq!(a.points[0].1, 0.0);
        assert_eq!(a.skipped.len(), 2);
    }

    #[test]
    fn trailing_and_stable() {
        let mut p = vec![0.1; 30];
        p.extend(std::iter::repeat_n(0.75, 60));
        let tr = trace(&p, 1.0);
        let (rel, eff) = trailing_window(&tr, 90, 50).unwrap();
        assert_eq!(rel, 0.0);
        assert!((eff - 0.75).abs() < 1e-15);
        let t = time_to_stable(&tr, 50, 0.02, 0.7).unwrap();
        assert!((t - 80.0 * 0.2).abs() < 1e-9);
        assert!(trailing_window(&tr, 91, 50).is_none());
    }

    #[test]
    fn median_values() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }

    #[test]
    fn summary_has_standard_metrics() {
        let tr = trace(&[0.5; 60], 1.0);
        let lines = summarize(&tr, &model(), 50, 0.02);
        let names: Vec<&str> = lines
            .iter()
            .map(|l| l["metric"].as_str().unwrap())
            .collect();
        assert!(names.contains(&"time_to_threshold"));
        assert!(names.contains(&"tail_relative_sd"));
        let mut buf = Vec::new();
        write_jsonl(&lines, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), lines.len());
    }

    #[test]
    fn xy_csv() {
        let mut buf = Vec::new();
        write_xy_csv(
            ("time_s", "efficiency"),
            &[(0.2, 0.5), (0.4, 0.75)],
            &mut buf,
        )
        .unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "time_s,efficiency\n0.2,0.5\n0.4,0.75\n"
        );
    }

    proptest! {
        #[test]
        fn angle_inversion_recovers_synthetic_angles(thetas in proptest::collection::vec(2e-5f64..7e-4, 1..50)) {
            let m = model();
            let laser = 16.2e-3;
            let s: Vec<(f64, f64)> = thetas.iter().enumerate()
                .map(|(i, &th)| ((i + 1) as f64 * 0.2, laser * m.angular_efficiency(th)))
                .collect();
            let tr = RunTrace::new(s, laser, 0.8).unwrap();
            let a = angle_trajectory(&tr, &m);
            for (p, th) in a.points.iter().zip(&thetas) {
                prop_assert!(((p.1 - th) / th).abs() < 1e-12);
            }
        }

        #[test]
        fn jitter_stats_ignore_time_offset(shift in -100.0f64..100.0, seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = Normal::new(1e-2, 1e-4).unwrap();
            let base: Vec<(f64, f64)> = (1..=60).map(|i| (i as f64 * 0.2, n.sample(&mut rng))).collect();
            let shifted: Vec<(f64, f64)> = base.iter().map(|&(t, p)| (t + shift, p)).collect();
            let a = stable_phase_stats(&RunTrace::new(base, 1.0, 0.8).unwrap(), 2.0).unwrap();
            let b = stable_phase_stats(&RunTrace::new(shifted, 1.0, 0.8).unwrap(), 2.0 + shift).unwrap();
            prop_assert_eq!(a.relative_sd, b.relative_sd);
            prop_assert_eq!(a.overshoot_count, b.overshoot_count);
        }
    }
}
