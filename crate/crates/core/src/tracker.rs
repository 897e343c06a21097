//! Online identification of the attainable rotor-speed ceiling.
//!
//! Rotors follow their commands through a first-order lag, so as long as a
//! command is attainable the observed speed matches the lag model's
//! prediction. When the command exceeds what the actuator can actually
//! deliver, the observation falls behind the prediction. The tracker
//! integrates that deficit over a short trailing window per rotor and, once
//! the integral exceeds a threshold, lowers the believed ceiling to the
//! highest speed the deficient rotor actually reached inside the window. A
//! correction therefore always happens shortly *after* the ceiling has been
//! overshot, never preemptively.
//!
//! The window is time based, so the tracker works at any sample rate, and
//! every buffer is a ring with amortized O(1) cost per update regardless of
//! run length.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Invalid tracker tuning.
#[derive(Debug, Error)]
pub enum TrackerError {
    /// A configuration value is out of its admissible range.
    #[error("invalid tracker config: {reason}")]
    InvalidConfig {
        /// Human-readable description of the offending field.
        reason: String,
    },
}

/// Tuning parameters for [`PeakTracker`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    /// Trailing window length, s.
    pub window: f64,
    /// Trigger threshold on the windowed deficit integral, RPM*s.
    pub threshold: f64,
    /// Rotor first-order lag time constant, s; matches the vehicle model.
    pub tau: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { window: 0.13, threshold: 30.0, tau: 0.03 }
    }
}

impl TrackerConfig {
    /// Checks every field is finite and positive.
    pub fn validate(&self) -> Result<(), TrackerError> {
        for (name, value) in
            [("window", self.window), ("threshold", self.threshold), ("tau", self.tau)]
        {
            if !value.is_finite() || value <= 0.0 {
                return Err(TrackerError::InvalidConfig {
                    reason: format!("{name} must be finite and positive, got {value}"),
                });
            }
        }
        Ok(())
    }
}

/// Trailing-window state of one rotor: deficit integral plus observed peak.
#[derive(Debug, Clone, Default)]
struct RotorWindow {
    /// `(sample time, deficit area RPM*s)` in arrival order.
    samples: VecDeque<(f64, f64)>,
    /// Running sum of the buffered areas.
    integral: f64,
    /// `(sample time, observed RPM)` with decreasing speeds; front is the max.
    peaks: VecDeque<(f64, f64)>,
}

impl RotorWindow {
    fn push(&mut self, t: f64, area: f64, observed: f64) {
        self.samples.push_back((t, area));
        self.integral += area;
        while self.peaks.back().is_some_and(|&(_, v)| v <= observed) {
            self.peaks.pop_back();
        }
        self.peaks.push_back((t, observed));
    }

    fn evict(&mut self, cutoff: f64) {
        while self.samples.front().is_some_and(|&(t, _)| t <= cutoff) {
            let (_, area) = self.samples.pop_front().expect("front just checked");
            self.integral -= area;
        }
        while self.peaks.front().is_some_and(|&(t, _)| t <= cutoff) {
            self.peaks.pop_front();
        }
    }

    fn peak(&self) -> Option<f64> {
        self.peaks.front().map(|&(_, v)| v)
    }

    fn clear(&mut self) {
        self.samples.clear();
        self.integral = 0.0;
        self.peaks.clear();
    }
}

/// Sliding-window estimator of the rotor-speed ceiling.
///
/// The estimate is piecewise constant: it changes only at trigger events,
/// where it is set to the highest observed speed in the triggering rotor's
/// window (the lowest such peak when several rotors trigger at once). All
/// windows are cleared after a trigger so one saturation event produces one
/// correction.
#[derive(Debug, Clone)]
pub struct PeakTracker {
    config: TrackerConfig,
    /// Tracker clock, s; advances with every update.
    time: f64,
    /// Believed ceiling, RPM.
    estimate: f64,
    /// Expected rotor speeds under the lag model, RPM.
    omega_exp: [f64; 4],
    windows: [RotorWindow; 4],
}

impl PeakTracker {
    /// Starts a tracker believing `initial_estimate`, with the lag model
    /// seeded at the rotors' current speeds.
    pub fn new(
        config: TrackerConfig,
        initial_estimate: f64,
        omega0: [f64; 4],
    ) -> Result<Self, TrackerError> {
        config.validate()?;
        if !initial_estimate.is_finite() || initial_estimate <= 0.0 {
            return Err(TrackerError::InvalidConfig {
                reason: format!("initial estimate must be positive, got {initial_estimate}"),
            });
        }
        if omega0.iter().any(|w| !w.is_finite()) {
            return Err(TrackerError::InvalidConfig {
                reason: "initial rotor speeds must be finite".to_string(),
            });
        }
        Ok(Self {
            config,
            time: 0.0,
            estimate: initial_estimate,
            omega_exp: omega0,
            windows: Default::default(),
        })
    }

    /// Current ceiling estimate, RPM.
    pub fn estimate(&self) -> f64 {
        self.estimate
    }

    /// Tracker clock, s.
    pub fn time(&self) -> f64 {
        self.time
    }

    /// Expected rotor speeds under the lag model, RPM.
    pub fn omega_exp(&self) -> [f64; 4] {
        self.omega_exp
    }

    /// Advances the expected speeds by one exact first-order lag step toward
    /// the commanded speeds and returns them.
    pub fn expected_omega(&mut self, omega_cmd: &[f64; 4], dt: f64) -> [f64; 4] {
        debug_assert!(dt > 0.0, "time step must be positive");
        let decay = (-dt / self.config.tau).exp();
        for (exp, cmd) in self.omega_exp.iter_mut().zip(omega_cmd) {
            *exp = cmd + (*exp - cmd) * decay;
        }
        self.omega_exp
    }

    /// Feeds one commanded/observed sample pair and returns the (possibly
    /// corrected) ceiling estimate.
    pub fn update(&mut self, omega_cmd: &[f64; 4], omega_obs: &[f64; 4], dt: f64) -> f64 {
        let expected = self.expected_omega(omega_cmd, dt);
        self.time += dt;
        let cutoff = self.time - self.config.window;
        let mut correction: Option<f64> = None;
        for (window, (exp, obs)) in
            self.windows.iter_mut().zip(expected.iter().zip(omega_obs))
        {
            window.push(self.time, (exp - obs) * dt, *obs);
            window.evict(cutoff);
            if window.integral > self.config.threshold {
                let peak = window.peak().expect("window holds the sample just pushed");
                correction = Some(correction.map_or(peak, |c| c.min(peak)));
            }
        }
        if let Some(peak) = correction {
            self.estimate = peak;
            for window in &mut self.windows {
                window.clear();
            }
        }
        self.estimate
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tracker(estimate: f64, omega0: f64) -> PeakTracker {
        PeakTracker::new(TrackerConfig::default(), estimate, [omega0; 4]).expect("valid config")
    }

    #[test]
    fn constant_command_is_a_fixed_point() {
        let mut t = tracker(12_000.0, 9_000.0);
        for _ in 0..50 {
            let exp = t.expected_omega(&[9_000.0; 4], 0.002);
            assert_eq!(exp, [9_000.0; 4]);
        }
    }

    #[test]
    fn step_response_matches_the_closed_form() {
        let mut t = tracker(12_000.0, 3_000.0);
        let dt = 0.002;
        for k in 1..=100 {
            let exp = t.expected_omega(&[12_000.0; 4], dt);
            let reference = 12_000.0 - 9_000.0 * (-(k as f64) * dt / 0.03).exp();
            for w in exp {
                assert!((w - reference).abs() < 1e-8, "step {k}: {w} vs {reference}");
            }
        }
    }

    #[test]
    fn vanishing_step_matches_the_rotor_derivative() {
        let mut t = tracker(12_000.0, 6_000.0);
        let dt = 1e-8;
        let before = t.omega_exp()[0];
        let after = t.expected_omega(&[10_000.0; 4], dt)[0];
        let rate = (after - before) / dt;
        let expected_rate = (10_000.0 - 6_000.0) / 0.03;
        assert!((rate - expected_rate).abs() / expected_rate < 1e-6);
    }

    #[test]
    fn exact_tracking_never_changes_the_estimate() {
        let mut t = tracker(12_000.0, 4_000.0);
        let dt = 0.002;
        let mut obs = [4_000.0; 4];
        for k in 0..2_000 {
            let cmd = [8_000.0 + 2_000.0 * ((k as f64) * 0.01).sin(); 4];
            let decay = (-dt / 0.03f64).exp();
            for (o, c) in obs.iter_mut().zip(&cmd) {
                *o = c + (*o - c) * decay;
            }
            assert_eq!(t.update(&cmd, &obs, dt), 12_000.0);
        }
    }

    #[test]
    fn hard_ceiling_triggers_once_and_corrects_to_the_peak() {
        let ceiling = 11_300.0;
        let mut t = tracker(12_000.0, 3_000.0);
        let dt = 0.002;
        let mut model = 3_000.0f64;
        let mut first_saturation = None;
        let mut corrected_at = None;
        for k in 1..=500 {
            let time = k as f64 * dt;
            model = 12_000.0 + (model - 12_000.0) * (-dt / 0.03f64).exp();
            let observed = model.min(ceiling);
            if observed < model && first_saturation.is_none() {
                first_saturation = Some(time);
            }
            let estimate = t.update(&[12_000.0; 4], &[observed; 4], dt);
            if estimate < 12_000.0 && corrected_at.is_none() {
                corrected_at = Some(time);
                assert_eq!(estimate, ceiling);
            }
        }
        let saturated = first_saturation.expect("the command exceeds the ceiling");
        let corrected = corrected_at.expect("the tracker must trigger");
        assert!(
            corrected - saturated < 0.13,
            "correction took {} s after saturation",
            corrected - saturated
        );
        assert_eq!(t.estimate(), ceiling);
    }

    #[test]
    fn drifting_ceiling_is_tracked_within_tolerance() {
        // Starts converged (estimate equals the initial ceiling) and follows a
        // -1 RPM/s drift for 60 s under an intermittently saturating command:
        // 2 s at full demand, 3 s relaxed, repeating.
        let mut t = tracker(11_300.0, 11_000.0);
        let dt = 0.002;
        let mut model = 11_000.0f64;
        let mut worst = 0.0f64;
        let mut last_saturated = f64::NEG_INFINITY;
        for k in 1..=30_000 {
            let time = k as f64 * dt;
            let ceiling = 11_300.0 - time;
            let cmd = if time % 5.0 < 2.0 { 12_000.0 } else { 9_000.0 };
            model = cmd + (model - cmd) * (-dt / 0.03f64).exp();
            let observed = model.min(ceiling);
            t.update(&[cmd; 4], &[observed; 4], dt);
            if observed >= ceiling {
                last_saturated = time;
            }
            if time - last_saturated <= 1.0 {
                worst = worst.max((t.estimate() - ceiling).abs());
            }
        }
        assert!(worst <= 70.0, "worst estimate error {worst} RPM");
        assert!(t.estimate() < 11_300.0 - 50.0, "estimate never followed the drift");
    }

    #[test]
    fn estimate_is_piecewise_constant_between_triggers() {
        let mut t = tracker(12_000.0, 11_000.0);
        let dt = 0.002;
        let mut model = 11_000.0f64;
        let mut values = Vec::new();
        for _ in 0..400 {
            model = 12_000.0 + (model - 12_000.0) * (-dt / 0.03f64).exp();
            values.push(t.update(&[12_000.0; 4], &[model.min(11_300.0); 4], dt));
        }
        let distinct: Vec<f64> = values
            .windows(2)
            .filter(|w| w[0] != w[1])
            .map(|w| w[1])
            .collect();
        assert_eq!(distinct.len(), 1, "exactly one correction, got {distinct:?}");
        assert!(values.last().copied() == Some(11_300.0));
    }

    #[test]
    fn lowest_triggering_rotor_wins() {
        let mut t = tracker(12_000.0, 11_000.0);
        let dt = 0.002;
        let mut model = 11_000.0f64;
        let mut estimate = 12_000.0;
        for _ in 0..400 {
            model = 12_000.0 + (model - 12_000.0) * (-dt / 0.03f64).exp();
            // Two rotors saturate at different physical ceilings.
            let obs = [model.min(11_300.0), model.min(11_250.0), model, model];
            estimate = t.update(&[12_000.0; 4], &obs, dt);
        }
        assert_eq!(estimate, 11_250.0);
    }

    #[test]
    fn config_validation_rejects_nonpositive_values() {
        for bad in [
            TrackerConfig { window: 0.0, ..TrackerConfig::default() },
            TrackerConfig { threshold: -1.0, ..TrackerConfig::default() },
            TrackerConfig { tau: f64::NAN, ..TrackerConfig::default() },
        ] {
            assert!(bad.validate().is_err(), "{bad:?} must be rejected");
        }
        assert!(PeakTracker::new(TrackerConfig::default(), 0.0, [3_000.0; 4]).is_err());
        assert!(PeakTracker::new(TrackerConfig::default(), 11_000.0, [f64::NAN; 4]).is_err());
    }
}
