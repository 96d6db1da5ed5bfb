//! Incremental nonlinear dynamic inversion on the body torque.
//!
//! The measured rate, its numerical derivative and the applied torque pass
//! through identical second-order low-pass filters, so the difference
//! `M·ω̇̂ − τ̂ + ω̂×Mω̂` estimates the unmodeled torque without a relative lag.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, SQRT_2};

use crate::dynamics::PhysicalParams;
use crate::error::ControlError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndiConfig {
    pub enabled: bool,
    pub cutoff_hz: f64,
    /// Samples after reset during which the command passes through unchanged.
    pub warmup_samples: usize,
}

impl Default for IndiConfig {
    fn default() -> Self {
        Self { enabled: true, cutoff_hz: 12.0, warmup_samples: 20 }
    }
}

impl IndiConfig {
    pub fn validate(&self, dt: f64) -> Result<(), ControlError> {
        if !(dt > 0.0) {
            return Err(ControlError::InvalidConfig("INDI rate must be positive".into()));
        }
        if !(self.cutoff_hz > 0.0 && self.cutoff_hz < 0.5 / dt) {
            return Err(ControlError::InvalidConfig(format!(
                "cutoff {} Hz must lie in (0, Nyquist = {} Hz)",
                self.cutoff_hz,
                0.5 / dt
            )));
        }
        Ok(())
    }
}

/// Second-order Butterworth low-pass from the bilinear transform, applied
/// per channel of a 3-vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
    x1: Vector3<f64>,
    x2: Vector3<f64>,
    y1: Vector3<f64>,
    y2: Vector3<f64>,
    primed: bool,
}

impl Biquad {
    pub fn low_pass(cutoff_hz: f64, dt: f64) -> Self {
        let k = (PI * cutoff_hz * dt).tan();
        let norm = 1.0 / (1.0 + SQRT_2 * k + k * k);
        let b0 = k * k * norm;
        Self {
            b: [b0, 2.0 * b0, b0],
            a: [2.0 * (k * k - 1.0) * norm, (1.0 - SQRT_2 * k + k * k) * norm],
            x1: Vector3::zeros(),
            x2: Vector3::zeros(),
            y1: Vector3::zeros(),
            y2: Vector3::zeros(),
            primed: false,
        }
    }

    /// Filters one sample. The first sample initializes the state at steady
    /// state so a constant input passes through without a transient.
    pub fn apply(&mut self, x: &Vector3<f64>) -> Vector3<f64> {
        if !self.primed {
            self.x1 = *x;
            self.x2 = *x;
            self.y1 = *x;
            self.y2 = *x;
            self.primed = true;
        }
        let y = x * self.b[0] + self.x1 * self.b[1] + self.x2 * self.b[2] - self.y1 * self.a[0]
            - self.y2 * self.a[1];
        self.x2 = self.x1;
        self.x1 = *x;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }

    /// Magnitude of the frequency response at `f` Hz.
    pub fn gain(&self, f: f64, dt: f64) -> f64 {
        let w = 2.0 * PI * f * dt;
        let z1 = (w.cos(), -w.sin());
        let z2 = ((2.0 * w).cos(), -(2.0 * w).sin());
        let num = (self.b[0] + self.b[1] * z1.0 + self.b[2] * z2.0, self.b[1] * z1.1 + self.b[2] * z2.1);
        let den = (1.0 + self.a[0] * z1.0 + self.a[1] * z2.0, self.a[0] * z1.1 + self.a[1] * z2.1);
        (num.0.hypot(num.1)) / (den.0.hypot(den.1))
    }

    pub fn reset(&mut self) {
        self.primed = false;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FilteredSignals {
    pub omega_hat: Vector3<f64>,
    pub omega_dot_hat: Vector3<f64>,
    pub tau_hat: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndiOutput {
    pub torque: Vector3<f64>,
    /// True while the filters are still warming up (or INDI is disabled).
    pub passthrough: bool,
}

#[derive(Debug, Clone)]
pub struct Indi {
    config: IndiConfig,
    dt: f64,
    inertia: Matrix3<f64>,
    inertia_inv: Matrix3<f64>,
    omega_filter: Biquad,
    tau_filter: Biquad,
    previous_omega: Option<Vector3<f64>>,
    samples: usize,
    signals: FilteredSignals,
}

impl Indi {
    pub fn new(config: IndiConfig, dt: f64, params: &PhysicalParams) -> Result<Self, ControlError> {
        config.validate(dt)?;
        Ok(Self {
            config,
            dt,
            inertia: params.inertia(),
            inertia_inv: params.inertia_inv(),
            omega_filter: Biquad::low_pass(config.cutoff_hz, dt),
            tau_filter: Biquad::low_pass(config.cutoff_hz, dt),
            previous_omega: None,
            samples: 0,
            signals: FilteredSignals::default(),
        })
    }

    pub fn reset(&mut self) {
        self.omega_filter.reset();
        self.tau_filter.reset();
        self.previous_omega = None;
        self.samples = 0;
        self.signals = FilteredSignals::default();
    }

    pub fn is_warm(&self) -> bool {
        self.samples >= self.config.warmup_samples.max(2)
    }

    /// Feeds one measured body rate and the torque applied over the last
    /// interval.
    pub fn update(&mut self, omega_measured: &Vector3<f64>, tau_applied: &Vector3<f64>) -> FilteredSignals {
        let omega_hat = self.omega_filter.apply(omega_measured);
        let tau_hat = self.tau_filter.apply(tau_applied);
        let omega_dot_hat = match self.previous_omega {
            Some(prev) => (omega_hat - prev) / self.dt,
            None => Vector3::zeros(),
        };
        self.previous_omega = Some(omega_hat);
        self.samples += 1;
        self.signals = FilteredSignals { omega_hat, omega_dot_hat, tau_hat };
        self.signals
    }

    pub fn signals(&self) -> &FilteredSignals {
        &self.signals
    }

    /// Filtered estimate of the unmodeled body torque.
    pub fn disturbance_estimate(&self) -> Vector3<f64> {
        let s = &self.signals;
        self.inertia * s.omega_dot_hat - s.tau_hat + s.omega_hat.cross(&(self.inertia * s.omega_hat))
    }

    /// Converts the torque requested by the outer loop into the torque to
    /// command, given the current rate measurement.
    pub fn command(&self, tau_nmpc: &Vector3<f64>, omega: &Vector3<f64>) -> IndiOutput {
        if !self.config.enabled || !self.is_warm() {
            return IndiOutput { torque: *tau_nmpc, passthrough: true };
        }
        let s = &self.signals;
        let omega_dot_des = self.inertia_inv * (tau_nmpc - omega.cross(&(self.inertia * omega)));
        let torque = s.tau_hat + self.inertia * (omega_dot_des - s.omega_dot_hat);
        IndiOutput { torque, passthrough: false }
    }
}
