//! Analytic benchmark references and a piecewise sequence of planned
//! trajectories, all usable as flat outputs.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};

use crate::dynamics::Mode;
use crate::flatness::FlatOutput;
use crate::minco::MincoTrajectory;

/// Vertical `height · sin⁴(π (t − start) / length)` excursion flown in the air.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hop {
    pub start: f64,
    pub length: f64,
    pub height: f64,
}

impl Hop {
    fn contains(&self, t: f64) -> bool {
        t > self.start && t < self.start + self.length
    }

    fn derivative(&self, t: f64, order: usize) -> f64 {
        if !self.contains(t) {
            return 0.0;
        }
        let k = PI / self.length;
        let (s, c) = (k * (t - self.start)).sin_cos();
        let shape = match order {
            0 => s.powi(4),
            1 => 4.0 * s.powi(3) * c,
            2 => 12.0 * s * s * c * c - 4.0 * s.powi(4),
            3 => 24.0 * s * c.powi(3) - 40.0 * s.powi(3) * c,
            4 => 24.0 * c.powi(4) - 192.0 * s * s * c * c + 40.0 * s.powi(4),
            _ => return 0.0,
        };
        self.height * k.powi(order as i32) * shape
    }
}

/// Figure-eight `x = A sin ωt`, `y = (A/2) sin 2ωt` around `center`, on the
/// ground unless inside a hop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lemniscate {
    pub center: [f64; 2],
    pub amplitude: f64,
    pub omega: f64,
    pub duration: f64,
    pub hop: Option<Hop>,
}

impl Lemniscate {
    /// Ground figure-eight with peak speed 2 m/s and peak acceleration
    /// below 1.8 m/s².
    pub fn planar() -> Self {
        Self { center: [0.0, 0.0], amplitude: 2.36, omega: 0.599, duration: 2.0 * PI / 0.599, hop: None }
    }

    /// Figure-eight with a hop over the positive lobe; peak speed below
    /// 3 m/s and peak acceleration below 2.5 m/s².
    pub fn hybrid() -> Self {
        let omega = 0.6;
        let period = 2.0 * PI / omega;
        let length = 3.0;
        Self {
            center: [0.0, 0.0],
            amplitude: 3.0,
            omega,
            duration: period,
            hop: Some(Hop { start: 0.25 * period - 0.5 * length, length, height: 0.5 }),
        }
    }

    pub fn period(&self) -> f64 {
        2.0 * PI / self.omega
    }

    /// Largest speed and acceleration over a dense sampling.
    pub fn peak_speed_and_acceleration(&self) -> (f64, f64) {
        let n = 20_000;
        (0..=n).fold((0.0_f64, 0.0_f64), |(v, a), i| {
            let t = self.duration * i as f64 / n as f64;
            (v.max(self.derivative(t, 1).norm()), a.max(self.derivative(t, 2).norm()))
        })
    }

    /// Times at which the mode changes.
    pub fn transitions(&self) -> Vec<f64> {
        self.hop.map_or_else(Vec::new, |h| vec![h.start, h.start + h.length])
    }
}

impl FlatOutput for Lemniscate {
    fn duration(&self) -> f64 {
        self.duration
    }

    fn derivative(&self, t: f64, order: usize) -> Vector3<f64> {
        let w = self.omega;
        let k = order as f64;
        let x = self.amplitude * w.powi(order as i32) * (w * t + k * FRAC_PI_2).sin();
        let y = 0.5 * self.amplitude * (2.0 * w).powi(order as i32) * (2.0 * w * t + k * FRAC_PI_2).sin();
        let z = self.hop.map_or(0.0, |h| h.derivative(t, order));
        let offset = if order == 0 { Vector3::new(self.center[0], self.center[1], 0.0) } else { Vector3::zeros() };
        Vector3::new(x, y, z) + offset
    }

    fn mode_at(&self, t: f64) -> Mode {
        match self.hop {
            Some(h) if h.contains(t) => Mode::Aerial,
            _ => Mode::Terrestrial,
        }
    }
}

/// Planned trajectories flown back to back.
#[derive(Debug, Clone)]
pub struct TrajectorySequence {
    segments: Vec<MincoTrajectory>,
    starts: Vec<f64>,
}

impl TrajectorySequence {
    pub fn new(segments: Vec<MincoTrajectory>) -> Self {
        let mut starts = Vec::with_capacity(segments.len());
        let mut t = 0.0;
        for s in &segments {
            starts.push(t);
            t += s.total_duration();
        }
        Self { segments, starts }
    }

    pub fn segments(&self) -> &[MincoTrajectory] {
        &self.segments
    }

    /// End time of every segment.
    pub fn arrival_times(&self) -> Vec<f64> {
        self.starts.iter().zip(&self.segments).map(|(s, g)| s + g.total_duration()).collect()
    }

    fn locate(&self, t: f64) -> (usize, f64) {
        let i = self.starts.partition_point(|s| *s <= t).saturating_sub(1);
        let i = i.min(self.segments.len() - 1);
        (i, t - self.starts[i])
    }
}

impl FlatOutput for TrajectorySequence {
    fn duration(&self) -> f64 {
        self.starts.last().zip(self.segments.last()).map_or(0.0, |(s, g)| s + g.total_duration())
    }

    fn derivative(&self, t: f64, order: usize) -> Vector3<f64> {
        let (i, local) = self.locate(t.clamp(0.0, self.duration()));
        self.segments[i].derivative(local, order)
    }

    fn mode_at(&self, t: f64) -> Mode {
        let (i, local) = self.locate(t.clamp(0.0, self.duration()));
        self.segments[i].mode_at(local)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derivatives_match_differences() {
        let l = Lemniscate::hybrid();
        let h = 1e-5;
        for &t in &[0.3, 2.0, 2.9, 4.0, 5.1, 7.7] {
            for order in 0..4 {
                let fd = (l.derivative(t + h, order) - l.derivative(t - h, order)) / (2.0 * h);
                let exact = l.derivative(t, order + 1);
                assert!((fd - exact).norm() < 1e-5 * (1.0 + exact.norm()), "t {t} order {order}: {fd:?} vs {exact:?}");
            }
        }
    }

    #[test]
    fn planar_limits() {
        let (v, a) = Lemniscate::planar().peak_speed_and_acceleration();
        assert!(v <= 2.0 + 1e-3 && v > 1.95, "{v}");
        assert!(a <= 1.8, "{a}");
    }

    #[test]
    fn hybrid_limits_and_modes() {
        let l = Lemniscate::hybrid();
        let (v, a) = l.peak_speed_and_acceleration();
        assert!(v <= 3.0, "{v}");
        assert!(a <= 2.5, "{a}");
        let [up, down] = l.transitions()[..] else { panic!() };
        assert_eq!(l.mode_at(up - 0.01), Mode::Terrestrial);
        assert_eq!(l.mode_at(up + 0.01), Mode::Aerial);
        assert_eq!(l.mode_at(down + 0.01), Mode::Terrestrial);
        // The hop starts and ends with zero height, climb rate and vertical acceleration.
        for t in [up + 1e-9, down - 1e-9] {
            for order in 0..3 {
                assert!(l.derivative(t, order).z.abs() < 1e-6);
            }
        }
    }
}
