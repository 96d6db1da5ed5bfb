//! Deterministic closed-loop simulation: plant, sensors, NMPC, INDI and
//! rotor allocation with explicit liftoff and touchdown handling.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::dynamics::{
    allocate_from_rotors, project_to_ground, required_normal_force, rotors_from_input, step_plant,
    ControlInput, ExternalWrench, FullState, Mode, PhysicalParams,
};
use crate::error::SimError;
use crate::flatness::ReferenceTrack;
use crate::indi::{Indi, IndiConfig};
use crate::nmpc::{Nmpc, NmpcConfig, RecedingHorizon};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Disturbance {
    /// Body torque, N·m.
    pub torque: [f64; 3],
    /// Inertial force, N.
    pub force: [f64; 3],
    /// Time at which the disturbance switches on, s.
    pub start_time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub dt_sim: f64,
    pub dt_ctrl: f64,
    /// Run length, s. Defaults to the reference duration.
    pub duration: Option<f64>,
    pub seed: u64,
    /// Rate gyro noise standard deviation, rad/s.
    pub gyro_noise: f64,
    pub disturbance: Disturbance,
    pub indi: IndiConfig,
    /// Abort when the position leaves the bounds by more than this, m.
    pub divergence_margin: f64,
    pub touchdown_height: f64,
    /// Largest sink rate accepted as a soft landing, m/s.
    pub touchdown_speed: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt_sim: 1e-3,
            dt_ctrl: 5e-3,
            duration: None,
            seed: 0,
            gyro_noise: 0.01,
            disturbance: Disturbance::default(),
            indi: IndiConfig::default(),
            divergence_margin: 10.0,
            touchdown_height: 0.01,
            touchdown_speed: 0.5,
        }
    }
}

impl SimConfig {
    pub fn substeps(&self) -> Result<usize, SimError> {
        if !(self.dt_sim > 0.0 && self.dt_ctrl > 0.0) {
            return Err(SimError::InvalidConfig("time steps must be positive".into()));
        }
        let ratio = self.dt_ctrl / self.dt_sim;
        let k = ratio.round();
        if k < 1.0 || (ratio - k).abs() > 1e-9 * ratio {
            return Err(SimError::InvalidConfig(format!(
                "dt_ctrl = {} is not an integer multiple of dt_sim = {}",
                self.dt_ctrl, self.dt_sim
            )));
        }
        Ok(k as usize)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.substeps()?;
        if !(self.gyro_noise >= 0.0 && self.gyro_noise.is_finite()) {
            return Err(SimError::InvalidConfig("gyro noise must be non-negative".into()));
        }
        if let Some(d) = self.duration {
            if !(d > 0.0) {
                return Err(SimError::InvalidConfig("duration must be positive".into()));
            }
        }
        if !(self.divergence_margin > 0.0 && self.touchdown_height >= 0.0 && self.touchdown_speed > 0.0) {
            return Err(SimError::InvalidConfig("margins must be positive".into()));
        }
        self.indi.validate(self.dt_ctrl).map_err(SimError::Control)
    }
}

/// Axis-aligned region used by the divergence guard.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Bounds {
    /// Bounding box of the reference positions.
    pub fn of_track(track: &ReferenceTrack) -> Self {
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for r in &track.points {
            for k in 0..3 {
                min[k] = min[k].min(r.state.position[k]);
                max[k] = max[k].max(r.state.position[k]);
            }
        }
        Self { min, max }
    }

    fn outside_by(&self, p: &Vector3<f64>) -> f64 {
        (0..3).fold(0.0_f64, |m, k| m.max(self.min[k] - p[k]).max(p[k] - self.max[k]))
    }
}

/// One row per control tick.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub t: f64,
    pub px: f64,
    pub py: f64,
    pub pz: f64,
    pub ref_px: f64,
    pub ref_py: f64,
    pub ref_pz: f64,
    pub ref_vx: f64,
    pub ref_vy: f64,
    pub ref_vz: f64,
    pub qw: f64,
    pub qx: f64,
    pub qy: f64,
    pub qz: f64,
    pub vx: f64,
    pub vy: f64,
    pub vz: f64,
    pub wx: f64,
    pub wy: f64,
    pub wz: f64,
    pub thrust: f64,
    pub tau_x: f64,
    pub tau_y: f64,
    pub tau_z: f64,
    pub nmpc_tau_x: f64,
    pub nmpc_tau_y: f64,
    pub nmpc_tau_z: f64,
    pub tau_hat_x: f64,
    pub tau_hat_y: f64,
    pub tau_hat_z: f64,
    pub omega_dot_hat_x: f64,
    pub omega_dot_hat_y: f64,
    pub omega_dot_hat_z: f64,
    pub dist_est_x: f64,
    pub dist_est_y: f64,
    pub dist_est_z: f64,
    pub kkt: f64,
    pub degraded: bool,
    pub saturated: bool,
    /// 1 on the ground, 0 in the air.
    pub plant_mode: u8,
    pub ref_mode: u8,
    pub lateral_velocity: f64,
    /// Reference velocity along the actual body y axis, m/s.
    pub ref_lateral_velocity: f64,
}

impl TickRecord {
    pub fn position(&self) -> Vector3<f64> {
        Vector3::new(self.px, self.py, self.pz)
    }

    pub fn reference_position(&self) -> Vector3<f64> {
        Vector3::new(self.ref_px, self.ref_py, self.ref_pz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub rmse_position: f64,
    pub max_position_error: f64,
    pub rmse_terrestrial: Option<f64>,
    pub rmse_aerial: Option<f64>,
    pub mode_switches: usize,
    pub saturation_fraction: f64,
    pub degraded_ticks: usize,
    pub solve_time_p50_ms: f64,
    pub solve_time_p99_ms: f64,
    /// Longest stretch during which plant and reference modes disagree, s.
    pub max_mode_disagreement: f64,
    pub hard_landings: usize,
    /// Largest |lateral body velocity| while on the ground, m/s.
    pub max_ground_lateral_velocity: f64,
    /// Largest |z| while on the ground, m.
    pub max_ground_height: f64,
    /// Largest reference velocity across the actual wheel axle while on the
    /// ground, m/s. Large values mean the reference asks for side slip.
    pub max_ground_reference_lateral_velocity: f64,
    pub ticks: usize,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum RunStatus {
    Completed,
    Diverged { time: f64, distance: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRun {
    pub status: RunStatus,
    pub metrics: RunMetrics,
    pub log: Vec<TickRecord>,
    pub final_state: FullState,
}

impl SimRun {
    pub fn divergence(&self) -> Option<SimError> {
        match self.status {
            RunStatus::Completed => None,
            RunStatus::Diverged { time, distance } => Some(SimError::Diverged { time, distance }),
        }
    }

    pub fn write_log<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.log {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Root mean square of the Euclidean position error over paired samples.
pub fn compute_rmse(actual: &[Vector3<f64>], reference: &[Vector3<f64>]) -> Result<f64, SimError> {
    if actual.len() != reference.len() {
        return Err(SimError::LengthMismatch(actual.len(), reference.len()));
    }
    if actual.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = actual.iter().zip(reference).map(|(a, r)| (a - r).norm_squared()).sum();
    Ok((sum / actual.len() as f64).sqrt())
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx.min(sorted.len() - 1)]
}

/// Recomputes the metrics that depend only on the log.
pub fn metrics_from_log(log: &[TickRecord], dt_ctrl: f64) -> RunMetrics {
    let actual: Vec<_> = log.iter().map(TickRecord::position).collect();
    let reference: Vec<_> = log.iter().map(TickRecord::reference_position).collect();
    let rmse_position = compute_rmse(&actual, &reference).unwrap_or(f64::NAN);
    let max_position_error = actual.iter().zip(&reference).fold(0.0_f64, |m, (a, r)| m.max((a - r).norm()));
    let phase = |ground: u8| {
        let (a, r): (Vec<_>, Vec<_>) = log
            .iter()
            .filter(|t| t.plant_mode == ground)
            .map(|t| (t.position(), t.reference_position()))
            .unzip();
        (!a.is_empty()).then(|| compute_rmse(&a, &r).unwrap_or(f64::NAN))
    };
    let mode_switches = log.windows(2).filter(|w| w[0].plant_mode != w[1].plant_mode).count();
    let saturated = log.iter().filter(|t| t.saturated).count();
    let degraded_ticks = log.iter().filter(|t| t.degraded).count();
    let mut run = 0usize;
    let mut longest = 0usize;
    for t in log {
        run = if t.plant_mode != t.ref_mode { run + 1 } else { 0 };
        longest = longest.max(run);
    }
    let on_ground = log.iter().filter(|t| t.plant_mode == 1);
    let (lat, height, ref_lat) = on_ground.fold((0.0_f64, 0.0_f64, 0.0_f64), |(l, h, r), t| {
        (l.max(t.lateral_velocity.abs()), h.max(t.pz.abs()), r.max(t.ref_lateral_velocity.abs()))
    });
    RunMetrics {
        rmse_position,
        max_position_error,
        rmse_terrestrial: phase(1),
        rmse_aerial: phase(0),
        mode_switches,
        saturation_fraction: if log.is_empty() { 0.0 } else { saturated as f64 / log.len() as f64 },
        degraded_ticks,
        solve_time_p50_ms: 0.0,
        solve_time_p99_ms: 0.0,
        max_mode_disagreement: longest as f64 * dt_ctrl,
        hard_landings: 0,
        max_ground_lateral_velocity: lat,
        max_ground_height: height,
        max_ground_reference_lateral_velocity: ref_lat,
        ticks: log.len(),
        duration: log.last().map_or(0.0, |t| t.t),
    }
}

/// Runs the closed loop along `track`. Divergence ends the run early with a
/// [`RunStatus::Diverged`] status and the log up to that point.
pub fn run_closed_loop(
    track: &ReferenceTrack,
    initial: Option<FullState>,
    nmpc: &NmpcConfig,
    sim: &SimConfig,
    params: &PhysicalParams,
    bounds: Option<Bounds>,
) -> Result<SimRun, SimError> {
    sim.validate()?;
    if track.is_empty() {
        return Err(SimError::Control(crate::error::ControlError::EmptyReference));
    }
    let substeps = sim.substeps()?;
    let bounds = bounds.unwrap_or_else(|| Bounds::of_track(track));
    let duration = sim.duration.unwrap_or_else(|| track.duration());
    let ticks = (duration / sim.dt_ctrl - 1e-9).ceil().max(0.0) as usize + 1;

    let mut controller = RecedingHorizon::new(Nmpc::new(*nmpc, *params)?);
    let mut indi = Indi::new(sim.indi, sim.dt_ctrl, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sim.seed);
    let noise = Normal::new(0.0, sim.gyro_noise).map_err(|e| SimError::InvalidConfig(e.to_string()))?;

    let first = track.at(0.0);
    let mut mode = first.mode();
    let mut x = initial.unwrap_or(first.state);
    if mode == Mode::Terrestrial {
        project_to_ground(&mut x);
    }
    let mut tau_applied = Vector3::zeros();
    let mut log = Vec::with_capacity(ticks);
    let mut solve_times = Vec::with_capacity(ticks);
    let mut hard_landings = 0;
    let mut status = RunStatus::Completed;

    for k in 0..ticks {
        let t = k as f64 * sim.dt_ctrl;
        let r = track.at(t);
        let mut measured = x;
        if sim.gyro_noise > 0.0 {
            measured.body_rate += Vector3::from_fn(|_, _| noise.sample(&mut rng));
        }
        let (u_nmpc, sol) = controller.step(&measured, track, t)?;
        solve_times.push(sol.solve_time_ms);
        let signals = indi.update(&measured.body_rate, &tau_applied);
        let cmd = indi.command(&u_nmpc.torque, &measured.body_rate);
        let alloc = rotors_from_input(&ControlInput::new(u_nmpc.thrust, cmd.torque), params);
        let u = allocate_from_rotors(&alloc.rotors, params);
        tau_applied = u.torque;
        let est = indi.disturbance_estimate();

        let q = x.attitude.quaternion();
        log.push(TickRecord {
            t,
            px: x.position.x,
            py: x.position.y,
            pz: x.position.z,
            ref_px: r.state.position.x,
            ref_py: r.state.position.y,
            ref_pz: r.state.position.z,
            ref_vx: r.state.velocity.x,
            ref_vy: r.state.velocity.y,
            ref_vz: r.state.velocity.z,
            qw: q.w,
            qx: q.i,
            qy: q.j,
            qz: q.k,
            vx: x.velocity.x,
            vy: x.velocity.y,
            vz: x.velocity.z,
            wx: x.body_rate.x,
            wy: x.body_rate.y,
            wz: x.body_rate.z,
            thrust: u.thrust,
            tau_x: u.torque.x,
            tau_y: u.torque.y,
            tau_z: u.torque.z,
            nmpc_tau_x: u_nmpc.torque.x,
            nmpc_tau_y: u_nmpc.torque.y,
            nmpc_tau_z: u_nmpc.torque.z,
            tau_hat_x: signals.tau_hat.x,
            tau_hat_y: signals.tau_hat.y,
            tau_hat_z: signals.tau_hat.z,
            omega_dot_hat_x: signals.omega_dot_hat.x,
            omega_dot_hat_y: signals.omega_dot_hat.y,
            omega_dot_hat_z: signals.omega_dot_hat.z,
            dist_est_x: est.x,
            dist_est_y: est.y,
            dist_est_z: est.z,
            kkt: sol.kkt_residual,
            degraded: sol.degraded,
            saturated: alloc.saturated,
            plant_mode: mode.label(),
            ref_mode: r.mode().label(),
            lateral_velocity: x.lateral_velocity(),
            ref_lateral_velocity: (x.attitude.inverse() * r.state.velocity).y,
        });
        if k + 1 == ticks {
            break;
        }

        for s in 0..substeps {
            let ts = t + s as f64 * sim.dt_sim;
            let ext = if ts >= sim.disturbance.start_time {
                ExternalWrench {
                    force: Vector3::from(sim.disturbance.force),
                    torque: Vector3::from(sim.disturbance.torque),
                }
            } else {
                ExternalWrench::default()
            };
            if mode == Mode::Terrestrial && required_normal_force(&x, &u, params, &ext) < 0.0 {
                mode = Mode::Aerial;
            }
            x = step_plant(&x, [&u, &u, &u], mode, params, &ext, sim.dt_sim)?;
            if mode == Mode::Aerial && x.position.z <= sim.touchdown_height && x.velocity.z <= 0.0 {
                if x.velocity.z < -sim.touchdown_speed {
                    hard_landings += 1;
                }
                mode = Mode::Terrestrial;
                project_to_ground(&mut x);
            }
        }
        let out = bounds.outside_by(&x.position);
        if out > sim.divergence_margin || !x.is_finite() {
            status = RunStatus::Diverged { time: t + sim.dt_ctrl, distance: out };
            break;
        }
    }

    let mut metrics = metrics_from_log(&log, sim.dt_ctrl);
    solve_times.sort_by(f64::total_cmp);
    metrics.solve_time_p50_ms = percentile(&solve_times, 0.5);
    metrics.solve_time_p99_ms = percentile(&solve_times, 0.99);
    metrics.hard_landings = hard_landings;
    Ok(SimRun { status, metrics, log, final_state: x })
}
