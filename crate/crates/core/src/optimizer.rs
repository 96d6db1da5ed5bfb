//! Spatial-temporal trajectory optimization over MINCO waypoints and times.
//!
//! The decision variables are the free waypoint coordinates and the log of
//! every piece duration. The cost is `λ · [J_t, J_s, J_c, J_n]`: total time,
//! speed/acceleration limits, obstacle clearance and (on ground pieces only)
//! heading rate and heading acceleration limits, all evaluated at κ
//! constraint points per piece with a smoothed `max(·, 0)`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::cell::Cell;
use std::time::Instant;

use crate::dynamics::Mode;
use crate::error::OptimizeError;
use crate::lbfgs::{minimize, LbfgsParams, LbfgsReport, LbfgsStatus};
use crate::minco::{basis, BoundaryCondition, MincoTrajectory, COEFFS};
use crate::world::World;

pub use crate::flatness::sample_references;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// Weights of [time, state limits, collision, nonholonomy].
    pub lambda: [f64; 4],
    pub v_max: f64,
    pub a_max: f64,
    /// Heading rate limit on the ground, rad/s.
    pub omega_max: f64,
    /// Heading acceleration limit on the ground, rad/s².
    pub alpha_max: f64,
    /// Required clearance from the distance field, m.
    pub safety_distance: f64,
    /// Constraint points per piece.
    pub kappa: usize,
    /// Width of the smoothed `max(·, 0)` transition.
    pub smoothing: f64,
    /// Speed regularization in the heading-rate denominator, m/s.
    pub speed_regularization: f64,
    /// Smallest horizontal speed on ground pieces other than the first and
    /// last, m/s. Rules out stop-and-reverse cusps, where the heading jumps
    /// between constraint points. Zero disables it.
    pub min_ground_speed: f64,
    /// Scale of the quadratic height and climb-rate penalty on ground pieces
    /// relative to the hinge penalties.
    pub ground_plane_weight: f64,
    /// Stop once all penalties are below half the success threshold and the
    /// total improved by less than `stop_decrease` (relative) over
    /// `stop_window` iterations.
    pub stop_window: usize,
    pub stop_decrease: f64,
    /// Heading limits are audited only above this horizontal speed, m/s.
    pub audit_min_speed: f64,
    pub solver: LbfgsParams,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lambda: [5.0, 6.0, 100.0, 5.0],
            v_max: 2.0,
            a_max: 2.0,
            omega_max: 1.5,
            alpha_max: 3.0,
            safety_distance: 0.4,
            kappa: 8,
            smoothing: 1e-2,
            speed_regularization: 1e-3,
            min_ground_speed: 0.2,
            ground_plane_weight: 100.0,
            stop_window: 10,
            stop_decrease: 1e-4,
            audit_min_speed: 0.5,
            solver: LbfgsParams { max_iterations: 1500, ..Default::default() },
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptimizeError> {
        let positive = [self.v_max, self.a_max, self.omega_max, self.alpha_max, self.safety_distance, self.smoothing];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return Err(OptimizeError::InvalidConfig("limits must be positive".into()));
        }
        if !(self.min_ground_speed >= 0.0) || !(self.ground_plane_weight >= 0.0) {
            return Err(OptimizeError::InvalidConfig("min_ground_speed and ground_plane_weight must be non-negative".into()));
        }
        if self.kappa < 4 {
            return Err(OptimizeError::InvalidConfig("kappa must be at least 4".into()));
        }
        if self.lambda.iter().any(|w| !(*w >= 0.0)) {
            return Err(OptimizeError::InvalidConfig("weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Initial guess for the optimizer (the search front-end's output).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialGuess {
    pub head: BoundaryCondition,
    pub tail: BoundaryCondition,
    pub waypoints: Vec<Vector3<f64>>,
    pub durations: Vec<f64>,
    pub modes: Vec<Mode>,
}

/// Unweighted cost terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub time: f64,
    pub state: f64,
    pub collision: f64,
    pub nonholonomic: f64,
}

impl CostBreakdown {
    pub fn weighted(&self, lambda: &[f64; 4]) -> f64 {
        lambda[0] * self.time + lambda[1] * self.state + lambda[2] * self.collision + lambda[3] * self.nonholonomic
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iteration: usize,
    pub time: f64,
    pub state: f64,
    pub collision: f64,
    pub nonholonomic: f64,
    pub total: f64,
}

/// Worst limit usage found by dense re-sampling. Ratios are measured value
/// over limit; `min_clearance` is in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub speed_ratio: f64,
    pub acceleration_ratio: f64,
    pub yaw_rate_ratio: f64,
    pub yaw_acceleration_ratio: f64,
    pub min_clearance: f64,
    /// Largest |z| on ground pieces, m.
    pub max_ground_height: f64,
}

impl AuditReport {
    /// Largest relative violation over all limits, 0 when none is exceeded.
    pub fn worst_violation(&self, safety_distance: f64) -> f64 {
        let clearance = (safety_distance - self.min_clearance) / safety_distance;
        [self.speed_ratio - 1.0, self.acceleration_ratio - 1.0, self.yaw_rate_ratio - 1.0, self.yaw_acceleration_ratio - 1.0, clearance]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizeResult {
    pub trajectory: MincoTrajectory,
    pub costs: CostBreakdown,
    pub total_cost: f64,
    pub solver: LbfgsReport,
    /// Penalties all at or below the success threshold.
    pub success: bool,
    pub audit: AuditReport,
    pub wall_time_ms: f64,
    pub log: Vec<IterationLog>,
}

/// Largest unweighted penalty (J_s, J_c, J_n) accepted as a success.
pub const PENALTY_TOLERANCE: f64 = 1e-3;
/// Largest relative limit excess in the dense audit accepted as a success.
pub const AUDIT_TOLERANCE: f64 = 0.05;
/// Largest height of a ground piece accepted as a success, m.
pub const GROUND_HEIGHT_TOLERANCE: f64 = 0.01;

/// `max(x, 0)` with a C² quintic blend on `[0, eps]`; returns value and slope.
pub fn smoothed_max(x: f64, eps: f64) -> (f64, f64) {
    if x <= 0.0 {
        (0.0, 0.0)
    } else if x >= eps {
        (x, 1.0)
    } else {
        let u = x / eps;
        let (u2, u3) = (u * u, u * u * u);
        (eps * u3 * (6.0 - 8.0 * u + 3.0 * u2), u2 * (18.0 - 32.0 * u + 15.0 * u2))
    }
}

/// Clearance and its gradient from the mode's field. Points outside the
/// field count as negative clearance growing with the distance outside, and
/// the gradient points back in.
pub fn clearance(world: &World, mode: Mode, p: &Vector3<f64>) -> (f64, Vector3<f64>) {
    let field = world.field(mode);
    let q = field.query(p);
    if !q.out_of_bounds {
        return (q.distance, q.gradient);
    }
    let (lo, hi) = field.geometry.extent();
    let axes = if field.geometry.is_planar() { 2 } else { 3 };
    let mut inward = Vector3::zeros();
    for a in 0..axes {
        if p[a] < lo[a] {
            inward[a] = lo[a] - p[a];
        } else if p[a] > hi[a] {
            inward[a] = hi[a] - p[a];
        }
    }
    let outside = inward.norm();
    (-outside, if outside > 0.0 { inward / outside } else { Vector3::zeros() })
}

/// Heading rate and acceleration of the horizontal motion with their
/// partial derivatives with respect to v, a and j.
struct HeadingTerms {
    rate: f64,
    accel: f64,
    rate_dv: Vector3<f64>,
    rate_da: Vector3<f64>,
    accel_dv: Vector3<f64>,
    accel_da: Vector3<f64>,
    accel_dj: Vector3<f64>,
}

fn heading_terms(v: &Vector3<f64>, a: &Vector3<f64>, j: &Vector3<f64>, delta: f64) -> HeadingTerms {
    let d = v.x * v.x + v.y * v.y + delta * delta;
    let c = v.x * a.y - v.y * a.x;
    let e = v.x * j.y - v.y * j.x;
    let p = v.x * a.x + v.y * a.y;
    let vh = Vector3::new(v.x, v.y, 0.0);
    let ah = Vector3::new(a.x, a.y, 0.0);
    let dc_dv = Vector3::new(a.y, -a.x, 0.0);
    let dc_da = Vector3::new(-v.y, v.x, 0.0);
    let de_dv = Vector3::new(j.y, -j.x, 0.0);
    let (d2, d3) = (d * d, d * d * d);
    HeadingTerms {
        rate: c / d,
        accel: e / d - 2.0 * c * p / d2,
        rate_dv: dc_dv / d - vh * (2.0 * c / d2),
        rate_da: dc_da / d,
        accel_dv: de_dv / d - vh * (2.0 * e / d2) - (dc_dv * p + ah * c) * (2.0 / d2) + vh * (8.0 * c * p / d3),
        accel_da: -(dc_da * p + vh * c) * (2.0 / d2),
        accel_dj: dc_da / d,
    }
}

/// Variable layout: free waypoint coordinates then log-durations. Waypoints
/// touching a ground piece keep z = 0 and expose only x, y.
#[derive(Debug, Clone)]
pub struct Problem<'a> {
    pub world: &'a World,
    pub config: &'a OptimizerConfig,
    pub head: BoundaryCondition,
    pub tail: BoundaryCondition,
    pub modes: Vec<Mode>,
    free_z: Vec<bool>,
}

impl<'a> Problem<'a> {
    pub fn new(initial: &InitialGuess, config: &'a OptimizerConfig, world: &'a World) -> Result<Self, OptimizeError> {
        config.validate()?;
        let m = initial.durations.len();
        if m == 0 {
            return Err(crate::error::TrajectoryError::Empty.into());
        }
        if initial.modes.len() != m || initial.waypoints.len() + 1 != m {
            return Err(crate::error::TrajectoryError::Shape("initial guess sizes disagree".into()).into());
        }
        let free_z = (0..m - 1)
            .map(|i| initial.modes[i] == Mode::Aerial && initial.modes[i + 1] == Mode::Aerial)
            .collect();
        Ok(Self { world, config, head: initial.head, tail: initial.tail, modes: initial.modes.clone(), free_z })
    }

    pub fn pieces(&self) -> usize {
        self.modes.len()
    }

    pub fn dimension(&self) -> usize {
        self.free_z.iter().map(|&f| if f { 3 } else { 2 }).sum::<usize>() + self.pieces()
    }

    pub fn pack(&self, waypoints: &[Vector3<f64>], durations: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dimension());
        for (q, &free) in waypoints.iter().zip(&self.free_z) {
            x.extend_from_slice(&[q.x, q.y]);
            if free {
                x.push(q.z);
            }
        }
        x.extend(durations.iter().map(|t| t.ln()));
        x
    }

    pub fn unpack(&self, x: &[f64]) -> (Vec<Vector3<f64>>, Vec<f64>) {
        let mut k = 0;
        let mut q = Vec::with_capacity(self.free_z.len());
        for &free in &self.free_z {
            let z = if free { x[k + 2] } else { 0.0 };
            q.push(Vector3::new(x[k], x[k + 1], z));
            k += if free { 3 } else { 2 };
        }
        let t = x[k..].iter().map(|v| v.exp()).collect();
        (q, t)
    }

    pub fn trajectory(&self, x: &[f64]) -> Result<MincoTrajectory, OptimizeError> {
        let (q, t) = self.unpack(x);
        Ok(MincoTrajectory::solve(self.head, self.tail, q, t, self.modes.clone())?)
    }

    /// Weighted cost at `x`; writes the gradient into `grad`.
    pub fn evaluate(&self, x: &[f64], grad: &mut [f64]) -> Result<(f64, CostBreakdown), OptimizeError> {
        let traj = self.trajectory(x)?;
        let cfg = self.config;
        let lambda = cfg.lambda;
        let m = self.pieces();
        let eps = cfg.smoothing;
        let mut costs = CostBreakdown { time: traj.total_duration(), ..Default::default() };
        let mut grad_c = vec![[Vector3::zeros(); COEFFS]; m];
        let mut grad_t = vec![lambda[0]; m];
        let (v2max, a2max) = (cfg.v_max * cfg.v_max, cfg.a_max * cfg.a_max);
        let (w2max, al2max) = (cfg.omega_max * cfg.omega_max, cfg.alpha_max * cfg.alpha_max);

        for i in 0..m {
            let mode = self.modes[i];
            let ti = traj.durations[i];
            for j in 0..cfg.kappa {
                let frac = j as f64 / cfg.kappa as f64;
                let tau = frac * ti;
                let [p, v, a, jk, snap] = traj.eval_all(i, tau);
                let (mut gp, mut gv, mut ga, mut gj) = (Vector3::zeros(), Vector3::zeros(), Vector3::zeros(), Vector3::zeros());

                let (f, df) = smoothed_max(v.norm_squared() - v2max, eps);
                costs.state += f;
                gv += v * (2.0 * df * lambda[1]);
                let (f, df) = smoothed_max(a.norm_squared() - a2max, eps);
                costs.state += f;
                ga += a * (2.0 * df * lambda[1]);
                match mode {
                    Mode::Terrestrial => {
                        // Ground pieces must stay on the plane.
                        let w = cfg.ground_plane_weight;
                        costs.state += w * (p.z * p.z + v.z * v.z);
                        gp.z += 2.0 * w * p.z * lambda[1];
                        gv.z += 2.0 * w * v.z * lambda[1];
                    }
                    Mode::Aerial => {
                        let (f, df) = smoothed_max(-p.z, eps);
                        costs.state += f;
                        gp.z -= df * lambda[1];
                    }
                }

                let (dist, dgrad) = clearance(self.world, mode, &p);
                let (f, df) = smoothed_max(cfg.safety_distance - dist, eps);
                costs.collision += f;
                gp -= dgrad * (df * lambda[2]);

                if mode == Mode::Terrestrial {
                    let h = heading_terms(&v, &a, &jk, cfg.speed_regularization);
                    let (f, df) = smoothed_max(h.rate * h.rate - w2max, eps);
                    costs.nonholonomic += f;
                    let s = 2.0 * h.rate * df * lambda[3];
                    gv += h.rate_dv * s;
                    ga += h.rate_da * s;
                    let (f, df) = smoothed_max(h.accel * h.accel - al2max, eps);
                    costs.nonholonomic += f;
                    let s = 2.0 * h.accel * df * lambda[3];
                    gv += h.accel_dv * s;
                    ga += h.accel_da * s;
                    gj += h.accel_dj * s;
                    if cfg.min_ground_speed > 0.0 && i > 0 && i + 1 < m {
                        let vh = Vector3::new(v.x, v.y, 0.0);
                        let (f, df) = smoothed_max(cfg.min_ground_speed.powi(2) - vh.norm_squared(), eps);
                        costs.nonholonomic += f;
                        gv -= vh * (2.0 * df * lambda[3]);
                    }
                }

                if gp == Vector3::zeros() && gv == Vector3::zeros() && ga == Vector3::zeros() && gj == Vector3::zeros() {
                    continue;
                }
                let b = [basis(tau, 0), basis(tau, 1), basis(tau, 2), basis(tau, 3)];
                for k in 0..COEFFS {
                    grad_c[i][k] += gp * b[0][k] + gv * b[1][k] + ga * b[2][k] + gj * b[3][k];
                }
                grad_t[i] += frac * (gp.dot(&v) + gv.dot(&a) + ga.dot(&jk) + gj.dot(&snap));
            }
        }

        let total = costs.weighted(&lambda);
        for (term, value) in [
            ("time", costs.time),
            ("state", costs.state),
            ("collision", costs.collision),
            ("nonholonomic", costs.nonholonomic),
        ] {
            if !value.is_finite() {
                return Err(OptimizeError::NonFinite { term });
            }
        }
        let (gq, gt) = traj.backprop_gradients(&grad_c, &grad_t);
        let mut k = 0;
        for (g, &free) in gq.iter().zip(&self.free_z) {
            grad[k] = g.x;
            grad[k + 1] = g.y;
            if free {
                grad[k + 2] = g.z;
            }
            k += if free { 3 } else { 2 };
        }
        for (i, g) in gt.iter().enumerate() {
            grad[k + i] = g * traj.durations[i];
        }
        Ok((total, costs))
    }
}

/// Dense re-sampling of the limits at `points_per_piece` points per piece.
pub fn audit(traj: &MincoTrajectory, config: &OptimizerConfig, world: &World, points_per_piece: usize) -> AuditReport {
    let mut r = AuditReport {
        speed_ratio: 0.0,
        acceleration_ratio: 0.0,
        yaw_rate_ratio: 0.0,
        yaw_acceleration_ratio: 0.0,
        min_clearance: f64::INFINITY,
        max_ground_height: 0.0,
    };
    for i in 0..traj.pieces() {
        let mode = traj.modes[i];
        for j in 0..=points_per_piece {
            let tau = traj.durations[i] * j as f64 / points_per_piece as f64;
            let p = traj.eval_piece(i, tau, 0);
            let v = traj.eval_piece(i, tau, 1);
            let a = traj.eval_piece(i, tau, 2);
            r.speed_ratio = r.speed_ratio.max(v.norm() / config.v_max);
            r.acceleration_ratio = r.acceleration_ratio.max(a.norm() / config.a_max);
            r.min_clearance = r.min_clearance.min(clearance(world, mode, &p).0);
            if mode == Mode::Terrestrial {
                r.max_ground_height = r.max_ground_height.max(p.z.abs());
            }
            if mode == Mode::Terrestrial && v.x.hypot(v.y) >= config.audit_min_speed {
                let h = heading_terms(&v, &a, &traj.eval_piece(i, tau, 3), config.speed_regularization);
                r.yaw_rate_ratio = r.yaw_rate_ratio.max(h.rate.abs() / config.omega_max);
                r.yaw_acceleration_ratio = r.yaw_acceleration_ratio.max(h.accel.abs() / config.alpha_max);
            }
        }
    }
    r
}

pub fn optimize(initial: &InitialGuess, config: &OptimizerConfig, world: &World) -> Result<OptimizeResult, OptimizeError> {
    let started = Instant::now();
    let problem = Problem::new(initial, config, world)?;
    let mut x = problem.pack(&initial.waypoints, &initial.durations);
    let last = Cell::new(CostBreakdown::default());
    let failure: Cell<Option<OptimizeError>> = Cell::new(None);
    let mut log = Vec::new();
    let mut grad0 = vec![0.0; x.len()];
    let (f0, c0) = problem.evaluate(&x, &mut grad0)?;
    log.push(IterationLog {
        iteration: 0,
        time: c0.time,
        state: c0.state,
        collision: c0.collision,
        nonholonomic: c0.nonholonomic,
        total: f0,
    });
    let report = minimize(
        &mut x,
        |x, g| match problem.evaluate(x, g) {
            Ok((f, c)) => {
                last.set(c);
                f
            }
            Err(e) => {
                failure.set(Some(e));
                g.fill(0.0);
                f64::NAN
            }
        },
        &config.solver,
        |iteration, _, total| {
            let c = last.get();
            log.push(IterationLog {
                iteration,
                time: c.time,
                state: c.state,
                collision: c.collision,
                nonholonomic: c.nonholonomic,
                total,
            });
            let feasible = [c.state, c.collision, c.nonholonomic].iter().all(|p| *p <= 0.5 * PENALTY_TOLERANCE);
            let window = config.stop_window;
            feasible
                && window > 0
                && log.len() > window
                && (log[log.len() - 1 - window].total - total) <= config.stop_decrease * total.abs().max(1.0)
        },
    );
    if report.status == LbfgsStatus::NonFinite {
        return Err(failure.take().unwrap_or(OptimizeError::NonFinite { term: "total" }));
    }
    let trajectory = problem.trajectory(&x)?;
    let mut grad = vec![0.0; x.len()];
    let (total_cost, costs) = problem.evaluate(&x, &mut grad)?;
    let audit = audit(&trajectory, config, world, 4 * config.kappa);
    // Many samples riding a limit add up in J_s, so the dynamic limits are
    // judged on the dense audit instead.
    let within_limits = costs.state <= PENALTY_TOLERANCE
        || (audit.worst_violation(config.safety_distance) <= AUDIT_TOLERANCE && audit.max_ground_height <= GROUND_HEIGHT_TOLERANCE);
    let success = within_limits && costs.collision <= PENALTY_TOLERANCE && costs.nonholonomic <= PENALTY_TOLERANCE;
    Ok(OptimizeResult {
        trajectory,
        costs,
        total_cost,
        solver: report,
        success,
        audit,
        wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
        log,
    })
}

/// Central-difference check of [`Problem::evaluate`]; returns
/// ‖g − g_fd‖ / max(‖g_fd‖, 1e-12).
pub fn gradient_check(problem: &Problem, x: &[f64], step: f64) -> Result<f64, OptimizeError> {
    let n = x.len();
    let mut g = vec![0.0; n];
    problem.evaluate(x, &mut g)?;
    let mut scratch = vec![0.0; n];
    let mut xp = x.to_vec();
    let (mut err, mut norm) = (0.0, 0.0);
    for i in 0..n {
        xp[i] = x[i] + step;
        let fp = problem.evaluate(&xp, &mut scratch)?.0;
        xp[i] = x[i] - step;
        let fm = problem.evaluate(&xp, &mut scratch)?.0;
        xp[i] = x[i];
        let fd = (fp - fm) / (2.0 * step);
        err += (fd - g[i]).powi(2);
        norm += fd * fd;
    }
    Ok(err.sqrt() / norm.sqrt().max(1e-12))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::WorldSpec;
    use approx::assert_relative_eq;

    fn open_world() -> World {
        World::from_spec(&WorldSpec::empty([30.0, 20.0], 4.0, 0.25), None).unwrap()
    }

    fn straight(length: f64, pieces: usize, mode: Mode) -> InitialGuess {
        let start = Vector3::new(5.0, 10.0, if mode == Mode::Aerial { 1.5 } else { 0.0 });
        let end = start + Vector3::new(length, 0.0, 0.0);
        InitialGuess {
            head: BoundaryCondition::rest(start),
            tail: BoundaryCondition::rest(end),
            waypoints: (1..pieces).map(|i| start.lerp(&end, i as f64 / pieces as f64)).collect(),
            durations: vec![length / pieces as f64; pieces],
            modes: vec![mode; pieces],
        }
    }

    #[test]
    fn smoothing_is_c2() {
        let eps = 1e-2;
        assert_eq!(smoothed_max(-1.0, eps), (0.0, 0.0));
        assert_eq!(smoothed_max(1.0, eps), (1.0, 1.0));
        let (v, d) = smoothed_max(eps, eps);
        assert_relative_eq!(v, eps, epsilon = 1e-15);
        assert_relative_eq!(d, 1.0, epsilon = 1e-12);
        for k in 1..100 {
            let x = eps * k as f64 / 100.0;
            let h = 1e-8;
            let fd = (smoothed_max(x + h, eps).0 - smoothed_max(x - h, eps).0) / (2.0 * h);
            assert!((fd - smoothed_max(x, eps).1).abs() < 1e-6);
            assert!(smoothed_max(x, eps).1 >= 0.0);
        }
    }

    #[test]
    fn circle_heading_rate() {
        let (r, w) = (2.0, 0.7);
        let th: f64 = 0.4;
        let v = Vector3::new(-r * w * th.sin(), r * w * th.cos(), 0.0);
        let a = Vector3::new(-r * w * w * th.cos(), -r * w * w * th.sin(), 0.0);
        let j = Vector3::new(r * w.powi(3) * th.sin(), -r * w.powi(3) * th.cos(), 0.0);
        let h = heading_terms(&v, &a, &j, 0.0);
        assert_relative_eq!(h.rate, (r * w) / r, epsilon = 1e-12);
        assert!(h.accel.abs() < 1e-12);
    }

    #[test]
    fn heading_partials_match_differences() {
        let v = Vector3::new(0.7, -0.4, 0.2);
        let a = Vector3::new(0.3, 1.1, -0.5);
        let j = Vector3::new(-0.8, 0.6, 0.1);
        let h = heading_terms(&v, &a, &j, 1e-3);
        let eps = 1e-7;
        for d in 0..3 {
            let mut e = Vector3::zeros();
            e[d] = eps;
            let fd = |f: &dyn Fn(&HeadingTerms) -> f64, dv: Vector3<f64>, da: Vector3<f64>, dj: Vector3<f64>| {
                (f(&heading_terms(&(v + dv), &(a + da), &(j + dj), 1e-3)) - f(&heading_terms(&(v - dv), &(a - da), &(j - dj), 1e-3))) / (2.0 * eps)
            };
            let z = Vector3::zeros();
            assert!((fd(&|t| t.rate, e, z, z) - h.rate_dv[d]).abs() < 1e-6);
            assert!((fd(&|t| t.rate, z, e, z) - h.rate_da[d]).abs() < 1e-6);
            assert!((fd(&|t| t.accel, e, z, z) - h.accel_dv[d]).abs() < 1e-6);
            assert!((fd(&|t| t.accel, z, e, z) - h.accel_da[d]).abs() < 1e-6);
            assert!((fd(&|t| t.accel, z, z, e) - h.accel_dj[d]).abs() < 1e-6);
        }
    }

    #[test]
    fn time_cost_and_layout() {
        let world = open_world();
        let config = OptimizerConfig::default();
        let mut guess = straight(6.0, 3, Mode::Terrestrial);
        guess.durations = vec![1.0, 2.0, 1.0];
        let problem = Problem::new(&guess, &config, &world).unwrap();
        assert_eq!(problem.dimension(), 2 * 2 + 3);
        let x = problem.pack(&guess.waypoints, &guess.durations);
        let (q, t) = problem.unpack(&x);
        assert_eq!(q, guess.waypoints);
        for (a, b) in t.iter().zip(&guess.durations) {
            assert_relative_eq!(a, b, epsilon = 1e-14);
        }
        let mut g = vec![0.0; x.len()];
        let (_, costs) = problem.evaluate(&x, &mut g).unwrap();
        assert_relative_eq!(costs.time, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn aerial_curvature_is_not_penalized() {
        let world = open_world();
        let config = OptimizerConfig::default();
        let mut guess = straight(6.0, 3, Mode::Aerial);
        guess.waypoints[0].y += 1.5;
        guess.waypoints[1].y -= 1.5;
        let problem = Problem::new(&guess, &config, &world).unwrap();
        let x = problem.pack(&guess.waypoints, &guess.durations);
        let mut g = vec![0.0; x.len()];
        assert_eq!(problem.evaluate(&x, &mut g).unwrap().1.nonholonomic, 0.0);
    }

    #[test]
    fn single_violation_contributes_its_excess() {
        // One constraint point with |v|² = v_max² + 1: the head sample of a
        // piece that starts at speed.
        let world = open_world();
        let config = OptimizerConfig { kappa: 4, ..Default::default() };
        let speed = (config.v_max * config.v_max + 1.0).sqrt();
        let guess = InitialGuess {
            head: BoundaryCondition { p: Vector3::new(5.0, 10.0, 1.5), v: Vector3::new(speed, 0.0, 0.0), a: Vector3::zeros() },
            tail: BoundaryCondition { p: Vector3::new(5.0 + 0.5 * speed, 10.0, 1.5), v: Vector3::zeros(), a: Vector3::zeros() },
            waypoints: vec![],
            durations: vec![1.0],
            modes: vec![Mode::Aerial],
        };
        let problem = Problem::new(&guess, &config, &world).unwrap();
        let traj = problem.trajectory(&problem.pack(&[], &[1.0])).unwrap();
        let first = smoothed_max(traj.eval_piece(0, 0.0, 1).norm_squared() - config.v_max.powi(2), config.smoothing).0;
        assert_relative_eq!(first, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn collision_gradient_points_away_from_obstacles() {
        let spec = WorldSpec::Forest {
            size: [12.0, 12.0],
            height: 3.0,
            resolution: 0.2,
            forest: crate::world::ForestParams { obstacles: 12, seed: 4, ..Default::default() },
        };
        let world = World::from_spec(&spec, None).unwrap();
        let d_s = 0.8;
        let mut active = 0;
        for i in 0..40 {
            for j in 0..40 {
                let p = Vector3::new(0.5 + 0.28 * i as f64, 0.5 + 0.28 * j as f64, 1.0);
                for mode in [Mode::Terrestrial, Mode::Aerial] {
                    let (e, grad_e) = clearance(&world, mode, &p);
                    let (_, slope) = smoothed_max(d_s - e, 1e-2);
                    if slope > 0.0 && grad_e.norm() > 0.0 {
                        // Cost gradient w.r.t. p is -slope * grad_e.
                        assert!((-slope * grad_e).dot(&grad_e) < 0.0);
                        active += 1;
                    }
                }
            }
        }
        assert!(active > 20);
    }

    #[test]
    fn half_clearance_costs_half_distance() {
        let world = open_world();
        let p = Vector3::new(15.0, 10.0, 1.0);
        let (e, _) = clearance(&world, Mode::Aerial, &p);
        let d_s = e + 0.3;
        assert_relative_eq!(smoothed_max(d_s - e, 1e-2).0, 0.3, epsilon = 1e-12);
    }

    #[test]
    fn gradient_matches_differences_with_obstacles() {
        let spec = WorldSpec::Shapes {
            size: [30.0, 20.0],
            height: 4.0,
            resolution: 0.25,
            cylinders: vec![crate::world::Cylinder { center: [8.0, 10.3], radius: 0.5, height: 1.0 }],
            boxes: vec![],
        };
        let world = World::from_spec(&spec, None).unwrap();
        let config = OptimizerConfig { safety_distance: 0.8, ..Default::default() };
        let mut guess = straight(6.0, 4, Mode::Terrestrial);
        guess.modes = vec![Mode::Terrestrial, Mode::Aerial, Mode::Aerial, Mode::Terrestrial];
        guess.waypoints[1].z = 1.2;
        guess.durations = vec![0.8, 1.1, 0.9, 0.7];
        let problem = Problem::new(&guess, &config, &world).unwrap();
        let x = problem.pack(&guess.waypoints, &guess.durations);
        let err = gradient_check(&problem, &x, 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn straight_line_time_is_near_bang_bang() {
        let world = open_world();
        // Quintic pieces only approach the trapezoidal profile when they are
        // short relative to the acceleration phase, and convergence is slow.
        let mut config = OptimizerConfig::default();
        config.solver.max_iterations = 2000;
        let length = 10.0;
        let guess = straight(length, 20, Mode::Terrestrial);
        let result = optimize(&guess, &config, &world).unwrap();
        assert!(result.success, "{:?}", result.costs);
        assert!(result.costs.collision == 0.0 && result.costs.nonholonomic < 1e-12);
        let bound = length / config.v_max + config.v_max / config.a_max;
        let total = result.trajectory.total_duration();
        assert!((total - bound).abs() / bound < 0.05, "{total} vs {bound}");
        assert!(result.log.windows(2).all(|w| w[1].total <= w[0].total));
    }

    #[test]
    fn warm_and_cold_runs_agree() {
        let world = open_world();
        let config = OptimizerConfig::default();
        let guess = straight(8.0, 4, Mode::Terrestrial);
        let a = optimize(&guess, &config, &world).unwrap();
        let b = optimize(&guess, &config, &world).unwrap();
        assert!((a.total_cost - b.total_cost).abs() < 1e-6);
    }
}
