//! Benchmark suites shared by the command line and the acceptance tests.
//! Every suite is a pure function of its configuration.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::time::Instant;

use crate::dynamics::{ControlInput, Mode, PhysicalParams};
use crate::error::{Error, Result};
use crate::flatness::{wrap_angle, FlatOutput, ReferencePoint, ReferenceTrack};
use crate::minco::MincoTrajectory;
use crate::nmpc::NmpcConfig;
use crate::pipeline::{plan_course, reference_track, sequence, PlannerConfig};
use crate::references::Lemniscate;
use crate::search::Pose;
use crate::sim::{run_closed_loop, Bounds, Disturbance, RunMetrics, RunStatus, SimConfig, SimRun};
use crate::world::{ForestParams, World, WorldSpec};

pub const SUITES: [&str; 6] = ["forest-500", "goals-course", "lemniscate-2d", "lemniscate-3d", "indi-ab", "equilibria"];

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn percentile(xs: &[f64], q: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    s[((s.len() - 1) as f64 * q).round() as usize]
}

/// Arc length from a dense polyline through the trajectory.
pub fn trajectory_length(traj: &MincoTrajectory, samples_per_piece: usize) -> f64 {
    let n = traj.pieces() * samples_per_piece.max(1);
    let total = traj.total_duration();
    let mut prev = traj.derivative(0.0, 0);
    let mut len = 0.0;
    for k in 1..=n {
        let p = traj.derivative(total * k as f64 / n as f64, 0);
        len += (p - prev).norm();
        prev = p;
    }
    len
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

// ---------------------------------------------------------------- forest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestSuiteConfig {
    pub seeds: usize,
    pub first_seed: u64,
    pub size: [f64; 2],
    pub height: f64,
    pub resolution: f64,
    /// Obstacle layout; the seed field is replaced per run.
    pub forest: ForestParams,
    pub start: Pose,
    pub goal: Pose,
    pub planner: PlannerConfig,
}

impl Default for ForestSuiteConfig {
    fn default() -> Self {
        let start = Pose::ground(2.0, 2.0, PI / 4.0);
        let goal = Pose::ground(48.0, 48.0, PI / 4.0);
        let forest = ForestParams {
            clear: vec![[start.position.x, start.position.y], [goal.position.x, goal.position.y]],
            ..Default::default()
        };
        Self {
            seeds: 500,
            first_seed: 0,
            size: [50.0, 50.0],
            height: 3.0,
            resolution: 0.2,
            forest,
            start,
            goal,
            planner: PlannerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestSeedResult {
    pub seed: u64,
    pub success: bool,
    pub error: Option<String>,
    pub length: f64,
    pub duration: f64,
    pub front_end_ms: f64,
    pub back_end_ms: f64,
    pub pieces: usize,
    pub mode_switches: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestReport {
    pub runs: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Means over successful runs.
    pub mean_length: f64,
    pub mean_front_end_ms: f64,
    pub mean_back_end_ms: f64,
    pub p95_front_end_ms: f64,
    pub p95_back_end_ms: f64,
    pub results: Vec<ForestSeedResult>,
}

pub fn forest_seed(cfg: &ForestSuiteConfig, seed: u64) -> ForestSeedResult {
    let mut out = ForestSeedResult {
        seed,
        success: false,
        error: None,
        length: 0.0,
        duration: 0.0,
        front_end_ms: 0.0,
        back_end_ms: 0.0,
        pieces: 0,
        mode_switches: 0,
    };
    let spec = WorldSpec::Forest {
        size: cfg.size,
        height: cfg.height,
        resolution: cfg.resolution,
        forest: ForestParams { seed, ..cfg.forest.clone() },
    };
    let world = match World::from_spec(&spec, None) {
        Ok(w) => w,
        Err(e) => {
            out.error = Some(e.to_string());
            return out;
        }
    };
    match crate::pipeline::plan_leg(&cfg.start, &cfg.goal, &world, &cfg.planner) {
        Ok(leg) => {
            out.front_end_ms = leg.search.elapsed_ms;
            out.back_end_ms = leg.optimized.wall_time_ms;
            out.pieces = leg.search.pieces();
            out.mode_switches = leg.search.mode_switches();
            out.length = trajectory_length(&leg.optimized.trajectory, 16);
            out.duration = leg.optimized.trajectory.total_duration();
            out.success = leg.optimized.success;
            if !out.success {
                out.error = Some(format!("penalties above threshold: {:?}", leg.optimized.costs));
            }
        }
        Err(e) => out.error = Some(e.to_string()),
    }
    out
}

pub fn forest_suite(cfg: &ForestSuiteConfig, jobs: usize) -> Result<ForestReport> {
    let seeds: Vec<u64> = (0..cfg.seeds as u64).map(|i| cfg.first_seed + i).collect();
    let results: Vec<ForestSeedResult> = pool(jobs)?.install(|| seeds.par_iter().map(|&s| forest_seed(cfg, s)).collect());
    let ok: Vec<&ForestSeedResult> = results.iter().filter(|r| r.success).collect();
    let field = |f: fn(&ForestSeedResult) -> f64| ok.iter().map(|r| f(r)).collect::<Vec<_>>();
    let (front, back) = (field(|r| r.front_end_ms), field(|r| r.back_end_ms));
    Ok(ForestReport {
        runs: results.len(),
        successes: ok.len(),
        success_rate: if results.is_empty() { 0.0 } else { ok.len() as f64 / results.len() as f64 },
        mean_length: mean(&field(|r| r.length)),
        mean_front_end_ms: mean(&front),
        mean_back_end_ms: mean(&back),
        p95_front_end_ms: percentile(&front, 0.95),
        p95_back_end_ms: percentile(&back, 0.95),
        results,
    })
}

// ---------------------------------------------------------------- goals course

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GoalsCourseConfig {
    pub world: WorldSpec,
    pub start: Pose,
    pub goals: Vec<Pose>,
    pub planner: PlannerConfig,
    pub reference_dt: f64,
    /// Time simulated past the last arrival, s.
    pub settle: f64,
    pub position_tolerance: f64,
    pub heading_tolerance: f64,
    pub nmpc: NmpcConfig,
    pub sim: SimConfig,
    pub params: PhysicalParams,
}

impl Default for GoalsCourseConfig {
    fn default() -> Self {
        Self {
            world: WorldSpec::empty([14.0, 10.0], 3.0, 0.2),
            start: Pose::ground(2.0, 2.0, 0.0),
            goals: vec![Pose::ground(2.0, 6.0, 0.0), Pose::ground(9.0, 6.0, PI), Pose::ground(9.0, 2.0, PI), Pose::ground(5.0, 2.0, 0.0)],
            planner: PlannerConfig::default(),
            reference_dt: 0.07,
            settle: 1.0,
            position_tolerance: 0.3,
            heading_tolerance: 0.3,
            nmpc: NmpcConfig::default(),
            sim: SimConfig::default(),
            params: PhysicalParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalCheck {
    pub arrival_time: f64,
    pub position_error: f64,
    /// NaN when the goal has no heading.
    pub heading_error: f64,
    pub reached: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CourseRun {
    pub lambda: [f64; 4],
    pub plan_error: Option<String>,
    pub plan_ms: f64,
    pub status: Option<RunStatus>,
    pub goals: Vec<GoalCheck>,
    pub all_reached: bool,
    pub metrics: Option<RunMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalsCourseReport {
    pub nominal: CourseRun,
    pub without_nonholonomy: CourseRun,
}

/// Plans and tracks the course once, returning the summary and the raw run.
pub fn run_course(cfg: &GoalsCourseConfig) -> Result<(CourseRun, Option<SimRun>)> {
    let world = World::from_spec(&cfg.world, None)?;
    let mut out = CourseRun {
        lambda: cfg.planner.optimizer.lambda,
        plan_error: None,
        plan_ms: 0.0,
        status: None,
        goals: vec![],
        all_reached: false,
        metrics: None,
    };
    let started = Instant::now();
    let legs = match plan_course(&cfg.start, &cfg.goals, &world, &cfg.planner) {
        Ok(legs) => legs,
        Err(e) => {
            out.plan_error = Some(e.to_string());
            return Ok((out, None));
        }
    };
    out.plan_ms = started.elapsed().as_secs_f64() * 1e3;
    let seq = sequence(&legs);
    let track = reference_track(&seq, cfg.reference_dt, cfg.start.heading.unwrap_or(0.0), &cfg.params)?;
    let sim = SimConfig { duration: Some(seq.duration() + cfg.settle), ..cfg.sim.clone() };
    let ([x0, y0], [x1, y1]) = world.bounds();
    let bounds = Bounds { min: [x0, y0, 0.0], max: [x1, y1, world.field(Mode::Aerial).geometry.extent().1.z] };
    let run = run_closed_loop(&track, None, &cfg.nmpc, &sim, &cfg.params, Some(bounds))?;
    for (goal, t) in cfg.goals.iter().zip(seq.arrival_times()) {
        let check = match run.log.iter().min_by(|a, b| (a.t - t).abs().total_cmp(&(b.t - t).abs())) {
            Some(r) if (r.t - t).abs() <= cfg.sim.dt_ctrl => {
                let position_error = (r.position() - goal.position).norm();
                let yaw = nalgebra::UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(r.qw, r.qx, r.qy, r.qz));
                let heading_error = goal.heading.map_or(f64::NAN, |h| wrap_angle(crate::dynamics::heading_of(&yaw.to_rotation_matrix().into_inner()) - h));
                let reached = position_error <= cfg.position_tolerance && !(heading_error.abs() > cfg.heading_tolerance);
                GoalCheck { arrival_time: t, position_error, heading_error, reached }
            }
            // The run ended before this arrival.
            _ => GoalCheck { arrival_time: t, position_error: f64::INFINITY, heading_error: f64::NAN, reached: false },
        };
        out.goals.push(check);
    }
    out.all_reached = matches!(run.status, RunStatus::Completed) && out.goals.iter().all(|g| g.reached);
    out.status = Some(run.status.clone());
    out.metrics = Some(run.metrics.clone());
    Ok((out, Some(run)))
}

/// The course with the configured weights and again without the
/// nonholonomic penalty.
pub fn goals_course_suite(cfg: &GoalsCourseConfig) -> Result<GoalsCourseReport> {
    let nominal = run_course(cfg)?.0;
    let mut ablated = cfg.clone();
    ablated.planner.optimizer.lambda[3] = 0.0;
    let without_nonholonomy = run_course(&ablated)?.0;
    Ok(GoalsCourseReport { nominal, without_nonholonomy })
}

// ---------------------------------------------------------------- lemniscates

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LemniscateConfig {
    pub lemniscate: Lemniscate,
    pub reference_dt: f64,
    /// Laps flown; the reference runs one horizon further so the tail of the
    /// last window is not a held end point.
    pub laps: f64,
    /// Window around each mode transition checked for vertical-speed spikes, s.
    pub transition_window: f64,
    pub nmpc: NmpcConfig,
    pub sim: SimConfig,
    pub params: PhysicalParams,
}

impl LemniscateConfig {
    pub fn planar() -> Self {
        Self::with(Lemniscate::planar())
    }

    pub fn hybrid() -> Self {
        Self::with(Lemniscate::hybrid())
    }

    fn with(lemniscate: Lemniscate) -> Self {
        Self {
            lemniscate,
            reference_dt: 0.07,
            laps: 1.0,
            transition_window: 0.2,
            nmpc: NmpcConfig::default(),
            sim: SimConfig::default(),
            params: PhysicalParams::default(),
        }
    }
}

impl Default for LemniscateConfig {
    fn default() -> Self {
        Self::planar()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LemniscateReport {
    pub peak_speed: f64,
    pub peak_acceleration: f64,
    pub status: RunStatus,
    pub metrics: RunMetrics,
    pub transitions: Vec<f64>,
    /// Largest |v_z| within the transition windows.
    pub max_transition_vertical_speed: f64,
    /// Largest position jump between consecutive log rows.
    pub max_position_step: f64,
}

pub fn lemniscate_run(cfg: &LemniscateConfig) -> Result<(LemniscateReport, SimRun)> {
    let base = cfg.lemniscate;
    let flown = base.period() * cfg.laps;
    let horizon = cfg.nmpc.horizon as f64 * cfg.nmpc.dt;
    let extended = Lemniscate { duration: flown + horizon, ..base };
    let v0 = extended.derivative(0.0, 1);
    let track = reference_track(&extended, cfg.reference_dt, v0.y.atan2(v0.x), &cfg.params)?;
    let sim = SimConfig { duration: Some(flown), ..cfg.sim.clone() };
    let run = run_closed_loop(&track, None, &cfg.nmpc, &sim, &cfg.params, None)?;
    let transitions: Vec<f64> = (0..cfg.laps.ceil() as usize)
        .flat_map(|lap| base.transitions().into_iter().map(move |t| t + lap as f64 * base.period()))
        .filter(|t| *t <= flown)
        .collect();
    let max_transition_vertical_speed = run
        .log
        .iter()
        .filter(|r| transitions.iter().any(|t| (r.t - t).abs() <= cfg.transition_window))
        .fold(0.0_f64, |m, r| m.max(r.vz.abs()));
    let max_position_step = run.log.windows(2).fold(0.0_f64, |m, w| m.max((w[1].position() - w[0].position()).norm()));
    let (peak_speed, peak_acceleration) = Lemniscate { duration: flown, ..base }.peak_speed_and_acceleration();
    let report = LemniscateReport {
        peak_speed,
        peak_acceleration,
        status: run.status.clone(),
        metrics: run.metrics.clone(),
        transitions,
        max_transition_vertical_speed,
        max_position_step,
    };
    Ok((report, run))
}

// ---------------------------------------------------------------- disturbance A/B

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndiAbConfig {
    pub hover_position: [f64; 3],
    pub torque: [f64; 3],
    pub onset: f64,
    pub duration: f64,
    pub seeds: Vec<u64>,
    /// Trailing window over which the disturbance estimate is averaged, s.
    pub estimate_window: f64,
    pub nmpc: NmpcConfig,
    pub sim: SimConfig,
    pub params: PhysicalParams,
}

impl Default for IndiAbConfig {
    fn default() -> Self {
        Self {
            hover_position: [0.0, 0.0, 1.5],
            torque: [0.05, 0.0, 0.0],
            onset: 1.0,
            duration: 6.0,
            seeds: (0..5).collect(),
            estimate_window: 1.0,
            nmpc: NmpcConfig::default(),
            sim: SimConfig::default(),
            params: PhysicalParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndiPair {
    pub seed: u64,
    pub rmse_with: f64,
    pub rmse_without: f64,
    pub ratio: f64,
    pub estimate: [f64; 3],
    /// |estimate − τ_e| / |τ_e|.
    pub estimate_error: f64,
    pub completed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndiAbReport {
    pub pairs: Vec<IndiPair>,
    pub worst_ratio: f64,
    pub worst_estimate_error: f64,
}

pub fn indi_ab(cfg: &IndiAbConfig, jobs: usize) -> Result<IndiAbReport> {
    let p = Vector3::from(cfg.hover_position);
    let track = ReferenceTrack::constant(ReferencePoint::hover(p, 0.0, &cfg.params));
    let tau = Vector3::from(cfg.torque);
    let bounds = Bounds { min: [p.x - 5.0, p.y - 5.0, 0.0], max: [p.x + 5.0, p.y + 5.0, p.z + 5.0] };
    let run = |seed: u64, enabled: bool| -> Result<SimRun> {
        let mut sim = cfg.sim.clone();
        sim.seed = seed;
        sim.duration = Some(cfg.duration);
        sim.disturbance = Disturbance { torque: cfg.torque, force: [0.0; 3], start_time: cfg.onset };
        sim.indi.enabled = enabled;
        Ok(run_closed_loop(&track, None, &cfg.nmpc, &sim, &cfg.params, Some(bounds))?)
    };
    let pairs: Vec<Result<IndiPair>> = pool(jobs)?.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let with = run(seed, true)?;
                let without = run(seed, false)?;
                let window: Vec<_> = with.log.iter().filter(|r| r.t >= cfg.duration - cfg.estimate_window).collect();
                let n = window.len().max(1) as f64;
                let est = window.iter().fold(Vector3::zeros(), |s, r| s + Vector3::new(r.dist_est_x, r.dist_est_y, r.dist_est_z)) / n;
                let (a, b) = (with.metrics.rmse_position, without.metrics.rmse_position);
                Ok(IndiPair {
                    seed,
                    rmse_with: a,
                    rmse_without: b,
                    ratio: if b > 0.0 { a / b } else { f64::INFINITY },
                    estimate: est.into(),
                    estimate_error: (est - tau).norm() / tau.norm().max(f64::MIN_POSITIVE),
                    completed: matches!(with.status, RunStatus::Completed) && matches!(without.status, RunStatus::Completed),
                })
            })
            .collect()
    });
    let pairs = pairs.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(IndiAbReport {
        worst_ratio: pairs.iter().fold(0.0_f64, |m, p| m.max(p.ratio)),
        worst_estimate_error: pairs.iter().fold(0.0_f64, |m, p| m.max(p.estimate_error)),
        pairs,
    })
}

// ---------------------------------------------------------------- equilibria

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EquilibriaConfig {
    pub hover_position: [f64; 3],
    pub ground_position: [f64; 2],
    pub yaw: f64,
    pub duration: f64,
    pub nmpc: NmpcConfig,
    pub sim: SimConfig,
    pub params: PhysicalParams,
}

impl Default for EquilibriaConfig {
    fn default() -> Self {
        Self {
            hover_position: [0.0, 0.0, 1.5],
            ground_position: [0.0, 0.0],
            yaw: 0.3,
            duration: 10.0,
            nmpc: NmpcConfig::default(),
            // Noise-free so the fixed point is observable to 1e-3.
            sim: SimConfig { gyro_noise: 0.0, ..SimConfig::default() },
            params: PhysicalParams::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumResult {
    pub name: String,
    /// Largest |u − u_ref| component over the run.
    pub max_input_error: f64,
    pub max_position_drift: f64,
    pub completed: bool,
}

pub fn equilibria(cfg: &EquilibriaConfig) -> Result<Vec<EquilibriumResult>> {
    let [gx, gy] = cfg.ground_position;
    let cases = [
        ("hover", ReferencePoint::hover(Vector3::from(cfg.hover_position), cfg.yaw, &cfg.params)),
        ("ground-rest", ReferencePoint::ground_rest(Vector3::new(gx, gy, 0.0), cfg.yaw, &cfg.params)),
    ];
    let sim = SimConfig { duration: Some(cfg.duration), ..cfg.sim.clone() };
    cases
        .into_iter()
        .map(|(name, point)| {
            let track = ReferenceTrack::constant(point);
            let p = point.state.position;
            let bounds = Bounds { min: [p.x - 5.0, p.y - 5.0, 0.0], max: [p.x + 5.0, p.y + 5.0, p.z + 5.0] };
            let run = run_closed_loop(&track, Some(point.state), &cfg.nmpc, &sim, &cfg.params, Some(bounds))?;
            let u_ref = point.input.to_vector();
            let max_input_error = run.log.iter().fold(0.0_f64, |m, r| {
                let u = ControlInput::new(r.thrust, Vector3::new(r.tau_x, r.tau_y, r.tau_z)).to_vector();
                m.max((u - u_ref).amax())
            });
            let max_position_drift = run.log.iter().fold(0.0_f64, |m, r| m.max((r.position() - p).norm()));
            Ok(EquilibriumResult {
                name: name.to_string(),
                max_input_error,
                max_position_drift,
                completed: matches!(run.status, RunStatus::Completed),
            })
        })
        .collect()
}

