//! Hybrid-state A* over ground (unicycle) and flight (double integrator)
//! motion primitives.
//!
//! Ground nodes carry `(x, y, v, φ)`, flight nodes `(p, v)`. Any ground node
//! may take off; flight nodes land through a primitive whose vertical
//! acceleration is solved so the motion ends on the ground plane.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use rustc_hash::{FxHashMap, FxHashSet};
use std::collections::BinaryHeap;
use std::f64::consts::PI;
use std::time::Instant;

use crate::dynamics::Mode;
use crate::error::SearchError;
use crate::flatness::wrap_angle;
use crate::minco::BoundaryCondition;
use crate::optimizer::InitialGuess;
use crate::world::World;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub v_max: f64,
    pub a_max: f64,
    pub omega_max: f64,
    /// Number of evenly spaced turn-rate samples in `[-Ω_max, Ω_max]`.
    pub omega_samples: usize,
    /// Primitive duration, s.
    pub tau: f64,
    /// Cost multiplier on flight primitives.
    pub rho_air: f64,
    pub safety_distance: f64,
    /// Largest vertical touchdown speed, m/s.
    pub landing_speed: f64,
    /// Try a direct connection to the goal every this many expansions.
    pub shot_interval: usize,
    pub max_expansions: usize,
    /// Pruning cell edge as a multiple of the map resolution.
    pub position_bin: f64,
    pub velocity_bin: f64,
    pub heading_bin: f64,
    /// Position tolerance for accepting a node as the goal, m.
    pub goal_tolerance: f64,
    pub heading_tolerance: f64,
    /// Largest path curvature of a ground connection, 1/m.
    pub max_curvature: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            v_max: 2.0,
            a_max: 2.0,
            omega_max: 1.5,
            omega_samples: 5,
            tau: 0.5,
            rho_air: 3.0,
            safety_distance: 0.4,
            landing_speed: 0.5,
            shot_interval: 10,
            max_expansions: 200_000,
            position_bin: 2.0,
            velocity_bin: 0.5,
            heading_bin: PI / 8.0,
            goal_tolerance: 0.3,
            heading_tolerance: PI / 8.0,
            max_curvature: 2.0,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let positive = [
            self.v_max,
            self.a_max,
            self.omega_max,
            self.tau,
            self.safety_distance,
            self.position_bin,
            self.velocity_bin,
            self.heading_bin,
            self.goal_tolerance,
            self.max_curvature,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || self.omega_samples < 1 || !(self.rho_air >= 1.0) {
            return Err(SearchError::InvalidQuery("search limits must be positive and rho_air >= 1".into()));
        }
        Ok(())
    }
}

/// Start or goal pose. Ground poses have z = 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pose {
    pub position: Vector3<f64>,
    #[serde(default)]
    pub heading: Option<f64>,
    pub mode: Mode,
}

impl Pose {
    pub fn ground(x: f64, y: f64, heading: f64) -> Self {
        Self { position: Vector3::new(x, y, 0.0), heading: Some(heading), mode: Mode::Terrestrial }
    }

    pub fn air(position: Vector3<f64>) -> Self {
        Self { position, heading: None, mode: Mode::Aerial }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kinematics {
    Ground { x: f64, y: f64, v: f64, phi: f64 },
    /// `heading` remembers the last horizontal direction of travel.
    Air { p: Vector3<f64>, v: Vector3<f64>, heading: f64 },
}

impl Kinematics {
    pub fn position(&self) -> Vector3<f64> {
        match *self {
            Kinematics::Ground { x, y, .. } => Vector3::new(x, y, 0.0),
            Kinematics::Air { p, .. } => p,
        }
    }

    pub fn mode(&self) -> Mode {
        match self {
            Kinematics::Ground { .. } => Mode::Terrestrial,
            Kinematics::Air { .. } => Mode::Aerial,
        }
    }

    pub fn velocity(&self) -> Vector3<f64> {
        match *self {
            Kinematics::Ground { v, phi, .. } => Vector3::new(v * phi.cos(), v * phi.sin(), 0.0),
            Kinematics::Air { v, .. } => v,
        }
    }

    pub fn heading(&self) -> f64 {
        match *self {
            Kinematics::Ground { phi, .. } => phi,
            Kinematics::Air { heading, .. } => heading,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Root,
    Roll { a: f64, omega: f64 },
    Fly { a: Vector3<f64> },
    Land { a: Vector3<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Successor {
    pub state: Kinematics,
    pub primitive: Primitive,
    /// Mode of the piece leading to `state`.
    pub mode: Mode,
    pub cost: f64,
}

/// Closed-form unicycle rollout with constant `a` and `omega`.
pub fn roll(x: f64, y: f64, v: f64, phi: f64, a: f64, omega: f64, t: f64) -> Kinematics {
    let phi_t = phi + omega * t;
    let v_t = v + a * t;
    let (dx, dy) = if omega.abs() < 1e-9 {
        let s = v * t + 0.5 * a * t * t;
        (s * phi.cos(), s * phi.sin())
    } else {
        let w2 = omega * omega;
        (
            (v_t * phi_t.sin() - v * phi.sin()) / omega + a * (phi_t.cos() - phi.cos()) / w2,
            (-v_t * phi_t.cos() + v * phi.cos()) / omega + a * (phi_t.sin() - phi.sin()) / w2,
        )
    };
    Kinematics::Ground { x: x + dx, y: y + dy, v: v_t, phi: wrap_angle(phi_t) }
}

pub fn fly(p: &Vector3<f64>, v: &Vector3<f64>, a: &Vector3<f64>, t: f64) -> (Vector3<f64>, Vector3<f64>) {
    (p + v * t + a * (0.5 * t * t), v + a * t)
}

fn horizontal_heading(v: &Vector3<f64>, fallback: f64) -> f64 {
    if v.x.hypot(v.y) > 0.05 {
        v.y.atan2(v.x)
    } else {
        fallback
    }
}

/// Flight start state matching a ground state.
fn as_air(state: &Kinematics) -> (Vector3<f64>, Vector3<f64>, f64) {
    match *state {
        Kinematics::Ground { .. } => (state.position(), state.velocity(), state.heading()),
        Kinematics::Air { p, v, heading } => (p, v, heading),
    }
}

/// Position along a primitive at time `t` from `from`.
pub fn rollout(from: &Kinematics, primitive: &Primitive, t: f64) -> Kinematics {
    match (*from, *primitive) {
        (Kinematics::Ground { x, y, v, phi }, Primitive::Roll { a, omega }) => roll(x, y, v, phi, a, omega, t),
        (_, Primitive::Fly { a }) | (_, Primitive::Land { a }) => {
            let (p0, v0, h0) = as_air(from);
            let (p, v) = fly(&p0, &v0, &a, t);
            Kinematics::Air { p, v, heading: horizontal_heading(&v, h0) }
        }
        (state, _) => state,
    }
}

struct Checker<'a> {
    world: &'a World,
    cfg: &'a SearchConfig,
}

impl Checker<'_> {
    fn free(&self, p: &Vector3<f64>, mode: Mode) -> bool {
        self.world.in_bounds(p, mode) && self.world.distance(mode, p) >= self.cfg.safety_distance
    }

    fn steps(&self, travel: f64) -> usize {
        let step = 0.5 * self.world.occupancy.geometry.resolution;
        ((travel / step).ceil() as usize).max(2)
    }

    /// Samples the primitive no coarser than half a cell, skipping ahead by
    /// the clearance slack (the field is 1-Lipschitz).
    fn primitive_free(&self, from: &Kinematics, primitive: &Primitive, mode: Mode) -> bool {
        let tau = self.cfg.tau;
        let a = match primitive {
            Primitive::Roll { a, .. } => a.abs(),
            Primitive::Fly { a } | Primitive::Land { a } => a.norm(),
            Primitive::Root => 0.0,
        };
        let speed = from.velocity().norm() + a * tau;
        let min_dt = tau / self.steps(speed * tau) as f64;
        let mut t = 0.0;
        loop {
            t = (t + min_dt).min(tau);
            let mut p = rollout(from, primitive, t).position();
            // Touchdown lands exactly on the plane; allow round-off.
            if mode == Mode::Aerial && p.z < 0.0 && p.z > -1e-9 {
                p.z = 0.0;
            }
            if !self.world.in_bounds(&p, mode) {
                return false;
            }
            let slack = self.world.distance(mode, &p) - self.cfg.safety_distance;
            if slack < 0.0 {
                return false;
            }
            if t >= tau {
                return true;
            }
            if speed > 0.0 {
                t += (slack / speed - min_dt).max(0.0).min(tau - t);
            }
        }
    }
}

fn ground_accels(v: f64, cfg: &SearchConfig) -> Vec<f64> {
    let mut out = vec![-cfg.a_max, 0.0, cfg.a_max];
    let stop = -v / cfg.tau;
    if v > 0.0 && -stop < cfg.a_max && out.iter().all(|a| (a - stop).abs() > 1e-9) {
        out.push(stop);
    }
    out
}

fn turn_rates(cfg: &SearchConfig) -> Vec<f64> {
    let n = cfg.omega_samples;
    if n == 1 {
        return vec![0.0];
    }
    (0..n).map(|i| -cfg.omega_max + 2.0 * cfg.omega_max * i as f64 / (n - 1) as f64).collect()
}

fn air_accels(cfg: &SearchConfig) -> Vec<Vector3<f64>> {
    let s = [-cfg.a_max, 0.0, cfg.a_max];
    let mut out = Vec::with_capacity(27);
    for &ax in &s {
        for &ay in &s {
            for &az in &s {
                out.push(Vector3::new(ax, ay, az));
            }
        }
    }
    out
}

/// Ground successors of a ground node; empty for flight nodes.
pub fn expand_terrestrial(state: &Kinematics, world: &World, cfg: &SearchConfig) -> Vec<Successor> {
    ground_successors(state, world, cfg, &mut |_, _| true)
}

/// `wanted(state, cost)` filters candidates before the collision check.
fn ground_successors(state: &Kinematics, world: &World, cfg: &SearchConfig, wanted: &mut dyn FnMut(&Kinematics, f64) -> bool) -> Vec<Successor> {
    let Kinematics::Ground { v, .. } = *state else { return Vec::new() };
    let check = Checker { world, cfg };
    let mut out = Vec::new();
    for a in ground_accels(v, cfg) {
        let v_end = v + a * cfg.tau;
        if v_end < -1e-9 || v_end > cfg.v_max + 1e-9 {
            continue;
        }
        // The heading follows the velocity, so there is no turning on the
        // spot and the turn rate is bounded by the curvature limit.
        let mean_speed = 0.5 * (v + v_end.max(0.0));
        if mean_speed <= 1e-9 {
            continue;
        }
        for omega in turn_rates(cfg) {
            if omega.abs() > cfg.max_curvature * mean_speed + 1e-9 {
                continue;
            }
            let primitive = Primitive::Roll { a, omega };
            let mut next = rollout(state, &primitive, cfg.tau);
            if let Kinematics::Ground { v, .. } = &mut next {
                *v = v.max(0.0);
            }
            if !wanted(&next, cfg.tau) || !check.primitive_free(state, &primitive, Mode::Terrestrial) {
                continue;
            }
            out.push(Successor { state: next, primitive, mode: Mode::Terrestrial, cost: cfg.tau });
        }
    }
    out
}

/// Flight successors: free flight from any node (takeoff from ground
/// nodes) plus landing primitives from flight nodes.
pub fn expand_aerial(state: &Kinematics, world: &World, cfg: &SearchConfig) -> Vec<Successor> {
    air_successors(state, world, cfg, &mut |_, _| true)
}

fn air_successors(state: &Kinematics, world: &World, cfg: &SearchConfig, wanted: &mut dyn FnMut(&Kinematics, f64) -> bool) -> Vec<Successor> {
    let check = Checker { world, cfg };
    let (p0, v0, h0) = as_air(state);
    let tau = cfg.tau;
    let cost = cfg.rho_air * tau;
    let mut out = Vec::new();
    let min_z = |a: &Vector3<f64>| -> f64 {
        let mut z = p0.z.min(p0.z + v0.z * tau + 0.5 * a.z * tau * tau);
        if a.z != 0.0 {
            let t = -v0.z / a.z;
            if t > 0.0 && t < tau {
                z = z.min(p0.z + v0.z * t + 0.5 * a.z * t * t);
            }
        }
        z
    };
    for a in air_accels(cfg) {
        let (p, v) = fly(&p0, &v0, &a, tau);
        if v.norm() > cfg.v_max + 1e-9 || min_z(&a) < 0.0 || p.z > world.ceiling {
            continue;
        }
        // Leaving the ground needs a strictly positive climb.
        if state.mode() == Mode::Terrestrial && a.z <= 0.0 {
            continue;
        }
        let primitive = Primitive::Fly { a };
        let next = Kinematics::Air { p, v, heading: horizontal_heading(&v, h0) };
        if p.z <= 1e-9 || !wanted(&next, cost) || !check.primitive_free(state, &primitive, Mode::Aerial) {
            continue;
        }
        out.push(Successor {
            state: next,
            primitive,
            mode: Mode::Aerial,
            cost,
        });
    }
    if state.mode() == Mode::Aerial {
        for ax in [-cfg.a_max, 0.0, cfg.a_max] {
            for ay in [-cfg.a_max, 0.0, cfg.a_max] {
                let az = -2.0 * (p0.z + v0.z * tau) / (tau * tau);
                let a = Vector3::new(ax, ay, az);
                let (p, v) = fly(&p0, &v0, &a, tau);
                let vh = v.x.hypot(v.y);
                if az.abs() > cfg.a_max || v.z.abs() > cfg.landing_speed || vh > cfg.v_max || min_z(&a) < -1e-9 {
                    continue;
                }
                let primitive = Primitive::Land { a };
                let touchdown = Vector3::new(p.x, p.y, 0.0);
                let next = Kinematics::Ground { x: p.x, y: p.y, v: vh, phi: horizontal_heading(&v, h0) };
                if !wanted(&next, cost)
                    || !check.free(&touchdown, Mode::Terrestrial)
                    || !check.primitive_free(state, &primitive, Mode::Aerial)
                {
                    continue;
                }
                out.push(Successor {
                    state: next,
                    primitive,
                    mode: Mode::Aerial,
                    cost,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum BinKey {
    Ground([i64; 4]),
    Air([i64; 6]),
}

fn bin_of(state: &Kinematics, world: &World, cfg: &SearchConfig) -> BinKey {
    let cell = cfg.position_bin * world.occupancy.geometry.resolution;
    let q = |v: f64, s: f64| (v / s).floor() as i64;
    match *state {
        Kinematics::Ground { x, y, v, phi } => BinKey::Ground([
            q(x, cell),
            q(y, cell),
            q(v, cfg.velocity_bin),
            q(wrap_angle(phi) + PI, cfg.heading_bin),
        ]),
        Kinematics::Air { p, v, .. } => BinKey::Air([
            q(p.x, cell),
            q(p.y, cell),
            q(p.z, cell),
            q(v.x, cfg.velocity_bin),
            q(v.y, cfg.velocity_bin),
            q(v.z, cfg.velocity_bin),
        ]),
    }
}

#[derive(Debug, Clone, Copy)]
struct Node {
    state: Kinematics,
    g: f64,
    parent: usize,
    primitive: Primitive,
    mode: Mode,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Open {
    f: f64,
    h: f64,
    seq: usize,
    node: usize,
}

impl Eq for Open {}

impl Ord for Open {
    // Reversed so the max-heap pops the smallest f, then smallest h, then
    // the earliest insertion.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .f
            .total_cmp(&self.f)
            .then_with(|| other.h.total_cmp(&self.h))
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// One piece of the returned path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub end: Vector3<f64>,
    pub duration: f64,
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub start: Pose,
    pub goal: Pose,
    pub segments: Vec<Segment>,
    /// Densely sampled positions for plotting.
    pub path: Vec<Vector3<f64>>,
    pub cost: f64,
    pub explored: usize,
    pub elapsed_ms: f64,
}

impl SearchResult {
    pub fn pieces(&self) -> usize {
        self.segments.len()
    }

    pub fn modes(&self) -> Vec<Mode> {
        self.segments.iter().map(|s| s.mode).collect()
    }

    pub fn durations(&self) -> Vec<f64> {
        self.segments.iter().map(|s| s.duration).collect()
    }

    /// Interior waypoints (piece junctions).
    pub fn waypoints(&self) -> Vec<Vector3<f64>> {
        let n = self.segments.len();
        self.segments.iter().take(n.saturating_sub(1)).map(|s| s.end).collect()
    }

    pub fn length(&self) -> f64 {
        self.path.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }

    pub fn mode_switches(&self) -> usize {
        self.segments.windows(2).filter(|w| w[0].mode != w[1].mode).count()
    }

    /// Optimizer seed with rest boundary conditions at both ends.
    pub fn initial_guess(&self) -> InitialGuess {
        InitialGuess {
            head: BoundaryCondition::rest(self.start.position),
            tail: BoundaryCondition::rest(self.goal.position),
            waypoints: self.waypoints(),
            durations: self.durations(),
            modes: self.modes(),
        }
    }
}

/// Cubic Hermite connection in position space.
struct Hermite {
    p0: Vector3<f64>,
    p1: Vector3<f64>,
    m0: Vector3<f64>,
    m1: Vector3<f64>,
}

impl Hermite {
    fn at(&self, s: f64) -> Vector3<f64> {
        let (s2, s3) = (s * s, s * s * s);
        self.p0 * (2.0 * s3 - 3.0 * s2 + 1.0)
            + self.m0 * (s3 - 2.0 * s2 + s)
            + self.p1 * (-2.0 * s3 + 3.0 * s2)
            + self.m1 * (s3 - s2)
    }

    fn d1(&self, s: f64) -> Vector3<f64> {
        let s2 = s * s;
        self.p0 * (6.0 * s2 - 6.0 * s) + self.m0 * (3.0 * s2 - 4.0 * s + 1.0) + self.p1 * (-6.0 * s2 + 6.0 * s) + self.m1 * (3.0 * s2 - 2.0 * s)
    }

    fn d2(&self, s: f64) -> Vector3<f64> {
        self.p0 * (12.0 * s - 6.0) + self.m0 * (6.0 * s - 4.0) + self.p1 * (-12.0 * s + 6.0) + self.m1 * (6.0 * s - 2.0)
    }
}

/// Times at which a trapezoidal speed profile starting at `v0` and ending
/// at rest reaches each arc-length mark.
fn profile_times(marks: &[f64], v0: f64, v_max: f64, a_max: f64) -> Vec<f64> {
    let total = *marks.last().unwrap_or(&0.0);
    let speed = |s: f64| {
        (v0 * v0 + 2.0 * a_max * s)
            .sqrt()
            .min(v_max)
            .min((2.0 * a_max * (total - s).max(0.0)).sqrt())
            .max(0.05)
    };
    let mut times = vec![0.0];
    for w in marks.windows(2) {
        // Simpson rule on 1/v.
        let (a, b) = (w[0], w[1]);
        let dt = (b - a) / 6.0 * (1.0 / speed(a) + 4.0 / speed(0.5 * (a + b)) + 1.0 / speed(b));
        times.push(times.last().unwrap() + dt);
    }
    times
}

/// Direct connection from `state` to the goal pose in the same mode, as
/// (segments, sampled path, cost).
fn shot(state: &Kinematics, goal: &Pose, world: &World, cfg: &SearchConfig) -> Option<(Vec<Segment>, Vec<Vector3<f64>>, f64)> {
    let mode = state.mode();
    if mode != goal.mode {
        return None;
    }
    let p0 = state.position();
    let p1 = goal.position;
    let dist = (p1 - p0).norm();
    if dist < 1e-9 {
        return None;
    }
    let dir = (p1 - p0) / dist;
    let (m0, m1) = match mode {
        Mode::Terrestrial => {
            let h0 = state.heading();
            let h1 = goal.heading.unwrap_or_else(|| dir.y.atan2(dir.x));
            (Vector3::new(h0.cos(), h0.sin(), 0.0) * dist, Vector3::new(h1.cos(), h1.sin(), 0.0) * dist)
        }
        Mode::Aerial => {
            let v = state.velocity();
            let scale = dist / cfg.v_max;
            (v * scale, Vector3::zeros())
        }
    };
    let curve = Hermite { p0, p1, m0, m1 };
    let check = Checker { world, cfg };
    let n = check.steps(2.0 * dist).max(16);
    let mut path: Vec<Vector3<f64>> = Vec::with_capacity(n + 1);
    let mut marks = Vec::with_capacity(n + 1);
    let mut arc = 0.0;
    let mut prev_tangent: Option<Vector3<f64>> = None;
    for k in 0..=n {
        let s = k as f64 / n as f64;
        let p = curve.at(s);
        if let Some(prev) = path.last() {
            arc += (p - prev).norm();
        }
        if !check.free(&p, mode) {
            return None;
        }
        if mode == Mode::Terrestrial {
            let d1 = curve.d1(s);
            let speed = d1.norm();
            if speed < 0.1 * dist {
                return None;
            }
            let curvature = (d1.x * curve.d2(s).y - d1.y * curve.d2(s).x).abs() / speed.powi(3);
            if curvature > cfg.max_curvature {
                return None;
            }
            // Tangent turn between samples; catches cusps where d1 ∥ d2.
            if let (Some(prev), Some(q)) = (prev_tangent, path.last()) {
                let turn = (prev.x * d1.y - prev.y * d1.x).atan2(prev.x * d1.x + prev.y * d1.y).abs();
                if turn > cfg.max_curvature * (p - q).norm() + 1e-6 {
                    return None;
                }
            }
            prev_tangent = Some(d1);
        }
        path.push(p);
        marks.push(arc);
    }
    let fine_times = profile_times(&marks, state.velocity().norm(), cfg.v_max, cfg.a_max);
    let total_time = *fine_times.last().unwrap_or(&0.0);
    let pieces = ((total_time / cfg.tau).ceil() as usize).max(1);
    // Junctions evenly spaced in time along the speed profile.
    let mut ends = Vec::with_capacity(pieces);
    let mut times = vec![0.0];
    let mut k = 0;
    for i in 1..=pieces {
        let target = total_time * i as f64 / pieces as f64;
        while k < n && fine_times[k] < target - 1e-12 {
            k += 1;
        }
        ends.push(if i == pieces { p1 } else { path[k] });
        times.push(if i == pieces { total_time } else { fine_times[k] });
    }
    let segments = ends
        .iter()
        .zip(times.windows(2))
        .map(|(end, w)| Segment { end: *end, duration: (w[1] - w[0]).max(1e-3), mode })
        .collect();
    let weight = if mode == Mode::Aerial { cfg.rho_air } else { 1.0 };
    Some((segments, path, weight * arc / cfg.v_max))
}

fn at_goal(state: &Kinematics, goal: &Pose, cfg: &SearchConfig) -> bool {
    if state.mode() != goal.mode || (state.position() - goal.position).norm() > cfg.goal_tolerance {
        return false;
    }
    match (goal.mode, goal.heading) {
        (Mode::Terrestrial, Some(h)) => wrap_angle(state.heading() - h).abs() <= cfg.heading_tolerance,
        _ => true,
    }
}

pub fn hybrid_astar(start: &Pose, goal: &Pose, world: &World, cfg: &SearchConfig) -> Result<SearchResult, SearchError> {
    cfg.validate()?;
    let started = Instant::now();
    let check = Checker { world, cfg };
    for (name, pose) in [("start", start), ("goal", goal)] {
        if pose.mode == Mode::Terrestrial && pose.position.z != 0.0 {
            return Err(SearchError::InvalidQuery(format!("{name} on the ground must have z = 0")));
        }
        if !check.free(&pose.position, pose.mode) {
            return Err(SearchError::InvalidQuery(format!("{name} is outside the map or too close to an obstacle")));
        }
    }
    let finish = |segments: Vec<Segment>, path: Vec<Vector3<f64>>, cost: f64, explored: usize| SearchResult {
        start: *start,
        goal: *goal,
        segments,
        path,
        cost,
        explored,
        elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    if (start.position - goal.position).norm() < 1e-9 && start.mode == goal.mode {
        return Ok(finish(Vec::new(), vec![start.position], 0.0, 0));
    }

    let root = match start.mode {
        Mode::Terrestrial => Kinematics::Ground {
            x: start.position.x,
            y: start.position.y,
            v: 0.0,
            phi: start.heading.unwrap_or(0.0),
        },
        Mode::Aerial => Kinematics::Air { p: start.position, v: Vector3::zeros(), heading: start.heading.unwrap_or(0.0) },
    };
    let heuristic = |s: &Kinematics| (goal.position - s.position()).norm() / cfg.v_max;
    let mut nodes = vec![Node { state: root, g: 0.0, parent: usize::MAX, primitive: Primitive::Root, mode: start.mode }];
    let mut best: FxHashMap<BinKey, f64> = FxHashMap::default();
    let mut closed: FxHashSet<BinKey> = FxHashSet::default();
    let mut open = BinaryHeap::new();
    let mut seq = 0;
    let h0 = heuristic(&root);
    open.push(Open { f: h0, h: h0, seq, node: 0 });
    best.insert(bin_of(&root, world, cfg), 0.0);
    let mut expansions = 0;

    while let Some(Open { node: id, .. }) = open.pop() {
        let node = nodes[id];
        let key = bin_of(&node.state, world, cfg);
        if !closed.insert(key) {
            continue;
        }
        let near = (node.state.position() - goal.position).norm() < 2.0 * cfg.v_max * cfg.tau;
        if expansions % cfg.shot_interval == 0 || near {
            if let Some((tail, tail_path, cost)) = shot(&node.state, goal, world, cfg) {
                let (mut segments, mut path) = reconstruct(&nodes, id, cfg);
                segments.extend(tail);
                path.extend(tail_path.into_iter().skip(1));
                return Ok(finish(segments, path, node.g + cost, expansions));
            }
        }
        if at_goal(&node.state, goal, cfg) && id != 0 {
            let (mut segments, mut path) = reconstruct(&nodes, id, cfg);
            if let Some(last) = segments.last_mut() {
                last.end = goal.position;
            }
            path.push(goal.position);
            return Ok(finish(segments, path, node.g, expansions));
        }
        expansions += 1;
        if expansions > cfg.max_expansions {
            break;
        }
        let mut wanted = |s: &Kinematics, cost: f64| {
            let k = bin_of(s, world, cfg);
            !closed.contains(&k) && !best.get(&k).is_some_and(|&b| b <= node.g + cost)
        };
        let mut successors = ground_successors(&node.state, world, cfg, &mut wanted);
        successors.extend(air_successors(&node.state, world, cfg, &mut wanted));
        for s in successors {
            let k = bin_of(&s.state, world, cfg);
            let g = node.g + s.cost;
            if best.get(&k).is_some_and(|&b| b <= g) {
                continue;
            }
            best.insert(k, g);
            let h = heuristic(&s.state);
            nodes.push(Node { state: s.state, g, parent: id, primitive: s.primitive, mode: s.mode });
            seq += 1;
            open.push(Open { f: g + h, h, seq, node: nodes.len() - 1 });
        }
    }
    Err(SearchError::NoPath { explored: expansions })
}

fn reconstruct(nodes: &[Node], id: usize, cfg: &SearchConfig) -> (Vec<Segment>, Vec<Vector3<f64>>) {
    let mut chain = vec![id];
    while nodes[*chain.last().unwrap()].parent != usize::MAX {
        chain.push(nodes[*chain.last().unwrap()].parent);
    }
    chain.reverse();
    let mut segments = Vec::with_capacity(chain.len());
    let mut path = vec![nodes[chain[0]].state.position()];
    for w in chain.windows(2) {
        let (parent, child) = (&nodes[w[0]], &nodes[w[1]]);
        for k in 1..=8 {
            path.push(rollout(&parent.state, &child.primitive, cfg.tau * k as f64 / 8.0).position());
        }
        let mut end = child.state.position();
        if child.state.mode() == Mode::Terrestrial {
            end.z = 0.0;
        }
        segments.push(Segment { end, duration: cfg.tau, mode: child.mode });
    }
    (segments, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{BoxObstacle, WorldSpec};
    use approx::assert_relative_eq;

    fn open_world(size: f64) -> World {
        World::from_spec(&WorldSpec::empty([size, size], 3.0, 0.2), None).unwrap()
    }

    #[test]
    fn straight_roll() {
        let s = roll(0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.5);
        assert_eq!(s, Kinematics::Ground { x: 0.5, y: 0.0, v: 1.0, phi: 0.0 });
    }

    #[test]
    fn arc_roll_matches_circle() {
        let Kinematics::Ground { x, y, v, phi } = roll(0.0, 0.0, 1.0, 0.0, 0.0, PI, 0.5) else { panic!() };
        let r = 1.0 / PI;
        assert_relative_eq!(x, r, epsilon = 1e-12);
        assert_relative_eq!(y, r, epsilon = 1e-12);
        assert_relative_eq!(phi, PI / 2.0, epsilon = 1e-12);
        assert_eq!(v, 1.0);
    }

    #[test]
    fn accelerating_arc_matches_quadrature() {
        let (v0, phi0, a, w, t) = (0.7, 0.3, 1.3, -0.9, 0.8);
        let Kinematics::Ground { x, y, .. } = roll(1.0, 2.0, v0, phi0, a, w, t) else { panic!() };
        let n = 20000;
        let (mut qx, mut qy) = (1.0, 2.0);
        for k in 0..n {
            let s = (k as f64 + 0.5) * t / n as f64;
            qx += (v0 + a * s) * (phi0 + w * s).cos() * t / n as f64;
            qy += (v0 + a * s) * (phi0 + w * s).sin() * t / n as f64;
        }
        assert_relative_eq!(x, qx, epsilon = 1e-8);
        assert_relative_eq!(y, qy, epsilon = 1e-8);
    }

    #[test]
    fn stop_primitive_reaches_rest() {
        let world = open_world(20.0);
        let cfg = SearchConfig::default();
        let state = Kinematics::Ground { x: 5.0, y: 5.0, v: 0.8, phi: 0.0 };
        let succ = expand_terrestrial(&state, &world, &cfg);
        assert!(succ.iter().any(|s| matches!(s.state, Kinematics::Ground { v, .. } if v.abs() < 1e-12)));
        assert!(succ.iter().all(|s| s.mode == Mode::Terrestrial));
    }

    #[test]
    fn hover_climb_closed_form() {
        let (p, v) = fly(&Vector3::new(1.0, 1.0, 1.0), &Vector3::zeros(), &Vector3::new(0.0, 0.0, 1.0), 0.5);
        assert_relative_eq!(p.z - 1.0, 0.125, epsilon = 1e-15);
        assert_relative_eq!(v.z, 0.5, epsilon = 1e-15);
    }

    #[test]
    fn blocked_ground_leaves_only_flight() {
        // A low curb ahead: every roll reaches it, a climb clears it.
        let spec = WorldSpec::Shapes {
            size: [10.0, 10.0],
            height: 3.0,
            resolution: 0.1,
            cylinders: vec![],
            boxes: vec![BoxObstacle { min: [5.8, 0.0], max: [5.9, 10.0], height: 0.05 }],
        };
        let world = World::from_spec(&spec, None).unwrap();
        let cfg = SearchConfig { safety_distance: 0.2, ..Default::default() };
        let state = Kinematics::Ground { x: 5.0, y: 5.0, v: 2.0, phi: 0.0 };
        assert!(expand_terrestrial(&state, &world, &cfg).is_empty());
        let air = expand_aerial(&state, &world, &cfg);
        assert!(!air.is_empty());
        assert!(air.iter().all(|s| s.mode == Mode::Aerial && s.state.position().z > 0.0));
    }

    #[test]
    fn landing_ends_on_free_ground() {
        let world = open_world(20.0);
        let cfg = SearchConfig::default();
        let state = Kinematics::Air { p: Vector3::new(5.0, 5.0, 0.3), v: Vector3::new(1.0, 0.0, -1.0), heading: 0.0 };
        let landings: Vec<_> = expand_aerial(&state, &world, &cfg)
            .into_iter()
            .filter(|s| matches!(s.primitive, Primitive::Land { .. }))
            .collect();
        assert!(!landings.is_empty());
        for s in landings {
            assert_eq!(s.state.mode(), Mode::Terrestrial);
            let end = rollout(&state, &s.primitive, cfg.tau);
            assert!(end.position().z.abs() < 1e-12);
            assert!(end.velocity().z.abs() <= cfg.landing_speed + 1e-12);
        }
    }

    #[test]
    fn open_ground_goal_stays_on_ground() {
        let world = open_world(20.0);
        let cfg = SearchConfig::default();
        let r = hybrid_astar(&Pose::ground(5.0, 10.0, 0.0), &Pose::ground(15.0, 10.0, 0.0), &world, &cfg).unwrap();
        assert!(r.modes().iter().all(|m| *m == Mode::Terrestrial));
        assert!(r.cost <= 1.2 * 10.0 / cfg.v_max, "{}", r.cost);
        assert_eq!(r.segments.last().unwrap().end, Vector3::new(15.0, 10.0, 0.0));
        assert!(r.waypoints().iter().all(|q| q.z == 0.0));
    }

    #[test]
    fn fence_forces_flight_and_landing() {
        let world = World::from_spec(&WorldSpec::fence([12.0, 6.0], 3.0, 0.2, 6.0, 1.0), None).unwrap();
        let cfg = SearchConfig::default();
        let r = hybrid_astar(&Pose::ground(2.0, 3.0, 0.0), &Pose::ground(10.0, 3.0, 0.0), &world, &cfg).unwrap();
        let modes = r.modes();
        assert!(modes.contains(&Mode::Aerial));
        assert_eq!(modes.first(), Some(&Mode::Terrestrial));
        assert_eq!(modes.last(), Some(&Mode::Terrestrial));
        assert!(r.mode_switches() >= 2);
        // Every sampled path point clears the obstacles in its mode.
        println!("explored {} in {:.1} ms", r.explored, r.elapsed_ms);
        let peak = r.path.iter().map(|p| p.z).fold(0.0, f64::max);
        assert!(peak > 1.0 + cfg.safety_distance - 0.1, "{peak}");
    }

    #[test]
    fn high_air_cost_keeps_ground_route() {
        let spec = WorldSpec::Shapes {
            size: [14.0, 10.0],
            height: 3.0,
            resolution: 0.2,
            cylinders: vec![crate::world::Cylinder { center: [7.0, 5.0], radius: 1.0, height: 0.6 }],
            boxes: vec![],
        };
        let world = World::from_spec(&spec, None).unwrap();
        let cfg = SearchConfig { rho_air: 1e6, ..Default::default() };
        let r = hybrid_astar(&Pose::ground(2.0, 5.0, 0.0), &Pose::ground(12.0, 5.0, 0.0), &world, &cfg).unwrap();
        assert!(r.modes().iter().all(|m| *m == Mode::Terrestrial));
    }

    #[test]
    fn start_equals_goal_is_empty() {
        let world = open_world(10.0);
        let pose = Pose::ground(5.0, 5.0, 0.0);
        let r = hybrid_astar(&pose, &pose, &world, &SearchConfig::default()).unwrap();
        assert_eq!(r.pieces(), 0);
    }

    #[test]
    fn sealed_goal_reports_no_path() {
        let spec = WorldSpec::Shapes {
            size: [10.0, 10.0],
            height: 1.2,
            resolution: 0.2,
            cylinders: vec![],
            boxes: vec![BoxObstacle { min: [6.0, -1.0], max: [6.4, 11.0], height: 5.0 }],
        };
        let world = World::from_spec(&spec, None).unwrap();
        let err = hybrid_astar(&Pose::ground(2.0, 5.0, 0.0), &Pose::ground(8.5, 5.0, 0.0), &world, &SearchConfig::default());
        match err {
            Err(SearchError::NoPath { explored }) => assert!(explored > 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn result_round_trips_through_json() {
        let world = open_world(12.0);
        let r = hybrid_astar(&Pose::ground(2.0, 2.0, 0.0), &Pose::ground(9.0, 8.0, 1.0), &world, &SearchConfig::default()).unwrap();
        let text = serde_json::to_string(&r).unwrap();
        let back: SearchResult = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
    }
}
