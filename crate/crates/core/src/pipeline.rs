//! Search, optimization and reference generation chained for one or more
//! legs between poses.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Mode, PhysicalParams};
use crate::error::{Error, Result};
use crate::flatness::{sample_references, FlatOutput, ReferenceTrack};
use crate::minco::BoundaryCondition;
use crate::optimizer::{optimize, OptimizeResult, OptimizerConfig};
use crate::references::TrajectorySequence;
use crate::search::{hybrid_astar, Pose, SearchConfig, SearchResult};
use crate::world::World;

/// Ground thrust used by the terrestrial flatness map, as a fraction of the
/// hover thrust.
pub const GROUND_THRUST_RATIO: f64 = 0.45;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    pub search: SearchConfig,
    pub optimizer: OptimizerConfig,
    /// Boundary acceleration along the pose heading for ground poses that
    /// carry one, m/s². Zero leaves both ends at rest with no heading hint.
    pub heading_acceleration: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self { search: SearchConfig::default(), optimizer: OptimizerConfig::default(), heading_acceleration: 0.5 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlannedLeg {
    pub search: SearchResult,
    pub optimized: OptimizeResult,
}

/// Rest boundary conditions whose acceleration points along the heading, so
/// the trajectory leaves and arrives moving in the heading direction.
pub fn heading_boundaries(start: &Pose, goal: &Pose, accel: f64) -> (BoundaryCondition, BoundaryCondition) {
    let along = |pose: &Pose| match (pose.mode, pose.heading) {
        (Mode::Terrestrial, Some(h)) if accel > 0.0 => Vector3::new(h.cos(), h.sin(), 0.0) * accel,
        _ => Vector3::zeros(),
    };
    let mut head = BoundaryCondition::rest(start.position);
    head.a = along(start);
    let mut tail = BoundaryCondition::rest(goal.position);
    tail.a = -along(goal);
    (head, tail)
}

pub fn plan_leg(start: &Pose, goal: &Pose, world: &World, cfg: &PlannerConfig) -> Result<PlannedLeg> {
    let search = hybrid_astar(start, goal, world, &cfg.search)?;
    if search.pieces() == 0 {
        return Err(Error::Config("start and goal coincide".into()));
    }
    let mut guess = search.initial_guess();
    (guess.head, guess.tail) = heading_boundaries(start, goal, cfg.heading_acceleration);
    let optimized = optimize(&guess, &cfg.optimizer, world)?;
    Ok(PlannedLeg { search, optimized })
}

/// Plans `start → goals[0] → goals[1] → …`, each leg ending at rest.
pub fn plan_course(start: &Pose, goals: &[Pose], world: &World, cfg: &PlannerConfig) -> Result<Vec<PlannedLeg>> {
    let mut legs = Vec::with_capacity(goals.len());
    let mut from = *start;
    for goal in goals {
        legs.push(plan_leg(&from, goal, world, cfg)?);
        from = *goal;
    }
    Ok(legs)
}

pub fn sequence(legs: &[PlannedLeg]) -> TrajectorySequence {
    TrajectorySequence::new(legs.iter().map(|l| l.optimized.trajectory.clone()).collect())
}

pub fn reference_track<F: FlatOutput + ?Sized>(
    traj: &F,
    dt: f64,
    initial_yaw: f64,
    params: &PhysicalParams,
) -> Result<ReferenceTrack> {
    Ok(sample_references(traj, dt, GROUND_THRUST_RATIO * params.hover_thrust(), initial_yaw, params)?)
}
