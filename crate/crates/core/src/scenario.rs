//! Scenario files: the world, the task and every tunable section in one JSON
//! document. Unknown keys are rejected with the path of the offending key.

use nalgebra::Vector3;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use crate::dynamics::{FullState, PhysicalParams};
use crate::error::{Error, Result};
use crate::flatness::{FlatOutput, ReferencePoint, ReferenceTrack};
use crate::minco::MincoTrajectory;
use crate::nmpc::NmpcConfig;
use crate::pipeline::{plan_course, reference_track, sequence, PlannedLeg, PlannerConfig};
use crate::references::{Lemniscate, TrajectorySequence};
use crate::search::Pose;
use crate::sim::{run_closed_loop, Bounds, SimConfig, SimRun};
use crate::world::{World, WorldSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LemniscatePreset {
    Planar,
    Hybrid,
}

fn default_reference_dt() -> f64 {
    0.07
}

fn default_settle() -> f64 {
    1.0
}

fn default_laps() -> f64 {
    1.0
}

fn default_hover_duration() -> f64 {
    5.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Task {
    /// Drive or fly through `goals` in order, each reached at rest.
    Navigate {
        start: Pose,
        goals: Vec<Pose>,
        #[serde(default = "default_reference_dt")]
        reference_dt: f64,
        /// Time simulated past the last arrival, s.
        #[serde(default = "default_settle")]
        settle: f64,
    },
    /// Figure-eight reference. `custom` replaces the preset shape.
    Lemniscate {
        #[serde(default)]
        preset: Option<LemniscatePreset>,
        #[serde(default)]
        custom: Option<Lemniscate>,
        #[serde(default = "default_laps")]
        laps: f64,
        #[serde(default = "default_reference_dt")]
        reference_dt: f64,
    },
    /// Hold a hover point, optionally starting elsewhere at rest.
    Hover {
        position: [f64; 3],
        #[serde(default)]
        yaw: f64,
        #[serde(default)]
        start: Option<[f64; 3]>,
        #[serde(default = "default_hover_duration")]
        duration: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_world")]
    pub world: WorldSpec,
    pub task: Task,
    #[serde(default)]
    pub params: PhysicalParams,
    #[serde(default)]
    pub planner: PlannerConfig,
    #[serde(default)]
    pub nmpc: NmpcConfig,
    #[serde(default)]
    pub sim: SimConfig,
}

fn default_world() -> WorldSpec {
    WorldSpec::empty([20.0, 20.0], 3.0, 0.2)
}

/// Parses any configuration document, naming the path of the first
/// offending key in the error.
pub fn parse_config<T: DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Config(format!("at `{}`: {}", e.path(), e.inner())))
}

impl Scenario {
    /// Parses a scenario, reporting the path of the first offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let scenario: Scenario = parse_config(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    /// Reads a scenario file. Relative world file paths resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut scenario = Self::from_json(&text)?;
        if let WorldSpec::File { path: grid } = &mut scenario.world {
            let resolved: PathBuf = path.parent().unwrap_or(Path::new(".")).join(&*grid);
            if !resolved.exists() {
                return Err(Error::Config(format!("world file {} does not exist", resolved.display())));
            }
            *grid = resolved.to_string_lossy().into_owned();
        }
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.nmpc.validate().map_err(Error::Control)?;
        self.sim.validate()?;
        self.planner.optimizer.validate()?;
        self.planner.search.validate()?;
        match &self.task {
            Task::Navigate { goals, reference_dt, settle, .. } => {
                if goals.is_empty() {
                    return Err(Error::Config("task.goals must not be empty".into()));
                }
                if !(*reference_dt > 0.0) || !(*settle >= 0.0) {
                    return Err(Error::Config("task.reference_dt must be positive and task.settle non-negative".into()));
                }
            }
            Task::Lemniscate { preset, custom, laps, reference_dt } => {
                if preset.is_none() && custom.is_none() {
                    return Err(Error::Config("task needs a preset or a custom lemniscate".into()));
                }
                if !(*laps > 0.0) || !(*reference_dt > 0.0) {
                    return Err(Error::Config("task.laps and task.reference_dt must be positive".into()));
                }
            }
            Task::Hover { duration, .. } => {
                if !(*duration > 0.0) {
                    return Err(Error::Config("task.duration must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sim.seed = seed;
        if let WorldSpec::Forest { forest, .. } = &mut self.world {
            forest.seed = seed;
        }
        self
    }

    pub fn build_world(&self) -> Result<World> {
        Ok(World::from_spec(&self.world, None)?)
    }

    /// Plans every leg of a navigation task.
    pub fn plan(&self, world: &World) -> Result<Vec<PlannedLeg>> {
        match &self.task {
            Task::Navigate { start, goals, .. } => plan_course(start, goals, world, &self.planner),
            _ => Err(Error::Config("planning needs a navigate task".into())),
        }
    }

    /// Reference for the task: the given trajectories for navigation, the
    /// analytic shape otherwise. Returns the track, the simulated duration
    /// and optional run bounds.
    pub fn reference(&self, world: &World, trajectories: Option<Vec<MincoTrajectory>>) -> Result<(ReferenceTrack, f64, Option<Bounds>)> {
        match &self.task {
            Task::Navigate { start, reference_dt, settle, .. } => {
                let legs = match trajectories {
                    Some(t) => t,
                    None => sequence(&self.plan(world)?).segments().to_vec(),
                };
                if legs.is_empty() {
                    return Err(Error::Config("trajectory file has no legs".into()));
                }
                let seq = TrajectorySequence::new(legs);
                let track = reference_track(&seq, *reference_dt, start.heading.unwrap_or(0.0), &self.params)?;
                let ([x0, y0], [x1, y1]) = world.bounds();
                let top = world.field(crate::dynamics::Mode::Aerial).geometry.extent().1.z;
                Ok((track, seq.duration() + settle, Some(Bounds { min: [x0, y0, 0.0], max: [x1, y1, top] })))
            }
            Task::Lemniscate { preset, custom, laps, reference_dt } => {
                let base = custom.unwrap_or(match preset {
                    Some(LemniscatePreset::Hybrid) => Lemniscate::hybrid(),
                    _ => Lemniscate::planar(),
                });
                let flown = base.period() * laps;
                let horizon = self.nmpc.horizon as f64 * self.nmpc.dt;
                let extended = Lemniscate { duration: flown + horizon, ..base };
                let v0 = extended.derivative(0.0, 1);
                let track = reference_track(&extended, *reference_dt, v0.y.atan2(v0.x), &self.params)?;
                Ok((track, flown, None))
            }
            Task::Hover { position, yaw, duration, .. } => {
                let point = ReferencePoint::hover(Vector3::from(*position), *yaw, &self.params);
                let p = Vector3::from(*position);
                let bounds = Bounds { min: [p.x - 10.0, p.y - 10.0, 0.0], max: [p.x + 10.0, p.y + 10.0, p.z + 10.0] };
                Ok((ReferenceTrack::constant(point), *duration, Some(bounds)))
            }
        }
    }

    /// Closed-loop run of the task.
    pub fn track(&self, world: &World, trajectories: Option<Vec<MincoTrajectory>>) -> Result<SimRun> {
        let (track, duration, bounds) = self.reference(world, trajectories)?;
        let initial = match &self.task {
            Task::Hover { position, yaw, start, .. } => {
                let at = Vector3::from(start.unwrap_or(*position));
                let mut s = FullState::at_rest(at, *yaw);
                s.position = at;
                Some(s)
            }
            _ => None,
        };
        let sim = SimConfig { duration: Some(duration), ..self.sim.clone() };
        Ok(run_closed_loop(&track, initial, &self.nmpc, &sim, &self.params, bounds)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_reported_with_its_path() {
        let text = r#"{"task": {"kind": "hover", "position": [0, 0, 1]}, "nmpc": {"horizon": 10, "horizn": 3}}"#;
        let err = Scenario::from_json(text).unwrap_err().to_string();
        assert!(err.contains("nmpc") && err.contains("horizn"), "{err}");
    }

    #[test]
    fn minimal_hover_parses_with_defaults() {
        let s = Scenario::from_json(r#"{"task": {"kind": "hover", "position": [0, 0, 1.5]}}"#).unwrap();
        assert_eq!(s.nmpc, NmpcConfig::default());
        assert!(matches!(s.task, Task::Hover { duration, .. } if duration == 5.0));
    }

    #[test]
    fn empty_goal_list_is_rejected() {
        let text = r#"{"task": {"kind": "navigate", "start": {"position": [1, 1, 0], "heading": 0, "mode": "terrestrial"}, "goals": []}}"#;
        assert!(Scenario::from_json(text).is_err());
    }

    #[test]
    fn seed_reaches_world_and_sim() {
        let mut s = Scenario::from_json(r#"{"task": {"kind": "hover", "position": [0, 0, 1.5]}}"#).unwrap();
        s.world = WorldSpec::Forest { size: [10.0, 10.0], height: 3.0, resolution: 0.2, forest: Default::default() };
        let s = s.with_seed(7);
        assert_eq!(s.sim.seed, 7);
        assert!(matches!(s.world, WorldSpec::Forest { ref forest, .. } if forest.seed == 7));
    }
}
