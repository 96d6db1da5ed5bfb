use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("invalid physical parameters: {0}")]
    InvalidParams(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("liftoff: required normal force {normal_force:.4} N is negative")]
    Liftoff { normal_force: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlatnessError {
    #[error("yaw undefined: horizontal speed {speed:.2e} m/s below threshold")]
    YawUndefined { speed: f64 },
    #[error("infeasible pitch: m*a_l = {required:.4} N exceeds reference thrust {available:.4} N")]
    InfeasiblePitch { required: f64, available: f64 },
    #[error("singular thrust: |a + g e3| = {magnitude:.4} m/s^2")]
    SingularThrust { magnitude: f64 },
    #[error("flatness recovery failed at sample {index}: {source}")]
    AtSample {
        index: usize,
        #[source]
        source: Box<FlatnessError>,
    },
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("every cell is occupied")]
    AllOccupied,
    #[error("grid parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error: {0}")]
    Io(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error("no path found after expanding {explored} nodes")]
    NoPath { explored: usize },
    #[error("invalid search query: {0}")]
    InvalidQuery(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrajectoryError {
    #[error("piece {index} has non-positive duration {duration}")]
    NonPositiveDuration { index: usize, duration: f64 },
    #[error("trajectory needs at least one piece")]
    Empty,
    #[error("dimension mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizeError {
    #[error("cost term {term} is not finite")]
    NonFinite { term: &'static str },
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error("invalid optimizer configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("non-finite initial state")]
    NonFiniteState,
    #[error("invalid controller configuration: {0}")]
    InvalidConfig(String),
    #[error("empty reference sequence")]
    EmptyReference,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("run diverged at t = {time:.3} s: |p| = {distance:.2} m")]
    Diverged { time: f64, distance: f64 },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid simulation configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Control(#[from] ControlError),
}

/// Top-level error for pipelines that cross module boundaries.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Flatness(#[from] FlatnessError),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
