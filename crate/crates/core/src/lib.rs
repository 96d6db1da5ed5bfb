//! Planning and control for a passive-wheeled terrestrial-aerial vehicle.
//!
//! The pipeline runs front to back as
//! [`search`] → [`optimizer`] (over [`minco`] trajectories and [`esdf`]
//! clearance) → [`flatness`] references → [`nmpc`] + [`indi`] → [`sim`].
//! [`scenario`] and [`bench`] wire the stages together for the command line
//! tool and the benchmark suites.

pub mod bench;
pub mod dynamics;
pub mod error;
pub mod esdf;
pub mod flatness;
pub mod indi;
pub mod lbfgs;
pub mod minco;
pub mod nmpc;
pub mod optimizer;
pub mod pipeline;
pub mod references;
pub mod scenario;
pub mod search;
pub mod sim;
pub mod world;

pub use error::{Error, Result};
