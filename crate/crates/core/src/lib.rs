//! Core library for instruction-following UAV navigation with reasoning traces.
//!
//! Everything here is deterministic given its seeds: the procedural world,
//! expert trajectories, the training corpus, the closed vocabulary and the
//! verifiable rewards used for policy fine-tuning.

pub mod config;
pub mod dataset;
pub mod geometry;
pub mod lexicon;
pub mod rewards;
pub mod scalar;
pub mod simulator;
pub mod tokenizer;

pub use geometry::{DiscreteAction, Pose, Vec3, Waypoint};
pub use scalar::Scalar;

pub type Waypoint64 = Waypoint<f64>;
pub type Waypoint32 = Waypoint<f32>;
pub type Pose64 = Pose<f64>;
pub type Vec3d = Vec3<f64>;
