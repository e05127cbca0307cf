//! Repairing imitation learning from adversarially modified demonstrations by
//! splitting trajectories into temporal parts, classifying each part, and
//! chaining per-part policies as options.

pub mod analysis;
pub mod attacks;
pub mod classifier;
pub mod divergence;
pub mod env;
pub mod error;
pub mod experiment;
pub mod imitation;
pub mod repair;
pub mod trajectories;

pub use error::{Error, Result};
