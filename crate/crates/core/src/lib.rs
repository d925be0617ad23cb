//! Autoregressive mixture-of-experts trajectory planner: synthetic scenes,
//! routed expert dispatch, sequential waypoint decoding, trajectory
//! refinement, training and scoring.

pub mod batch;
pub mod cli;
pub mod config;
pub mod error;
pub mod geometry;
pub mod kinematics;
pub mod metrics;
pub mod moe;
pub mod planner;
pub mod refiner;
pub mod scene;
pub mod train;

pub use config::{RunConfig, DT, HORIZON};
pub use error::{PlannerError, Result};
