//! Autoregressive waypoint decoder built around the routed expert block.

mod encoder;
mod head;
mod model;

pub use encoder::EncoderLayer;
pub use head::{sample_waypoint, WaypointHead};
pub use model::{standard_noise, wrap_headings, ArPlanner, Mixer, PlanningSequence, Rollout, StepContext, StepOutput};
