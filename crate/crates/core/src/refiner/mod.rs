//! Two-stage trajectory refinement: semantic-aware point optimization with
//! a kinematic projection, then cross-attention against agents and the ego
//! planning queries.

mod cross;
mod optimize;
mod project;
mod semantic;

pub use cross::{CrossRefiner, RefineLayer};
pub use optimize::PointOptimizer;
pub use project::{is_feasible, kinematic_project, objective_gradient, restore, ConstraintWeights, Penalty, ProjectOptions, Projection};
pub use semantic::SemanticEncoder;

use moe_tensor::{Graph, ParamStore, Var};
use rand::Rng;

use crate::config::{Bounds, ModelConfig};
use crate::error::Result;

#[derive(Debug)]
pub struct Refiner {
    pub semantic: SemanticEncoder,
    pub optimizer: PointOptimizer,
    pub weights: ConstraintWeights,
    pub cross: CrossRefiner,
    pub bounds: Bounds,
    pub projection: ProjectOptions,
}

#[derive(Clone, Debug)]
pub struct RefineOutput {
    /// After the recurrent optimizer, `[B, H, 3]`.
    pub optimized: Var,
    pub projection: Projection,
    /// Final trajectory, `[B, H, 3]`.
    pub refined: Var,
}

impl Refiner {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, bounds: &Bounds, rng: &mut R) -> Self {
        let d = cfg.d_model;
        Self {
            semantic: SemanticEncoder::new(store, &format!("{name}.semantic"), cfg.d_sem, rng),
            optimizer: PointOptimizer::new(store, &format!("{name}.optimizer"), d, cfg.d_sem, rng),
            weights: ConstraintWeights::new(store, &format!("{name}.constraint")),
            cross: CrossRefiner::new(store, &format!("{name}.cross"), d, cfg.heads, cfg.refine_layers, rng),
            bounds: bounds.clone(),
            projection: ProjectOptions {
                iters: cfg.project_iters,
                step: cfg.project_step,
                restore: true,
            },
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        initial: Var,
        semantic_map: Var,
        agents: Var,
        agent_counts: &[usize],
        ego_queries: Var,
    ) -> Result<RefineOutput> {
        let f_sem = self.semantic.forward(g, semantic_map)?;
        let optimized = self.optimizer.forward(g, initial, f_sem)?;
        let projection = kinematic_project(g, optimized, &self.weights, &self.bounds, self.projection)?;
        let refined = self.cross.forward(g, projection.points, agents, agent_counts, ego_queries)?;
        Ok(RefineOutput {
            optimized,
            projection,
            refined,
        })
    }
}
