use moe_tensor::nn::Linear;
use moe_tensor::{Graph, ParamStore, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::batch::Batch;
use crate::config::{Ablation, RunConfig, SampleMode};
use crate::error::Result;
use crate::moe::{routing_by_name, Routing};
use crate::planner::ArPlanner;
use crate::refiner::{Projection, Refiner};
use crate::scene::{GRID, NUM_CLASSES};

/// Parameter-name prefixes of the perception part trained in stage 1.
pub const PERCEPTION_PREFIXES: [&str; 2] = ["planner.bev_proj", "semantic_head"];

/// Reconstructs every map cell's class from the projected BEV token of its
/// patch; stands in for the perception losses.
#[derive(Clone, Debug)]
pub struct SemanticHead {
    pub out: Linear,
    pub cells_per_token: usize,
}

impl SemanticHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, d_model: usize, c_bev: usize, rng: &mut R) -> Self {
        let cells = GRID * GRID / c_bev;
        Self {
            out: Linear::new(store, "semantic_head", d_model, cells * NUM_CLASSES, rng),
            cells_per_token: cells,
        }
    }

    /// Cross-entropy against [`Batch::semantic_labels`].
    pub fn loss(&self, g: &mut Graph, tokens: Var, labels: &[usize]) -> Result<Var> {
        let logits = self.out.forward(g, tokens)?;
        let logits = g.reshape(logits, &[labels.len(), NUM_CLASSES])?;
        Ok(g.cross_entropy(logits, labels)?)
    }
}

/// Full planner: autoregressive decoder, optional refiner and the semantic
/// reconstruction head, all registered in one parameter store.
#[derive(Debug)]
pub struct PlanningModel {
    pub config: RunConfig,
    pub store: ParamStore,
    pub planner: ArPlanner,
    pub refiner: Option<Refiner>,
    pub semantic_head: SemanticHead,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[B, H, 3]` Gaussian parameters of the decoder.
    pub mu: Var,
    pub sigma: Var,
    /// Decoder trajectory before refinement.
    pub initial: Var,
    /// Final trajectory.
    pub trajectory: Var,
    pub routings: Vec<Routing>,
    pub pe_applications: usize,
    /// Projected BEV tokens `[B, C, d]`.
    pub bev_tokens: Var,
    pub projection: Option<Projection>,
}

impl PlanningModel {
    /// Parameters are drawn from `config.train.seed`.
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let mut store = ParamStore::new();
        let t = &config.train;
        let policy = routing_by_name(&t.routing_mode)?;
        let planner = ArPlanner::new(
            &mut store,
            "planner",
            &config.model,
            config.data.d_feat,
            policy,
            t.has(Ablation::NoMoe),
            t.has(Ablation::NoAr),
            &mut rng,
        )?;
        let refiner = if t.has(Ablation::NoRefine) {
            None
        } else {
            Some(Refiner::new(&mut store, "refiner", &config.model, &config.bounds, &mut rng))
        };
        let semantic_head = SemanticHead::new(&mut store, config.model.d_model, config.data.c_bev, &mut rng);
        Ok(Self {
            config: config.clone(),
            store,
            planner,
            refiner,
            semantic_head,
        })
    }

    pub fn forward<R: Rng + ?Sized>(&self, g: &mut Graph, batch: &Batch, mode: SampleMode, rng: &mut R) -> Result<ModelOutput> {
        let bev = g.input(batch.bev.clone());
        let ego = g.input(batch.ego.clone());
        let ctx = self.planner.context(g, bev, ego, &batch.commands)?;
        let r = self.planner.rollout(g, &ctx, mode, rng)?;
        let (trajectory, projection) = match &self.refiner {
            None => (r.trajectory, None),
            Some(refiner) => {
                let sem = g.input(batch.semantic.clone());
                let agents = g.input(batch.agents.clone());
                let out = refiner.forward(g, r.trajectory, sem, agents, &batch.agent_counts, r.queries)?;
                (out.refined, Some(out.projection))
            }
        };
        Ok(ModelOutput {
            mu: r.mu,
            sigma: r.sigma,
            initial: r.trajectory,
            trajectory,
            routings: r.routings,
            pe_applications: r.pe_applications,
            bev_tokens: ctx.bev,
            projection,
        })
    }
}
