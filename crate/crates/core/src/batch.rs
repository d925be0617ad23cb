//! Dense tensors assembled from a slice of scenes.

use moe_tensor::Tensor;

use crate::config::HORIZON;
use crate::error::{PlannerError, Result};
use crate::scene::{Command, Scene, GRID, NUM_CLASSES};

/// Per-agent features: position, velocity, half extents, heading cos/sin.
pub const AGENT_FEATURES: usize = 8;

#[derive(Clone, Debug)]
pub struct Batch {
    pub size: usize,
    /// `[B, c_bev, d_feat]`.
    pub bev: Tensor,
    /// `[B, 8]` raw ego features.
    pub ego: Tensor,
    pub commands: Vec<Command>,
    /// `[B, H, 3]`.
    pub gt: Tensor,
    /// `[B, GRID, GRID, NUM_CLASSES]` one-hot semantic map.
    pub semantic: Tensor,
    /// `[B, A, AGENT_FEATURES]` zero-padded, `A ≥ 1`.
    pub agents: Tensor,
    pub agent_counts: Vec<usize>,
    pub scene_ids: Vec<u64>,
}

impl Batch {
    /// `scenes` must be nonempty and carry `c_bev × d_feat` tokens each.
    pub fn new(scenes: &[&Scene], c_bev: usize, d_feat: usize) -> Result<Self> {
        let b = scenes.len();
        if b == 0 || scenes.iter().any(|s| s.bev_tokens.len() != c_bev * d_feat) {
            return Err(PlannerError::Invalid(format!(
                "batch of {b} scenes does not match {c_bev}×{d_feat} BEV tokens"
            )));
        }
        let tokens: Vec<f64> = scenes.iter().flat_map(|s| s.bev_tokens.iter().copied()).collect();
        let bev = Tensor::new(vec![b, c_bev, d_feat], tokens)?;
        let ego = Tensor::new(vec![b, 8], scenes.iter().flat_map(|s| s.ego.features()).collect())?;
        let gt = Tensor::new(
            vec![b, HORIZON, 3],
            scenes
                .iter()
                .flat_map(|s| s.gt.iter().flat_map(|w| [w.x, w.y, w.heading]))
                .collect(),
        )?;
        let mut sem = vec![0.0; b * GRID * GRID * NUM_CLASSES];
        for (i, s) in scenes.iter().enumerate() {
            for (c, &class) in s.semantic_map.cells().iter().enumerate() {
                sem[(i * GRID * GRID + c) * NUM_CLASSES + class as usize] = 1.0;
            }
        }
        let semantic = Tensor::new(vec![b, GRID, GRID, NUM_CLASSES], sem)?;
        let a_max = scenes.iter().map(|s| s.agents.len()).max().unwrap_or(0).max(1);
        let mut agents = vec![0.0; b * a_max * AGENT_FEATURES];
        for (i, s) in scenes.iter().enumerate() {
            for (j, a) in s.agents.iter().enumerate() {
                let f = [
                    a.position.x / 10.0,
                    a.position.y / 10.0,
                    a.velocity.x / 10.0,
                    a.velocity.y / 10.0,
                    a.half_extents.x,
                    a.half_extents.y,
                    a.heading.cos(),
                    a.heading.sin(),
                ];
                let at = (i * a_max + j) * AGENT_FEATURES;
                agents[at..at + AGENT_FEATURES].copy_from_slice(&f);
            }
        }
        Ok(Self {
            size: b,
            bev,
            ego,
            commands: scenes.iter().map(|s| s.ego.command).collect(),
            gt,
            semantic,
            agents: Tensor::new(vec![b, a_max, AGENT_FEATURES], agents)?,
            agent_counts: scenes.iter().map(|s| s.agents.len()).collect(),
            scene_ids: scenes.iter().map(|s| s.id).collect(),
        })
    }

    /// Semantic class of every map cell in token-major order: for each
    /// sample, each BEV patch in row-major order, then each cell of the
    /// patch in row-major order.
    pub fn semantic_labels(&self, c_bev: usize) -> Vec<usize> {
        let side = (c_bev as f64).sqrt() as usize;
        let patch = GRID / side;
        let sem = self.semantic.data();
        let mut out = Vec::with_capacity(self.size * GRID * GRID);
        for b in 0..self.size {
            for pr in 0..side {
                for pc in 0..side {
                    for r in pr * patch..(pr + 1) * patch {
                        for c in pc * patch..(pc + 1) * patch {
                            let at = ((b * GRID + r) * GRID + c) * NUM_CLASSES;
                            let class = (0..NUM_CLASSES).find(|&k| sem[at + k] == 1.0).unwrap_or(0);
                            out.push(class);
                        }
                    }
                }
            }
        }
        out
    }
}
