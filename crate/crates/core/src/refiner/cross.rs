use moe_tensor::nn::{uniform, AttnMask, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use moe_tensor::{Graph, ParamId, ParamKind, ParamStore, Tensor, Var};
use rand::Rng;

use crate::batch::AGENT_FEATURES;
use crate::config::HORIZON;
use crate::error::Result;
use crate::planner::wrap_headings;

const INPUT_SCALE: [f64; 3] = [0.1, 0.1, 1.0];

/// Pre-norm block: attend to agents, then to the ego planning queries,
/// then a feed-forward layer, each with a residual connection.
#[derive(Clone, Debug)]
pub struct RefineLayer {
    pub agent_norm: LayerNorm,
    pub agent_attn: MultiHeadAttention,
    pub ego_norm: LayerNorm,
    pub ego_attn: MultiHeadAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: FeedForward,
}

impl RefineLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            agent_norm: LayerNorm::new(store, &format!("{name}.agent_norm"), d),
            agent_attn: MultiHeadAttention::new(store, &format!("{name}.agent_attn"), d, heads, rng),
            ego_norm: LayerNorm::new(store, &format!("{name}.ego_norm"), d),
            ego_attn: MultiHeadAttention::new(store, &format!("{name}.ego_attn"), d, heads, rng),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, 4 * d, rng),
        }
    }

    /// `agent_gate: [B, 1, 1]` is 0 for samples without agents, which turns
    /// the agent attention into the identity.
    pub fn forward(&self, g: &mut Graph, x: Var, agents: Var, mask: &AttnMask, agent_gate: Var, ego: Var) -> Result<Var> {
        let h = self.agent_norm.forward(g, x)?;
        let a = self.agent_attn.forward(g, h, agents, Some(mask))?;
        let a = g.mul(a, agent_gate)?;
        let x = g.add(x, a)?;
        let h = self.ego_norm.forward(g, x)?;
        let e = self.ego_attn.forward(g, h, ego, None)?;
        let x = g.add(x, e)?;
        let h = self.ffn_norm.forward(g, x)?;
        let f = self.ffn.forward(g, h)?;
        Ok(g.add(x, f)?)
    }
}

/// Cascaded cross-attention refinement with a zero-initialized residual head.
#[derive(Clone, Debug)]
pub struct CrossRefiner {
    pub embed: Linear,
    pub step_embedding: ParamId,
    pub agent_embed: Linear,
    /// Normalize the agent keys and ego queries before they are attended.
    pub agent_key_norm: LayerNorm,
    pub ego_key_norm: LayerNorm,
    pub layers: Vec<RefineLayer>,
    pub out_norm: LayerNorm,
    pub head: Linear,
}

impl CrossRefiner {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        n_layers: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            embed: Linear::new(store, &format!("{name}.embed"), 3, d, rng),
            step_embedding: store.add(
                format!("{name}.step_embedding"),
                ParamKind::Embedding,
                uniform(rng, &[HORIZON, d], 0.1),
            ),
            agent_embed: Linear::new(store, &format!("{name}.agent_embed"), AGENT_FEATURES, d, rng),
            agent_key_norm: LayerNorm::new(store, &format!("{name}.agent_key_norm"), d),
            ego_key_norm: LayerNorm::new(store, &format!("{name}.ego_key_norm"), d),
            layers: (0..n_layers)
                .map(|i| RefineLayer::new(store, &format!("{name}.layers.{i}"), d, heads, rng))
                .collect(),
            out_norm: LayerNorm::new(store, &format!("{name}.out_norm"), d),
            head: Linear::zeroed(store, &format!("{name}.head"), d, 3),
        }
    }

    /// `traj: [B, H, 3]`, `agents: [B, A, 8]` with `agent_counts[b]` valid
    /// rows each, `ego: [B, H, d]` → refined `[B, H, 3]`.
    pub fn forward(&self, g: &mut Graph, traj: Var, agents: Var, agent_counts: &[usize], ego: Var) -> Result<Var> {
        let b = g.shape(traj)[0];
        let a = g.shape(agents)[1];
        let scale = g.constant(Tensor::new(vec![3], INPUT_SCALE.to_vec())?);
        let x = g.mul(traj, scale)?;
        let x = self.embed.forward(g, x)?;
        let pos = g.param(self.step_embedding);
        let mut x = g.add(x, pos)?;
        let keys = self.agent_embed.forward(g, agents)?;
        let keys = self.agent_key_norm.forward(g, keys)?;
        let ego = self.ego_key_norm.forward(g, ego)?;
        // an empty agent set keeps one (zero) key so the softmax is defined;
        // the gate then discards the result
        let valid: Vec<usize> = agent_counts.iter().map(|&n| n.max(1)).collect();
        let mask = AttnMask::key_prefix(HORIZON, a, &valid)?;
        let gate = agent_counts.iter().map(|&n| if n > 0 { 1.0 } else { 0.0 }).collect();
        let gate = g.constant(Tensor::new(vec![b, 1, 1], gate)?);
        for layer in &self.layers {
            x = layer.forward(g, x, keys, &mask, gate, ego)?;
        }
        let x = self.out_norm.forward(g, x)?;
        let delta = self.head.forward(g, x)?;
        let out = g.add(traj, delta)?;
        wrap_headings(g, out)
    }
}
