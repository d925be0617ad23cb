use moe_tensor::nn::{FeedForward, LayerNorm, MultiHeadAttention};
use moe_tensor::{Graph, ParamStore, Var};
use rand::Rng;

use crate::error::Result;

/// Context tokens attend to BEV tokens, then a feed-forward layer; both with
/// residual connection and post layer norm.
#[derive(Clone, Debug)]
pub struct Expert {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl Expert {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d_model, heads, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d_model),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d_model, 4 * d_model, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d_model),
        }
    }

    /// `bev: [b, C, d]`, `context: [b, L, d]` → `[b, L, d]`.
    pub fn forward(&self, g: &mut Graph, bev: Var, context: Var) -> Result<Var> {
        let a = self.attn.forward(g, context, bev, None)?;
        let h = g.add(context, a)?;
        let h = self.norm1.forward(g, h)?;
        let f = self.ffn.forward(g, h)?;
        let o = g.add(h, f)?;
        Ok(self.norm2.forward(g, o)?)
    }
}
