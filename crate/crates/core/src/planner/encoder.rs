use moe_tensor::nn::{AttnMask, FeedForward, LayerNorm, MultiHeadAttention};
use moe_tensor::{Graph, ParamStore, Var};
use rand::Rng;

use crate::error::Result;

/// Post-norm transformer encoder layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d_model, heads, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d_model),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d_model, 4 * d_model, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d_model),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, mask: Option<&AttnMask>) -> Result<Var> {
        let a = self.attn.forward(g, x, x, mask)?;
        let h = g.add(x, a)?;
        let h = self.norm1.forward(g, h)?;
        let f = self.ffn.forward(g, h)?;
        let o = g.add(h, f)?;
        Ok(self.norm2.forward(g, o)?)
    }
}
