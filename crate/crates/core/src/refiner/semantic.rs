use moe_tensor::nn::Linear;
use moe_tensor::{Graph, ParamStore, Var};
use rand::Rng;

use crate::error::Result;
use crate::scene::NUM_CLASSES;

const KERNEL: usize = 3;
const STRIDE: usize = 2;
const CHANNELS: [usize; 2] = [8, 16];

/// Two strided 3×3 convolutions with ReLU, global average pooling and an
/// affine map to `d_sem`.
#[derive(Clone, Debug)]
pub struct SemanticEncoder {
    pub conv1: Linear,
    pub conv2: Linear,
    pub out: Linear,
    pub d_sem: usize,
}

impl SemanticEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_sem: usize, rng: &mut R) -> Self {
        let k2 = KERNEL * KERNEL;
        Self {
            conv1: Linear::new(store, &format!("{name}.conv1"), k2 * NUM_CLASSES, CHANNELS[0], rng),
            conv2: Linear::new(store, &format!("{name}.conv2"), k2 * CHANNELS[0], CHANNELS[1], rng),
            out: Linear::new(store, &format!("{name}.out"), CHANNELS[1], d_sem, rng),
            d_sem,
        }
    }

    /// One-hot map `[B, H, W, classes]` → `[B, d_sem]`.
    pub fn forward(&self, g: &mut Graph, map: Var) -> Result<Var> {
        let b = g.shape(map)[0];
        let mut x = map;
        for conv in [&self.conv1, &self.conv2] {
            let cols = g.im2col(x, KERNEL, STRIDE, KERNEL / 2)?;
            let y = conv.forward(g, cols)?;
            x = g.relu(y);
        }
        let s = g.shape(x).to_vec();
        let flat = g.reshape(x, &[b, s[1] * s[2], s[3]])?;
        let pooled = g.mean_axis(flat, 1)?;
        let pooled = g.reshape(pooled, &[b, s[3]])?;
        Ok(self.out.forward(g, pooled)?)
    }
}
