use moe_tensor::nn::{GruCell, Linear, Mlp};
use moe_tensor::{Graph, ParamStore, Tensor, Var};
use rand::Rng;

use crate::config::HORIZON;
use crate::error::Result;

/// Brings waypoints to unit scale before the recurrent cells.
const INPUT_SCALE: [f64; 3] = [0.1, 0.1, 1.0];

/// Recurrent point-by-point adjustment: a GRU summarizes the trajectory,
/// an MLP fuses the summary with the semantic features, and a second GRU
/// emits one residual per waypoint.
#[derive(Clone, Debug)]
pub struct PointOptimizer {
    pub encoder: GruCell,
    pub fuse: Mlp,
    pub decoder: GruCell,
    /// Zero-initialized, so the residuals start at zero.
    pub out: Linear,
    pub hidden: usize,
}

impl PointOptimizer {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, hidden: usize, d_sem: usize, rng: &mut R) -> Self {
        Self {
            encoder: GruCell::new(store, &format!("{name}.encoder"), 3, hidden, rng),
            fuse: Mlp::new(store, &format!("{name}.fuse"), &[hidden + d_sem, hidden, hidden], rng),
            decoder: GruCell::new(store, &format!("{name}.decoder"), 3, hidden, rng),
            out: Linear::zeroed(store, &format!("{name}.out"), hidden, 3),
            hidden,
        }
    }

    /// `traj: [B, H, 3]`, `f_sem: [B, d_sem]` → adjusted `[B, H, 3]`.
    pub fn forward(&self, g: &mut Graph, traj: Var, f_sem: Var) -> Result<Var> {
        let b = g.shape(traj)[0];
        let scale = g.constant(Tensor::new(vec![3], INPUT_SCALE.to_vec())?);
        let scaled = g.mul(traj, scale)?;
        let steps: Vec<Var> = (0..HORIZON)
            .map(|t| {
                let s = g.slice(scaled, 1, t, 1)?;
                g.reshape(s, &[b, 3])
            })
            .collect::<moe_tensor::Result<_>>()?;
        let mut h = g.constant(Tensor::zeros(vec![b, self.hidden])?);
        for &x in &steps {
            h = self.encoder.forward(g, x, h)?;
        }
        let joint = g.concat(&[h, f_sem], 1)?;
        let mut h = self.fuse.forward(g, joint)?;
        let mut deltas = Vec::with_capacity(HORIZON);
        for &x in &steps {
            h = self.decoder.forward(g, x, h)?;
            deltas.push(self.out.forward(g, h)?);
        }
        let delta = g.stack(&deltas, 1)?;
        Ok(g.add(traj, delta)?)
    }
}
