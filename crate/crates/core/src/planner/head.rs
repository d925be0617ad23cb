use moe_tensor::nn::Linear;
use moe_tensor::{wrap_angle, Graph, ParamStore, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::SampleMode;
use crate::error::Result;

/// Output scale of the mean: metres for x and y, radians for heading.
const MU_SCALE: [f64; 3] = [10.0, 10.0, 1.0];

/// Gaussian over one waypoint `(x, y, heading)`.
#[derive(Clone, Debug)]
pub struct WaypointHead {
    pub trunk: Linear,
    pub mu: Linear,
    pub sigma: Linear,
    pub sigma_floor: f64,
}

impl WaypointHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_model: usize, sigma_floor: f64, rng: &mut R) -> Self {
        Self {
            trunk: Linear::new(store, &format!("{name}.trunk"), d_model, d_model, rng),
            mu: Linear::new(store, &format!("{name}.mu"), d_model, 3, rng),
            sigma: Linear::new(store, &format!("{name}.sigma"), d_model, 3, rng),
            sigma_floor,
        }
    }

    /// `[.., d]` → (`mu`, `sigma`), each `[.., 3]`; `sigma ≥ sigma_floor`.
    pub fn forward(&self, g: &mut Graph, q: Var) -> Result<(Var, Var)> {
        let h = self.trunk.forward(g, q)?;
        let h = g.relu(h);
        let mu = self.mu.forward(g, h)?;
        let scale = g.constant(Tensor::new(vec![3], MU_SCALE.to_vec())?);
        let mu = g.mul(mu, scale)?;
        let s = self.sigma.forward(g, h)?;
        let s = g.softplus(s);
        let sigma = g.add_scalar(s, self.sigma_floor);
        Ok((mu, sigma))
    }
}

/// Mean mode returns `mu`; sample mode adds `sigma`-scaled standard normal
/// noise. The heading is wrapped either way.
pub fn sample_waypoint<R: Rng + ?Sized>(mu: [f64; 3], sigma: [f64; 3], mode: SampleMode, rng: &mut R) -> [f64; 3] {
    let mut w = mu;
    if mode == SampleMode::Sample {
        for (v, s) in w.iter_mut().zip(sigma) {
            let z: f64 = StandardNormal.sample(rng);
            *v += s * z;
        }
    }
    w[2] = wrap_angle(w[2]);
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn mean_mode_returns_mu_with_wrapped_heading() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w = sample_waypoint([1.0, -2.0, 0.3], [1.0; 3], SampleMode::Mean, &mut rng);
        assert_eq!(w, [1.0, -2.0, 0.3]);
        let w = sample_waypoint([0.0, 0.0, PI + 0.1], [1.0; 3], SampleMode::Mean, &mut rng);
        assert!((w[2] - (-PI + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn sample_mean_converges_to_mu() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sigma = 1e-3;
        let n = 10_000;
        let mut acc = [0.0; 2];
        for _ in 0..n {
            let w = sample_waypoint([3.0, -1.0, 0.0], [sigma; 3], SampleMode::Sample, &mut rng);
            acc[0] += w[0] / n as f64;
            acc[1] += w[1] / n as f64;
        }
        let band = 5.0 * sigma / (n as f64).sqrt();
        assert!((acc[0] - 3.0).abs() < band && (acc[1] + 1.0).abs() < band, "{acc:?}");
    }

    #[test]
    fn sigma_respects_floor() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = WaypointHead::new(&mut store, "h", 4, 1e-3, &mut rng);
        store.get_mut(head.sigma.bias).data_mut().fill(-800.0);
        let mut g = Graph::with_params(&store);
        let q = g.input(moe_tensor::nn::uniform(&mut rng, &[5, 4], 1.0));
        let (_, s) = head.forward(&mut g, q).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v >= 1e-3));
    }
}
