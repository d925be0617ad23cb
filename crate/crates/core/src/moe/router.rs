use moe_tensor::nn::Mlp;
use moe_tensor::{Graph, ParamStore, Tensor, Var};
use rand::Rng;

use crate::error::{PlannerError, Result};

/// Expert assignment for a batch: `k` experts per sample with gate weights.
#[derive(Clone, Debug)]
pub struct Routing {
    /// Softmax scores over all private experts, `[B, n_private]`. Absent for
    /// routing policies that bypass the learned router.
    pub scores: Option<Var>,
    /// `experts[i * k + j]` is the `j`-th expert of sample `i`.
    pub experts: Vec<usize>,
    /// Gate weights `[B, k]`; each row sums to 1.
    pub weights: Var,
    pub k: usize,
}

impl Routing {
    pub fn batch(&self) -> usize {
        self.experts.len() / self.k
    }

    /// Expert ids of top-k slot `j` for every sample.
    pub fn slot(&self, j: usize) -> Vec<usize> {
        self.experts.iter().skip(j).step_by(self.k).copied().collect()
    }

    /// Every sample goes to `experts[i]` with weight 1.
    pub fn hard(g: &mut Graph, experts: Vec<usize>) -> Result<Self> {
        let weights = g.constant(Tensor::full(vec![experts.len(), 1], 1.0)?);
        Ok(Self {
            scores: None,
            experts,
            weights,
            k: 1,
        })
    }
}

/// Indices of the `k` largest entries, descending; equal scores go to the
/// lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Two-layer scorer over the routing query followed by top-k selection.
#[derive(Clone, Debug)]
pub struct Router {
    pub mlp: Mlp,
    pub n_experts: usize,
    pub k: usize,
}

impl Router {
    /// `d_in → hidden → n_experts` with ReLU in between.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        n_experts: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if k == 0 || k > n_experts {
            return Err(PlannerError::Config(format!("need 1 ≤ k ≤ {n_experts} experts, got k={k}")));
        }
        Ok(Self {
            mlp: Mlp::new(store, name, &[d_in, hidden, n_experts], rng),
            n_experts,
            k,
        })
    }

    /// Routes `q_r: [B, d_in]`.
    pub fn route(&self, g: &mut Graph, q_r: Var) -> Result<Routing> {
        let logits = self.mlp.forward(g, q_r)?;
        let scores = g.softmax(logits);
        self.select(g, scores)
    }

    /// Top-k of given scores `[B, n]`, renormalized over the selection.
    pub fn select(&self, g: &mut Graph, scores: Var) -> Result<Routing> {
        let n = self.n_experts;
        let mut experts = Vec::with_capacity(g.shape(scores)[0] * self.k);
        for (i, row) in g.value(scores).data().chunks(n).enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(PlannerError::NonFiniteScores { sample: i });
            }
            experts.extend(top_k(row, self.k));
        }
        let picked = g.select_cols(scores, &experts, self.k)?;
        let total = g.sum_axis(picked, 1)?;
        let weights = g.div(picked, total)?;
        Ok(Routing {
            scores: Some(scores),
            experts,
            weights,
            k: self.k,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn router(n: usize, k: usize) -> (ParamStore, Router) {
        let mut store = ParamStore::new();
        let r = Router::new(&mut store, "r", 6, 3, n, k, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        (store, r)
    }

    #[test]
    fn ties_break_to_lower_index() {
        assert_eq!(top_k(&[0.1, 0.3, 0.3, 0.3], 2), vec![1, 2]);
        assert_eq!(top_k(&[1.0, 3.0, 2.0], 3), vec![1, 2, 0]);
    }

    #[test]
    fn equal_logits_spread_evenly() {
        let (store, r) = router(5, 5);
        let mut g = Graph::with_params(&store);
        let logits = g.constant(Tensor::zeros(vec![1, 5]).unwrap());
        let scores = g.softmax(logits);
        let out = r.select(&mut g, scores).unwrap();
        for &w in g.value(out.weights).data() {
            assert!((w - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn two_of_five_renormalize_to_pair_softmax() {
        let (store, r) = router(5, 2);
        let mut g = Graph::with_params(&store);
        let logits = g.constant(Tensor::new(vec![1, 5], vec![2.0, 1.0, 0.0, 0.0, 0.0]).unwrap());
        let scores = g.softmax(logits);
        let out = r.select(&mut g, scores).unwrap();
        assert_eq!(out.experts, vec![0, 1]);
        let w = g.value(out.weights).data();
        let e = std::f64::consts::E;
        assert!((w[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((w[0] - 0.7311).abs() < 1e-4 && (w[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn non_finite_scores_name_the_sample() {
        let (store, r) = router(3, 1);
        let mut g = Graph::with_params(&store);
        let s = g.constant(Tensor::new(vec![2, 3], vec![0.2, 0.3, 0.5, f64::NAN, 0.5, 0.5]).unwrap());
        let err = r.select(&mut g, s).unwrap_err();
        assert!(matches!(err, PlannerError::NonFiniteScores { sample: 1 }), "{err}");
    }

    #[test]
    fn k_above_expert_count_is_a_config_error() {
        let mut store = ParamStore::new();
        let err = Router::new(&mut store, "r", 4, 2, 3, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, PlannerError::Config(_)));
    }
}
