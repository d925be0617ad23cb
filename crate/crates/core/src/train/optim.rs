use moe_tensor::{Gradients, ParamId, ParamStore};

/// Adam with decoupled weight decay on affine weights only.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: Vec<u64>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|(_, e)| vec![0.0; e.value.len()]).collect::<Vec<_>>();
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros(),
            v: zeros(),
            steps: vec![0; store.len()],
        }
    }

    /// Parameters that receive weight decay.
    pub fn decayed(store: &ParamStore) -> Vec<ParamId> {
        store.iter().filter(|(_, e)| e.kind.decays()).map(|(id, _)| id).collect()
    }

    /// Global L2 norm of the gradients of `ids`.
    pub fn grad_norm(grads: &Gradients, ids: &[ParamId]) -> f64 {
        ids.iter()
            .filter_map(|&id| grads.param(id))
            .map(|gr| gr.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// One update of `ids` with gradients scaled by `grad_scale` (for
    /// clipping). Parameters without a gradient still decay.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, ids: &[ParamId], grad_scale: f64) {
        for &id in ids {
            let i = id.index();
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let decay = if store.entry(id).kind.decays() { self.weight_decay } else { 0.0 };
            let grad = grads.param(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = grad.map_or(0.0, |gr| gr[k]) * grad_scale;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                p[k] -= self.lr * (update + decay * p[k]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use moe_tensor::{Graph, ParamKind, Tensor};

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let w = store.add("w", ParamKind::Weight, Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let e = store.add("e", ParamKind::Embedding, Tensor::new(vec![1], vec![3.0]).unwrap());
        let mut opt = AdamW::new(&store, 0.1, 0.5);
        let grads = {
            let mut g = Graph::with_params(&store);
            let (a, b) = (g.param(w), g.param(e));
            let sa = g.sum(a);
            let sb = g.sum(b);
            let l = g.add(sa, sb).unwrap();
            g.backward(l).unwrap()
        };
        opt.step(&mut store, &grads, &[w, e], 1.0);
        // bias-corrected Adam step is lr · sign(g) on the first update
        let wv = store.get(w).data();
        assert!((wv[0] - (1.0 - 0.1 * (1.0 + 0.5 * 1.0))).abs() < 1e-6);
        assert!((wv[1] - (-2.0 - 0.1 * (1.0 + 0.5 * -2.0))).abs() < 1e-6);
        // embeddings do not decay
        assert!((store.get(e).data()[0] - (3.0 - 0.1)).abs() < 1e-6);
        assert_eq!(AdamW::decayed(&store), vec![w]);
    }
}
