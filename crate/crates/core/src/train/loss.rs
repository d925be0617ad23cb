use moe_tensor::{Graph, Var};

use crate::config::LossWeights;
use crate::error::Result;

/// `0.5 · ln 2π`.
pub const HALF_LOG_TAU: f64 = 0.918_938_533_204_672_7;

/// `pred − gt` over `[.., 3]` poses with the heading difference wrapped.
fn pose_difference(g: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    let d = g.sub(pred, gt)?;
    let axis = g.shape(d).len() - 1;
    let xy = g.slice(d, axis, 0, 2)?;
    let h = g.slice(d, axis, 2, 1)?;
    let h = g.wrap_angle(h);
    Ok(g.concat(&[xy, h], axis)?)
}

/// Mean absolute error over all components, heading error wrapped.
pub fn traj_l1(g: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    let d = pose_difference(g, pred, gt)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}

/// Mean Gaussian negative log-likelihood per component.
pub fn nll(g: &mut Graph, mu: Var, sigma: Var, gt: Var) -> Result<Var> {
    let d = pose_difference(g, gt, mu)?;
    let z = g.div(d, sigma)?;
    let z2 = g.square(z);
    let z2 = g.scale(z2, 0.5);
    let ls = g.log(sigma);
    let per = g.add(z2, ls)?;
    let per = g.add_scalar(per, HALF_LOG_TAU);
    Ok(g.mean(per))
}

/// Individual loss terms; absent perception terms are `None` and count as 0.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub traj: Option<Var>,
    pub nll: Option<Var>,
    pub sem: Option<Var>,
    pub class: Option<Var>,
    pub r#box: Option<Var>,
}

/// `λ_traj L_traj + λ_nll L_nll + λ_sem L_sem + λ_class L_class + λ_box L_box`.
/// Terms with zero weight are left out of the graph, so they contribute
/// neither value nor gradient.
pub fn total_loss(g: &mut Graph, terms: &LossTerms, w: &LossWeights) -> Result<Var> {
    let pairs = [
        (terms.traj, w.traj),
        (terms.nll, w.nll),
        (terms.sem, w.sem),
        (terms.class, w.class),
        (terms.r#box, w.r#box),
    ];
    let mut total = None;
    for (term, weight) in pairs {
        let Some(v) = term else { continue };
        if weight == 0.0 {
            continue;
        }
        let s = g.scale(v, weight);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => g.constant(moe_tensor::Tensor::scalar(0.0)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use moe_tensor::Tensor;
    use std::f64::consts::PI;

    fn poses(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len() / 3, 3], v.to_vec()).unwrap()
    }

    #[test]
    fn l1_examples() {
        let mut g = Graph::new();
        let gt = g.input(poses(&[1.0, 2.0, 0.3, -1.0, 0.5, -0.2]));
        let l = traj_l1(&mut g, gt, gt).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let shifted = g.add_scalar(gt, 1.0);
        let l = traj_l1(&mut g, shifted, gt).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-12);
        let p = g.input(poses(&[0.0, 0.0, PI - 0.1]));
        let q = g.input(poses(&[0.0, 0.0, -PI + 0.1]));
        let l = traj_l1(&mut g, p, q).unwrap();
        assert!((g.value(l).item() * 3.0 - 0.2).abs() < 1e-12);
    }

    #[test]
    fn nll_examples() {
        let mut g = Graph::new();
        let mu = g.input(poses(&[1.0, 2.0, 0.3]));
        let one = g.input(poses(&[1.0, 1.0, 1.0]));
        let two = g.input(poses(&[2.0, 2.0, 2.0]));
        let a = nll(&mut g, mu, one, mu).unwrap();
        let b = nll(&mut g, mu, two, mu).unwrap();
        assert!((g.value(a).item() - 0.9189385332).abs() < 1e-9);
        assert!((g.value(b).item() - g.value(a).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut g = Graph::new();
        let t = g.input(Tensor::scalar(1.0));
        let n = g.input(Tensor::scalar(2.0));
        let s = g.input(Tensor::scalar(7.0));
        let w = LossWeights {
            sem: 0.0,
            class: 0.0,
            r#box: 0.0,
            traj: 15.0,
            nll: 0.2,
        };
        let terms = LossTerms {
            traj: Some(t),
            nll: Some(n),
            sem: Some(s),
            ..LossTerms::default()
        };
        let l = total_loss(&mut g, &terms, &w).unwrap();
        assert!((g.value(l).item() - 15.4).abs() < 1e-12);
        let zero = LossWeights {
            traj: 0.0,
            nll: 0.0,
            ..w
        };
        let l = total_loss(&mut g, &terms, &zero).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }
}
