//! Penalty-based kinematic projection of waypoint positions.
//!
//! The objective over positions `p_1 … p_8` (with the ego origin fixed as
//! `p_0`) is
//!
//! ```text
//! J = w_s Σ ‖d_i‖² + w_c Σ relu(κ̃_i − κ_max)² + w_a Σ relu(|a_i| − a_max)² + Σ ‖p − y′‖²
//! ```
//!
//! over the interior points `i = 1 … 7`, with `d_i = p_{i+1} − 2p_i + p_{i−1}`,
//! `a_i = d_i / Δt²`, `v_i = (p_{i+1} − p_{i−1}) / 2Δt` and the regularized
//! curvature `κ̃ = |v × a| / (|v|² + v_eps²)^{3/2}`. Its gradient is written
//! out in graph ops so the unrolled descent stays differentiable.

use moe_tensor::{Graph, ParamId, ParamKind, ParamStore, Tensor, Var};

use crate::config::{Bounds, DT, HORIZON};
use crate::error::{PlannerError, Result};
use crate::geometry::Vec2;
use crate::kinematics::{accelerations, curvature, curvatures};

/// Keeps square roots of squared norms differentiable at zero.
const TINY: f64 = 1e-12;
const MAX_HALVINGS: usize = 20;

/// Raw parameters of the three penalty weights; the effective weight is
/// `softplus(raw)`.
#[derive(Clone, Debug)]
pub struct ConstraintWeights {
    pub smooth: ParamId,
    pub curvature: ParamId,
    pub accel: ParamId,
}

fn inverse_softplus(w: f64) -> f64 {
    w.exp_m1().ln()
}

impl ConstraintWeights {
    pub const INIT: [f64; 3] = [0.01, 3.0, 0.03];

    pub fn new(store: &mut ParamStore, name: &str) -> Self {
        let mut add = |what: &str, w: f64| {
            let raw = Tensor::new(vec![1], vec![inverse_softplus(w)]).expect("scalar");
            store.add(format!("{name}.{what}"), ParamKind::Constraint, raw)
        };
        Self {
            smooth: add("smooth", Self::INIT[0]),
            curvature: add("curvature", Self::INIT[1]),
            accel: add("accel", Self::INIT[2]),
        }
    }

    /// Effective weights as `[1]`-shaped graph values (smooth, curvature, accel).
    pub fn vars(&self, g: &mut Graph) -> [Var; 3] {
        [self.smooth, self.curvature, self.accel].map(|id| {
            let raw = g.param(id);
            g.softplus(raw)
        })
    }
}

/// Plain evaluation of the objective for one sample.
#[derive(Clone, Copy, Debug)]
pub struct Penalty<'a> {
    /// Smooth, curvature and accel weights.
    pub weights: [f64; 3],
    pub bounds: &'a Bounds,
}

impl Penalty<'_> {
    pub fn objective(&self, points: &[Vec2], target: &[Vec2]) -> f64 {
        let [ws, wc, wa] = self.weights;
        let b = self.bounds;
        let mut p = Vec::with_capacity(points.len() + 1);
        p.push(Vec2::ZERO);
        p.extend_from_slice(points);
        let mut j = 0.0;
        for w in p.windows(3) {
            let d = w[2] - w[1] * 2.0 + w[0];
            let a = d * (1.0 / (DT * DT));
            let v = (w[2] - w[0]) * (1.0 / (2.0 * DT));
            let na = (a.dot(a) + TINY).sqrt();
            let ea = (na - b.a_max).max(0.0);
            let z = v.cross(a);
            let r = v.dot(v) + b.v_eps * b.v_eps;
            let kappa = (z * z + TINY).sqrt() / (r * r.sqrt());
            let ek = (kappa - b.kappa_max).max(0.0);
            j += ws * d.dot(d) + wc * ek * ek + wa * ea * ea;
        }
        j + points.iter().zip(target).map(|(&x, &y)| (x - y).dot(x - y)).sum::<f64>()
    }
}

/// Gradient of the objective with respect to `x: [B, H, 2]`.
pub fn objective_gradient(g: &mut Graph, x: Var, target: Var, weights: [Var; 3], bounds: &Bounds) -> Result<Var> {
    let [ws, wc, wa] = weights;
    let n = HORIZON - 1;
    let p = g.pad(x, 1, 1, 0)?;
    let next = g.slice(p, 1, 2, n)?;
    let cur = g.slice(p, 1, 1, n)?;
    let prev = g.slice(p, 1, 0, n)?;
    let cur2 = g.scale(cur, 2.0);
    let d = g.sub(next, cur2)?;
    let d = g.add(d, prev)?;
    let s = g.sub(next, prev)?;
    let a = g.scale(d, 1.0 / (DT * DT));
    let v = g.scale(s, 1.0 / (2.0 * DT));
    let (ax, ay) = (g.slice(a, 2, 0, 1)?, g.slice(a, 2, 1, 1)?);
    let (vx, vy) = (g.slice(v, 2, 0, 1)?, g.slice(v, 2, 1, 1)?);

    // smoothness: ∂/∂d = 2 w_s d
    let gd_smooth = g.scale(d, 2.0);
    let mut grad_d = g.mul(gd_smooth, ws)?;

    // acceleration: ∂/∂d = 2 relu(|a| − a_max) a / (|a| Δt²)
    let a2 = g.square(a);
    let a2 = g.sum_axis(a2, 2)?;
    let a2 = g.add_scalar(a2, TINY);
    let na = g.sqrt(a2);
    let ea = g.add_scalar(na, -bounds.a_max);
    let ea = g.relu(ea);
    let coef = g.div(ea, na)?;
    let coef = g.scale(coef, 2.0 / (DT * DT));
    let ga = g.mul(a, coef)?;
    let ga = g.mul(ga, wa)?;
    grad_d = g.add(grad_d, ga)?;

    // curvature: κ̃ = c / r^{3/2}, c = sqrt(z² + tiny), z = v × a
    let t1 = g.mul(vx, ay)?;
    let t2 = g.mul(vy, ax)?;
    let z = g.sub(t1, t2)?;
    let z2 = g.square(z);
    let z2 = g.add_scalar(z2, TINY);
    let c = g.sqrt(z2);
    let vx2 = g.square(vx);
    let vy2 = g.square(vy);
    let r = g.add(vx2, vy2)?;
    let r = g.add_scalar(r, bounds.v_eps * bounds.v_eps);
    let sr = g.sqrt(r);
    let r15 = g.mul(r, sr)?;
    let kappa = g.div(c, r15)?;
    let ek = g.add_scalar(kappa, -bounds.kappa_max);
    let ek = g.relu(ek);
    // 2 w_c relu(κ̃ − κ_max) · sign(z) / r^{3/2}
    let sign = g.div(z, c)?;
    let coef = g.scale(ek, 2.0);
    let coef = g.mul(coef, wc)?;
    let common = g.mul(coef, sign)?;
    let common = g.div(common, r15)?;
    // ∂κ̃/∂a = sign/r^{3/2} (−v_y, v_x)
    let nvy = g.neg(vy);
    let rot_v = g.concat(&[nvy, vx], 2)?;
    let gk_a = g.mul(rot_v, common)?;
    let gk_a = g.scale(gk_a, 1.0 / (DT * DT));
    grad_d = g.add(grad_d, gk_a)?;
    // ∂κ̃/∂v = sign/r^{3/2} (a_y, −a_x) − 3 κ̃ v / r
    let nax = g.neg(ax);
    let rot_a = g.concat(&[ay, nax], 2)?;
    let gv1 = g.mul(rot_a, common)?;
    let k_over_r = g.div(kappa, r)?;
    let k_over_r = g.scale(k_over_r, 3.0);
    let k_over_r = g.mul(k_over_r, coef)?;
    let gv2 = g.mul(v, k_over_r)?;
    let gv = g.sub(gv1, gv2)?;
    let grad_s = g.scale(gv, 1.0 / (2.0 * DT));

    // scatter the stencils back onto p_0 … p_8 and drop the fixed origin
    let to_next = g.pad(grad_d, 1, 2, 0)?;
    let to_cur = g.pad(grad_d, 1, 1, 1)?;
    let to_cur = g.scale(to_cur, -2.0);
    let to_prev = g.pad(grad_d, 1, 0, 2)?;
    let s_next = g.pad(grad_s, 1, 2, 0)?;
    let s_prev = g.pad(grad_s, 1, 0, 2)?;
    let mut gp = g.add(to_next, to_cur)?;
    gp = g.add(gp, to_prev)?;
    gp = g.add(gp, s_next)?;
    gp = g.sub(gp, s_prev)?;
    let gp = g.slice(gp, 1, 1, HORIZON)?;

    let prox = g.sub(x, target)?;
    let prox = g.scale(prox, 2.0);
    Ok(g.add(gp, prox)?)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectOptions {
    pub iters: usize,
    pub step: f64,
    /// Run the feasibility restoration after the descent. Its shift is
    /// treated as a constant by the backward pass.
    pub restore: bool,
}

#[derive(Clone, Debug)]
pub struct Projection {
    /// `[B, H, 3]`; headings are those of the input.
    pub points: Var,
    /// Objective per sample before the first and after every iteration.
    pub objective: Vec<Vec<f64>>,
    /// Steps the feasibility restoration had to change.
    pub restored_steps: usize,
}

fn to_points(data: &[f64], sample: usize) -> Vec<Vec2> {
    (0..HORIZON)
        .map(|t| {
            let at = (sample * HORIZON + t) * 2;
            Vec2::new(data[at], data[at + 1])
        })
        .collect()
}

/// True when the origin-prefixed points already respect the curvature and
/// acceleration bounds.
pub fn is_feasible(points: &[Vec2], bounds: &Bounds) -> bool {
    let mut p = Vec::with_capacity(points.len() + 1);
    p.push(Vec2::ZERO);
    p.extend_from_slice(points);
    curvatures(&p).iter().all(|&k| k <= bounds.kappa_max)
        && accelerations(&p).iter().all(|a| a.norm() <= bounds.a_max)
}

/// Gradient descent on the objective followed by feasibility restoration.
/// Each iteration halves a sample's step until its objective does not
/// increase (or skips the update), so every trace is non-increasing.
/// Samples that are feasible on input are passed through unchanged.
pub fn kinematic_project(
    g: &mut Graph,
    y: Var,
    weights: &ConstraintWeights,
    bounds: &Bounds,
    opts: ProjectOptions,
) -> Result<Projection> {
    let shape = g.shape(y).to_vec();
    if shape.len() != 3 || shape[1] != HORIZON || shape[2] != 3 {
        return Err(PlannerError::Invalid(format!("projection expects [B, {HORIZON}, 3], got {shape:?}")));
    }
    let b = shape[0];
    let w = weights.vars(g);
    let penalty = Penalty {
        weights: w.map(|v| g.value(v).item()),
        bounds,
    };
    let target = g.slice(y, 2, 0, 2)?;
    let heading = g.slice(y, 2, 2, 1)?;
    let target_data = g.value(target).data().to_vec();
    let targets: Vec<Vec<Vec2>> = (0..b).map(|i| to_points(&target_data, i)).collect();
    let mut x = target;
    let mut current: Vec<f64> = (0..b).map(|i| penalty.objective(&targets[i], &targets[i])).collect();
    let mut objective: Vec<Vec<f64>> = current.iter().map(|&j| vec![j]).collect();
    let frozen: Vec<bool> = targets.iter().map(|t| is_feasible(t, bounds)).collect();
    for _ in 0..opts.iters {
        let grad = objective_gradient(g, x, target, w, bounds)?;
        let xv = g.value(x).data().to_vec();
        let gv = g.value(grad).data().to_vec();
        let mut etas = vec![0.0; b];
        for i in 0..b {
            let mut eta = opts.step;
            let tries = if frozen[i] { 0 } else { MAX_HALVINGS };
            for _ in 0..tries {
                let cand: Vec<f64> = (0..HORIZON * 2)
                    .map(|k| {
                        let at = i * HORIZON * 2 + k;
                        xv[at] - eta * gv[at]
                    })
                    .collect();
                let j = penalty.objective(&to_points(&cand, 0), &targets[i]);
                if j <= current[i] {
                    etas[i] = eta;
                    current[i] = j;
                    break;
                }
                eta *= 0.5;
            }
            objective[i].push(current[i]);
        }
        let eta = g.constant(Tensor::new(vec![b, 1, 1], etas)?);
        let delta = g.mul(grad, eta)?;
        x = g.sub(x, delta)?;
    }
    if !opts.restore {
        return Ok(Projection {
            points: g.concat(&[x, heading], 2)?,
            objective,
            restored_steps: 0,
        });
    }
    let xv = g.value(x).data().to_vec();
    let mut offset = vec![0.0; b * HORIZON * 2];
    let mut restored_steps = 0;
    for i in 0..b {
        let (fixed, changed) = restore(&to_points(&xv, i), bounds);
        restored_steps += changed;
        for (t, p) in fixed.iter().enumerate() {
            let at = (i * HORIZON + t) * 2;
            offset[at] = p.x - xv[at];
            offset[at + 1] = p.y - xv[at + 1];
        }
    }
    // the restoration is a constant shift for the backward pass
    let offset = g.constant(Tensor::new(vec![b, HORIZON, 2], offset)?);
    let xy = g.add(x, offset)?;
    Ok(Projection {
        points: g.concat(&[xy, heading], 2)?,
        objective,
        restored_steps,
    })
}

/// Closest step to `want` after the previous step `prev` whose interior
/// acceleration and curvature respect `bounds`.
fn feasible_step(prev: Vec2, want: Vec2, bounds: &Bounds) -> Vec2 {
    let kappa = |f: Vec2| curvature((f + prev) * (1.0 / (2.0 * DT)), (f - prev) * (1.0 / (DT * DT)));
    let limit = bounds.a_max * DT * DT;
    let mut f = want;
    let dev = f - prev;
    if dev.norm() > limit {
        f = prev + dev * (limit / dev.norm());
    }
    if kappa(f) <= bounds.kappa_max || prev.norm() < 1e-12 {
        return f;
    }
    // shrinking the sideways part lowers both the curvature and the
    // acceleration
    let u = prev * (1.0 / prev.norm());
    let n = u.perp();
    let (along, side) = (f.dot(u), f.dot(n));
    let at = |s: f64| u * along + n * (side * s);
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if kappa(at(mid)) <= bounds.kappa_max {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(lo)
}

/// Re-shoots the positions step by step so every interior point is
/// feasible, aiming each step at the original next position. Returns the
/// points and the number of steps that changed.
pub fn restore(points: &[Vec2], bounds: &Bounds) -> (Vec<Vec2>, usize) {
    let mut out = Vec::with_capacity(points.len());
    out.push(points[0]);
    let mut before = Vec2::ZERO;
    let mut changed = 0;
    for want in &points[1..] {
        let here = *out.last().unwrap();
        let wanted = *want - here;
        let f = feasible_step(here - before, wanted, bounds);
        if f != wanted {
            changed += 1;
        }
        out.push(here + f);
        before = here;
    }
    (out, changed)
}
