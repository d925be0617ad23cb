//! Closed-loop-free driving scores: collision, drivable area, progress,
//! time-to-collision, comfort and their gated aggregate.

use serde::Serialize;

use crate::config::{ScoreConfig, DT};
use crate::geometry::{project_onto_polyline, OrientedBox, Vec2};
use crate::kinematics::{accelerations, jerks};
use crate::scene::{Agent, Scene, SemanticMap, Trajectory, EGO_HALF};

/// Step of the time-to-collision forward projection, s.
pub const TTC_STEP: f64 = 0.1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct SubScores {
    pub nc: f64,
    pub dac: f64,
    pub ep: f64,
    pub ttc: f64,
    pub c: f64,
    pub pdms: f64,
}

impl SubScores {
    pub fn mean(all: &[SubScores]) -> SubScores {
        let n = all.len().max(1) as f64;
        let mut m = SubScores::default();
        for s in all {
            m.nc += s.nc / n;
            m.dac += s.dac / n;
            m.ep += s.ep / n;
            m.ttc += s.ttc / n;
            m.c += s.c / n;
            m.pdms += s.pdms / n;
        }
        m
    }
}

fn ego_box(p: Vec2, heading: f64) -> OrientedBox {
    OrientedBox::new(p, EGO_HALF, heading)
}

fn time_of(i: usize) -> f64 {
    (i + 1) as f64 * DT
}

fn positions(traj: &Trajectory) -> Vec<Vec2> {
    traj.iter().map(|w| w.position()).collect()
}

fn as_score(ok: bool) -> f64 {
    if ok {
        1.0
    } else {
        0.0
    }
}

/// 1 when the ego footprint overlaps no agent at any waypoint time.
pub fn no_collision(traj: &Trajectory, agents: &[Agent]) -> f64 {
    as_score(traj.iter().enumerate().all(|(i, w)| {
        let ego = ego_box(w.position(), w.heading);
        agents.iter().all(|a| !ego.overlaps(&a.footprint_at(time_of(i))))
    }))
}

/// 1 when every waypoint lies in a drivable cell; off-map counts as not drivable.
pub fn drivable_compliance(traj: &Trajectory, map: &SemanticMap) -> f64 {
    as_score(
        traj.iter()
            .all(|w| map.class_at(w.position()).is_some_and(|c| c.is_drivable())),
    )
}

/// Route progress of the final waypoint relative to the reference
/// trajectory's, clamped to `[0, 1]`.
pub fn progress(traj: &Trajectory, route: &[Vec2], reference: &Trajectory) -> f64 {
    let start = project_onto_polyline(route, Vec2::ZERO).arclength;
    let goal = project_onto_polyline(route, reference[reference.len() - 1].position()).arclength - start;
    if goal <= 1e-9 {
        return 1.0;
    }
    let reached = project_onto_polyline(route, traj[traj.len() - 1].position()).arclength - start;
    (reached / goal).clamp(0.0, 1.0)
}

/// 1 when, at every waypoint, coasting at the current velocity for
/// `ttc_threshold` seconds hits no agent. The projection includes `τ = 0`,
/// so a collision always fails this check too.
pub fn time_to_collision(traj: &Trajectory, agents: &[Agent], cfg: &ScoreConfig) -> f64 {
    let steps = (cfg.ttc_threshold / TTC_STEP).round() as usize;
    let mut prev = Vec2::ZERO;
    for (i, w) in traj.iter().enumerate() {
        let p = w.position();
        let v = (p - prev) * (1.0 / DT);
        prev = p;
        for j in 0..=steps {
            let tau = j as f64 * TTC_STEP;
            let ego = ego_box(p + v * tau, w.heading);
            if agents.iter().any(|a| ego.overlaps(&a.footprint_at(time_of(i) + tau))) {
                return 0.0;
            }
        }
    }
    1.0
}

/// 1 when interior finite-difference acceleration and jerk stay in bounds.
pub fn comfort(traj: &Trajectory, cfg: &ScoreConfig) -> f64 {
    let p = positions(traj);
    let ok = accelerations(&p).iter().all(|a| a.norm() <= cfg.comfort_accel)
        && jerks(&p).iter().all(|j| j.norm() <= cfg.comfort_jerk);
    as_score(ok)
}

/// `nc · dac · (w_ep·ep + w_ttc·ttc + w_c·c) / (w_ep + w_ttc + w_c)`.
pub fn pdms(nc: f64, dac: f64, ep: f64, ttc: f64, c: f64, cfg: &ScoreConfig) -> f64 {
    let [we, wt, wc] = cfg.weights;
    nc * dac * (we * ep + wt * ttc + wc * c) / (we + wt + wc)
}

pub fn score(traj: &Trajectory, scene: &Scene, cfg: &ScoreConfig) -> SubScores {
    let nc = no_collision(traj, &scene.agents);
    let dac = drivable_compliance(traj, &scene.semantic_map);
    let ep = progress(traj, &scene.route, &scene.gt);
    let ttc = time_to_collision(traj, &scene.agents, cfg);
    let c = comfort(traj, cfg);
    SubScores {
        nc,
        dac,
        ep,
        ttc,
        c,
        pdms: pdms(nc, dac, ep, ttc, c, cfg),
    }
}
