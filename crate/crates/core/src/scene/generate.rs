use std::f64::consts::PI;

use moe_tensor::wrap_angle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::route::Segment;
use super::{
    bev_tokens, Agent, Behavior, CellClass, Command, Dataset, EgoState, Route, ScenarioKind, Scene,
    SemanticMap, Trajectory, Waypoint, GENERATOR_VERSION, GRID,
};
use crate::config::{Bounds, RunConfig, ScoreConfig, DT, HORIZON};
use crate::error::{PlannerError, Result};
use crate::geometry::{distance_to_polyline, OrientedBox, Vec2};
use crate::kinematics::{accelerations, curvatures};
use crate::metrics;

/// Road half-width used when painting drivable cells, m.
const ROAD_HALF_WIDTH: f64 = 4.0;
/// Cells whose center is this close to the route are painted as route, m.
const ROUTE_HALF_WIDTH: f64 = 1.0;
/// Lateral acceleration budget used to cap turning speed, m/s².
const LATERAL_ACCEL: f64 = 2.5;
const MAX_SPEED: f64 = 12.0;
const ROUTE_AHEAD: f64 = 90.0;
const ROUTE_BEHIND: f64 = 20.0;
const ROUTE_SPACING: f64 = 2.0;
const MAX_ATTEMPTS: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneGenerator {
    pub d_feat: usize,
    pub c_bev: usize,
    pub bounds: Bounds,
    pub score: ScoreConfig,
}

impl SceneGenerator {
    pub fn new(d_feat: usize, c_bev: usize) -> Self {
        Self {
            d_feat,
            c_bev,
            bounds: Bounds::default(),
            score: ScoreConfig::default(),
        }
    }

    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            d_feat: cfg.data.d_feat,
            c_bev: cfg.data.c_bev,
            bounds: cfg.bounds.clone(),
            score: cfg.score.clone(),
        }
    }
}

/// Road geometry and speed profile of one scene before agents are placed.
struct Layout {
    route: Route,
    v0: f64,
    accel: f64,
    /// Perpendicular road crossing the route at this x.
    cross_x: Option<f64>,
    /// Ring road: center and radius.
    ring: Option<(Vec2, f64)>,
}

impl Layout {
    fn arclength_at(&self, t: f64) -> f64 {
        self.v0 * t + 0.5 * self.accel * t * t
    }

    fn travel(&self) -> f64 {
        self.arclength_at(HORIZON as f64 * DT)
    }

    fn end_speed(&self) -> f64 {
        self.v0 + self.accel * HORIZON as f64 * DT
    }

    fn trajectory(&self) -> Trajectory {
        std::array::from_fn(|i| {
            let s = self.arclength_at((i + 1) as f64 * DT);
            let p = self.route.position_at(s);
            Waypoint {
                x: p.x,
                y: p.y,
                heading: wrap_angle(self.route.heading_at(s)),
            }
        })
    }
}

fn speed_profile(rng: &mut ChaCha8Rng, v_lo: f64, v_hi: f64) -> (f64, f64) {
    let v0 = rng.random_range(v_lo..v_hi);
    let accel = rng.random_range(-0.8..0.6);
    (v0, accel)
}

/// Turn of signed direction `sign` (+1 left) completed inside the horizon.
fn turn_layout(rng: &mut ChaCha8Rng, sign: f64) -> Option<Layout> {
    const RAMP: f64 = 4.0;
    let kc: f64 = rng.random_range(0.08..0.18);
    let turn = rng.random_range((4.0 * kc).max(0.6)..1.45);
    let arc = turn / kc - RAMP;
    let turn_len = arc + 2.0 * RAMP;
    let v_cap = (LATERAL_ACCEL / kc).sqrt().min(MAX_SPEED);
    let (v0, accel) = speed_profile(rng, 2.5, v_cap);
    let mut layout = Layout {
        route: Route::new(vec![], 0.0),
        v0,
        accel,
        cross_x: None,
        ring: None,
    };
    let v_end = layout.end_speed();
    let slack = layout.travel() - turn_len;
    if !(1.0..=v_cap).contains(&v_end) || slack < 0.5 {
        return None;
    }
    let lead_in = rng.random_range(0.0..slack);
    let k = sign * kc;
    layout.route = Route::new(
        vec![
            Segment::straight(lead_in),
            Segment::ramp(RAMP, 0.0, k),
            Segment::arc(arc, k),
            Segment::ramp(RAMP, k, 0.0),
        ],
        ROUTE_AHEAD,
    );
    Some(layout)
}

fn straight_layout(rng: &mut ChaCha8Rng) -> Option<Layout> {
    let (v0, accel) = speed_profile(rng, 3.0, 11.0);
    let layout = Layout {
        route: Route::new(vec![Segment::straight(ROUTE_AHEAD)], ROUTE_AHEAD),
        v0,
        accel,
        cross_x: None,
        ring: None,
    };
    (layout.end_speed() >= 1.0 && layout.travel() <= 44.0).then_some(layout)
}

/// Deflect right, sweep left around the ring, deflect right again.
fn roundabout_layout(rng: &mut ChaCha8Rng) -> Option<Layout> {
    const RAMP: f64 = 3.0;
    let kc: f64 = rng.random_range(0.06..0.1);
    let theta = rng.random_range((3.0 * kc).max(0.2)..0.35);
    let v_cap = (LATERAL_ACCEL / kc).sqrt().min(MAX_SPEED);
    let (v0, accel) = speed_profile(rng, 3.0, v_cap);
    let lead_in = rng.random_range(2.0..12.0);
    let mut segments = vec![Segment::straight(lead_in)];
    let mut start = lead_in;
    let mut mid = 0.0;
    for (turn, k) in [(theta, -kc), (2.0 * theta, kc), (theta, -kc)] {
        let arc = turn / kc - RAMP;
        if k > 0.0 {
            mid = start + RAMP + 0.5 * arc;
        }
        start += arc + 2.0 * RAMP;
        segments.extend([Segment::ramp(RAMP, 0.0, k), Segment::arc(arc, k), Segment::ramp(RAMP, k, 0.0)]);
    }
    let route = Route::new(segments, ROUTE_AHEAD);
    let center = route.position_at(mid) + Vec2::from_angle(route.heading_at(mid)).perp() * (1.0 / kc);
    let layout = Layout {
        route,
        v0,
        accel,
        cross_x: None,
        ring: Some((center, 1.0 / kc)),
    };
    let v_end = layout.end_speed();
    (1.0..=v_cap).contains(&v_end).then_some(layout)
}

fn layout_for(rng: &mut ChaCha8Rng, kind: ScenarioKind, behavior: Behavior) -> Option<Layout> {
    let mut layout = match behavior {
        Behavior::Straight if kind == ScenarioKind::Roundabout => roundabout_layout(rng)?,
        Behavior::Straight => straight_layout(rng)?,
        Behavior::Left => turn_layout(rng, 1.0)?,
        Behavior::Right => turn_layout(rng, -1.0)?,
    };
    if kind == ScenarioKind::Intersection {
        let x = match behavior {
            Behavior::Straight => rng.random_range(8.0..30.0),
            // cross road through the middle of the turn
            _ => {
                let (start, len) = turn_span(&layout.route);
                layout.route.position_at(start + 0.5 * len).x
            }
        };
        layout.cross_x = Some(x);
    }
    Some(layout)
}

/// Arclength where the route starts curving and the length of the curved part.
fn turn_span(route: &Route) -> (f64, f64) {
    let total = route.profile_length();
    let mut start = 0.0;
    while start < total && route.curvature_at(start) == 0.0 {
        start += 0.05;
    }
    (start, total - start)
}

fn paint_map(layout: &Layout, polyline: &[Vec2], agents: &[Agent]) -> SemanticMap {
    let mut map = SemanticMap::filled(CellClass::NonDrivable);
    for r in 0..GRID {
        for c in 0..GRID {
            let p = SemanticMap::cell_center(r, c);
            let d = distance_to_polyline(polyline, p);
            let on_cross = layout.cross_x.is_some_and(|x| (p.x - x).abs() <= ROAD_HALF_WIDTH);
            let on_ring = layout
                .ring
                .is_some_and(|(o, radius)| ((p - o).norm() - radius).abs() <= ROAD_HALF_WIDTH);
            let class = if d <= ROUTE_HALF_WIDTH {
                CellClass::Route
            } else if d <= ROAD_HALF_WIDTH || on_cross || on_ring {
                CellClass::Drivable
            } else {
                CellClass::NonDrivable
            };
            let cell = OrientedBox::new(p, Vec2::new(1.0, 1.0), 0.0);
            let occupied = agents.iter().any(|a| cell.overlaps(&a.footprint_at(0.0)));
            map.set(r, c, if occupied { CellClass::Agent } else { class });
        }
    }
    map
}

/// Ground truth must satisfy the limits the refiner later enforces and
/// score perfectly on an empty map of its own road.
fn gt_is_valid(gt: &Trajectory, map: &SemanticMap, gen: &SceneGenerator) -> bool {
    let b = &gen.bounds;
    let mut p = vec![Vec2::ZERO];
    p.extend(gt.iter().map(|w| w.position()));
    let steps_ok = p.windows(2).all(|w| (w[1] - w[0]).norm() <= b.v_max * DT);
    let kappa_ok = curvatures(&p).iter().all(|&k| k <= b.kappa_max);
    let accel_ok = accelerations(&p).iter().all(|a| a.norm() <= b.a_max);
    steps_ok
        && kappa_ok
        && accel_ok
        && metrics::comfort(gt, &gen.score) == 1.0
        && metrics::drivable_compliance(gt, map) == 1.0
}

fn sample_agent(rng: &mut ChaCha8Rng, layout: &Layout, behavior: Behavior) -> Agent {
    let half_extents = Vec2::new(rng.random_range(2.0..2.5), rng.random_range(0.9..1.1));
    let route = &layout.route;
    let lane_normal = |s: f64| Vec2::from_angle(route.heading_at(s)).perp();
    match rng.random_range(0..3) {
        2 if behavior == Behavior::Straight && layout.ring.is_none() => {
            let s = rng.random_range(10.0..25.0);
            let speed = layout.v0 + rng.random_range(0.0..2.0);
            Agent {
                position: route.position_at(s),
                velocity: Vec2::new(speed, 0.0),
                half_extents,
                heading: 0.0,
            }
        }
        1 => {
            let s = rng.random_range(15.0..50.0);
            let heading = wrap_angle(route.heading_at(s) + PI);
            Agent {
                position: route.position_at(s) + lane_normal(s) * 3.5,
                velocity: Vec2::from_angle(heading) * rng.random_range(2.0..8.0),
                half_extents,
                heading,
            }
        }
        _ => {
            let s = rng.random_range(4.0..40.0);
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            Agent {
                position: route.position_at(s) + lane_normal(s) * (side * rng.random_range(3.5..4.5)),
                velocity: Vec2::ZERO,
                half_extents,
                heading: wrap_angle(route.heading_at(s)),
            }
        }
    }
}

fn place_agents(rng: &mut ChaCha8Rng, layout: &Layout, behavior: Behavior, gt: &Trajectory, score: &ScoreConfig) -> Vec<Agent> {
    let ego = OrientedBox::new(Vec2::ZERO, super::EGO_HALF, 0.0);
    let count = rng.random_range(0..=3);
    let mut agents: Vec<Agent> = Vec::with_capacity(count);
    for _ in 0..count {
        let a = sample_agent(rng, layout, behavior);
        let body = a.footprint_at(0.0);
        let clear = SemanticMap::cell_of(a.position).is_some()
            && !ego.overlaps(&body)
            && agents.iter().all(|b| !b.footprint_at(0.0).overlaps(&body))
            && metrics::no_collision(gt, &[a]) == 1.0
            && metrics::time_to_collision(gt, &[a], score) == 1.0;
        if clear {
            agents.push(a);
        }
    }
    agents
}

fn build_scene(
    gen: &SceneGenerator,
    rng: &mut ChaCha8Rng,
    id: u64,
    kind: ScenarioKind,
    behavior: Behavior,
    command: Command,
) -> Scene {
    for _ in 0..MAX_ATTEMPTS {
        let Some(layout) = layout_for(rng, kind, behavior) else {
            continue;
        };
        let polyline = layout.route.polyline(ROUTE_BEHIND, ROUTE_SPACING);
        let gt = layout.trajectory();
        let bare = paint_map(&layout, &polyline, &[]);
        if !gt_is_valid(&gt, &bare, gen) {
            continue;
        }
        let agents = place_agents(rng, &layout, behavior, &gt, &gen.score);
        let semantic_map = paint_map(&layout, &polyline, &agents);
        return Scene {
            id,
            kind,
            behavior,
            command_mismatch: command != behavior.command(),
            ego: EgoState {
                command,
                velocity: Vec2::new(layout.v0, 0.0),
                acceleration: Vec2::new(layout.accel, 0.0),
            },
            bev_tokens: bev_tokens(&semantic_map, &agents, gen.c_bev, gen.d_feat),
            semantic_map,
            agents,
            route: polyline,
            gt,
        };
    }
    unreachable!("scene generator failed to find a valid {} layout", kind.name())
}

/// One scene of the given kind with its command matching the behavior.
/// Intersections pick their behavior uniformly.
pub fn generate_scene(gen: &SceneGenerator, seed: u64, kind: ScenarioKind) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let behavior = match kind {
        ScenarioKind::Straight | ScenarioKind::Roundabout => Behavior::Straight,
        ScenarioKind::LeftTurn => Behavior::Left,
        ScenarioKind::RightTurn => Behavior::Right,
        ScenarioKind::Intersection => Behavior::ALL[rng.random_range(0..3)],
    };
    build_scene(gen, &mut rng, seed, kind, behavior, behavior.command())
}

/// Straight, left and right behaviors in a 5:2:1 ratio.
const BEHAVIOR_WEIGHTS: [f64; 3] = [5.0 / 8.0, 2.0 / 8.0, 1.0 / 8.0];

fn pick<T: Copy>(rng: &mut ChaCha8Rng, items: &[(T, f64)]) -> T {
    let mut u: f64 = rng.random();
    for &(item, w) in items {
        if u < w {
            return item;
        }
        u -= w;
    }
    items[items.len() - 1].0
}

fn kind_given(rng: &mut ChaCha8Rng, behavior: Behavior) -> ScenarioKind {
    use ScenarioKind::*;
    match behavior {
        Behavior::Straight => pick(rng, &[(Straight, 0.6), (Intersection, 0.2), (Roundabout, 0.2)]),
        Behavior::Left => pick(rng, &[(LeftTurn, 0.6), (Intersection, 0.4)]),
        Behavior::Right => pick(rng, &[(RightTurn, 0.6), (Intersection, 0.4)]),
    }
}

/// `n` scenes; scene `i` draws from its own stream of `seed`, so any scene
/// can be regenerated alone. A fraction `mismatch_rate` carries a command
/// naming one of the other two maneuvers.
pub fn generate_dataset(gen: &SceneGenerator, n: usize, seed: u64, mismatch_rate: f64) -> Result<Dataset> {
    if n == 0 {
        return Err(PlannerError::Config("dataset size must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&mismatch_rate) {
        return Err(PlannerError::Config(format!("mismatch_rate {mismatch_rate} outside [0, 1]")));
    }
    let scenes = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let behaviors: Vec<(Behavior, f64)> = Behavior::ALL.into_iter().zip(BEHAVIOR_WEIGHTS).collect();
            let behavior = pick(&mut rng, &behaviors);
            let kind = kind_given(&mut rng, behavior);
            let command = if rng.random_bool(mismatch_rate) {
                let others: Vec<Command> = Behavior::ALL
                    .iter()
                    .filter(|&&b| b != behavior)
                    .map(|b| b.command())
                    .collect();
                others[rng.random_range(0..others.len())]
            } else {
                behavior.command()
            };
            build_scene(gen, &mut rng, i as u64, kind, behavior, command)
        })
        .collect();
    Ok(Dataset {
        version: GENERATOR_VERSION.to_string(),
        seed,
        d_feat: gen.d_feat,
        c_bev: gen.c_bev,
        scenes,
    })
}
