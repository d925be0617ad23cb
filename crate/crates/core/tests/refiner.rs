use moe_planner::config::{Bounds, ModelConfig, DT, HORIZON};
use moe_planner::geometry::Vec2;
use moe_planner::kinematics::{accelerations, curvatures};
use moe_planner::refiner::{
    kinematic_project, objective_gradient, ConstraintWeights, ProjectOptions, CrossRefiner, Penalty, PointOptimizer, Refiner,
    SemanticEncoder,
};
use moe_planner::scene::{CellClass, SemanticMap, GRID, NUM_CLASSES};
use moe_tensor::gradcheck::{check_params, DEFAULT_EPS};
use moe_tensor::nn::uniform;
use moe_tensor::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const OPTS: ProjectOptions = ProjectOptions {
    iters: 20,
    step: 0.1,
    restore: true,
};

fn one_hot(map: &SemanticMap) -> Tensor {
    let mut data = vec![0.0; GRID * GRID * NUM_CLASSES];
    for (c, &class) in map.cells().iter().enumerate() {
        data[c * NUM_CLASSES + class as usize] = 1.0;
    }
    Tensor::new(vec![1, GRID, GRID, NUM_CLASSES], data).unwrap()
}

fn traj_tensor(points: &[[f64; 3]]) -> Tensor {
    Tensor::new(vec![1, HORIZON, 3], points.iter().flatten().copied().collect()).unwrap()
}

fn line(speed: f64) -> Vec<[f64; 3]> {
    (1..=HORIZON).map(|i| [speed * DT * i as f64, 0.0, 0.0]).collect()
}

fn origin_prefixed(data: &[f64]) -> Vec<Vec2> {
    std::iter::once(Vec2::ZERO)
        .chain(data.chunks(3).map(|w| Vec2::new(w[0], w[1])))
        .collect()
}

#[test]
fn semantic_features_see_the_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let enc = SemanticEncoder::new(&mut store, "sem", 8, &mut rng);
    let mut g = Graph::with_params(&store);
    let open = g.input(one_hot(&SemanticMap::filled(CellClass::Drivable)));
    let blocked = g.input(one_hot(&SemanticMap::filled(CellClass::NonDrivable)));
    let a = enc.forward(&mut g, open).unwrap();
    let a2 = enc.forward(&mut g, open).unwrap();
    let b = enc.forward(&mut g, blocked).unwrap();
    assert_eq!(g.shape(a), &[1, 8]);
    assert_eq!(g.value(a), g.value(a2));
    assert!(g.value(a).max_abs_diff(g.value(b)).unwrap() > 0.0);
}

#[test]
fn semantic_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let enc = SemanticEncoder::new(&mut store, "sem", 4, &mut rng);
    let mut map = SemanticMap::filled(CellClass::Drivable);
    for _ in 0..300 {
        let (r, c) = (rng.random_range(0..GRID), rng.random_range(0..GRID));
        map.set(r, c, CellClass::from_u8(rng.random_range(0..NUM_CLASSES as u8)).unwrap());
    }
    let x = one_hot(&map);
    let ids: Vec<_> = store.ids().collect();
    let checks = check_params(&mut store, &ids, DEFAULT_EPS, |g| {
        let m = g.input(x.clone());
        let f = enc.forward(g, m).expect("forward");
        let f2 = g.square(f);
        Ok(g.sum(f2))
    })
    .unwrap();
    for c in checks {
        assert!(c.rel_error <= 1e-5, "{} {}", c.name, c.rel_error);
    }
}

#[test]
fn zero_output_layer_leaves_points_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let opt = PointOptimizer::new(&mut store, "opt", 8, 4, &mut rng);
    let y = uniform(&mut rng, &[2, HORIZON, 3], 5.0);
    let mut g = Graph::with_params(&store);
    let yv = g.input(y.clone());
    let f = g.input(uniform(&mut rng, &[2, 4], 1.0));
    let out = opt.forward(&mut g, yv, f).unwrap();
    assert_eq!(g.value(out), &y);
    let again = opt.forward(&mut g, yv, f).unwrap();
    assert_eq!(g.value(again), g.value(out));
}

#[test]
fn hand_written_gradient_matches_objective_differences() {
    // Oracle: central differences of the plain objective.
    let bounds = Bounds::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let weights = ConstraintWeights::new(&mut store, "w");
    for trial in 0..20 {
        let mut x: Vec<f64> = (0..HORIZON)
            .flat_map(|i| [3.0 * (i + 1) as f64, 0.3 * ((i * i) as f64)])
            .collect();
        for v in &mut x {
            *v += rng.random_range(-1.5..1.5);
        }
        let target: Vec<f64> = x.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect();
        let mut g = Graph::with_params(&store);
        let xv = g.input(Tensor::new(vec![1, HORIZON, 2], x.clone()).unwrap());
        let tv = g.input(Tensor::new(vec![1, HORIZON, 2], target.clone()).unwrap());
        let w = weights.vars(&mut g);
        let grad = objective_gradient(&mut g, xv, tv, w, &bounds).unwrap();
        let pen = Penalty {
            weights: w.map(|v| g.value(v).item()),
            bounds: &bounds,
        };
        let pts = |d: &[f64]| -> Vec<Vec2> { d.chunks(2).map(|c| Vec2::new(c[0], c[1])).collect() };
        let tp = pts(&target);
        let analytic = g.value(grad).data().to_vec();
        let eps = 1e-6;
        for k in 0..x.len() {
            let mut hi = x.clone();
            hi[k] += eps;
            let mut lo = x.clone();
            lo[k] -= eps;
            let fd = (pen.objective(&pts(&hi), &tp) - pen.objective(&pts(&lo), &tp)) / (2.0 * eps);
            let err = (fd - analytic[k]).abs() / fd.abs().max(1.0);
            assert!(err < 1e-6, "trial {trial} k {k}: {fd} vs {}", analytic[k]);
        }
    }
}

fn project(points: &[[f64; 3]], store: &ParamStore, weights: &ConstraintWeights) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut g = Graph::with_params(store);
    let y = g.input(traj_tensor(points));
    let p = kinematic_project(&mut g, y, weights, &Bounds::default(), OPTS).unwrap();
    (g.value(p.points).data().to_vec(), p.objective)
}

#[test]
fn straight_constant_speed_line_is_a_fixed_point() {
    let mut store = ParamStore::new();
    let weights = ConstraintWeights::new(&mut store, "w");
    for speed in [0.0, 1.0, 4.0, 9.5, 14.0] {
        let input = line(speed);
        let (out, _) = project(&input, &store, &weights);
        let flat: Vec<f64> = input.iter().flatten().copied().collect();
        for (a, b) in out.iter().zip(&flat) {
            assert!((a - b).abs() <= 1e-6, "speed {speed}");
        }
    }
}

#[test]
fn displaced_waypoint_is_pulled_back_into_bounds() {
    let bounds = Bounds::default();
    let mut store = ParamStore::new();
    let weights = ConstraintWeights::new(&mut store, "w");
    for k in 0..HORIZON {
        let mut input = line(6.0);
        input[k][1] += 5.0;
        let (out, trace) = project(&input, &store, &weights);
        let p = origin_prefixed(&out);
        for kappa in curvatures(&p) {
            assert!(kappa <= bounds.kappa_max + 1e-3, "k {k}: {kappa}");
        }
        for a in accelerations(&p) {
            assert!(a.norm() <= bounds.a_max + 1e-3);
        }
        for w in trace[0].windows(2) {
            assert!(w[1] <= w[0], "objective rose: {w:?}");
        }
    }
}

#[test]
fn objective_never_increases_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let weights = ConstraintWeights::new(&mut store, "w");
    // heavier penalties make the raw step overshoot and exercise backtracking
    store.get_mut(weights.accel).data_mut()[0] = 3.0;
    let y = uniform(&mut rng, &[64, HORIZON, 3], 12.0);
    let mut g = Graph::with_params(&store);
    let yv = g.input(y);
    let p = kinematic_project(&mut g, yv, &weights, &Bounds::default(), OPTS).unwrap();
    for trace in &p.objective {
        assert_eq!(trace.len(), 21);
        for w in trace.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }
}

fn cross_case(seed: u64, counts: &[usize]) -> (ParamStore, CrossRefiner, Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let cross = CrossRefiner::new(&mut store, "cross", 8, 2, 2, &mut rng);
    let b = counts.len();
    let a = counts.iter().copied().max().unwrap().max(1);
    let traj = uniform(&mut rng, &[b, HORIZON, 3], 3.0);
    let mut agents = uniform(&mut rng, &[b, a, 8], 1.0);
    for (i, &n) in counts.iter().enumerate() {
        for j in n..a {
            agents.data_mut()[(i * a + j) * 8..(i * a + j + 1) * 8].fill(0.0);
        }
    }
    let ego = uniform(&mut rng, &[b, HORIZON, 8], 1.0);
    (store, cross, traj, agents, ego)
}

fn run_cross(store: &ParamStore, cross: &CrossRefiner, traj: &Tensor, agents: &Tensor, counts: &[usize], ego: &Tensor) -> Tensor {
    let mut g = Graph::with_params(store);
    let t = g.input(traj.clone());
    let a = g.input(agents.clone());
    let e = g.input(ego.clone());
    let out = cross.forward(&mut g, t, a, counts, e).unwrap();
    g.value(out).clone()
}

#[test]
fn zero_head_cross_refinement_is_identity() {
    let counts = [2, 0, 3];
    let (store, cross, traj, agents, ego) = cross_case(6, &counts);
    let out = run_cross(&store, &cross, &traj, &agents, &counts, &ego);
    let mut wrapped = traj.clone();
    for h in wrapped.data_mut().iter_mut().skip(2).step_by(3) {
        *h = moe_tensor::wrap_angle(*h);
    }
    assert_eq!(out, wrapped);
}

fn randomize_head(store: &mut ParamStore, cross: &CrossRefiner, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut rng, &[8, 3], 0.5);
    store.get_mut(cross.head.weight).data_mut().copy_from_slice(w.data());
}

#[test]
fn agent_order_does_not_matter() {
    let counts = [3, 1, 0];
    let (mut store, cross, traj, agents, ego) = cross_case(7, &counts);
    randomize_head(&mut store, &cross, 70);
    let base = run_cross(&store, &cross, &traj, &agents, &counts, &ego);
    let mut swapped = agents.clone();
    let row = |j: usize| j * 8..(j + 1) * 8;
    let first = agents.data()[row(0)].to_vec();
    let last = agents.data()[row(2)].to_vec();
    swapped.data_mut()[row(0)].copy_from_slice(&last);
    swapped.data_mut()[row(2)].copy_from_slice(&first);
    let out = run_cross(&store, &cross, &traj, &swapped, &counts, &ego);
    assert!(out.max_abs_diff(&base).unwrap() < 1e-12);
}

#[test]
fn empty_agent_set_skips_agent_attention() {
    let counts = [0];
    let (mut store, cross, traj, agents, ego) = cross_case(8, &counts);
    randomize_head(&mut store, &cross, 80);
    let base = run_cross(&store, &cross, &traj, &agents, &counts, &ego);
    let junk = uniform(&mut ChaCha8Rng::seed_from_u64(9), agents.shape(), 4.0);
    assert_eq!(run_cross(&store, &cross, &traj, &junk, &counts, &ego), base);
    // the ego attention still acts
    let ego2 = uniform(&mut ChaCha8Rng::seed_from_u64(10), ego.shape(), 1.0);
    assert_ne!(run_cross(&store, &cross, &traj, &agents, &counts, &ego2), base);
}

fn toy_refiner(seed: u64) -> (ParamStore, Refiner) {
    let cfg = ModelConfig {
        d_model: 8,
        heads: 2,
        d_sem: 4,
        refine_layers: 1,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let r = Refiner::new(&mut store, "refiner", &cfg, &Bounds::default(), &mut rng);
    (store, r)
}

#[test]
fn fresh_refiner_is_identity_on_feasible_lines() {
    let (store, refiner) = toy_refiner(11);
    let mut g = Graph::with_params(&store);
    let input = traj_tensor(&line(7.0));
    let t = g.input(input.clone());
    let m = g.input(one_hot(&SemanticMap::filled(CellClass::Drivable)));
    let a = g.input(Tensor::zeros(vec![1, 1, 8]).unwrap());
    let e = g.input(uniform(&mut ChaCha8Rng::seed_from_u64(1), &[1, HORIZON, 8], 1.0));
    let out = refiner.forward(&mut g, t, m, a, &[0], e).unwrap();
    assert!(g.value(out.refined).max_abs_diff(&input).unwrap() <= 1e-6);
}

#[test]
fn refiner_gradients_match_finite_differences() {
    // The restoration is a straight-through shift, so the exact check runs
    // the differentiable descent alone.
    let (mut store, mut refiner) = toy_refiner(12);
    refiner.projection.restore = false;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    // make every residual head active
    for id in [refiner.optimizer.out.weight, refiner.cross.head.weight] {
        let w = uniform(&mut rng, store.get(id).shape(), 0.05);
        store.get_mut(id).data_mut().copy_from_slice(w.data());
    }
    // an arc slightly above the curvature and acceleration bounds keeps every
    // penalty active
    let points: Vec<[f64; 3]> = (1..=HORIZON)
        .map(|i| {
            let th = 0.21 * 5.0 * i as f64 * DT;
            [th.sin() / 0.21, (1.0 - th.cos()) / 0.21, th]
        })
        .collect();
    let input = traj_tensor(&points);
    let mut map = SemanticMap::filled(CellClass::Drivable);
    map.set(3, 4, CellClass::Agent);
    let map = one_hot(&map);
    let agents = uniform(&mut rng, &[1, 2, 8], 1.0);
    let ego = uniform(&mut rng, &[1, HORIZON, 8], 1.0);
    let gt = uniform(&mut rng, &[1, HORIZON, 3], 3.0);
    let loss = |g: &mut Graph| {
        let t = g.input(input.clone());
        let m = g.input(map.clone());
        let a = g.input(agents.clone());
        let e = g.input(ego.clone());
        let out = refiner.forward(g, t, m, a, &[2], e).expect("refine");
        let gt = g.constant(gt.clone());
        let d = g.sub(out.refined, gt)?;
        let d2 = g.square(d);
        Ok(g.mean(d2))
    };
    let ids: Vec<_> = store.ids().collect();
    let checks = check_params(&mut store, &ids, DEFAULT_EPS, loss).unwrap();
    let mut active = 0;
    for c in checks {
        if c.name.ends_with("attn.k.bias") {
            assert!(c.analytic_norm < 1e-9, "{} {}", c.name, c.analytic_norm);
            continue;
        }
        if c.name.contains("constraint") && c.analytic_norm > 0.0 {
            active += 1;
        }
        assert!(c.rel_error <= 1e-4, "{} {}", c.name, c.rel_error);
    }
    assert!(active >= 2, "constraint weights should receive gradient");
}
