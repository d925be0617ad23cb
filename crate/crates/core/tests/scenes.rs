use std::f64::consts::PI;

use moe_planner::config::{Bounds, DT};
use moe_planner::geometry::Vec2;
use moe_planner::kinematics::{accelerations, curvatures};
use moe_planner::scene::{generate_dataset, load_dataset, save_dataset, Behavior, SceneGenerator};

fn binomial_band(n: usize, p: f64) -> (f64, f64) {
    let mean = n as f64 * p;
    let sd = (n as f64 * p * (1.0 - p)).sqrt();
    (mean - 3.0 * sd, mean + 3.0 * sd)
}

#[test]
fn mismatch_count_within_binomial_band() {
    let d = generate_dataset(&SceneGenerator::new(8, 16), 1000, 11, 0.1).unwrap();
    let m = d.mismatch_count();
    assert!((80..=120).contains(&m), "{m}");
    for s in &d.scenes {
        assert_eq!(s.command_mismatch, s.ego.command != s.behavior.command());
    }
}

#[test]
fn behavior_mix_is_five_two_one() {
    let d = generate_dataset(&SceneGenerator::new(4, 16), 8000, 1, 0.0).unwrap();
    let h = d.behavior_histogram();
    for (b, p) in Behavior::ALL.into_iter().zip([5.0 / 8.0, 2.0 / 8.0, 1.0 / 8.0]) {
        let (lo, hi) = binomial_band(8000, p);
        let got = h[b.index()] as f64;
        assert!(got >= lo && got <= hi, "{b:?}: {got} not in [{lo}, {hi}]");
    }
}

#[test]
fn ground_truth_respects_scene_invariants() {
    let bounds = Bounds::default();
    let d = generate_dataset(&SceneGenerator::new(8, 16), 300, 2, 0.1).unwrap();
    for s in &d.scenes {
        assert!(s.ego.velocity.norm() <= 30.0);
        assert!(s.ego.acceleration.x.abs() <= 8.0 && s.ego.acceleration.y.abs() <= 8.0);
        let mut p = vec![Vec2::ZERO];
        p.extend(s.gt.iter().map(|w| w.position()));
        for w in p.windows(2) {
            assert!((w[1] - w[0]).norm() <= bounds.v_max * DT);
        }
        assert!(curvatures(&p).iter().all(|&k| k <= bounds.kappa_max));
        assert!(accelerations(&p).iter().all(|a| a.norm() <= bounds.a_max));
        assert!(s.gt.iter().all(|w| w.heading > -PI && w.heading <= PI));
    }
}

#[test]
fn same_seed_same_file_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let gen = SceneGenerator::new(8, 16);
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    save_dataset(&generate_dataset(&gen, 40, 3, 0.1).unwrap(), &a).unwrap();
    save_dataset(&generate_dataset(&gen, 40, 3, 0.1).unwrap(), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let back = load_dataset(&a).unwrap();
    assert_eq!(back, generate_dataset(&gen, 40, 3, 0.1).unwrap());
}
