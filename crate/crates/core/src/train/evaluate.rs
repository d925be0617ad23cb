use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::TOOL_VERSION;
use super::model::PlanningModel;
use crate::batch::Batch;
use crate::config::{RunConfig, SampleMode, ScoreConfig, DT, HORIZON};
use crate::error::{PlannerError, Result};
use crate::metrics::{score, SubScores};
use crate::moe::Routing;
use crate::scene::{trajectory_from_flat, Dataset, Scene, Trajectory, Waypoint};
use moe_tensor::{wrap_angle, Graph};

/// Something that maps scenes to trajectories, for scoring.
pub trait TrajectoryPlanner {
    fn name(&self) -> &str;
    fn plan(&self, scenes: &[&Scene]) -> Result<Vec<Trajectory>>;
}

pub const PLANNERS: [&str; 2] = ["model", "constant-velocity"];

/// Extrapolates the current ego velocity.
#[derive(Clone, Copy, Debug, Default)]
pub struct ConstantVelocity;

impl TrajectoryPlanner for ConstantVelocity {
    fn name(&self) -> &str {
        "constant-velocity"
    }

    fn plan(&self, scenes: &[&Scene]) -> Result<Vec<Trajectory>> {
        Ok(scenes
            .iter()
            .map(|s| {
                let v = s.ego.velocity;
                let heading = if v.norm() > 1e-9 { v.y.atan2(v.x) } else { 0.0 };
                std::array::from_fn(|i| {
                    let t = (i + 1) as f64 * DT;
                    Waypoint {
                        x: v.x * t,
                        y: v.y * t,
                        heading,
                    }
                })
            })
            .collect())
    }
}

/// Mean-mode rollouts of a trained model, batched.
#[derive(Debug)]
pub struct ModelPlanner<'a> {
    pub model: &'a PlanningModel,
}

impl ModelPlanner<'_> {
    /// Trajectories plus the routing decisions of every batch.
    pub fn plan_with_routing(&self, scenes: &[&Scene]) -> Result<(Vec<Trajectory>, Vec<Vec<usize>>)> {
        let cfg = &self.model.config;
        let mut out = Vec::with_capacity(scenes.len());
        let mut experts = Vec::with_capacity(scenes.len());
        // mean mode draws no noise; the generator only satisfies the signature
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for chunk in scenes.chunks(cfg.train.batch_size) {
            let batch = Batch::new(chunk, cfg.data.c_bev, cfg.data.d_feat)?;
            let mut g = Graph::with_params(&self.model.store);
            let o = self.model.forward(&mut g, &batch, SampleMode::Mean, &mut rng)?;
            let data = g.value(o.trajectory).data();
            out.extend(data.chunks(HORIZON * 3).map(trajectory_from_flat));
            experts.extend(per_sample_experts(&o.routings, chunk.len()));
        }
        Ok((out, experts))
    }
}

/// Expert ids chosen for each sample across all routed steps.
fn per_sample_experts(routings: &[Routing], batch: usize) -> Vec<Vec<usize>> {
    (0..batch)
        .map(|i| {
            routings
                .iter()
                .flat_map(|r| r.experts[i * r.k..(i + 1) * r.k].iter().copied())
                .collect()
        })
        .collect()
}

impl TrajectoryPlanner for ModelPlanner<'_> {
    fn name(&self) -> &str {
        "model"
    }

    fn plan(&self, scenes: &[&Scene]) -> Result<Vec<Trajectory>> {
        Ok(self.plan_with_routing(scenes)?.0)
    }
}

/// Registry lookup; `model` needs a trained model.
pub fn planner_by_name<'a>(name: &str, model: Option<&'a PlanningModel>) -> Result<Box<dyn TrajectoryPlanner + 'a>> {
    match (name, model) {
        ("constant-velocity", _) => Ok(Box::new(ConstantVelocity)),
        ("model", Some(model)) => Ok(Box::new(ModelPlanner { model })),
        ("model", None) => Err(PlannerError::Config("the model planner needs a checkpoint".into())),
        _ => Err(PlannerError::UnknownStrategy {
            kind: "planner",
            name: name.into(),
            available: PLANNERS.join(", "),
        }),
    }
}

/// Mean absolute pose error with wrapped heading differences.
pub fn trajectory_l1(pred: &Trajectory, gt: &Trajectory) -> f64 {
    pred.iter()
        .zip(gt)
        .map(|(p, q)| (p.x - q.x).abs() + (p.y - q.y).abs() + wrap_angle(p.heading - q.heading).abs())
        .sum::<f64>()
        / (HORIZON * 3) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlannerScores {
    pub planner: String,
    pub per_scene: Vec<(u64, SubScores)>,
    pub mean: SubScores,
    pub l1: f64,
}

pub fn score_planner(planner: &dyn TrajectoryPlanner, data: &Dataset, cfg: &ScoreConfig) -> Result<PlannerScores> {
    let scenes: Vec<&Scene> = data.scenes.iter().collect();
    let trajs = planner.plan(&scenes)?;
    let per_scene: Vec<(u64, SubScores)> = scenes
        .iter()
        .zip(&trajs)
        .map(|(s, t)| (s.id, score(t, s, cfg)))
        .collect();
    let all: Vec<SubScores> = per_scene.iter().map(|(_, s)| *s).collect();
    let l1 = scenes.iter().zip(&trajs).map(|(s, t)| trajectory_l1(t, &s.gt)).sum::<f64>() / scenes.len().max(1) as f64;
    Ok(PlannerScores {
        planner: planner.name().into(),
        per_scene,
        mean: SubScores::mean(&all),
        l1,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub config_hash: String,
    pub model: PlannerScores,
    pub baseline: PlannerScores,
}

/// Scores the model and the constant-velocity baseline on `data`.
pub fn evaluate(model: &PlanningModel, data: &Dataset) -> Result<EvalReport> {
    check_dataset(&model.config, data)?;
    let cfg = &model.config.score;
    Ok(EvalReport {
        config_hash: model.config.hash(),
        model: score_planner(&ModelPlanner { model }, data, cfg)?,
        baseline: score_planner(&ConstantVelocity, data, cfg)?,
    })
}

pub fn check_dataset(cfg: &RunConfig, data: &Dataset) -> Result<()> {
    if data.d_feat != cfg.data.d_feat || data.c_bev != cfg.data.c_bev {
        return Err(PlannerError::Config(format!(
            "dataset has {}×{} BEV tokens, config expects {}×{}",
            data.c_bev, data.d_feat, cfg.data.c_bev, cfg.data.d_feat
        )));
    }
    Ok(())
}

fn row(w: &mut impl Write, id: &str, s: &SubScores) -> std::io::Result<()> {
    writeln!(w, "{id},{},{},{},{},{},{}", s.nc, s.dac, s.ep, s.ttc, s.c, s.pdms)
}

/// Per-scene CSV followed by summary rows for the model and the baseline.
pub fn eval_csv(report: &EvalReport) -> Vec<u8> {
    let mut w = Vec::new();
    let write = |w: &mut Vec<u8>| -> std::io::Result<()> {
        writeln!(w, "# moe-planner {TOOL_VERSION}")?;
        writeln!(w, "# config_hash {}", report.config_hash)?;
        writeln!(w, "# l1 model {} constant-velocity {}", report.model.l1, report.baseline.l1)?;
        writeln!(w, "scene_id,nc,dac,ep,ttc,c,pdms")?;
        for (id, s) in &report.model.per_scene {
            row(w, &id.to_string(), s)?;
        }
        row(w, "mean:model", &report.model.mean)?;
        row(w, "mean:constant-velocity", &report.baseline.mean)
    };
    write(&mut w).expect("writing to memory");
    w
}

pub fn write_eval_csv(report: &EvalReport, path: &Path) -> Result<()> {
    std::fs::write(path, eval_csv(report)).map_err(|e| PlannerError::io(path, e))
}
