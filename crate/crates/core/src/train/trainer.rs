use std::io::Write;
use std::path::Path;
use std::time::Instant;

use moe_tensor::{Graph, ParamId, ParamStore};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::TOOL_VERSION;
use super::evaluate::{check_dataset, trajectory_l1, ModelPlanner, TrajectoryPlanner};
use super::loss::{nll, total_loss, traj_l1, LossTerms};
use super::model::{PlanningModel, PERCEPTION_PREFIXES};
use super::optim::AdamW;
use crate::batch::Batch;
use crate::config::RunConfig;
use crate::error::{PlannerError, Result};
use crate::scene::{Dataset, Scene};

const SHUFFLE_STREAM: u64 = 1;
const NOISE_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1 = perception warm-up, 2 = end-to-end.
    pub stage: u8,
    /// 1-based within its stage.
    pub epoch: usize,
    /// Mean total loss over the epoch's batches.
    pub train_loss: f64,
    /// Mean trajectory L1 during the epoch (end-to-end stage only).
    pub train_l1: Option<f64>,
    pub val_l1: Option<f64>,
    pub best_val_l1: Option<f64>,
    pub samples_per_sec: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub config_hash: String,
    pub records: Vec<EpochRecord>,
    /// End-to-end epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainReport {
    /// End-to-end records in order.
    pub fn end_to_end(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter(|r| r.stage == 2)
    }

    pub fn csv(&self) -> Vec<u8> {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut w = Vec::new();
        let mut write = || -> std::io::Result<()> {
            writeln!(w, "# moe-planner {TOOL_VERSION}")?;
            writeln!(w, "# config_hash {}", self.config_hash)?;
            writeln!(w, "# best_epoch {}", self.best_epoch)?;
            writeln!(w, "stage,epoch,train_loss,train_l1,val_l1,best_val_l1,samples_per_sec")?;
            for r in &self.records {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{:.1}",
                    r.stage,
                    r.epoch,
                    r.train_loss,
                    opt(r.train_l1),
                    opt(r.val_l1),
                    opt(r.best_val_l1),
                    r.samples_per_sec
                )?;
            }
            Ok(())
        };
        write().expect("writing to memory");
        w
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.csv()).map_err(|e| PlannerError::io(path, e))
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch (the last one without
    /// validation data).
    pub model: PlanningModel,
    pub report: TrainReport,
}

/// Mean-mode trajectory L1 over a dataset.
pub fn dataset_l1(model: &PlanningModel, data: &Dataset) -> Result<f64> {
    let scenes: Vec<&Scene> = data.scenes.iter().collect();
    let trajs = ModelPlanner { model }.plan(&scenes)?;
    let total: f64 = scenes.iter().zip(&trajs).map(|(s, t)| trajectory_l1(t, &s.gt)).sum();
    Ok(total / scenes.len().max(1) as f64)
}

fn perception_ids(store: &ParamStore) -> Vec<ParamId> {
    store
        .iter()
        .filter(|(_, e)| PERCEPTION_PREFIXES.iter().any(|p| e.name.starts_with(p)))
        .map(|(id, _)| id)
        .collect()
}

/// Runs the perception warm-up and the end-to-end stage, keeping the
/// parameters of the best validation epoch. `val` may be empty.
pub fn train(train_set: &Dataset, val: &Dataset, cfg: &RunConfig) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(PlannerError::Config("training set is empty".into()));
    }
    check_dataset(cfg, train_set)?;
    check_dataset(cfg, val)?;
    let mut model = PlanningModel::new(cfg)?;
    let t = &cfg.train;
    let mut opt = AdamW::new(&model.store, t.lr, t.weight_decay);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(t.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(t.seed);
    noise_rng.set_stream(NOISE_STREAM);
    let all_ids: Vec<ParamId> = model.store.ids().collect();
    let perception = perception_ids(&model.store);
    let c_bev = cfg.data.c_bev;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;

    let stages = [(1u8, t.stage1_epochs), (2u8, t.epochs)];
    for (stage, epochs) in stages {
        for epoch in 1..=epochs {
            order.shuffle(&mut shuffle_rng);
            let started = Instant::now();
            let (mut loss_sum, mut l1_sum) = (0.0, 0.0);
            for (bi, chunk) in order.chunks(t.batch_size).enumerate() {
                let scenes: Vec<&Scene> = chunk.iter().map(|&i| &train_set.scenes[i]).collect();
                let batch = Batch::new(&scenes, c_bev, cfg.data.d_feat)?;
                let labels = batch.semantic_labels(c_bev);
                let (loss, l1, grads) = {
                    let mut g = Graph::with_params(&model.store);
                    let (loss, l1) = if stage == 1 {
                        let bev = g.input(batch.bev.clone());
                        let tokens = model.planner.bev_proj.forward(&mut g, bev)?;
                        let sem = model.semantic_head.loss(&mut g, tokens, &labels)?;
                        let terms = LossTerms {
                            sem: Some(sem),
                            ..LossTerms::default()
                        };
                        (total_loss(&mut g, &terms, &t.loss_weights)?, None)
                    } else {
                        let out = model.forward(&mut g, &batch, t.sample_mode, &mut noise_rng)?;
                        let gt = g.input(batch.gt.clone());
                        let l1 = traj_l1(&mut g, out.trajectory, gt)?;
                        // the decoder's own trajectory is supervised too, so the
                        // planner does not depend on gradients through the refiner
                        let traj = if model.refiner.is_some() {
                            let l0 = traj_l1(&mut g, out.initial, gt)?;
                            g.add(l1, l0)?
                        } else {
                            l1
                        };
                        let terms = LossTerms {
                            traj: Some(traj),
                            nll: Some(nll(&mut g, out.mu, out.sigma, gt)?),
                            sem: Some(model.semantic_head.loss(&mut g, out.bev_tokens, &labels)?),
                            ..LossTerms::default()
                        };
                        (total_loss(&mut g, &terms, &t.loss_weights)?, Some(g.value(l1).item()))
                    };
                    let value = g.value(loss).item();
                    if !value.is_finite() {
                        return Err(PlannerError::Diverged { epoch, batch: bi, value });
                    }
                    (value, l1, g.backward(loss)?)
                };
                let ids = if stage == 1 { &perception } else { &all_ids };
                let norm = AdamW::grad_norm(&grads, ids);
                if !norm.is_finite() {
                    return Err(PlannerError::Diverged { epoch, batch: bi, value: norm });
                }
                let scale = if norm > t.grad_clip { t.grad_clip / norm } else { 1.0 };
                opt.step(&mut model.store, &grads, ids, scale);
                if !model.store.all_finite() {
                    return Err(PlannerError::Diverged { epoch, batch: bi, value: f64::NAN });
                }
                let n = chunk.len() as f64;
                loss_sum += loss * n;
                l1_sum += l1.unwrap_or(0.0) * n;
            }
            let seconds = started.elapsed().as_secs_f64();
            let n = train_set.len() as f64;
            let mut record = EpochRecord {
                stage,
                epoch,
                train_loss: loss_sum / n,
                train_l1: None,
                val_l1: None,
                best_val_l1: None,
                samples_per_sec: n / seconds.max(1e-9),
            };
            if stage == 2 {
                record.train_l1 = Some(l1_sum / n);
                if !val.is_empty() {
                    let v = dataset_l1(&model, val)?;
                    record.val_l1 = Some(v);
                    if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                        best = Some((v, epoch, model.store.clone()));
                    }
                    record.best_val_l1 = best.as_ref().map(|(b, _, _)| *b);
                }
            }
            records.push(record);
        }
    }
    let best_epoch = match best {
        Some((_, epoch, store)) => {
            model.store = store;
            epoch
        }
        None => t.epochs,
    };
    Ok(TrainOutcome {
        report: TrainReport {
            config_hash: cfg.hash(),
            records,
            best_epoch,
        },
        model,
    })
}
