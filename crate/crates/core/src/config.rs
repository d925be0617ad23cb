//! Run configuration, loaded from TOML. Every section and key is optional;
//! missing keys take the defaults below and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{PlannerError, Result};

/// Number of waypoints per trajectory.
pub const HORIZON: usize = 8;
/// Seconds between waypoints.
pub const DT: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_private: usize,
    pub n_shared: usize,
    pub k: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub refine_layers: usize,
    pub d_sem: usize,
    /// Registered name of the expert dispatch strategy.
    pub dispatch: String,
    pub sigma_floor: f64,
    pub project_iters: usize,
    pub project_step: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_private: 5,
            n_shared: 1,
            k: 2,
            encoder_layers: 2,
            heads: 4,
            refine_layers: 2,
            d_sem: 32,
            dispatch: "grouped".into(),
            sigma_floor: 1e-3,
            project_iters: 20,
            project_step: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoMoe,
    NoAr,
    NoRefine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Mean,
    Sample,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub sem: f64,
    pub class: f64,
    pub r#box: f64,
    pub traj: f64,
    pub nll: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sem: 1.0,
            class: 1.0,
            r#box: 0.5,
            traj: 15.0,
            nll: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    /// End-to-end epochs.
    pub epochs: usize,
    /// Epochs of the perception-only warm-up stage that precede them.
    pub stage1_epochs: usize,
    pub seed: u64,
    /// Registered routing policy: `intrinsic`, `command` or `fixed-expert-<e>`.
    pub routing_mode: String,
    pub ablations: Vec<Ablation>,
    pub loss_weights: LossWeights,
    pub grad_clip: f64,
    pub sample_mode: SampleMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 1e-4,
            batch_size: 32,
            epochs: 50,
            stage1_epochs: 2,
            seed: 7,
            routing_mode: "intrinsic".into(),
            ablations: Vec::new(),
            loss_weights: LossWeights::default(),
            grad_clip: 5.0,
            sample_mode: SampleMode::Mean,
        }
    }
}

impl TrainConfig {
    pub fn has(&self, a: Ablation) -> bool {
        self.ablations.contains(&a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n: usize,
    pub seed: u64,
    pub mismatch_rate: f64,
    pub d_feat: usize,
    pub c_bev: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: 512,
            seed: 7,
            mismatch_rate: 0.1,
            d_feat: 32,
            c_bev: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub ttc_threshold: f64,
    pub comfort_accel: f64,
    pub comfort_jerk: f64,
    /// Aggregation weights for (progress, time-to-collision, comfort).
    pub weights: [f64; 3],
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            ttc_threshold: 1.0,
            comfort_accel: 4.0,
            comfort_jerk: 8.0,
            weights: [5.0, 5.0, 2.0],
        }
    }
}

/// Kinematic limits shared by the scene generator and the refiner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bounds {
    pub kappa_max: f64,
    pub a_max: f64,
    pub v_max: f64,
    /// Speed regularizer inside the differentiable curvature penalty, m/s.
    pub v_eps: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Self {
            kappa_max: 0.2,
            a_max: 4.0,
            v_max: 15.0,
            v_eps: 1.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub score: ScoreConfig,
    pub bounds: Bounds,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| PlannerError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PlannerError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            PlannerError::Config(msg) => PlannerError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let bad = |msg: String| Err(PlannerError::Config(msg));
        if m.n_private == 0 || m.k == 0 || m.k > m.n_private {
            return bad(format!("need 1 ≤ k ≤ n_private, got k={} n_private={}", m.k, m.n_private));
        }
        if m.d_model < 2 || m.d_model % 2 != 0 {
            return bad(format!("d_model must be even and ≥ 2, got {}", m.d_model));
        }
        if m.heads == 0 || m.d_model % m.heads != 0 {
            return bad(format!("d_model {} is not divisible by {} heads", m.d_model, m.heads));
        }
        if m.sigma_floor <= 0.0 {
            return bad("sigma_floor must be positive".into());
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if t.lr <= 0.0 || t.weight_decay < 0.0 || t.grad_clip <= 0.0 {
            return bad("lr and grad_clip must be positive, weight_decay nonnegative".into());
        }
        let routing_ok = match t.routing_mode.as_str() {
            "intrinsic" | "command" => true,
            other => other
                .strip_prefix("fixed-expert-")
                .and_then(|e| e.parse::<usize>().ok())
                .is_some_and(|e| e < m.n_private),
        };
        if !routing_ok {
            return bad(format!(
                "routing_mode `{}` is not intrinsic, command or fixed-expert-<e> with e < {}",
                t.routing_mode, m.n_private
            ));
        }
        let w = &t.loss_weights;
        if [w.sem, w.class, w.r#box, w.traj, w.nll].iter().any(|&x| x < 0.0 || !x.is_finite()) {
            return bad("loss weights must be finite and nonnegative".into());
        }
        if t.epochs > 0 && w.traj <= 0.0 {
            return bad("the trajectory loss weight must be positive for end-to-end training".into());
        }
        let d = &self.data;
        if !(0.0..=1.0).contains(&d.mismatch_rate) {
            return bad(format!("mismatch_rate {} outside [0, 1]", d.mismatch_rate));
        }
        let side = (d.c_bev as f64).sqrt() as usize;
        if side * side != d.c_bev || side == 0 || crate::scene::GRID % side != 0 {
            return bad(format!(
                "c_bev {} must be a square whose side divides the {}-cell grid",
                d.c_bev,
                crate::scene::GRID
            ));
        }
        if d.d_feat == 0 {
            return bad("d_feat must be positive".into());
        }
        let s = &self.score;
        if s.weights.iter().any(|&x| x <= 0.0) || s.ttc_threshold < 0.0 {
            return bad("score weights must be positive".into());
        }
        let b = &self.bounds;
        if b.kappa_max <= 0.0 || b.a_max <= 0.0 || b.v_max <= 0.0 || b.v_eps <= 0.0 {
            return bad("kinematic bounds must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
