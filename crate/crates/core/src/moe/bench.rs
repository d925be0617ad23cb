//! Throughput of grouped dispatch against a per-sample loop, measured on
//! forward plus backward passes.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use moe_tensor::nn::uniform;
use moe_tensor::{Graph, ParamStore, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::block::{MoeBlock, MoeConfig};
use super::routing::Intrinsic;
use crate::error::{PlannerError, Result};
use crate::scene::Command;

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub moe: MoeConfig,
    pub c_bev: usize,
    /// Context tokens per sample.
    pub context_len: usize,
    pub warmup: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl BenchConfig {
    pub fn new(moe: MoeConfig, c_bev: usize) -> Self {
        Self {
            moe,
            c_bev,
            context_len: crate::config::HORIZON + 2,
            warmup: 1,
            repeats: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub batch_size: usize,
    pub mode: &'static str,
    pub samples_per_sec: f64,
    /// Grouped over naive throughput at this batch size.
    pub speedup: f64,
}

struct Inputs {
    bev: moe_tensor::Tensor,
    context: moe_tensor::Tensor,
    query: moe_tensor::Tensor,
}

fn step(block: &MoeBlock, store: &ParamStore, x: &Inputs, per_sample: bool) -> Result<()> {
    let mut g = Graph::with_params(store);
    let bev = g.input(x.bev.clone());
    let context = g.input(x.context.clone());
    let query = g.input(x.query.clone());
    let b = x.bev.shape()[0];
    let commands = vec![Command::Unknown; b];
    let out: Var = if per_sample {
        block.forward_per_sample(&mut g, bev, context, query, &Intrinsic, &commands)?
    } else {
        block.forward(&mut g, bev, context, query, &Intrinsic, &commands)?.out
    };
    let loss = g.sum(out);
    g.backward(loss)?;
    Ok(())
}

fn throughput(block: &MoeBlock, store: &ParamStore, x: &Inputs, per_sample: bool, cfg: &BenchConfig) -> Result<f64> {
    for _ in 0..cfg.warmup {
        step(block, store, x, per_sample)?;
    }
    let start = Instant::now();
    for _ in 0..cfg.repeats {
        step(block, store, x, per_sample)?;
    }
    let secs = start.elapsed().as_secs_f64().max(1e-9);
    Ok((x.bev.shape()[0] * cfg.repeats) as f64 / secs)
}

/// Samples per second for grouped dispatch and for the per-sample loop at
/// each batch size. Single-threaded.
pub fn bench_dispatch(cfg: &BenchConfig, batch_sizes: &[usize]) -> Result<Vec<BenchRow>> {
    if batch_sizes.contains(&0) || cfg.repeats == 0 {
        return Err(PlannerError::Config("batch sizes and repeats must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let block = MoeBlock::new(&mut store, "moe", &cfg.moe, "grouped", &mut rng)?;
    let d = cfg.moe.d_model;
    let mut rows = Vec::new();
    for &b in batch_sizes {
        let x = Inputs {
            bev: uniform(&mut rng, &[b, cfg.c_bev, d], 1.0),
            context: uniform(&mut rng, &[b, cfg.context_len, d], 1.0),
            query: uniform(&mut rng, &[b, 3 * d], 1.0),
        };
        let grouped = throughput(&block, &store, &x, false, cfg)?;
        let naive = throughput(&block, &store, &x, true, cfg)?;
        let speedup = grouped / naive;
        rows.push(BenchRow {
            batch_size: b,
            mode: "grouped",
            samples_per_sec: grouped,
            speedup,
        });
        rows.push(BenchRow {
            batch_size: b,
            mode: "naive",
            samples_per_sec: naive,
            speedup,
        });
    }
    Ok(rows)
}

/// Reference speedups reported for GPU training at batch sizes 64, 128, 256.
pub const REFERENCE_SPEEDUPS: [(usize, f64); 3] = [(64, 7.31), (128, 21.97), (256, 26.2)];

pub fn write_bench_csv(rows: &[BenchRow], path: &Path, comments: &[String]) -> Result<()> {
    let mut out = Vec::new();
    for c in comments {
        writeln!(out, "# {c}").unwrap();
    }
    writeln!(out, "batch_size,mode,samples_per_sec,speedup").unwrap();
    for r in rows {
        writeln!(out, "{},{},{:.3},{:.4}", r.batch_size, r.mode, r.samples_per_sec, r.speedup).unwrap();
    }
    let refs: Vec<String> = REFERENCE_SPEEDUPS.iter().map(|(b, s)| format!("B={b}: {s}")).collect();
    writeln!(out, "# reference speedups, not reproduced at desk scale: {}", refs.join(", ")).unwrap();
    std::fs::write(path, out).map_err(|e| PlannerError::io(path, e))
}
