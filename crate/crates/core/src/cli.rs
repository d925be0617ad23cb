//! Command-line front end: data generation, training, evaluation and the
//! dispatch benchmark.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{Ablation, RunConfig};
use crate::error::{PlannerError, Result};
use crate::moe::{bench_dispatch, write_bench_csv, BenchConfig, MoeConfig, REFERENCE_SPEEDUPS};
use crate::scene::{generate_dataset, Dataset, load_dataset, save_dataset, ScenarioKind, SceneGenerator};
use crate::train::{evaluate, load_checkpoint, save_checkpoint, train, write_eval_csv, TOOL_VERSION};

/// Speedup that grouped dispatch must reach at batch size 128.
pub const SPEEDUP_BAR: f64 = 3.0;

#[derive(Debug, Parser)]
#[command(name = "moe-planner", version, about = "Autoregressive mixture-of-experts trajectory planner")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint plus a per-epoch report.
    Train(TrainArgs),
    /// Score a checkpoint and the constant-velocity baseline.
    Eval(EvalArgs),
    /// Time grouped expert dispatch against the per-sample loop.
    BenchDispatch(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub mismatch_rate: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out dataset for checkpoint selection; without it the last epoch is kept.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Output directory for `checkpoint.bin` and `train_report.csv`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub routing_mode: Option<String>,
    /// Repeatable: no_moe, no_ar or no_refine.
    #[arg(long = "ablate", value_parser = parse_ablation)]
    pub ablate: Vec<Ablation>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Refuse the checkpoint unless it was trained with this config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "32,64,128")]
    pub batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    match s.replace('-', "_").as_str() {
        "no_moe" => Ok(Ablation::NoMoe),
        "no_ar" => Ok(Ablation::NoAr),
        "no_refine" => Ok(Ablation::NoRefine),
        _ => Err(format!("unknown ablation `{s}` (no_moe, no_ar, no_refine)")),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| PlannerError::io(dir, e))
}

/// Flags override the config file.
pub fn train_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = load_config(args.config.as_deref())?;
    let t = &mut cfg.train;
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(v) = args.lr {
        t.lr = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = &args.routing_mode {
        t.routing_mode = v.clone();
    }
    for &a in &args.ablate {
        if !t.ablations.contains(&a) {
            t.ablations.push(a);
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(v) = args.n {
        cfg.data.n = v;
    }
    if let Some(v) = args.seed {
        cfg.data.seed = v;
    }
    if let Some(v) = args.mismatch_rate {
        cfg.data.mismatch_rate = v;
    }
    cfg.validate()?;
    let d = &cfg.data;
    let data = generate_dataset(&SceneGenerator::from_config(&cfg), d.n, d.seed, d.mismatch_rate)?;
    save_dataset(&data, &args.out)?;
    println!("wrote {} scenes to {}", data.len(), args.out.display());
    for (kind, count) in ScenarioKind::ALL.iter().zip(data.kind_histogram()) {
        println!("  {:<12} {count}", kind.name());
    }
    println!("  mismatched   {}", data.mismatch_count());
    Ok(())
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let cfg = train_config(args)?;
    let data = load_dataset(&args.data)?;
    let val = match &args.val {
        Some(p) => load_dataset(p)?,
        None => Dataset {
            version: data.version.clone(),
            seed: data.seed,
            d_feat: data.d_feat,
            c_bev: data.c_bev,
            scenes: Vec::new(),
        },
    };
    create_dir(&args.out)?;
    let outcome = train(&data, &val, &cfg)?;
    let ckpt = args.out.join("checkpoint.bin");
    save_checkpoint(&outcome.model, outcome.report.best_epoch, &ckpt)?;
    let report = args.out.join("train_report.csv");
    outcome.report.write_csv(&report)?;
    for r in outcome.report.end_to_end() {
        println!(
            "epoch {:>3}  loss {:.4}  l1 {:.4}{}",
            r.epoch,
            r.train_loss,
            r.train_l1.unwrap_or(f64::NAN),
            r.val_l1.map_or(String::new(), |v| format!("  val l1 {v:.4}"))
        );
    }
    println!("config {}  checkpoint {}  report {}", cfg.hash(), ckpt.display(), report.display());
    Ok(())
}

fn run_eval(args: &EvalArgs) -> Result<()> {
    let expected = match &args.config {
        Some(p) => Some(RunConfig::load(p)?.hash()),
        None => None,
    };
    let (_, model) = load_checkpoint(&args.checkpoint, expected.as_deref())?;
    let data = load_dataset(&args.data)?;
    let report = evaluate(&model, &data)?;
    write_eval_csv(&report, &args.out)?;
    for s in [&report.model, &report.baseline] {
        let m = &s.mean;
        println!(
            "{:<18} pdms {:.4}  nc {:.3}  dac {:.3}  ep {:.3}  ttc {:.3}  c {:.3}  l1 {:.4}",
            s.planner, m.pdms, m.nc, m.dac, m.ep, m.ttc, m.c, s.l1
        );
    }
    Ok(())
}

fn run_bench(args: &BenchArgs) -> Result<()> {
    let cfg = load_config(args.config.as_deref())?;
    let mut bench = BenchConfig::new(MoeConfig::from_model(&cfg.model), cfg.data.c_bev);
    bench.repeats = args.repeats;
    let rows = bench_dispatch(&bench, &args.batch_sizes)?;
    let comments = vec![
        format!("moe-planner {TOOL_VERSION}"),
        format!("config_hash {}", cfg.hash()),
        "forward + backward, single thread".to_string(),
    ];
    write_bench_csv(&rows, &args.out, &comments)?;
    for r in &rows {
        println!("B={:<4} {:<8} {:>10.1} samples/s  speedup {:.2}", r.batch_size, r.mode, r.samples_per_sec, r.speedup);
    }
    if let Some(r) = rows.iter().find(|r| r.batch_size == 128) {
        let verdict = if r.speedup >= SPEEDUP_BAR { "PASS" } else { "FAIL" };
        println!("{verdict}: speedup {:.2} at B=128 (bar {SPEEDUP_BAR})", r.speedup);
    }
    let refs: Vec<String> = REFERENCE_SPEEDUPS.iter().map(|(b, s)| format!("B={b} {s}x")).collect();
    println!("reference GPU speedups: {}", refs.join(", "));
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::BenchDispatch(a) => run_bench(a),
    }
}
