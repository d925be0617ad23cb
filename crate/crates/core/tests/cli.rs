use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
[model]
d_model = 8
heads = 2
d_sem = 4
encoder_layers = 1
refine_layers = 1

[data]
n = 24
c_bev = 4
d_feat = 4

[train]
epochs = 2
stage1_epochs = 1
batch_size = 8
";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moe-planner")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn workspace() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

#[test]
fn gen_data_is_reproducible() {
    let (dir, cfg) = workspace();
    let a = dir.path().join("a.bin");
    let b = dir.path().join("b.bin");
    for p in [&a, &b] {
        ok(&["gen-data", "--config", s(&cfg), "--seed", "3", "--out", s(p)]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let c = dir.path().join("c.bin");
    ok(&["gen-data", "--config", s(&cfg), "--seed", "4", "--out", s(&c)]);
    assert_ne!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());

    let stdout = ok(&["gen-data", "--config", s(&cfg), "--mismatch-rate", "1.0", "--out", s(&c)]);
    assert!(stdout.contains("mismatched   24"), "{stdout}");
    let data = moe_planner::scene::load_dataset(&c).unwrap();
    assert!(data.scenes.iter().all(|sc| sc.command_mismatch));
}

#[test]
fn train_then_eval() {
    let (dir, cfg) = workspace();
    let data = dir.path().join("train.bin");
    let val = dir.path().join("val.bin");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["gen-data", "--config", s(&cfg), "--seed", "99", "--n", "10", "--out", s(&val)]);
    let out = dir.path().join("run");
    let stdout = ok(&[
        "train", "--config", s(&cfg), "--data", s(&data), "--val", s(&val), "--out", s(&out),
    ]);
    assert!(stdout.contains("epoch   2"), "{stdout}");
    let report = std::fs::read_to_string(out.join("train_report.csv")).unwrap();
    assert_eq!(report.lines().filter(|l| !l.starts_with('#')).count(), 1 + 3);

    let ckpt = out.join("checkpoint.bin");
    let csv = dir.path().join("eval.csv");
    let stdout = ok(&[
        "eval", "--checkpoint", s(&ckpt), "--data", s(&val), "--config", s(&cfg), "--out", s(&csv),
    ]);
    assert!(stdout.contains("constant-velocity"));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.contains("scene_id,nc,dac,ep,ttc,c,pdms"));
    assert!(text.lines().any(|l| l.starts_with("mean:model,")));

    // a checkpoint trained under a different config is refused
    let other = dir.path().join("other.toml");
    std::fs::write(&other, TINY.replace("epochs = 2", "epochs = 3")).unwrap();
    let res = run(&["eval", "--checkpoint", s(&ckpt), "--data", s(&val), "--config", s(&other), "--out", s(&csv)]);
    assert_eq!(res.status.code(), Some(2));

    // data generated with other feature sizes is a config error
    let wide = dir.path().join("wide.toml");
    std::fs::write(&wide, TINY.replace("d_feat = 4", "d_feat = 8")).unwrap();
    let wide_data = dir.path().join("wide.bin");
    ok(&["gen-data", "--config", s(&wide), "--n", "4", "--out", s(&wide_data)]);
    let res = run(&["eval", "--checkpoint", s(&ckpt), "--data", s(&wide_data), "--out", s(&csv)]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn bad_inputs_exit_nonzero() {
    let (dir, cfg) = workspace();
    let missing = dir.path().join("nope.bin");
    let out = dir.path().join("x");
    let res = run(&["train", "--config", s(&cfg), "--data", s(&missing), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(4));
    let res = run(&["train", "--config", s(&cfg), "--data", s(&missing), "--out", s(&out), "--routing-mode", "psychic"]);
    assert_eq!(res.status.code(), Some(2));
    let res = run(&["train", "--data", s(&missing), "--out", s(&out), "--ablate", "no_wheels"]);
    assert!(!res.status.success());
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[model]\nwidth = 3\n").unwrap();
    let res = run(&["gen-data", "--config", s(&bad), "--out", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn bench_writes_expected_columns() {
    let (dir, cfg) = workspace();
    let csv = dir.path().join("bench.csv");
    let stdout = ok(&[
        "bench-dispatch", "--config", s(&cfg), "--batch-sizes", "4,8", "--repeats", "1", "--out", s(&csv),
    ]);
    assert!(stdout.contains("reference GPU speedups"));
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "batch_size,mode,samples_per_sec,speedup");
    assert_eq!(rows.len(), 1 + 4);
    for r in &rows[1..] {
        let cols: Vec<&str> = r.split(',').collect();
        assert_eq!(cols.len(), 4);
        assert!(cols[1] == "grouped" || cols[1] == "naive");
        assert!(cols[2].parse::<f64>().unwrap() > 0.0);
    }
}
