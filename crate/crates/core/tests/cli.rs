//! The `svs` binary: output, exit codes and diagnostics.

mod common;

use std::path::Path;
use std::process::{Command, Output};

use svs_core::spectrum::LayerReport;
use svs_core::tensor_store::{Checkpoint, DType, Tensor};

fn svs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svs")).args(args).env_remove("SVS_THREADS").output().unwrap()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn sample(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("in.st");
    let w = common::with_spectrum(&mut common::rng(31), 4, 6, &[100.0, 20.0, 3.0, 1.0]);
    Checkpoint::from_tensors([
        Tensor::from_f64("fc.weight", vec![4, 6], DType::F64, w.as_slice()).unwrap(),
        Tensor::from_f64("fc.bias", vec![4], DType::F64, &[3.0, 0.0, 4.0, 0.0]).unwrap(),
        Tensor::from_f64("dead.weight", vec![2, 2], DType::F32, &[1.0, 0.0, 0.0, 0.0]).unwrap(),
    ])
    .unwrap()
    .save(&path)
    .unwrap();
    path
}

#[test]
fn refine_then_diff_shows_root_condition() {
    let dir = tempfile::tempdir().unwrap();
    let input = sample(dir.path());
    let output = dir.path().join("out.st");
    let o = svs(&["refine", arg(&input), arg(&output), "--scaler", "sqrt"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let o = svs(&["diff", arg(&input), arg(&output), "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let reps: Vec<LayerReport> = serde_json::from_slice(&o.stdout).unwrap();
    let fc = reps.iter().find(|r| r.layer_name == "fc.weight").unwrap();
    let (b, a) = (fc.before.condition.finite().unwrap(), fc.after.unwrap().condition.finite().unwrap());
    assert!(common::rel(a, b.sqrt()) <= 1e-6);
    assert!(common::rel(b, 100.0) <= 1e-9);

    let out = Checkpoint::load(&output).unwrap();
    let bias = out.get("fc.bias").unwrap().to_f64();
    let norm = bias.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((norm - 5f64.sqrt()).abs() <= 1e-12);
}

#[test]
fn abslog_on_zero_singular_value_exits_70() {
    let dir = tempfile::tempdir().unwrap();
    let input = sample(dir.path());
    let o = svs(&["refine", arg(&input), arg(&dir.path().join("o.st")), "--scaler", "abslog"]);
    assert_eq!(o.status.code(), Some(70));
    let msg = stderr(&o);
    assert_eq!(msg.lines().count(), 1);
    assert!(msg.contains("dead.weight"), "{msg}");
}

#[test]
fn missing_file_exits_74() {
    let o = svs(&["inspect", "definitely-missing.st"]);
    assert_eq!(o.status.code(), Some(74));
    assert!(stderr(&o).contains("definitely-missing.st"));
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(svs(&["refine", "a.st"]).status.code(), Some(64));
    assert_eq!(svs(&["frobnicate"]).status.code(), Some(64));
    assert_eq!(svs(&["refine", "a", "b", "--scaler", "cube"]).status.code(), Some(64));
    assert_eq!(svs(&["inspect", "a.st", "--json", "--csv"]).status.code(), Some(64));

    let dir = tempfile::tempdir().unwrap();
    let input = sample(dir.path());
    let o = svs(&["refine", arg(&input), arg(&dir.path().join("o.st")), "--include", "nothing*"]);
    assert_eq!(o.status.code(), Some(64));
    assert!(stderr(&o).contains("nothing to refine"));
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_svs")).args(["inspect", "x.st"]).env("SVS_THREADS", "0").output().unwrap();
    assert_eq!(o.status.code(), Some(64));
}

#[test]
fn diff_shape_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.st"), dir.path().join("b.st"));
    Checkpoint::from_tensors([common::f64_tensor("w", vec![2, 3], &[1.0; 6])]).unwrap().save(&a).unwrap();
    Checkpoint::from_tensors([common::f64_tensor("w", vec![3, 2], &[1.0; 6])]).unwrap().save(&b).unwrap();
    let o = svs(&["diff", arg(&a), arg(&b)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("\"w\""));
}

#[test]
fn inspect_formats_and_output_file() {
    let dir = tempfile::tempdir().unwrap();
    let input = sample(dir.path());
    let o = svs(&["inspect", arg(&input), "--csv", "--bins", "8"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("layer,record,bin"));
    assert_eq!(text.lines().filter(|l| l.starts_with("fc.weight,bin,")).count(), 8);

    let report = dir.path().join("r.json");
    let o = svs(&["inspect", arg(&input), "--filter", "fc.*", "--pooled", "--output", arg(&report)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(o.stdout.is_empty());
    let reps: Vec<LayerReport> = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    let names: Vec<&str> = reps.iter().map(|r| r.layer_name.as_str()).collect();
    assert_eq!(names, ["fc.weight", "*pooled*"]);
}

#[test]
fn no_bias_keeps_biases() {
    let dir = tempfile::tempdir().unwrap();
    let input = sample(dir.path());
    let output = dir.path().join("o.st");
    let o = svs(&["refine", arg(&input), arg(&output), "--no-bias", "--exclude", "dead*"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let (a, b) = (Checkpoint::load(&input).unwrap(), Checkpoint::load(&output).unwrap());
    assert_eq!(a.get("fc.bias"), b.get("fc.bias"));
    assert_eq!(a.get("dead.weight"), b.get("dead.weight"));
    assert_ne!(a.get("fc.weight"), b.get("fc.weight"));
}

#[test]
fn bench_writes_curves_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bench.cfg");
    std::fs::write(
        &cfg,
        "num_seeds = 2\ndims = 4, 8, 8, 3\nteacher_steps = 300\nstudent_steps = 40\neval_size = 64\nbatch = 16\n",
    )
    .unwrap();
    let out = dir.path().join("results");
    let o = svs(&["bench", "--config", arg(&cfg), "--out", arg(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let curves = std::fs::read_to_string(out.join("curves.csv")).unwrap();
    assert!(curves.starts_with("init,seed,step,loss\n"));
    // 3 inits x 2 seeds x 5 grid points
    assert_eq!(curves.lines().count(), 1 + 3 * 2 * 5);
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert!(summary["per_init"]["scaled"]["median_final_loss"].is_number());

    std::fs::write(&cfg, "sparsity = 2\n").unwrap();
    assert_eq!(svs(&["bench", "--config", arg(&cfg), "--out", arg(&out)]).status.code(), Some(64));
}

#[test]
fn help_exits_zero() {
    let o = svs(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = String::from_utf8(o.stdout).unwrap();
    for cmd in ["inspect", "refine", "diff", "bench"] {
        assert!(text.contains(cmd));
    }
}
