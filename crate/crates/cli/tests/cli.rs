use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use bsac_cli::checkpoint::Checkpoint;
use bsac_cli::metrics::METRICS_HEADER;
use bsac_core::envs::{lqr_optimal_return, ChainLqrEnv};
use serde_json::Value;

const TINY: [&str; 12] = [
    "--set",
    "start_steps=100",
    "--set",
    "batch_size=16",
    "--set",
    "hidden_units=8",
    "--set",
    "eval_interval=100",
    "--set",
    "eval_episodes=1",
    "--checkpoint-interval",
    "100",
];

fn bsac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bsac")).args(args).env("RUST_LOG", "info").output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn text(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn train_tiny(dir: &Path, extra: &[&str]) -> Output {
    let out_dir = dir.to_str().unwrap();
    let mut args = vec!["train", "--env", "pendulum", "--steps", "300", "--out-dir", out_dir];
    args.extend(TINY);
    args.extend(extra);
    bsac(&args)
}

fn json_lines(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stdout).lines().map(|l| serde_json::from_str(l).expect("JSON line")).collect()
}

#[test]
fn train_writes_metrics_evals_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = text(&dir.path().join("metrics.csv"));
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some(METRICS_HEADER.join(",").as_str()));
    assert!(lines.count() >= 1);
    assert_eq!(text(&dir.path().join("evals.csv")).lines().count(), 4);
    for step in [100, 200, 300] {
        assert!(dir.path().join(format!("ckpt_{step}.json")).exists());
    }
    let run: Value = serde_json::from_str(&text(&dir.path().join("run.json"))).unwrap();
    assert_eq!(run["factorization_string"], "P(t1)");
    assert_eq!(run["config"]["hidden_units"], 8);
}

#[test]
fn stripped_timing_makes_runs_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        assert_eq!(code(&train_tiny(d.path(), &["--strip-timing", "--seed", "4"])), 0);
    }
    for f in ["metrics.csv", "evals.csv", "ckpt_300.json"] {
        assert_eq!(text(&a.path().join(f)), text(&b.path().join(f)), "{f}");
    }
}

#[test]
fn chain_topology_reports_its_factorization() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let mut args = vec!["train", "--env", "chain-lqr-3", "--topology", "hopper-chain", "--steps", "200", "--out-dir", d];
    args.extend(TINY);
    let out = bsac(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("P(t1)P(t2|t1)P(t3|t2)"));
    let run: Value = serde_json::from_str(&text(&dir.path().join("run.json"))).unwrap();
    assert_eq!(run["factorization_string"], "P(t1)P(t2|t1)P(t3|t2)");
}

#[test]
fn eval_of_a_fresh_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train_tiny(dir.path(), &[])), 0);
    let ckpt = dir.path().join("ckpt_100.json");
    let out = bsac(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--episodes", "3"]);
    assert_eq!(code(&out), 0);
    let s = &json_lines(&out)[0];
    let mean = s["mean"].as_f64().unwrap();
    assert!(mean.is_finite() && mean < 0.0);
    assert_eq!(s["episodes"], 3);

    let out = bsac(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--episodes", "1"]);
    assert_eq!(json_lines(&out)[0]["std"].as_f64(), Some(0.0));
}

#[test]
fn checkpoint_text_round_trips_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train_tiny(dir.path(), &[])), 0);
    let path = dir.path().join("ckpt_200.json");
    let loaded = Checkpoint::load(&path).unwrap();
    let again = dir.path().join("again.json");
    loaded.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn checkpoint_for_another_environment_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train_tiny(dir.path(), &[])), 0);
    let path = dir.path().join("ckpt_100.json");
    let swapped = text(&path).replacen("\"env\": \"pendulum\"", "\"env\": \"chain-lqr-3\"", 1);
    let bad = dir.path().join("swapped.json");
    std::fs::write(&bad, swapped).unwrap();
    assert_eq!(code(&bsac(&["eval", "--checkpoint", bad.to_str().unwrap()])), 2);
}

#[test]
fn exported_riccati_controller_reproduces_the_optimum() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lqr.json");
    assert_eq!(code(&bsac(&["export-lqr", "--env", "chain-lqr-3", "--out", path.to_str().unwrap()])), 0);
    let out = bsac(&["eval", "--checkpoint", path.to_str().unwrap(), "--episodes", "100", "--seed", "0"]);
    let s = &json_lines(&out)[0];
    let (mean, std) = (s["mean"].as_f64().unwrap(), s["std"].as_f64().unwrap());
    let optimum = lqr_optimal_return(&ChainLqrEnv::new(3), 100, 0).unwrap();
    assert!((mean - optimum).abs() <= std / 10.0, "{mean} vs {optimum}");
    assert_eq!(code(&bsac(&["export-lqr", "--env", "pendulum", "--out", path.to_str().unwrap()])), 2);
}

#[test]
fn verify_passes_on_five_seeds_within_a_minute() {
    let start = Instant::now();
    for seed in 0..5 {
        let out = bsac(&["verify", "--seed", &seed.to_string()]);
        assert_eq!(code(&out), 0, "seed {seed}: {}", String::from_utf8_lossy(&out.stdout));
        let lines = json_lines(&out);
        assert_eq!(lines.len(), 9);
        assert!(lines[..8].iter().all(|l| l["passed"] == true));
    }
    assert!(start.elapsed() < Duration::from_secs(60), "{:?}", start.elapsed());
}

#[test]
fn corrupted_tanh_correction_fails_the_density_check() {
    let out = bsac(&["verify", "--corrupt-tanh-correction"]);
    assert_eq!(code(&out), 1);
    let lines = json_lines(&out);
    let density = lines.iter().find(|l| l["check"] == "chain-rule-density").unwrap();
    assert_eq!(density["passed"], false);
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn plot_handles_empty_single_and_multiple_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let header = METRICS_HEADER.join(",");
    let empty = write(dir.path(), "empty.csv", &format!("{header}\n"));
    let one = write(dir.path(), "one.csv", &format!("{header}\n200,0,-5,-5,0,0,0,0,0,0\n"));
    let two = write(dir.path(), "two.csv", &format!("{header}\n200,0,-5,-5,0,0,0,0,0,0\n400,1,-3,-4,0,0,0,0,0,0\n"));
    let svg = dir.path().join("out.svg");
    let svg_s = svg.to_str().unwrap();

    let out = bsac(&["plot", empty.to_str().unwrap(), "--out", svg_s]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("row"));

    assert_eq!(code(&bsac(&["plot", one.to_str().unwrap(), "--out", svg_s])), 0);
    assert_eq!(text(&svg).matches("<circle").count(), 1);

    assert_eq!(code(&bsac(&["plot", two.to_str().unwrap(), two.to_str().unwrap(), "--out", svg_s])), 0);
    let body = text(&svg);
    assert_eq!(body.matches("<polyline").count(), 2);
    assert!(body.contains("class=\"legend\""));
}

#[test]
fn invalid_configuration_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("x");
    let d = d.to_str().unwrap();
    for extra in [
        vec!["--set", "batchsize=3"],
        vec!["--topology", "nope"],
        vec!["--env", "cartpole"],
        vec!["--set", "gamma=1.5"],
        vec!["--topology", "walker-tree"],
    ] {
        let mut args = vec!["train", "--steps", "10", "--out-dir", d];
        args.extend(&extra);
        assert_eq!(code(&bsac(&args)), 2, "{extra:?}");
    }
    assert!(!dir.path().join("x").join("metrics.csv").exists());
}

#[test]
fn non_finite_training_exits_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_tiny(dir.path(), &["--set", "reward_scale=1e308"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("ckpt_100.json").exists());
}

#[test]
fn sweep_is_deterministic() {
    let run = |dir: &Path| {
        let d = dir.to_str().unwrap();
        let out = bsac(&[
            "sweep", "--env", "chain-lqr-3", "--steps", "200", "--topology", "hopper-chain", "--topology", "single", "--seeds", "0,1",
            "--out-dir", d, "--set", "start_steps=100", "--set", "batch_size=16", "--set", "hidden_units=8", "--set", "eval_interval=100",
            "--set", "eval_episodes=1",
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        text(&dir.join("overlay.svg"))
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let svg = run(a.path());
    assert_eq!(svg, run(b.path()));
    assert_eq!(svg.matches("<circle").count() + svg.matches("<polyline").count(), 4);
    assert!(svg.contains("hopper-chain seed 1") && svg.contains("single seed 0"));
    assert_eq!(text(&a.path().join("single-seed1/metrics.csv")), text(&b.path().join("single-seed1/metrics.csv")));
}
