use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn spda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spda"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = spda(args);
    assert!(
        out.status.success(),
        "spda {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push((
                    path.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&path).unwrap(),
                ));
            }
        }
    }
    files.sort();
    files
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

fn synth(dir: &Path, seed: &str, n: &str, extra: &[&str]) {
    let mut args = vec!["--seed", seed, "--out", p(dir), "synth", "--n-cases", n];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn synth_is_byte_deterministic() {
    let t = TempDir::new().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    synth(&a, "7", "4", &[]);
    synth(&b, "7", "4", &[]);
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 5);
    assert_eq!(ta, tb);
}

#[test]
fn synth_prevalence_zero_and_provenance() {
    let t = TempDir::new().unwrap();
    let d = t.path().join("d");
    synth(&d, "3", "5", &["--prevalence", "0"]);
    let m = read_json(&d.join("manifest.json"));
    let cases = m["cases"].as_array().unwrap();
    assert_eq!(cases.len(), 5);
    assert!(cases.iter().all(|c| c["label"] == false));
    assert_eq!(m["run_config"]["seed"], 3);
    assert_eq!(m["run_config"]["config"]["synth"]["prevalence"], 0.0);
    assert!(m["run_config"]["tool_version"].is_string());
}

#[test]
fn synth_usage_errors() {
    let t = TempDir::new().unwrap();
    let cfg = t.path().join("bad.toml");
    fs::write(&cfg, "[synth]\nsize_mix = [0.5, 0.5, 0.5]\n").unwrap();
    let out = spda(&[
        "--config",
        p(&cfg),
        "--out",
        p(&t.path().join("x")),
        "synth",
    ]);
    assert_eq!(out.status.code(), Some(1));

    let d = t.path().join("d");
    synth(&d, "1", "2", &[]);
    let again = spda(&["--out", p(&d), "synth", "--n-cases", "2"]);
    assert_eq!(
        again.status.code(),
        Some(1),
        "non-empty dir without --force"
    );
    ok(&["--out", p(&d), "--force", "synth", "--n-cases", "2"]);

    assert_eq!(spda(&["synth"]).status.code(), Some(1), "missing --out");
    assert_eq!(
        spda(&["--attention", "bogus", "synth"]).status.code(),
        Some(1)
    );
    fs::write(&cfg, "[train]\nepochz = 3\n").unwrap();
    assert_eq!(
        spda(&["--config", p(&cfg), "--out", p(&d), "synth"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn gradcheck_passes_and_detects_fault() {
    let t = TempDir::new().unwrap();
    let out = ok(&["--out", p(t.path()), "gradcheck"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("soga_head") && !text.contains("FAIL"));
    let r = read_json(&t.path().join("gradcheck.json"));
    assert_eq!(r["passed"], true);
    assert_eq!(r["provenance"]["seed"], 0);

    let bad = spda(&["gradcheck", "--inject-fault"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

fn train(ds: &Path, out: &Path, seed: &str, epochs: &str, extra: &[&str]) {
    let mut args = vec!["--seed", seed, "--out", p(out)];
    args.extend_from_slice(extra);
    args.extend_from_slice(&[
        "train",
        "--dataset",
        p(ds),
        "--epochs",
        epochs,
        "--lr",
        "3e-3",
    ]);
    ok(&args);
}

fn epoch_losses(log: &Path) -> Vec<f64> {
    fs::read_to_string(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap())
        .filter(|v| v["event"] == "epoch")
        .map(|v| v["mean_loss"].as_f64().unwrap())
        .collect()
}

#[test]
fn train_zero_epochs_is_initialization_and_runs_are_deterministic() {
    let t = TempDir::new().unwrap();
    let ds = t.path().join("ds");
    synth(&ds, "2", "4", &[]);
    let (z1, z2) = (t.path().join("z1"), t.path().join("z2"));
    train(&ds, &z1, "9", "0", &[]);
    train(&ds, &z2, "9", "0", &["--attention", "foa"]);
    let init = spda_core::segnet::load_checkpoint(&z1.join("checkpoint.spdk")).unwrap();
    assert_eq!(init.header.epoch, 0);
    let mut cfg = spda_core::RunConfig::default();
    cfg.seed = 9;
    let fresh = spda_core::SegModel::new(cfg.unet(), 9).unwrap();
    let model = init.into_model().unwrap();
    assert_eq!(model.params.len(), fresh.params.len());
    for ((_, a), (_, b)) in model.params.iter().zip(fresh.params.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.tensor.data(), b.tensor.data());
    }
    assert_ne!(
        fs::read(z1.join("checkpoint.spdk")).unwrap(),
        fs::read(z2.join("checkpoint.spdk")).unwrap()
    );

    let (a, b) = (t.path().join("a"), t.path().join("b"));
    train(&ds, &a, "4", "2", &[]);
    train(&ds, &b, "4", "2", &[]);
    assert_eq!(tree(&a), tree(&b));
    assert_eq!(epoch_losses(&a.join("train_log.jsonl")).len(), 2);
    let header: Value = serde_json::from_str(
        fs::read_to_string(a.join("train_log.jsonl"))
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    assert_eq!(header["provenance"]["seed"], 4);

    let again = spda(&[
        "--out",
        p(&a),
        "train",
        "--dataset",
        p(&ds),
        "--epochs",
        "1",
    ]);
    assert_eq!(
        again.status.code(),
        Some(1),
        "existing checkpoint without --force"
    );
    let missing = spda(&[
        "--out",
        p(&a),
        "--force",
        "train",
        "--dataset",
        p(&t.path().join("nope")),
    ]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn train_overfits_two_cases() {
    let t = TempDir::new().unwrap();
    let ds = t.path().join("ds");
    synth(&ds, "5", "2", &["--prevalence", "1"]);
    let out = t.path().join("tr");
    train(&ds, &out, "0", "200", &[]);
    let losses = epoch_losses(&out.join("train_log.jsonl"));
    assert_eq!(losses.len(), 200);
    let (first, last) = (losses[0], *losses.last().unwrap());
    assert!(last < 0.1 * first, "loss {first} -> {last}");
}

fn eval(ds: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["--out", p(out)];
    args.extend_from_slice(extra);
    args.extend_from_slice(&["eval", "--dataset", p(ds)]);
    spda(&args)
}

#[test]
fn eval_fixtures_determinism_and_compatibility() {
    let t = TempDir::new().unwrap();
    let ds = t.path().join("ds");
    synth(&ds, "11", "6", &["--prevalence", "0.5"]);

    let gt = t.path().join("gt");
    let out = spda(&[
        "--out",
        p(&gt),
        "eval",
        "--dataset",
        p(&ds),
        "--predictor",
        "ground-truth",
    ]);
    assert!(out.status.success());
    let r = read_json(&gt.join("report.json"));
    assert_eq!(r["aggregate"]["dsc"], 1.0);
    assert_eq!(r["aggregate"]["ap"], 1.0);
    assert!(r["stratified"]["groups"].is_array());
    assert_eq!(r["provenance"]["config"]["eval"]["stratify"], "percentile");

    let zero = t.path().join("zero");
    let out = spda(&[
        "--out",
        p(&zero),
        "eval",
        "--dataset",
        p(&ds),
        "--predictor",
        "zero",
    ]);
    assert!(out.status.success());
    let r = read_json(&zero.join("report.json"));
    assert_eq!(r["aggregate"]["ap"], 0.0);
    assert_eq!(r["aggregate"]["sen_at_fp"], 0.0);
    assert_eq!(r["aggregate"]["auc_roc"], 0.5);

    let tr = t.path().join("tr");
    train(&ds, &tr, "1", "1", &[]);
    let ck = tr.join("checkpoint.spdk");
    let (e1, e2) = (t.path().join("e1"), t.path().join("e2"));
    for e in [&e1, &e2] {
        let out = eval(&ds, e, &[]);
        assert!(!out.status.success(), "model predictor needs a checkpoint");
        let out = spda(&[
            "--out",
            p(e),
            "eval",
            "--dataset",
            p(&ds),
            "--checkpoint",
            p(&ck),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    assert_eq!(tree(&e1), tree(&e2));
    let e5 = t.path().join("e5");
    let single = Command::new(env!("CARGO_BIN_EXE_spda"))
        .env("SPDA_THREADS", "1")
        .args([
            "--out",
            p(&e5),
            "eval",
            "--dataset",
            p(&ds),
            "--checkpoint",
            p(&ck),
        ])
        .output()
        .unwrap();
    assert!(single.status.success());
    assert_eq!(tree(&e1), tree(&e5));
    let bad_threads = Command::new(env!("CARGO_BIN_EXE_spda"))
        .env("SPDA_THREADS", "0")
        .args([
            "--out",
            p(&e5),
            "--force",
            "eval",
            "--dataset",
            p(&ds),
            "--checkpoint",
            p(&ck),
        ])
        .output()
        .unwrap();
    assert_eq!(bad_threads.status.code(), Some(1));
    let csv = fs::read_to_string(e1.join("froc_curve.csv")).unwrap();
    assert!(csv.starts_with("# provenance: "));
    let r = read_json(&e1.join("report.json"));
    assert_eq!(r["checkpoint"]["epoch"], 1);
    assert_eq!(r["cases"].as_array().unwrap().len(), 6);

    let e3 = t.path().join("e3");
    let bad = spda(&[
        "--out",
        p(&e3),
        "--attention",
        "soa",
        "eval",
        "--dataset",
        p(&ds),
        "--checkpoint",
        p(&ck),
    ]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("incompatible checkpoint"));

    let cfg = t.path().join("h.toml");
    fs::write(&cfg, "[data]\nholdout = 2\n").unwrap();
    let e4 = t.path().join("e4");
    let out = spda(&[
        "--config",
        p(&cfg),
        "--out",
        p(&e4),
        "eval",
        "--dataset",
        p(&ds),
        "--checkpoint",
        p(&ck),
    ]);
    assert!(out.status.success());
    let cases = read_json(&e4.join("report.json"))["cases"]
        .as_array()
        .unwrap()
        .clone();
    assert_eq!(cases.len(), 2);
}
