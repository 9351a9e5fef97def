use std::path::Path;
use std::process::{Command, Output};

use ptnet_core::eval::MetricsReport;
use ptnet_core::tensor::io;
use ptnet_core::{Rng, Tensor};

fn ptnet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ptnet"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn ptnet")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = ptnet(dir, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str], code: i32) -> String {
    let o = ptnet(dir, args);
    assert_eq!(o.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stderr).unwrap()
}

const TINY: &str = r#"{"preset": "tiny", "train": {"epochs_fixed": 1, "epochs_decay": 1}}"#;

/// A generated dataset and one trained run in a scratch directory.
fn fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.json"), TINY).unwrap();
    ok(d, &["gen-data", "-o", "data", "--volumes", "10", "--size", "32x32", "--slices", "3", "--seed", "4"]);
    ok(d, &["train", "-c", "tiny.json", "-m", "data/manifest.json", "-o", "run1", "--seed", "2"]);
    dir
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn train_is_reproducible_from_seed_and_from_the_snapshot() {
    let dir = fixture();
    let d = dir.path();
    for f in ["best.ptck", "log.jsonl", "epoch_001.ptck", "epoch_002.ptck", "run_config.json"] {
        assert!(d.join("run1").join(f).exists(), "{f}");
    }
    ok(d, &["train", "-c", "tiny.json", "-m", "data/manifest.json", "-o", "run2", "--seed", "2"]);
    ok(d, &["train", "-c", "run1/run_config.json", "-m", "data/manifest.json", "-o", "run3"]);
    for run in ["run2", "run3"] {
        for f in ["log.jsonl", "best.ptck", "run_config.json"] {
            assert_eq!(read(d.join("run1").join(f)), read(d.join(run).join(f)), "{run}/{f}");
        }
    }
    ok(d, &["train", "-c", "tiny.json", "-m", "data/manifest.json", "-o", "run4", "--seed", "3"]);
    assert_ne!(read(d.join("run1/log.jsonl")), read(d.join("run4/log.jsonl")));
}

#[test]
fn evaluate_reports_every_test_volume_and_is_deterministic() {
    let dir = fixture();
    let d = dir.path();
    ok(d, &["evaluate", "-k", "run1/best.ptck", "-m", "data/manifest.json", "-o", "ev1", "--pgm"]);
    ok(d, &["evaluate", "-k", "run1/best.ptck", "-m", "data/manifest.json", "-o", "ev2"]);
    for f in ["metrics.csv", "metrics.json"] {
        assert_eq!(read(d.join("ev1").join(f)), read(d.join("ev2").join(f)), "{f}");
    }
    let manifest: Vec<serde_json::Value> = serde_json::from_slice(&read(d.join("data/manifest.json"))).unwrap();
    let mut test_ids: Vec<&str> = manifest
        .iter()
        .filter(|e| e["split"] == "test")
        .map(|e| e["id"].as_str().unwrap())
        .collect();
    test_ids.dedup();
    let rows = MetricsReport::from_csv(&String::from_utf8(read(d.join("ev1/metrics.csv"))).unwrap()).unwrap();
    assert_eq!(rows.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), test_ids);
    let summary: serde_json::Value = serde_json::from_slice(&read(d.join("ev1/metrics.json"))).unwrap();
    let mean = rows.iter().map(|r| r.ssim).sum::<f64>() / rows.len() as f64;
    assert!((summary["mean_ssim"].as_f64().unwrap() - mean).abs() < 1e-9);
    for id in test_ids {
        let map = io::load(d.join(format!("ev1/error_maps/{id}.ptt"))).unwrap().into_dtype::<f32>();
        assert!(map.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(d.join(format!("ev1/error_maps/{id}_z000.pgm")).exists());
    }
}

#[test]
fn evaluate_compare_surfaces_degenerate_and_disjoint_inputs() {
    let dir = fixture();
    let d = dir.path();
    ok(d, &["evaluate", "-k", "run1/best.ptck", "-m", "data/manifest.json", "-o", "ev"]);
    let err = fails(
        d,
        &["evaluate", "-k", "run1/best.ptck", "-m", "data/manifest.json", "-o", "ev2", "--compare", "ev/metrics.csv"],
        3,
    );
    assert!(err.contains("zero variance"), "{err}");
    std::fs::write(d.join("other.csv"), "id,ssim,psnr\nnope,0.5,20\nnada,0.6,21\n").unwrap();
    fails(
        d,
        &["evaluate", "-k", "run1/best.ptck", "-m", "data/manifest.json", "-o", "ev3", "--compare", "other.csv"],
        2,
    );
}

#[test]
fn synthesize_keeps_extents_and_pads_on_request() {
    let dir = fixture();
    let d = dir.path();
    let vol = Tensor::<f32>::rand_uniform(&[30, 26, 2], 0.0, 1.0, &mut Rng::new(1));
    io::save(d.join("odd.ptt"), &vol).unwrap();
    let err = fails(d, &["synthesize", "-k", "run1/best.ptck", "-i", "odd.ptt", "-o", "out/a.ptt"], 2);
    assert!(err.contains("--pad"), "{err}");
    ok(d, &["synthesize", "-k", "run1/best.ptck", "-i", "odd.ptt", "-o", "out/a.ptt", "--pad"]);
    ok(d, &["synthesize", "-k", "run1/best.ptck", "-i", "odd.ptt", "-o", "out/b.ptt", "--pad"]);
    assert_eq!(read(d.join("out/a.ptt")), read(d.join("out/b.ptt")));
    assert!(d.join("out/a.ptt.run_config.json").exists());
    let y = io::load(d.join("out/a.ptt")).unwrap().into_dtype::<f32>();
    assert_eq!(y.shape(), vol.shape());
    assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn error_paths_exit_with_their_category() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let err = fails(d, &["train", "-m", "missing/manifest.json", "-o", "r"], 3);
    assert!(err.contains("missing/manifest.json"), "{err}");
    std::fs::write(d.join("bad.json"), r#"{"modle": 1, "train": {"lrr": 1, "adam": {"beta9": 0}}}"#).unwrap();
    let err = fails(d, &["train", "-c", "bad.json", "-m", "m.json", "-o", "r"], 2);
    for key in ["modle", "train.lrr", "train.adam.beta9"] {
        assert!(err.contains(key), "{err}");
    }
    fails(d, &["gen-data", "--volumes", "10"], 2);
    fails(d, &["gen-data", "-o", "x", "--volumes", "3"], 2);
    fails(d, &["bench-attention", "--lengths", "1"], 2);
    fails(d, &["train"], 2);
}

#[test]
fn gradcheck_passes_and_its_negative_control_fails() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(d, &["gradcheck", "--size", "8", "--max-coords", "4", "-o", "gc"]);
    assert!(out.contains("PASS"));
    let report: serde_json::Value = serde_json::from_slice(&read(d.join("gc/gradcheck.json"))).unwrap();
    let mut names: Vec<&str> = report["params"].as_array().unwrap().iter().map(|p| p["name"].as_str().unwrap()).collect();
    let n = names.len();
    names.sort_unstable();
    names.dedup();
    assert_eq!(names.len(), n, "a parameter group is listed twice");
    let (_, store) = ptnet_core::model::PtNet::new::<f64>(&ptnet_core::model::PtNetConfig::tiny(), 0).unwrap();
    assert_eq!(n, store.len());
    fails(d, &["gradcheck", "--size", "8", "--max-coords", "4", "--corrupt-backward"], 4);
}

#[test]
fn bench_attention_writes_one_row_per_length() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["bench-attention", "--lengths", "16,64", "--repeats", "1", "-o", "b"]);
    let csv = String::from_utf8(read(d.join("b/attention_bench.csv"))).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "L,d_k,m,exact_ms,favor_ms,rel_error");
    assert!(lines[1].starts_with("16,") && lines[2].starts_with("64,"));
}
