//! End-to-end runs of the `prnet` binary on a tiny synthetic set.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use prnet_core::cli::{RunConfig, RAW_DUMP};
use prnet_core::eval::APResult;
use prnet_core::inference::PredictionDump;

fn prnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prnet")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = prnet(args);
    assert!(
        out.status.success(),
        "prnet {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::write(
            root.join("spec.toml"),
            "seed = 11\nwidth = 32\nheight = 32\nnum_train = 6\nnum_test = 3\n",
        )
        .unwrap();
        ok(&["generate", "--spec", s(&root.join("spec.toml")), "--out", s(&root.join("data"))]);
        Self { _dir: dir, root }
    }

    fn config(&self, name: &str, epochs: usize) -> PathBuf {
        let mut cfg = RunConfig::toy();
        cfg.model.image_height = 32;
        cfg.model.image_width = 32;
        cfg.schedule.epochs = epochs;
        cfg.schedule.batch_size = 3;
        cfg.schedule.checkpoint_every = 1;
        cfg.paths.train_data = self.root.join("data/train.json");
        cfg.paths.eval_data = self.root.join("data/test.json");
        cfg.paths.checkpoints = self.root.join(name).join("ckpt");
        cfg.paths.reports = self.root.join(name).join("reports");
        let path = self.root.join(format!("{name}.toml"));
        cfg.save(&path).unwrap();
        path
    }
}

#[test]
fn generate_writes_the_dataset_schema() {
    let w = Workspace::new();
    for f in ["train.json", "test.json", "spec.json", "test_detections.json", "images/00000.png", "images/00008.png"] {
        assert!(w.root.join("data").join(f).exists(), "{f}");
    }
    let again = w.root.join("again");
    ok(&["generate", "--spec", s(&w.root.join("spec.toml")), "--out", s(&again)]);
    for f in ["train.json", "test.json", "test_detections.json", "images/00003.png"] {
        assert_eq!(fs::read(w.root.join("data").join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_eval_sweep_and_export() {
    let w = Workspace::new();
    let cfg_path = w.config("run", 2);
    let out = ok(&["train", "--config", s(&cfg_path)]);
    assert!(out.contains("steps 4"), "{out}");
    let ckpt = w.root.join("run/ckpt");
    let metrics = fs::read_to_string(ckpt.join("metrics.ndjson")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    assert!(ckpt.join("latest.ckpt").exists() && ckpt.join("epoch-0002.ckpt").exists());
    let resolved = RunConfig::load(&ckpt.join("config.toml")).unwrap();
    assert_eq!(resolved, RunConfig::load(&cfg_path).unwrap());

    // resume continues the step counter and matches an uninterrupted run
    let out = ok(&["train", "--config", s(&cfg_path), "--resume", "--epochs", "3"]);
    assert!(out.contains("epochs 3 steps 6"), "{out}");
    let resumed = fs::read_to_string(ckpt.join("metrics.ndjson")).unwrap();
    let steps: Vec<u64> = resumed
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, vec![1, 2, 3, 4, 5, 6]);
    let straight = w.config("straight", 3);
    ok(&["train", "--config", s(&straight)]);
    assert_eq!(resumed, fs::read_to_string(w.root.join("straight/ckpt/metrics.ndjson")).unwrap());

    // eval: default and --no-nms share the raw dump, differ only afterwards
    let reports = w.root.join("run/reports");
    ok(&["eval", "--config", s(&cfg_path)]);
    let raw = fs::read(reports.join(RAW_DUMP)).unwrap();
    let report: APResult = serde_json::from_slice(&fs::read(reports.join("eval.json")).unwrap()).unwrap();
    let text = fs::read_to_string(reports.join("eval.json")).unwrap();
    for k in ["mAP_full", "mAP_rare", "mAP_nonrare"] {
        assert!(text.contains(k));
    }
    let plain = w.root.join("run/plain");
    ok(&["eval", "--config", s(&cfg_path), "--no-nms", "--reports", s(&plain)]);
    assert_eq!(raw, fs::read(plain.join(RAW_DUMP)).unwrap());
    assert_eq!(fs::read(plain.join(RAW_DUMP)).unwrap(), fs::read(plain.join("detections.json")).unwrap());
    let kept: usize = PredictionDump::load(&reports.join("detections.json"))
        .unwrap()
        .images
        .iter()
        .map(|i| i.detections.len())
        .sum();
    let all: usize = PredictionDump::load(&reports.join(RAW_DUMP)).unwrap().images.iter().map(|i| i.detections.len()).sum();
    assert!(kept <= all);

    // single-cell sweep reproduces eval exactly
    let grid = w.root.join("grid.toml");
    fs::write(&grid, "[[grid]]\nmode = \"product\"\nw_h = 1.0\nw_o = 0.5\nw_rel = 0.5\nthreshold = 0.5\n").unwrap();
    let sweep_dir = w.root.join("sweep1");
    ok(&["nms-sweep", "--config", s(&cfg_path), "--grid", s(&grid), "--reports", s(&sweep_dir), "--dump", s(&reports.join(RAW_DUMP))]);
    let rows: Vec<serde_json::Value> = serde_json::from_slice(&fs::read(sweep_dir.join("nms_sweep.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0]["mAP_full"].as_f64().unwrap(), report.map_full);

    // the full ablation grid has ten rows
    let table = ok(&["nms-sweep", "--config", s(&cfg_path), "--reports", s(&w.root.join("sweep10")), "--dump", s(&reports.join(RAW_DUMP))]);
    assert_eq!(table.lines().count(), 12, "{table}");

    // attention export with per-query images
    let att = w.root.join("att/attention.json");
    let pngs = w.root.join("att/png");
    ok(&[
        "export-attention",
        "--checkpoint",
        s(&ckpt.join("latest.ckpt")),
        "--image",
        s(&w.root.join("data/images/00006.png")),
        "--out",
        s(&att),
        "--images",
        s(&pngs),
        "--scale",
        "4",
    ]);
    let export = prnet_core::model::import_attention(&att).unwrap();
    assert_eq!(export.grid, [4, 4]);
    assert_eq!(export.records.len(), 2 * 4);
    assert_eq!(fs::read_dir(&pngs).unwrap().count(), 2 * 4 * 10);
    let img = image::open(pngs.join("relation-l0-h3-q009.png")).unwrap();
    assert_eq!((img.width(), img.height()), (16, 16));
}

#[test]
fn training_and_evaluation_are_byte_reproducible() {
    let w = Workspace::new();
    let a = w.config("a", 2);
    let b = w.config("b", 2);
    ok(&["train", "--config", s(&a)]);
    ok(&["train", "--config", s(&b)]);
    assert_eq!(
        fs::read(w.root.join("a/ckpt/metrics.ndjson")).unwrap(),
        fs::read(w.root.join("b/ckpt/metrics.ndjson")).unwrap()
    );
    ok(&["eval", "--config", s(&a)]);
    ok(&["eval", "--config", s(&b)]);
    for f in ["eval.json", "raw_detections.json", "detections.json"] {
        assert_eq!(fs::read(w.root.join("a/reports").join(f)).unwrap(), fs::read(w.root.join("b/reports").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn exit_codes_follow_error_kind() {
    let w = Workspace::new();
    let cfg_path = w.config("run", 1);

    let bad = w.root.join("bad.toml");
    fs::write(&bad, "[model]\nheads = 5\n[schedule]\nbatch_size = 0\n").unwrap();
    let out = prnet(&["train", "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("[model]") && err.contains("[schedule]"), "{err}");

    let out = prnet(&["train", "--config", s(&cfg_path), "--train-data", s(&w.root.join("missing.json"))]);
    assert_eq!(out.status.code(), Some(3));

    let out = prnet(&["train", "--config", s(&cfg_path), "--resume"]);
    assert_eq!(out.status.code(), Some(2));

    ok(&["train", "--config", s(&cfg_path)]);
    let mut other = RunConfig::load(&cfg_path).unwrap();
    other.model.memory_dim = 16;
    let other_path = w.root.join("other.toml");
    other.save(&other_path).unwrap();
    let out = prnet(&["eval", "--config", s(&other_path), "--checkpoint", s(&w.root.join("run/ckpt/latest.ckpt"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("memory_dim: config 16, checkpoint 32"), "{err}");

    assert_eq!(prnet(&["train"]).status.code(), Some(2));
    assert_eq!(prnet(&["frobnicate"]).status.code(), Some(2));
}
