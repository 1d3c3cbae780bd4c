use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mimicforge::commands::{loss_log_path, read_manifest, run_record_path, RunRecord};
use mimicforge_core::imgcore::read_png;
use mimicforge_diffcore::checkpoint;

const CONFIG: &str = "seed = 3\n\
[prepare]\nresolution = 32\n\
[model]\nwidths = [8, 16, 16]\ntime_dim = 8\n\
[train]\nbatch = 2\nlog_interval = 5\n";

fn mf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mimicforge"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = mf(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Fixture {
    fn new(videos: &str, stills: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("run.toml");
        std::fs::write(&config, CONFIG).unwrap();
        let f = Fixture { _dir: dir, root, config };
        let data = f.root.join("data");
        ok(&["--config", s(&f.config), "synth", "--out", s(&data), "--videos", videos, "--stills", stills, "--frames", "6", "--size", "40"]);
        ok(&["--config", s(&f.config), "prepare", "--dataset", s(&data), "--out", s(&f.root.join("pairs"))]);
        f
    }

    fn train(&self, out: &str, steps: &str, resume: Option<&Path>) -> PathBuf {
        let ckpt = self.root.join(out);
        let pairs = self.root.join("pairs");
        let mut args = vec!["--config", s(&self.config), "train", "--pairs", s(&pairs)];
        args.extend(["--out", s(&ckpt), "--steps", steps]);
        if let Some(r) = resume {
            args.extend(["--resume", s(r)]);
        }
        ok(&args);
        ckpt
    }
}

#[test]
fn empty_dataset_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("data/videos")).unwrap();
    let out = mf(&["prepare", "--dataset", s(&dir.path().join("data")), "--out", s(&dir.path().join("pairs"))]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bad_config_and_usage_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "sede = 1\n").unwrap();
    let out = mf(&["--config", s(&cfg), "prepare", "--dataset", "x", "--out", "y"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(mf(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(mf(&["--help"]).status.code(), Some(0));
    let out = mf(&["prepare", "--dataset", s(&dir.path().join("missing")), "--out", s(dir.path())]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn stills_only_give_pseudo_pairs() {
    let f = Fixture::new("0", "4");
    let entries = read_manifest(&f.root.join("pairs")).unwrap();
    assert_eq!(entries.len(), 4);
    for e in &entries {
        assert!(!e.origin.is_video());
        assert!(e.grid.is_none() && e.depth.is_none());
        assert!(f.root.join("pairs").join(&e.mask).is_file());
    }
}

#[test]
fn train_resume_and_edit() {
    let f = Fixture::new("3", "2");
    let entries = read_manifest(&f.root.join("pairs")).unwrap();
    assert!(entries.iter().any(|e| e.origin.is_video() && e.grid.is_some()));

    let one = f.train("one.mfck", "1", None);
    let ck = checkpoint::load(&one).unwrap();
    assert_eq!(ck.step, 1);
    assert!(!ck.tensors.is_empty());

    let first = f.train("first.mfck", "20", None);
    let lines = std::fs::read_to_string(loss_log_path(&first)).unwrap();
    assert_eq!(lines.lines().count(), 20 / 5);

    let resumed = f.train("resumed.mfck", "10", Some(&first));
    assert_eq!(checkpoint::load(&resumed).unwrap().step, 30);
    let steps: Vec<u64> = std::fs::read_to_string(loss_log_path(&resumed))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["step"].as_u64().unwrap())
        .collect();
    assert_eq!(steps, [25, 30]);

    let pair = f.root.join("pairs").join("pairs").join(&entries[0].id);
    let out = f.root.join("edit.png");
    ok(&[
        "--config", s(&f.config), "edit", "--checkpoint", s(&resumed),
        "--source", s(&pair.join("source.png")),
        "--mask", s(&pair.join("mask.png")),
        "--reference", s(&pair.join("reference.png")),
        "--out", s(&out), "--steps", "5",
    ]);
    let record: RunRecord = serde_json::from_str(&std::fs::read_to_string(run_record_path(&out)).unwrap()).unwrap();
    assert_eq!(record.guidance_scale, 5.0);
    assert_eq!(record.checkpoint_step, 30);
    assert_eq!(record.seed, 3);

    let source = read_png(pair.join("source.png")).unwrap();
    let mask = read_png(pair.join("mask.png")).unwrap();
    let edited = read_png(&out).unwrap();
    assert_eq!(edited.dims(), source.dims());
    let mut kept = 0;
    for y in 0..source.height() {
        for x in 0..source.width() {
            if mask.get(y, x, 0) < 0.5 {
                kept += 1;
                for c in 0..3 {
                    assert_eq!(edited.get(y, x, c), source.get(y, x, c), "pixel ({y}, {x}) changed");
                }
            }
        }
    }
    assert!(kept > 0);

    // untrained checkpoints are refused
    let zero = f.train("zero.mfck", "0", None);
    let out = mf(&[
        "edit", "--checkpoint", s(&zero),
        "--source", s(&pair.join("source.png")),
        "--mask", s(&pair.join("mask.png")),
        "--reference", s(&pair.join("reference.png")),
        "--out", s(&f.root.join("never.png")),
    ]);
    assert_ne!(out.status.code(), Some(0));
}
