use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use reroof::data::{write_dataset, DatasetSplit, Image, ImageSequence, ReroofLabel};
use reroof_cli::commands::{cmd_baseline, cmd_eval, BaselineKind};
use reroof_cli::RunConfig;

fn reroof(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reroof")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = reroof(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every dataset file under `root`, relative path to contents. The resolved
/// config records the output path, so it is left out.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if !path.ends_with("resolved_config.toml") {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn labels(root: &Path) -> BTreeMap<String, Option<i32>> {
    serde_json::from_str(&fs::read_to_string(root.join("labels.json")).unwrap()).unwrap()
}

#[test]
fn synth_is_reproducible_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (out, seed) in [(&a, "3"), (&b, "3"), (&c, "4")] {
        ok(&["synth", "--buildings", "6", "--seed", seed, "--out", s(out)]);
    }
    assert_eq!(tree(&a), tree(&b));
    assert_ne!(tree(&a), tree(&c));
}

#[test]
fn synth_with_no_buildings_writes_an_empty_dataset() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--buildings", "0", "--out", s(dir.path())]);
    assert!(labels(dir.path()).is_empty());
}

#[test]
fn certain_transition_labels_every_building() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["synth", "--buildings", "12", "--transition-prob", "1.0", "--out", s(dir.path())]);
    let l = labels(dir.path());
    assert_eq!(l.len(), 12);
    assert!(l.values().all(|y| matches!(y, Some(2013..=2018))), "{l:?}");
}

#[test]
fn missing_dataset_is_a_clean_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = reroof(&["train", "--data", "/nonexistent/reroof", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:") && err.contains("/nonexistent/reroof"), "{err}");
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let models = dir.path().join("models");
    ok(&["synth", "--buildings", "4", "--out", s(&data)]);
    fs::create_dir_all(&models).unwrap();
    fs::write(models.join("vae.ckpt"), b"definitely not a checkpoint").unwrap();
    fs::write(models.join("pairclf.ckpt"), b"").unwrap();
    let out = reroof(&["infer", "--models", s(&models), "--data", s(&data), "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
    assert!(!dir.path().join("predictions.json").exists());
}

#[test]
fn impact_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&["impact", "--out", s(dir.path())]);
    assert!(text.contains("750"), "{text}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("impact.json")).unwrap()).unwrap();
    assert!((json["total_co2_mt"].as_f64().unwrap() - 750.0).abs() < 1e-9);
    assert!((json["annual_co2_mt"].as_f64().unwrap() - 25.0).abs() < 1e-9);
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "seed = 1\nsede = 2\n").unwrap();
    let out = reroof(&["impact", "--config", s(&cfg), "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("sede"));
}

#[test]
fn train_infer_eval_on_a_small_synthetic_set() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["synth", "--buildings", "20", "--seed", "2", "--out", s(&data)]);
    ok(&["train", "--data", s(&data), "--out", s(&run), "--vae-epochs", "1", "--clf-epochs", "2"]);
    for f in ["vae.ckpt", "pairclf.ckpt", "vae_log.csv", "pairclf_log.csv", "resolved_config.toml"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    // Header plus epochs 0 and 1.
    assert_eq!(fs::read_to_string(run.join("vae_log.csv")).unwrap().lines().count(), 3);
    ok(&["infer", "--models", s(&run), "--data", s(&data), "--out", s(&run)]);
    let preds: BTreeMap<String, Option<i32>> =
        serde_json::from_str(&fs::read_to_string(run.join("predictions.json")).unwrap()).unwrap();
    let splits: BTreeMap<String, Vec<String>> =
        serde_json::from_str(&fs::read_to_string(data.join("splits.json")).unwrap()).unwrap();
    let mut test_ids = splits["test"].clone();
    test_ids.sort();
    assert_eq!(preds.keys().cloned().collect::<Vec<_>>(), test_ids);
    let trace = fs::read_to_string(run.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 6 * test_ids.len());
    let text = ok(&["eval", "--pred", s(&run.join("predictions.json")), "--data", s(&data), "--out", s(&run)]);
    assert!(text.contains("detection accuracy"));
}

fn constant_sequence(id: &str, label: ReroofLabel) -> ImageSequence {
    let years: Vec<i32> = (2012..=2018).collect();
    let images = years.iter().map(|_| Image::filled(64, 64, [0.5; 3])).collect();
    ImageSequence::new(id.into(), years, images, label).unwrap()
}

fn mixed(prefix: &str, none: usize, reroof: usize) -> Vec<ImageSequence> {
    (0..none + reroof)
        .map(|i| {
            let label = if i < none { ReroofLabel::NoReroof } else { ReroofLabel::ReroofYear(2013 + (i % 6) as i32) };
            constant_sequence(&format!("{prefix}{i:02}"), label)
        })
        .collect()
}

#[test]
fn categorical_baseline_accuracy_over_many_seeds() {
    // Train and test share the no-reroof rate p = 0.2, so the expected
    // detection accuracy is p² + (1 − p)² = 0.68.
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let split = DatasetSplit {
        train: mixed("tr", 2, 8),
        validation: Vec::new(),
        test: mixed("te", 2, 8),
    };
    write_dataset(&data, &split).unwrap();
    let seeds = 1000u64;
    let mut total = 0.0f64;
    for seed in 0..seeds {
        let cfg = RunConfig {
            seed,
            data: Some(data.clone()),
            out: dir.path().join("run"),
            ..RunConfig::default()
        };
        cmd_baseline(&cfg, BaselineKind::Categorical).unwrap();
        let report = cmd_eval(&cfg, &cfg.out.join("predictions.json"), None).unwrap();
        total += report.detection_accuracy as f64;
    }
    let mean = total / seeds as f64;
    // Per-run variance: ten independent buildings, each correct with
    // probability 0.2 or 0.8.
    let se = (10.0 * 0.16 / 100.0 / seeds as f64).sqrt();
    assert!((mean - 0.68).abs() <= 3.0 * se, "mean {mean}, se {se}");
}
