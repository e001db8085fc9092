use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_semg");

/// Two-subject synthetic data and a schedule of a few batches.
const SMALL: &str = r#"
preset = "desk"
output_dir = "out"

[dataset.synthetic]
n_subjects = 2

[train]
max_batches_per_epoch = 2
max_val_windows = 30

[train.stage1]
epochs_max = 1

[train.stage2]
epochs_max = 1

[train.adapt]
epochs_max = 1
"#;

fn semg(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).args(args).current_dir(dir).env_remove("SEMG_OUTPUT_ROOT").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn config(dir: &Path, name: &str, run_id: &str, extra: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, format!("run_id = \"{run_id}\"\n{extra}\n{SMALL}")).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_writes_reproducible_datasets() {
    let tmp = TempDir::new().unwrap();
    let o = semg(tmp.path(), &["synth", "--out", "a", "--subjects", "2", "--seed", "7"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifest = read_json(&tmp.path().join("a/manifest.json"));
    assert_eq!(manifest["subjects"], serde_json::json!([1, 2]));
    assert_eq!(dir_bytes(&tmp.path().join("a")).len(), 2 * 10 * 6 + 2);
    assert!(tmp.path().join("a/synthetic_spec.json").is_file());

    let o = semg(tmp.path(), &["synth", "--out", "b", "--subjects", "2", "--seed", "7"]);
    assert_eq!(code(&o), 0);
    assert_eq!(dir_bytes(&tmp.path().join("a")), dir_bytes(&tmp.path().join("b")));

    let o = semg(tmp.path(), &["synth", "--out", "a", "--subjects", "2"]);
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("output directory"), "{}", stderr(&o));
}

#[test]
fn manifest_datasets_are_usable_from_configs() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&semg(tmp.path(), &["synth", "--out", "data", "--subjects", "2"])), 0);
    let path = tmp.path().join("m.toml");
    let text = SMALL.replace("[dataset.synthetic]\nn_subjects = 2", "[dataset.manifest]\npath = \"data/manifest.json\"");
    fs::write(&path, format!("run_id = \"m\"\n{text}")).unwrap();
    let o = semg(tmp.path(), &["validate", "m.toml"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("120 trials"));
}

#[test]
fn validate_reports_schema_violations() {
    let tmp = TempDir::new().unwrap();
    let good = config(tmp.path(), "good.toml", "r", "");
    let o = semg(tmp.path(), &["validate", good.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let bad = config(tmp.path(), "bad.toml", "r", "[model]\nd_modell = 8\n");
    let o = semg(tmp.path(), &["validate", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("d_modell"), "{}", stderr(&o));

    let missing = tmp.path().join("missing.toml");
    fs::write(&missing, "run_id = \"x\"\n[dataset.manifest]\npath = \"nowhere/manifest.json\"\n").unwrap();
    assert_eq!(code(&semg(tmp.path(), &["validate", "missing.toml"])), 1);

    assert_eq!(code(&semg(tmp.path(), &["train"])), 1);

    let o = semg(tmp.path(), &["validate", "--print-default", "desk"]);
    assert_eq!(code(&o), 0);
    fs::write(tmp.path().join("full.toml"), &o.stdout).unwrap();
    assert_eq!(code(&semg(tmp.path(), &["validate", "full.toml"])), 0);
}

#[test]
fn train_adapt_profile_export() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let cfg = config(d, "c.toml", "run", "export_formats = [\"csv\", \"json\"]\n");
    let cfg = cfg.to_str().unwrap();
    let o = semg(d, &["train", cfg, "--all-folds"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = d.join("out/run");
    for f in ["aggregate.json", "fold0/metrics.json", "fold1/stage2.ckpt", "fold1/train_log.jsonl", "fold0/interference.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    let metrics = read_json(&run.join("fold0/metrics.json"));
    assert_eq!(metrics["config"]["run_id"], "run");
    assert_eq!(metrics["config"]["train"]["max_batches_per_epoch"], 2);
    assert_eq!(read_json(&run.join("aggregate.json"))["final"]["n_folds"], 2);

    // The run id is taken.
    assert_eq!(code(&semg(d, &["train", cfg, "--all-folds"])), 1);

    // Same config and seed: identical metrics.
    fs::rename(&run, d.join("first")).unwrap();
    assert_eq!(code(&semg(d, &["train", cfg, "--all-folds"])), 0);
    for k in 0..2 {
        let f = format!("fold{k}/metrics.json");
        assert_eq!(fs::read(d.join("first").join(&f)).unwrap(), fs::read(run.join(&f)).unwrap());
    }

    let o = semg(d, &["adapt", cfg, "--all-folds", "--adapt-epochs", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let adapt = read_json(&run.join("adapt.json"));
    for f in adapt["folds"].as_array().unwrap() {
        assert_eq!(f["pre"], f["post"]);
        assert_eq!(f["epochs_run"], 0);
    }
    assert_eq!(adapt["config"]["train"]["adapt"]["epochs_max"], 0);
    assert_eq!(adapt["reference_post_percent"][0], 96.9);

    let ckpt = run.join("fold0/stage2.ckpt");
    let o = semg(d, &["profile", ckpt.to_str().unwrap(), "--runs", "7", "--out", "lat.json"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lat = read_json(&d.join("lat.json"));
    assert_eq!(lat["latency"]["n_runs"], 7);
    assert_eq!(lat["latency"]["budget_ms"], 125.0);
    assert_eq!(code(&semg(d, &["profile", "nope.ckpt"])), 2);

    let o = semg(d, &["export", run.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let hist = fs::read_to_string(run.join("interference_hist.csv")).unwrap();
    assert!(hist.starts_with("bin_lo,bin_hi,spatial_count,temporal_count,fusion_mode\n"));
    assert_eq!(hist.lines().count(), 1 + 2 * 40);
    let adapt_csv = fs::read_to_string(run.join("adapt.csv")).unwrap();
    assert_eq!(adapt_csv.lines().count(), 1 + 2 * 11);
    assert!(run.join("export.json").is_file());
    let before = dir_bytes(&run);
    assert_eq!(code(&semg(d, &["export", run.to_str().unwrap()])), 0);
    assert_eq!(before, dir_bytes(&run));

    fs::create_dir(d.join("empty")).unwrap();
    assert_ne!(code(&semg(d, &["export", "empty"])), 0);
}

#[test]
fn stage_one_only_and_missing_checkpoints() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let cfg = config(d, "c.toml", "s1", "fold = 1\n");
    // The environment overrides the configured output directory.
    let with_root = |args: &[&str]| {
        Command::new(BIN).args(args).current_dir(d).env("SEMG_OUTPUT_ROOT", d.join("alt")).output().unwrap()
    };
    let o = with_root(&["train", cfg.to_str().unwrap(), "--stage", "1-only"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!d.join("out").exists());
    let fold = d.join("alt/s1/fold1");
    assert!(fold.join("stage1.ckpt").is_file());
    assert!(!fold.join("stage2.ckpt").exists());
    assert!(!d.join("alt/s1/fold0").exists());
    let metrics = read_json(&fold.join("metrics.json"));
    assert_eq!(metrics["stage2_test"], Value::Null);
    assert_eq!(metrics["config"]["output_dir"], d.join("alt").to_str().unwrap());

    let o = with_root(&["adapt", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("stage-2 checkpoint"), "{}", stderr(&o));
}

#[test]
fn dt2v_sweep() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let cfg = config(d, "c.toml", "sw", "");
    let cfg = cfg.to_str().unwrap();
    let o = semg(d, &["ablate-dt2v", cfg, "--dims", "8,32"]);
    assert_eq!(code(&o), 1);
    assert!(!d.join("out/sw").exists());

    let o = semg(d, &["ablate-dt2v", cfg, "--dims", "24,8"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(code(&semg(d, &["export", "out/sw"])), 0);
    let csv = fs::read_to_string(d.join("out/sw/sweep.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0][0], rows[0][1]), ("8", "24"));
    assert_eq!((rows[1][0], rows[1][1]), ("24", "8"));
}

#[test]
fn variant_ablation_needs_all_folds() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let cfg = config(d, "c.toml", "va", "");
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&semg(d, &["ablate-variants", cfg])), 1);

    let o = semg(d, &["ablate-variants", cfg, "--all-folds"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v = read_json(&d.join("out/va/variants/variants.json"));
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r["stage2"]["n_folds"] == 2));
    let params: Vec<u64> = rows.iter().map(|r| r["params"].as_u64().unwrap()).collect();
    // NoPE and the sinusoidal table add nothing; Time2Vec adds its own weights.
    assert_eq!(params[0], params[1]);
    assert!(params[2] > params[1]);
    assert_eq!(v["wilcoxon"].as_array().unwrap().len(), 2);
    assert_eq!(code(&semg(d, &["export", "out/va"])), 0);
    assert_eq!(fs::read_to_string(d.join("out/va/variants.csv")).unwrap().lines().count(), 4);
}
