use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use semg_t2v::checkpoint::Checkpoint;
use semg_t2v::dataset::{generate_synthetic, ingest_csv_tree, SyntheticSpec};
use semg_t2v::embedding::FusionMode;
use semg_t2v::encoder::{build_variant, ModelConfig, Variant};
use semg_t2v::evaluation::{
    aggregate_folds, count_params, interference_probe, profile_latency, wilcoxon_signed_rank, FoldAggregate,
    Histogram, MetricsReport,
};
use semg_t2v::training::{fine_tune_adapt, strided_subset, train_fold, FoldData, FoldRun, TrainLog};
use semg_t2v::windowing::FoldPlan;
use semg_t2v::Error;

use crate::config::ExperimentConfig;

/// Test windows fed to the interference probe per fold.
const PROBE_WINDOWS: usize = 100;

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Creates `dir`, refusing to reuse one that already exists.
fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        return Err(Error::OutputDir(format!("{} already exists; pick a new run_id", dir.display())).into());
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn fold_dir(run_dir: &Path, fold: usize) -> PathBuf {
    run_dir.join(format!("fold{fold}"))
}

pub fn synth(spec_path: Option<&Path>, out: &Path, seed: Option<u64>, subjects: Option<u32>) -> Result<()> {
    let mut spec = match spec_path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<SyntheticSpec>(&text)
                .or_else(|_| toml::from_str::<SyntheticSpec>(&text))
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec::default(),
    };
    if subjects.is_some() || seed.is_some() {
        // Profiles and shifts are derived from the seed and subject count.
        let shifts = std::mem::take(&mut spec.shifts);
        let scale = spec.amplitude_scale;
        spec = SyntheticSpec::with_subjects(subjects.unwrap_or(spec.n_subjects), seed.unwrap_or(spec.master_seed));
        spec.shifts = shifts;
        spec.amplitude_scale = scale;
    }
    let manifest = generate_synthetic(&spec, out)?;
    println!(
        "wrote {} trials for {} subjects to {}",
        manifest.entries()?.len(),
        manifest.subjects.len(),
        out.display()
    );
    Ok(())
}

pub fn ingest(src: &Path, out: &Path, rate: u32) -> Result<()> {
    let manifest = ingest_csv_tree(src, out, rate)?;
    println!("ingested {} trials into {}", manifest.entries()?.len(), out.display());
    Ok(())
}

pub fn validate(cfg: &ExperimentConfig) -> Result<()> {
    let ds = cfg.load_dataset()?;
    let folds = cfg.select_folds(&ds)?;
    for f in &folds {
        f.check_leakage()?;
    }
    let params = count_params(&build_variant::<f32>(&cfg.model, 0)?).total;
    println!(
        "config ok: {} trials, {} fold(s), {} parameters",
        ds.n_trials(),
        folds.len(),
        params
    );
    print!("{}", toml::to_string(cfg)?);
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub config: serde_json::Value,
    pub fold: usize,
    pub held_out_subject: u32,
    pub param_count: usize,
    pub stage1_test: MetricsReport,
    pub stage2_test: Option<MetricsReport>,
    pub stage1_best_val_f1: Option<f64>,
    pub stage2_best_val_f1: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterferenceArtifact {
    pub config: serde_json::Value,
    pub fold: usize,
    pub fusion: FusionMode,
    pub n_windows: usize,
    pub spatial_mean: f64,
    pub temporal_mean: f64,
    pub ratio: f64,
    pub histogram: Histogram,
    pub reference_spatial_mean: f64,
    pub reference_temporal_mean: f64,
}

fn write_log(path: &Path, logs: &[&TrainLog]) -> Result<()> {
    let mut all = TrainLog::default();
    for l in logs {
        all.records.extend(l.records.iter().cloned());
    }
    all.write_jsonl(path)?;
    Ok(())
}

fn run_one_fold(cfg: &ExperimentConfig, model: &ModelConfig, ds: &semg_t2v::dataset::Dataset, fold: &FoldPlan, stage2: bool) -> Result<FoldRun> {
    let run = train_fold(fold, ds, model, &cfg.train, stage2)?;
    eprintln!(
        "fold {} (held out {}): stage 1 F1 {:.3}{}",
        fold.fold_index,
        fold.held_out_subject,
        run.stage1_test.macro_f1,
        run.stage2_test.as_ref().map(|r| format!(", stage 2 F1 {:.3}", r.macro_f1)).unwrap_or_default()
    );
    Ok(run)
}

pub fn train(cfg: &ExperimentConfig, stage1_only: bool) -> Result<()> {
    let ds = cfg.load_dataset()?;
    let folds = cfg.select_folds(&ds)?;
    let run_dir = cfg.run_dir();
    fresh_dir(&run_dir)?;
    let config = cfg.to_json();
    let param_count = count_params(&build_variant::<f32>(&cfg.model, 0)?).total;
    let runs: Vec<FoldRun> = folds
        .par_iter()
        .map(|fold| -> Result<FoldRun> {
            let run = run_one_fold(cfg, &cfg.model, &ds, fold, !stage1_only)?;
            let dir = fold_dir(&run_dir, fold.fold_index);
            fs::create_dir_all(&dir)?;
            run.stage1.checkpoint.save(&dir.join("stage1.ckpt"))?;
            if let Some(s2) = &run.stage2 {
                s2.checkpoint.save(&dir.join("stage2.ckpt"))?;
            }
            let mut logs = vec![&run.stage1.log];
            logs.extend(run.stage2.as_ref().map(|s| &s.log));
            write_log(&dir.join("train_log.jsonl"), &logs)?;
            let metrics = FoldMetrics {
                config: config.clone(),
                fold: fold.fold_index,
                held_out_subject: fold.held_out_subject,
                param_count,
                stage1_test: run.stage1_test.clone(),
                stage2_test: run.stage2_test.clone(),
                stage1_best_val_f1: run.stage1.log.best_val_f1(),
                stage2_best_val_f1: run.stage2.as_ref().and_then(|s| s.log.best_val_f1()),
            };
            write_json(&dir.join("metrics.json"), &metrics)?;
            if matches!(cfg.model.fusion, FusionMode::Add | FusionMode::NormAdd) {
                let data = FoldData::load(fold, &ds, &cfg.model)?;
                let probe = strided_subset(&data.ms_test, Some(PROBE_WINDOWS));
                let r = interference_probe(&run.final_checkpoint().params, &cfg.model, &probe)?;
                let art = InterferenceArtifact {
                    config: config.clone(),
                    fold: fold.fold_index,
                    fusion: r.fusion,
                    n_windows: probe.len(),
                    spatial_mean: r.spatial_mean,
                    temporal_mean: r.temporal_mean,
                    ratio: r.ratio,
                    histogram: r.histogram,
                    reference_spatial_mean: r.reference.spatial_mean,
                    reference_temporal_mean: r.reference.temporal_mean,
                };
                write_json(&dir.join("interference.json"), &art)?;
            }
            Ok(run)
        })
        .collect::<Result<_>>()?;
    if cfg.all_folds && runs.len() >= 2 {
        let s1: Vec<MetricsReport> = runs.iter().map(|r| r.stage1_test.clone()).collect();
        let last: Vec<MetricsReport> = runs.iter().map(|r| r.final_test().clone()).collect();
        let agg = json!({
            "config": config,
            "stage1": aggregate_folds(&s1)?,
            "final": aggregate_folds(&last)?,
        });
        write_json(&run_dir.join("aggregate.json"), &agg)?;
        println!(
            "{} folds: final macro-F1 {:.4} ± {:.4}",
            runs.len(),
            agg["final"]["macro_mean"].as_f64().unwrap_or(f64::NAN),
            agg["final"]["macro_se"].as_f64().unwrap_or(f64::NAN)
        );
    } else {
        for r in &runs {
            println!("fold {}: macro-F1 {:.4}", r.final_test().fold_index.unwrap_or(0), r.final_test().macro_f1);
        }
    }
    println!("artifacts in {}", run_dir.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub d_t2v: usize,
    pub d_spatial: usize,
    pub per_fold_macro: Vec<f64>,
    pub mean_f1: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepArtifact {
    pub config: serde_json::Value,
    pub rows: Vec<SweepRow>,
}

pub fn ablate_dt2v(cfg: &ExperimentConfig, dims: &[usize]) -> Result<()> {
    if dims.is_empty() {
        bail!(Error::Config("no d_t2v values given".into()));
    }
    let models: Vec<ModelConfig> = dims
        .iter()
        .map(|&d| {
            let m = ModelConfig { fusion: FusionMode::Concat, variant: Variant::Time2Vec, d_t2v: d, ..cfg.model.clone() };
            if d >= m.d_model {
                return Err(Error::Config(format!("d_t2v {d} leaves no spatial features at d_model {}", m.d_model)));
            }
            m.validate()?;
            Ok(m)
        })
        .collect::<semg_t2v::Result<_>>()?;
    let ds = cfg.load_dataset()?;
    let folds = cfg.select_folds(&ds)?;
    let dir = cfg.run_dir().join("sweep");
    fresh_dir(&dir)?;
    let mut rows = Vec::new();
    for m in &models {
        let per_fold_macro: Vec<f64> = folds
            .par_iter()
            .map(|f| Ok(run_one_fold(cfg, m, &ds, f, true)?.final_test().macro_f1))
            .collect::<Result<_>>()?;
        let (mean_f1, se) = semg_t2v::evaluation::mean_se(&per_fold_macro);
        println!("d_t2v {:>3}: macro-F1 {mean_f1:.4} ± {se:.4}", m.d_t2v);
        rows.push(SweepRow { d_t2v: m.d_t2v, d_spatial: m.d_spatial(), per_fold_macro, mean_f1, se });
    }
    write_json(&dir.join("sweep.json"), &SweepArtifact { config: cfg.to_json(), rows })?;
    println!("artifacts in {}", dir.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantRow {
    pub variant: Variant,
    pub params: usize,
    pub stage1: FoldAggregate,
    pub stage2: FoldAggregate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub a: Variant,
    pub b: Variant,
    pub w: Option<f64>,
    pub p: Option<f64>,
    pub n_nonzero: Option<usize>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantsArtifact {
    pub config: serde_json::Value,
    pub rows: Vec<VariantRow>,
    pub wilcoxon: Vec<Comparison>,
}

pub fn ablate_variants(cfg: &ExperimentConfig) -> Result<()> {
    if !cfg.all_folds {
        bail!(Error::Config("the variant ablation needs paired per-fold scores; run with all folds".into()));
    }
    let ds = cfg.load_dataset()?;
    let folds = cfg.select_folds(&ds)?;
    let dir = cfg.run_dir().join("variants");
    fresh_dir(&dir)?;
    let mut rows = Vec::new();
    for v in [Variant::NoPe, Variant::StandardPe, Variant::Time2Vec] {
        let m = cfg.model.clone().with_variant(v);
        m.validate()?;
        let runs: Vec<FoldRun> = folds.par_iter().map(|f| run_one_fold(cfg, &m, &ds, f, true)).collect::<Result<_>>()?;
        let s1: Vec<MetricsReport> = runs.iter().map(|r| r.stage1_test.clone()).collect();
        let s2: Vec<MetricsReport> = runs.iter().map(|r| r.final_test().clone()).collect();
        let row = VariantRow {
            variant: v,
            params: count_params(&build_variant::<f32>(&m, 0)?).total,
            stage1: aggregate_folds(&s1)?,
            stage2: aggregate_folds(&s2)?,
        };
        println!(
            "{:<12} {:>8} params  stage 1 {:.4} ± {:.4}  stage 2 {:.4} ± {:.4}",
            v.name(),
            row.params,
            row.stage1.macro_mean,
            row.stage1.macro_se,
            row.stage2.macro_mean,
            row.stage2.macro_se
        );
        rows.push(row);
    }
    let scores = |v: Variant| rows.iter().find(|r| r.variant == v).map(|r| r.stage2.per_fold_macro.clone()).unwrap();
    let wilcoxon = [Variant::StandardPe, Variant::NoPe]
        .into_iter()
        .map(|b| match wilcoxon_signed_rank(&scores(Variant::Time2Vec), &scores(b)) {
            Ok(r) => Ok(Comparison { a: Variant::Time2Vec, b, w: Some(r.w), p: Some(r.p), n_nonzero: Some(r.n_nonzero), note: None }),
            Err(e @ (Error::Degenerate(_) | Error::Eval(_))) => {
                Ok(Comparison { a: Variant::Time2Vec, b, w: None, p: None, n_nonzero: None, note: Some(e.to_string()) })
            }
            Err(e) => Err(e),
        })
        .collect::<semg_t2v::Result<Vec<_>>>()?;
    for c in &wilcoxon {
        match (c.w, c.p) {
            (Some(w), Some(p)) => println!("{} vs {}: W = {w}, p = {p:.4}", c.a.name(), c.b.name()),
            _ => println!("{} vs {}: {}", c.a.name(), c.b.name(), c.note.as_deref().unwrap_or("")),
        }
    }
    write_json(&dir.join("variants.json"), &VariantsArtifact { config: cfg.to_json(), rows, wilcoxon })?;
    println!("artifacts in {}", dir.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptFold {
    pub fold: usize,
    pub held_out_subject: u32,
    pub pre: MetricsReport,
    pub post: MetricsReport,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptArtifact {
    pub config: serde_json::Value,
    pub folds: Vec<AdaptFold>,
    pub pre_aggregate: Option<FoldAggregate>,
    pub post_aggregate: Option<FoldAggregate>,
    /// Published macro-F1 before and after calibration on recorded data,
    /// as mean and standard error in percent. Not asserted.
    pub reference_pre_percent: [f64; 2],
    pub reference_post_percent: [f64; 2],
}

pub fn adapt(cfg: &ExperimentConfig, pretrained: Option<&Path>, adapt_epochs: Option<usize>) -> Result<()> {
    let mut cfg = cfg.clone();
    if let Some(e) = adapt_epochs {
        cfg.train.adapt.epochs_max = e;
    }
    let ds = cfg.load_dataset()?;
    let folds = cfg.select_folds(&ds)?;
    let run_dir = pretrained.map(Path::to_path_buf).unwrap_or_else(|| cfg.run_dir());
    let checkpoints: Vec<Checkpoint> = folds
        .iter()
        .map(|f| {
            let path = fold_dir(&run_dir, f.fold_index).join("stage2.ckpt");
            if !path.is_file() {
                return Err(Error::Checkpoint(format!("missing stage-2 checkpoint {}", path.display())).into());
            }
            Ok(Checkpoint::load(&path)?)
        })
        .collect::<Result<_>>()?;
    let results: Vec<AdaptFold> = folds
        .par_iter()
        .zip(&checkpoints)
        .map(|(f, ck)| -> Result<AdaptFold> {
            let out = fine_tune_adapt(f, &ds, ck, &cfg.train)?;
            eprintln!("fold {}: direct transfer {:.3}, adapted {:.3}", f.fold_index, out.pre.macro_f1, out.post.macro_f1);
            Ok(AdaptFold {
                fold: f.fold_index,
                held_out_subject: f.held_out_subject,
                pre: out.pre,
                post: out.post,
                epochs_run: out.log.records.len(),
            })
        })
        .collect::<Result<_>>()?;
    let agg = |pick: fn(&AdaptFold) -> &MetricsReport| {
        let reports: Vec<MetricsReport> = results.iter().map(|r| pick(r).clone()).collect();
        aggregate_folds(&reports).ok()
    };
    let artifact = AdaptArtifact {
        config: cfg.to_json(),
        pre_aggregate: agg(|r| &r.pre),
        post_aggregate: agg(|r| &r.post),
        folds: results,
        reference_pre_percent: [21.0, 2.98],
        reference_post_percent: [96.9, 0.52],
    };
    for r in &artifact.folds {
        println!("fold {}: pre {:.4} post {:.4}", r.fold, r.pre.macro_f1, r.post.macro_f1);
    }
    let path = run_dir.join("adapt.json");
    write_json(&path, &artifact)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn profile(checkpoint: &Path, runs: usize, out: Option<&Path>) -> Result<()> {
    if !checkpoint.is_file() {
        bail!(Error::Checkpoint(format!("missing checkpoint {}", checkpoint.display())));
    }
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = &ck.config;
    let window: Vec<f32> = (0..cfg.window_len * cfg.n_channels).map(|i| (i as f32 * 0.37).sin()).collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build()?;
    let report = pool.install(|| profile_latency(&ck.params, cfg, &window, runs))?;
    println!(
        "{} runs: mean {:.2} ms, p50 {:.2} ms, p95 {:.2} ms; budget {} ms {}",
        report.n_runs,
        report.mean_ms,
        report.p50_ms,
        report.p95_ms,
        report.budget_ms,
        if report.within_budget { "met" } else { "exceeded" }
    );
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| checkpoint.with_extension("latency.json"));
    write_json(
        &path,
        &json!({
            "checkpoint": checkpoint,
            "model": cfg,
            "seed": ck.seed,
            "stage": ck.stage,
            "latency": report,
        }),
    )?;
    println!("wrote {}", path.display());
    Ok(())
}
