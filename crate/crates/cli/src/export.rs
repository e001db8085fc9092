//! Plot-ready tables from a run directory.
//!
//! | file                   | columns                                                      |
//! |------------------------|--------------------------------------------------------------|
//! | `folds.csv`            | fold, held_out_subject, stage1_macro_f1, stage2_macro_f1     |
//! | `sweep.csv`            | d_t2v, d_spatial, mean_f1, se, n_folds                       |
//! | `variants.csv`         | variant, params, stage1_mean, stage1_se, stage2_mean, stage2_se |
//! | `interference_hist.csv`| bin_lo, bin_hi, spatial_count, temporal_count, fusion_mode   |
//! | `adapt.csv`            | fold, held_out_subject, class, pre_f1, post_f1               |
//!
//! `sweep.csv` is sorted by `d_t2v`; the others follow fold order.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::json;
use semg_t2v::dataset::GESTURES;
use semg_t2v::Error;

use crate::commands::{read_json, write_json, AdaptArtifact, FoldMetrics, InterferenceArtifact, SweepArtifact, VariantsArtifact};
use crate::config::ExportFormat;

type Table = (Vec<&'static str>, Vec<Vec<String>>);
type Source = fn(&Path) -> Result<Option<(Table, serde_json::Value)>>;

/// Fold directories in numeric order.
fn fold_dirs(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<(usize, PathBuf)> = fs::read_dir(run_dir)
        .with_context(|| format!("reading {}", run_dir.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let k = name.strip_prefix("fold")?.parse().ok()?;
            e.path().is_dir().then(|| (k, e.path()))
        })
        .collect();
    dirs.sort();
    Ok(dirs.into_iter().map(|(_, p)| p).collect())
}

fn float(v: f64) -> String {
    format!("{v:.6}")
}

fn folds_table(run_dir: &Path) -> Result<Option<(Table, serde_json::Value)>> {
    let mut rows = Vec::new();
    let mut config = None;
    for dir in fold_dirs(run_dir)? {
        let path = dir.join("metrics.json");
        if !path.is_file() {
            continue;
        }
        let m: FoldMetrics = read_json(&path)?;
        rows.push(vec![
            m.fold.to_string(),
            m.held_out_subject.to_string(),
            float(m.stage1_test.macro_f1),
            m.stage2_test.map(|r| float(r.macro_f1)).unwrap_or_default(),
        ]);
        config.get_or_insert(m.config);
    }
    Ok(config.map(|c| ((vec!["fold", "held_out_subject", "stage1_macro_f1", "stage2_macro_f1"], rows), c)))
}

fn sweep_table(run_dir: &Path) -> Result<Option<(Table, serde_json::Value)>> {
    let path = run_dir.join("sweep").join("sweep.json");
    if !path.is_file() {
        return Ok(None);
    }
    let mut a: SweepArtifact = read_json(&path)?;
    a.rows.sort_by_key(|r| r.d_t2v);
    let rows = a
        .rows
        .iter()
        .map(|r| {
            vec![r.d_t2v.to_string(), r.d_spatial.to_string(), float(r.mean_f1), float(r.se), r.per_fold_macro.len().to_string()]
        })
        .collect();
    Ok(Some(((vec!["d_t2v", "d_spatial", "mean_f1", "se", "n_folds"], rows), a.config)))
}

fn variants_table(run_dir: &Path) -> Result<Option<(Table, serde_json::Value)>> {
    let path = run_dir.join("variants").join("variants.json");
    if !path.is_file() {
        return Ok(None);
    }
    let a: VariantsArtifact = read_json(&path)?;
    let rows = a
        .rows
        .iter()
        .map(|r| {
            vec![
                r.variant.name().to_string(),
                r.params.to_string(),
                float(r.stage1.macro_mean),
                float(r.stage1.macro_se),
                float(r.stage2.macro_mean),
                float(r.stage2.macro_se),
            ]
        })
        .collect();
    let header = vec!["variant", "params", "stage1_mean", "stage1_se", "stage2_mean", "stage2_se"];
    Ok(Some(((header, rows), a.config)))
}

fn interference_table(run_dir: &Path) -> Result<Option<(Table, serde_json::Value)>> {
    let mut rows = Vec::new();
    let mut config = None;
    for dir in fold_dirs(run_dir)? {
        let path = dir.join("interference.json");
        if !path.is_file() {
            continue;
        }
        let a: InterferenceArtifact = read_json(&path)?;
        let mode = serde_json::to_value(a.fusion)?.as_str().unwrap_or_default().to_string();
        let h = &a.histogram;
        for (i, (s, t)) in h.spatial_counts.iter().zip(&h.temporal_counts).enumerate() {
            rows.push(vec![float(h.edges[i]), float(h.edges[i + 1]), s.to_string(), t.to_string(), mode.clone()]);
        }
        config.get_or_insert(a.config);
    }
    let header = vec!["bin_lo", "bin_hi", "spatial_count", "temporal_count", "fusion_mode"];
    Ok(config.map(|c| ((header, rows), c)))
}

fn adapt_table(run_dir: &Path) -> Result<Option<(Table, serde_json::Value)>> {
    let path = run_dir.join("adapt.json");
    if !path.is_file() {
        return Ok(None);
    }
    let a: AdaptArtifact = read_json(&path)?;
    let mut rows = Vec::new();
    for f in &a.folds {
        let classes = f.pre.per_class_f1.iter().zip(&f.post.per_class_f1).enumerate();
        for (c, (pre, post)) in classes {
            let name = GESTURES.get(c).map_or_else(|| c.to_string(), |g| g.to_string());
            rows.push(vec![f.fold.to_string(), f.held_out_subject.to_string(), name, float(*pre), float(*post)]);
        }
        rows.push(vec![
            f.fold.to_string(),
            f.held_out_subject.to_string(),
            "macro".into(),
            float(f.pre.macro_f1),
            float(f.post.macro_f1),
        ]);
    }
    Ok(Some(((vec!["fold", "held_out_subject", "class", "pre_f1", "post_f1"], rows), a.config)))
}

fn write_csv(path: &Path, (header, rows): &Table) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes every table whose source artifacts exist; returns the file names.
pub fn export(run_dir: &Path) -> Result<Vec<String>> {
    if !run_dir.is_dir() {
        return Err(Error::Manifest(format!("run directory {} does not exist", run_dir.display())).into());
    }
    let sources: [(&str, Source); 5] = [
        ("folds", folds_table),
        ("sweep", sweep_table),
        ("variants", variants_table),
        ("interference_hist", interference_table),
        ("adapt", adapt_table),
    ];
    let mut tables = Vec::new();
    for (name, f) in sources {
        if let Some(t) = f(run_dir)? {
            tables.push((name, t));
        }
    }
    if tables.is_empty() {
        return Err(Error::Manifest(format!("{} holds no reports to export", run_dir.display())).into());
    }
    // Formats come from the run's own config; all artifacts of a run share it.
    let formats: Vec<ExportFormat> = serde_json::from_value(tables[0].1 .1["export_formats"].clone())
        .unwrap_or_else(|_| vec![ExportFormat::Csv]);
    let mut written = Vec::new();
    if formats.contains(&ExportFormat::Csv) {
        for (name, (table, _)) in &tables {
            let file = format!("{name}.csv");
            write_csv(&run_dir.join(&file), table)?;
            written.push(file);
        }
    }
    if formats.contains(&ExportFormat::Json) {
        let mut doc = serde_json::Map::new();
        for (name, ((header, rows), config)) in &tables {
            doc.insert(name.to_string(), json!({ "config": config, "columns": header, "rows": rows }));
        }
        write_json(&run_dir.join("export.json"), &doc)?;
        written.push("export.json".into());
    }
    Ok(written)
}
