//! Metrics, fold aggregation, the exact Wilcoxon signed-rank test, branch-norm
//! interference probing, parameter counting and latency profiling.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::FusionMode;
use crate::encoder::{model_forward, ModelConfig, ModelParams, Mode, Variant};
use crate::error::{Error, Result};
use crate::linalg::Real;
use crate::windowing::Window;

/// Confusion matrix (rows = truth) and the F1 scores derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: Vec<Vec<u64>>,
    pub per_class_f1: Vec<f64>,
    pub macro_f1: f64,
    pub n_windows: usize,
    pub fold_index: Option<usize>,
    pub variant: Option<Variant>,
    pub fusion: Option<FusionMode>,
    /// Classes with no true and no predicted instances; their F1 is 0.
    pub zero_division_classes: Vec<usize>,
}

impl MetricsReport {
    pub fn from_predictions(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::Eval("cannot score an empty window set".into()));
        }
        if truth.len() != pred.len() {
            return Err(Error::Eval(format!(
                "{} labels but {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        let mut confusion = vec![vec![0u64; n_classes]; n_classes];
        for (&t, &p) in truth.iter().zip(pred) {
            if t >= n_classes || p >= n_classes {
                return Err(Error::Eval(format!("class index out of range: truth {t}, pred {p}")));
            }
            confusion[t][p] += 1;
        }
        let mut per_class_f1 = Vec::with_capacity(n_classes);
        let mut zero_division_classes = Vec::new();
        for c in 0..n_classes {
            let tp = confusion[c][c] as f64;
            let fn_ = confusion[c].iter().sum::<u64>() as f64 - tp;
            let fp = confusion.iter().map(|r| r[c]).sum::<u64>() as f64 - tp;
            let denom = 2.0 * tp + fp + fn_;
            if denom == 0.0 {
                zero_division_classes.push(c);
                per_class_f1.push(0.0);
            } else {
                per_class_f1.push(2.0 * tp / denom);
            }
        }
        let macro_f1 = per_class_f1.iter().sum::<f64>() / n_classes as f64;
        Ok(Self {
            confusion,
            per_class_f1,
            macro_f1,
            n_windows: truth.len(),
            fold_index: None,
            variant: None,
            fusion: None,
            zero_division_classes,
        })
    }
}

/// Argmax predictions for every window (eval mode).
pub fn predict<T: Real>(params: &ModelParams<T>, cfg: &ModelConfig, windows: &[Window]) -> Result<Vec<usize>> {
    windows
        .par_iter()
        .map(|w| {
            let x: Vec<T> = w.samples.iter().map(|&v| T::from_f32_lossy(v)).collect();
            let out = model_forward(&x, params, cfg, Mode::Eval, false)?;
            Ok(argmax(&out.logits))
        })
        .collect()
}

pub(crate) fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Scores `params` on `windows`, which must carry hard labels.
pub fn evaluate<T: Real>(params: &ModelParams<T>, cfg: &ModelConfig, windows: &[Window]) -> Result<MetricsReport> {
    if windows.is_empty() {
        return Err(Error::Eval("cannot evaluate an empty window set".into()));
    }
    let truth: Vec<usize> = windows
        .iter()
        .map(|w| w.label.hard().ok_or_else(|| Error::Eval("evaluation needs hard labels".into())))
        .collect::<Result<_>>()?;
    let pred = predict(params, cfg, windows)?;
    let mut report = MetricsReport::from_predictions(&truth, &pred, cfg.n_classes)?;
    report.variant = Some(cfg.variant);
    report.fusion = Some(cfg.fusion);
    Ok(report)
}

/// Sample mean and standard error (`std(ddof=1) / sqrt(n)`).
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 || values.iter().all(|&v| v == values[0]) {
        return (if values.is_empty() { mean } else { values[0] }, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAggregate {
    pub n_folds: usize,
    pub per_class_mean: Vec<f64>,
    pub per_class_se: Vec<f64>,
    pub macro_mean: f64,
    pub macro_se: f64,
    pub per_fold_macro: Vec<f64>,
    pub per_fold_per_class: Vec<Vec<f64>>,
}

pub fn aggregate_folds(reports: &[MetricsReport]) -> Result<FoldAggregate> {
    if reports.len() < 2 {
        return Err(Error::Eval(format!("aggregation needs at least 2 folds, got {}", reports.len())));
    }
    let n_classes = reports[0].per_class_f1.len();
    if reports.iter().any(|r| r.per_class_f1.len() != n_classes) {
        return Err(Error::Eval("reports disagree on the number of classes".into()));
    }
    let per_fold_macro: Vec<f64> = reports.iter().map(|r| r.macro_f1).collect();
    let (macro_mean, macro_se) = mean_se(&per_fold_macro);
    let (per_class_mean, per_class_se) = (0..n_classes)
        .map(|c| mean_se(&reports.iter().map(|r| r.per_class_f1[c]).collect::<Vec<_>>()))
        .unzip();
    Ok(FoldAggregate {
        n_folds: reports.len(),
        per_class_mean,
        per_class_se,
        macro_mean,
        macro_se,
        per_fold_macro,
        per_fold_per_class: reports.iter().map(|r| r.per_class_f1.clone()).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// `min(W+, W-)`.
    pub w: f64,
    /// Exact two-sided p-value.
    pub p: f64,
    /// Number of non-zero differences entering the test.
    pub n_nonzero: usize,
}

/// Midranks of `|d|`, doubled so ties stay integral.
fn doubled_midranks(abs: &[f64]) -> Vec<u64> {
    let mut order: Vec<usize> = (0..abs.len()).collect();
    order.sort_by(|&a, &b| abs[a].total_cmp(&abs[b]));
    let mut ranks = vec![0u64; abs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && abs[order[j + 1]] == abs[order[i]] {
            j += 1;
        }
        // Positions i..=j share rank ((i+1)+(j+1))/2; doubled: i+j+2.
        for &k in &order[i..=j] {
            ranks[k] = (i + j + 2) as u64;
        }
        i = j + 1;
    }
    ranks
}

/// Exact Wilcoxon signed-rank test on paired samples.
///
/// Zero differences are dropped, ties get midranks, and the p-value is the
/// share of all `2^m` sign assignments whose statistic is at most the
/// observed one.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Eval(format!("paired samples differ in length: {} vs {}", a.len(), b.len())));
    }
    if !(2..=20).contains(&a.len()) {
        return Err(Error::Eval(format!("exact test supports 2..=20 pairs, got {}", a.len())));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
    if diffs.is_empty() {
        return Err(Error::Degenerate("all paired differences are zero".into()));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = doubled_midranks(&abs);
    let total: u64 = ranks.iter().sum();
    let w_plus: u64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();
    let observed = w_plus.min(total - w_plus);
    let m = diffs.len();
    let mut count = 0u64;
    for mask in 0u64..(1 << m) {
        let s: u64 = (0..m).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if s.min(total - s) <= observed {
            count += 1;
        }
    }
    Ok(WilcoxonResult {
        w: observed as f64 / 2.0,
        p: count as f64 / (1u64 << m) as f64,
        n_nonzero: m,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub spatial_counts: Vec<u64>,
    pub temporal_counts: Vec<u64>,
}

/// Published branch-norm means, kept for side-by-side comparison only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceNorms {
    pub spatial_mean: f64,
    pub temporal_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterferenceReport {
    pub fusion: FusionMode,
    pub spatial_norms: Vec<f64>,
    pub temporal_norms: Vec<f64>,
    pub spatial_mean: f64,
    pub temporal_mean: f64,
    /// `spatial_mean / temporal_mean`.
    pub ratio: f64,
    pub histogram: Histogram,
    pub reference: ReferenceNorms,
}

pub const INTERFERENCE_BINS: usize = 40;

fn histogram(spatial: &[f64], temporal: &[f64], bins: usize) -> Histogram {
    let hi = spatial.iter().chain(temporal).copied().fold(0.0f64, f64::max);
    let hi = if hi > 0.0 { hi * (1.0 + 1e-9) } else { 1.0 };
    let width = hi / bins as f64;
    let edges = (0..=bins).map(|i| i as f64 * width).collect();
    let count = |xs: &[f64]| {
        let mut c = vec![0u64; bins];
        for &x in xs {
            c[((x / width) as usize).min(bins - 1)] += 1;
        }
        c
    };
    Histogram { edges, spatial_counts: count(spatial), temporal_counts: count(temporal) }
}

/// Per-position norms of both fusion inputs over `windows`.
pub fn interference_probe<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    windows: &[Window],
) -> Result<InterferenceReport> {
    let reference = match cfg.fusion {
        FusionMode::Add => ReferenceNorms { spatial_mean: 32.1, temporal_mean: 7.9 },
        FusionMode::NormAdd => ReferenceNorms { spatial_mean: 3.04, temporal_mean: 0.73 },
        other => {
            return Err(Error::Config(format!("{other:?} fusion has no additive fusion point to probe")));
        }
    };
    if windows.is_empty() {
        return Err(Error::Eval("interference probe needs at least one window".into()));
    }
    let per_window: Vec<(Vec<f64>, Vec<f64>)> = windows
        .par_iter()
        .map(|w| {
            let x: Vec<T> = w.samples.iter().map(|&v| T::from_f32_lossy(v)).collect();
            let d = model_forward(&x, params, cfg, Mode::Eval, true)?.diagnostics.unwrap();
            Ok((d.spatial, d.temporal.unwrap_or_default()))
        })
        .collect::<Result<_>>()?;
    let (spatial_norms, temporal_norms): (Vec<f64>, Vec<f64>) = per_window.into_iter().fold(
        (Vec::new(), Vec::new()),
        |(mut s, mut t), (ws, wt)| {
            s.extend(ws);
            t.extend(wt);
            (s, t)
        },
    );
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let spatial_mean = mean(&spatial_norms);
    let temporal_mean = mean(&temporal_norms);
    Ok(InterferenceReport {
        fusion: cfg.fusion,
        histogram: histogram(&spatial_norms, &temporal_norms, INTERFERENCE_BINS),
        spatial_mean,
        temporal_mean,
        ratio: spatial_mean / temporal_mean,
        spatial_norms,
        temporal_norms,
        reference,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub by_tensor: Vec<(String, usize)>,
    /// Keyed by the first path component (`stem`, `time2vec`, `fusion`, `layers`, `head`).
    pub by_module: BTreeMap<String, usize>,
}

pub fn count_params<T: Real>(params: &ModelParams<T>) -> ParamCount {
    let by_tensor: Vec<(String, usize)> = params.tensors().into_iter().map(|(n, t)| (n, t.len())).collect();
    let mut by_module = BTreeMap::new();
    for (name, n) in &by_tensor {
        let module = name.split('.').next().unwrap_or(name).to_string();
        *by_module.entry(module).or_insert(0) += n;
    }
    ParamCount { total: by_tensor.iter().map(|(_, n)| n).sum(), by_tensor, by_module }
}

pub const LATENCY_WARMUP: usize = 10;
pub const LATENCY_BUDGET_MS: f64 = 125.0;
pub const LATENCY_REFERENCE_MS: f64 = 21.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub n_runs: usize,
    pub warmup_runs: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub budget_ms: f64,
    pub within_budget: bool,
    pub reference_ms: f64,
}

/// Nearest-rank percentile of an ascending slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

/// Times `n_runs` single-window eval forwards on the calling thread.
pub fn profile_latency(params: &ModelParams<f32>, cfg: &ModelConfig, window: &[f32], n_runs: usize) -> Result<LatencyReport> {
    if n_runs == 0 {
        return Err(Error::Config("profiling needs at least one run".into()));
    }
    for _ in 0..LATENCY_WARMUP {
        model_forward(window, params, cfg, Mode::Eval, false)?;
    }
    let mut times = Vec::with_capacity(n_runs);
    for _ in 0..n_runs {
        let start = Instant::now();
        let out = model_forward(window, params, cfg, Mode::Eval, false)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    let mean_ms = times.iter().sum::<f64>() / n_runs as f64;
    times.sort_by(f64::total_cmp);
    Ok(LatencyReport {
        n_runs,
        warmup_runs: LATENCY_WARMUP,
        mean_ms,
        p50_ms: percentile(&times, 0.5),
        p95_ms: percentile(&times, 0.95),
        budget_ms: LATENCY_BUDGET_MS,
        within_budget: mean_ms < LATENCY_BUDGET_MS,
        reference_ms: LATENCY_REFERENCE_MS,
    })
}
