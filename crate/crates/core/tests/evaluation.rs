use proptest::prelude::*;
use semg_t2v::embedding::FusionMode;
use semg_t2v::encoder::{build_variant, ModelConfig, Variant};
use semg_t2v::evaluation::{
    aggregate_folds, evaluate, interference_probe, mean_se, profile_latency, wilcoxon_signed_rank, MetricsReport,
};
use semg_t2v::windowing::{Label, Window, WindowProvenance};
use semg_t2v::Error;

/// Brute-force reference: plain f64 ranks, signs enumerated from the top bit
/// down, statistic recomputed from scratch for every pattern.
fn reference_wilcoxon(a: &[f64], b: &[f64]) -> (f64, f64) {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    let m = d.len();
    let rank = |i: usize| -> f64 {
        let ai = d[i].abs();
        let below = d.iter().filter(|v| v.abs() < ai).count() as f64;
        let equal = d.iter().filter(|v| v.abs() == ai).count() as f64;
        below + (equal + 1.0) / 2.0
    };
    let ranks: Vec<f64> = (0..m).map(rank).collect();
    let stat = |pos: &dyn Fn(usize) -> bool| {
        let wp: f64 = (0..m).filter(|&i| pos(i)).map(|i| ranks[i]).sum();
        let wm: f64 = (0..m).filter(|&i| !pos(i)).map(|i| ranks[i]).sum();
        wp.min(wm)
    };
    let observed = stat(&|i| d[i] > 0.0);
    let mut count = 0u64;
    for mask in (0..(1u64 << m)).rev() {
        if stat(&|i| mask >> (m - 1 - i) & 1 == 1) <= observed + 1e-9 {
            count += 1;
        }
    }
    (observed, count as f64 / (1u64 << m) as f64)
}

#[test]
fn wilcoxon_eight_positive_differences() {
    let a = [0.97, 0.96, 0.95, 0.99, 0.94, 0.98, 0.93, 0.96];
    let b = [0.90, 0.91, 0.92, 0.93, 0.89, 0.95, 0.90, 0.94];
    let r = wilcoxon_signed_rank(&a, &b).unwrap();
    assert_eq!(r.w, 0.0);
    assert_eq!(r.p, 0.0078125);
    assert_eq!(format!("{:.3}", r.p), "0.008");
}

#[test]
fn wilcoxon_three_pairs_against_enumeration() {
    let r = wilcoxon_signed_rank(&[1.0, 2.0, -3.0], &[0.0; 3]).unwrap();
    let (w, p) = reference_wilcoxon(&[1.0, 2.0, -3.0], &[0.0; 3]);
    assert_eq!(r.w, 3.0);
    assert_eq!((r.w, r.p), (w, p));
}

#[test]
fn wilcoxon_drops_zero_differences() {
    let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0, 5.0], &[0.0, 0.0, 0.0, 5.0]).unwrap();
    assert_eq!(r.n_nonzero, 3);
    assert!(matches!(wilcoxon_signed_rank(&[0.5; 4], &[0.5; 4]), Err(Error::Degenerate(_))));
}

proptest! {
    #[test]
    fn wilcoxon_matches_reference_enumeration(
        pairs in prop::collection::vec((-4i32..=4, -4i32..=4), 2..=10)
    ) {
        let a: Vec<f64> = pairs.iter().map(|p| p.0 as f64 * 0.25).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1 as f64 * 0.25).collect();
        prop_assume!(a != b);
        let r = wilcoxon_signed_rank(&a, &b).unwrap();
        let (w, p) = reference_wilcoxon(&a, &b);
        prop_assert_eq!(r.w, w);
        prop_assert!((r.p - p).abs() < 1e-15);
        prop_assert!(r.p > 0.0 && r.p <= 1.0);
    }

    #[test]
    fn confusion_conserves_windows_and_f1_is_bounded(
        pairs in prop::collection::vec((0usize..10, 0usize..10), 1..200)
    ) {
        let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let r = MetricsReport::from_predictions(&truth, &pred, 10).unwrap();
        prop_assert_eq!(r.confusion.iter().flatten().sum::<u64>() as usize, truth.len());
        prop_assert!(r.per_class_f1.iter().all(|f| (0.0..=1.0).contains(f)));
        let mean = r.per_class_f1.iter().sum::<f64>() / 10.0;
        prop_assert!((r.macro_f1 - mean).abs() < 1e-12);
    }

    #[test]
    fn relabeling_permutes_per_class_f1(
        pairs in prop::collection::vec((0usize..10, 0usize..10), 1..200),
        shift in 1usize..10,
    ) {
        let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let relabel = |v: &[usize]| v.iter().map(|c| (c + shift) % 10).collect::<Vec<_>>();
        let a = MetricsReport::from_predictions(&truth, &pred, 10).unwrap();
        let b = MetricsReport::from_predictions(&relabel(&truth), &relabel(&pred), 10).unwrap();
        for c in 0..10 {
            prop_assert_eq!(a.per_class_f1[c], b.per_class_f1[(c + shift) % 10]);
        }
        prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
    }

    #[test]
    fn standard_error_scales_with_abs_c(
        values in prop::collection::vec(-1.0f64..1.0, 2..12),
        c in -5.0f64..5.0,
    ) {
        let (m, se) = mean_se(&values);
        let scaled: Vec<f64> = values.iter().map(|v| v * c).collect();
        let (ms, ses) = mean_se(&scaled);
        prop_assert!((ms - c * m).abs() < 1e-9);
        prop_assert!((ses - c.abs() * se).abs() < 1e-9);
        prop_assert!(se >= 0.0);
    }
}

fn windows(n: usize) -> Vec<Window> {
    (0..n)
        .map(|i| Window {
            samples: (0..400).map(|t| 4.0 * ((t * (i + 3)) as f32 * 0.05).sin()).collect(),
            n_samples: 200,
            n_channels: 2,
            label: Label::Hard(i % 10),
            provenance: WindowProvenance { subject: 1, gesture: i % 10, trial_index: 6, start_offset: i },
            is_augmented: false,
        })
        .collect()
}

fn small() -> ModelConfig {
    ModelConfig { window_len: 200, ..ModelConfig::desk() }
}

#[test]
fn evaluate_tags_and_conserves() {
    let cfg = small();
    let p = build_variant::<f32>(&cfg, 1).unwrap();
    let r = evaluate(&p, &cfg, &windows(23)).unwrap();
    assert_eq!(r.n_windows, 23);
    assert_eq!(r.confusion.iter().flatten().sum::<u64>(), 23);
    assert_eq!(r.variant, Some(Variant::Time2Vec));
    assert_eq!(r.fusion, Some(FusionMode::NormAdd));
    assert!(matches!(evaluate(&p, &cfg, &[]), Err(Error::Eval(_))));
}

#[test]
fn aggregate_of_identical_reports_has_zero_se() {
    let cfg = small();
    let p = build_variant::<f32>(&cfg, 2).unwrap();
    let r = evaluate(&p, &cfg, &windows(20)).unwrap();
    let a = aggregate_folds(&vec![r.clone(); 8]).unwrap();
    assert_eq!(a.macro_se, 0.0);
    assert_eq!(a.macro_mean, r.macro_f1);
}

#[test]
fn interference_probe_modes() {
    let cfg = small();
    let p = build_variant::<f64>(&cfg, 3).unwrap();
    let ws = windows(4);
    let r = interference_probe(&p, &cfg, &ws).unwrap();
    let n = 4 * cfg.seq_len();
    assert_eq!(r.spatial_norms.len(), n);
    assert_eq!(r.histogram.spatial_counts.iter().sum::<u64>() as usize, n);
    assert_eq!(r.histogram.temporal_counts.iter().sum::<u64>() as usize, n);
    assert_eq!(r.reference.spatial_mean, 3.04);

    let add = ModelConfig { fusion: FusionMode::Add, ..small() };
    let r = interference_probe(&build_variant::<f64>(&add, 3).unwrap(), &add, &ws).unwrap();
    assert!(r.spatial_norms.iter().chain(&r.temporal_norms).all(|&v| v >= 0.0));
    assert_eq!(r.reference.temporal_mean, 7.9);

    for cfg in [
        ModelConfig { fusion: FusionMode::Concat, d_t2v: 8, ..small() },
        small().with_variant(Variant::NoPe),
    ] {
        let p = build_variant::<f64>(&cfg, 3).unwrap();
        assert!(matches!(interference_probe(&p, &cfg, &ws), Err(Error::Config(_))));
    }
}

#[test]
fn latency_report_shape() {
    let cfg = small();
    let p = build_variant::<f32>(&cfg, 4).unwrap();
    let w = windows(1).remove(0).samples;
    let r = profile_latency(&p, &cfg, &w, 25).unwrap();
    assert_eq!(r.n_runs, 25);
    assert_eq!(r.warmup_runs, 10);
    assert!(r.p50_ms <= r.p95_ms);
    assert!(r.p50_ms <= r.mean_ms * 1.5);
    assert_eq!(r.reference_ms, 21.5);
}
