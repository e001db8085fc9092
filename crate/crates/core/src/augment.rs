//! Stochastic augmentation: every training window gets exactly one compound
//! counterpart built by jitter -> channel scaling -> time warp -> time mask ->
//! mix-up, each stage switched on independently with its own probability.

use rand::Rng;
use rand_distr::{Beta, Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::N_CLASSES;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from, SeedRng};
use crate::windowing::{Label, Window};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub p_jitter: f64,
    pub p_scale: f64,
    pub p_warp: f64,
    pub p_mask: f64,
    pub p_mixup: f64,
    /// Noise std as a fraction of the window's own sample std.
    pub jitter_sigma: f64,
    pub scale_range: [f64; 2],
    /// Crop length as a fraction of the window length.
    pub warp_crop_range: [f64; 2],
    pub mask_fraction_range: [f64; 2],
    pub mixup_beta_alpha: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_jitter: 0.5,
            p_scale: 0.5,
            p_warp: 0.5,
            p_mask: 0.5,
            p_mixup: 0.5,
            jitter_sigma: 0.05,
            scale_range: [0.8, 1.2],
            warp_crop_range: [0.7, 1.0],
            mask_fraction_range: [0.05, 0.15],
            mixup_beta_alpha: 0.2,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled.
    pub fn disabled(seed: u64) -> Self {
        Self {
            p_jitter: 0.0,
            p_scale: 0.0,
            p_warp: 0.0,
            p_mask: 0.0,
            p_mixup: 0.0,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.p_jitter, self.p_scale, self.p_warp, self.p_mask, self.p_mixup];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("augment probabilities must lie in [0, 1]".into()));
        }
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !(ordered(self.scale_range) && self.scale_range[0] > 0.0) {
            return Err(Error::Config("scale_range must satisfy 0 < lo <= hi".into()));
        }
        if !(ordered(self.warp_crop_range)
            && self.warp_crop_range[0] > 0.0
            && self.warp_crop_range[1] <= 1.0)
        {
            return Err(Error::Config("warp_crop_range must lie in (0, 1]".into()));
        }
        if !(ordered(self.mask_fraction_range)
            && self.mask_fraction_range[0] >= 0.0
            && self.mask_fraction_range[1] < 1.0)
        {
            return Err(Error::Config("mask_fraction_range must lie in [0, 1)".into()));
        }
        if !(self.mixup_beta_alpha > 0.0) {
            return Err(Error::Config("mixup_beta_alpha must be positive".into()));
        }
        if !(self.jitter_sigma >= 0.0) {
            return Err(Error::Config("jitter_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

fn flagged(w: &Window, samples: Vec<f32>) -> Window {
    Window {
        samples,
        is_augmented: true,
        ..w.clone()
    }
}

/// Adds i.i.d. `N(0, sigma^2)` noise to every sample.
pub fn gaussian_jitter(w: &Window, sigma: f64, rng: &mut SeedRng) -> Window {
    if sigma == 0.0 {
        return flagged(w, w.samples.clone());
    }
    let noise = Normal::new(0.0, sigma).expect("sigma >= 0");
    let samples = w
        .samples
        .iter()
        .map(|&v| (v as f64 + noise.sample(rng)) as f32)
        .collect();
    flagged(w, samples)
}

/// Multiplies channel `c` by `factors[c]`.
pub fn scale_channels(w: &Window, factors: &[f64]) -> Window {
    let samples = w
        .samples
        .iter()
        .enumerate()
        .map(|(i, &v)| (v as f64 * factors[i % w.n_channels]) as f32)
        .collect();
    flagged(w, samples)
}

/// Scales each channel by an independent factor drawn uniformly from `range`.
pub fn channel_scaling(w: &Window, range: [f64; 2], rng: &mut SeedRng) -> Window {
    let factors: Vec<f64> = (0..w.n_channels).map(|_| uniform(rng, range)).collect();
    scale_channels(w, &factors)
}

fn uniform(rng: &mut SeedRng, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..=range[1])
    }
}

/// Stretches the `len` samples starting at `start` back to the full window
/// length with per-channel linear interpolation (end points aligned).
pub fn resize_segment(w: &Window, start: usize, len: usize) -> Result<Window> {
    let t = w.n_samples;
    if len < 2 {
        return Err(Error::Warp(format!("crop length {len} is below 2")));
    }
    if start + len > t {
        return Err(Error::Warp(format!("crop [{start}, {}) exceeds window", start + len)));
    }
    let c = w.n_channels;
    let scale = (len - 1) as f64 / (t - 1).max(1) as f64;
    let mut samples = vec![0.0f32; t * c];
    for i in 0..t {
        let p = i as f64 * scale;
        let lo = (p.floor() as usize).min(len - 1);
        let hi = (lo + 1).min(len - 1);
        let frac = p - lo as f64;
        for ch in 0..c {
            let a = w.samples[(start + lo) * c + ch] as f64;
            let b = w.samples[(start + hi) * c + ch] as f64;
            samples[i * c + ch] = (a + (b - a) * frac) as f32;
        }
    }
    Ok(flagged(w, samples))
}

/// Random resize-crop: a segment of `round(crop_fraction * T)` samples at a
/// random offset is stretched back to `T`.
pub fn time_warp(w: &Window, crop_fraction: f64, rng: &mut SeedRng) -> Result<Window> {
    if !(crop_fraction > 0.0 && crop_fraction <= 1.0) {
        return Err(Error::Warp(format!("crop fraction {crop_fraction} outside (0, 1]")));
    }
    let len = (crop_fraction * w.n_samples as f64).round() as usize;
    if len < 2 {
        return Err(Error::Warp(format!("crop length {len} is below 2")));
    }
    let start = rng.random_range(0..=w.n_samples - len);
    resize_segment(w, start, len)
}

/// Zeroes `[start, start + len)` on every channel.
pub fn zero_segment(w: &Window, start: usize, len: usize) -> Window {
    let mut samples = w.samples.clone();
    samples[start * w.n_channels..(start + len) * w.n_channels].fill(0.0);
    flagged(w, samples)
}

/// Zeroes one contiguous run of `round(fraction * T)` time steps.
pub fn time_mask(w: &Window, fraction: f64, rng: &mut SeedRng) -> Window {
    assert!((0.0..1.0).contains(&fraction), "mask fraction must lie in [0, 1)");
    let len = (fraction * w.n_samples as f64).round() as usize;
    if len == 0 {
        return flagged(w, w.samples.clone());
    }
    let start = rng.random_range(0..=w.n_samples - len);
    zero_segment(w, start, len)
}

/// Convex combination of two windows and of their one-hot labels.
pub fn mixup(w1: &Window, w2: &Window, lambda: f64) -> Result<Window> {
    if w1.n_samples != w2.n_samples || w1.n_channels != w2.n_channels {
        return Err(Error::Augment(format!(
            "mixup shape mismatch: {}x{} vs {}x{}",
            w1.n_samples, w1.n_channels, w2.n_samples, w2.n_channels
        )));
    }
    assert!((0.0..=1.0).contains(&lambda), "lambda must lie in [0, 1]");
    let samples = w1
        .samples
        .iter()
        .zip(&w2.samples)
        .map(|(&a, &b)| (lambda * a as f64 + (1.0 - lambda) * b as f64) as f32)
        .collect();
    let y1 = w1.label.to_dense(N_CLASSES);
    let y2 = w2.label.to_dense(N_CLASSES);
    let label = y1
        .iter()
        .zip(&y2)
        .map(|(&a, &b)| (lambda * a as f64 + (1.0 - lambda) * b as f64) as f32)
        .collect();
    Ok(Window {
        samples,
        label: Label::Soft(label),
        is_augmented: true,
        ..w1.clone()
    })
}

fn sample_std(samples: &[f32]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().map(|&v| v as f64).sum::<f64>() / n;
    (samples.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn compound(
    w: &Window,
    rank: usize,
    sorted: &[usize],
    windows: &[Window],
    cfg: &AugmentConfig,
) -> Result<Window> {
    let p = &w.provenance;
    let mut rng = rng_from(derive_seed(
        cfg.seed,
        &[p.subject as u64, p.gesture as u64, p.trial_index as u64, p.start_offset as u64],
    ));
    let mut out = flagged(w, w.samples.clone());
    if rng.random_bool(cfg.p_jitter) {
        let sigma = cfg.jitter_sigma * sample_std(&w.samples);
        out = gaussian_jitter(&out, sigma, &mut rng);
    }
    if rng.random_bool(cfg.p_scale) {
        out = channel_scaling(&out, cfg.scale_range, &mut rng);
    }
    if rng.random_bool(cfg.p_warp) {
        let frac = uniform(&mut rng, cfg.warp_crop_range);
        out = time_warp(&out, frac, &mut rng)?;
    }
    if rng.random_bool(cfg.p_mask) {
        let frac = uniform(&mut rng, cfg.mask_fraction_range);
        out = time_mask(&out, frac, &mut rng);
    }
    if rng.random_bool(cfg.p_mixup) {
        let lambda = Beta::new(cfg.mixup_beta_alpha, cfg.mixup_beta_alpha)
            .expect("alpha > 0")
            .sample(&mut rng);
        // Partner: any other window, chosen by rank in provenance order.
        let mut partner = rng.random_range(0..sorted.len() - 1);
        if partner >= rank {
            partner += 1;
        }
        out = mixup(&out, &windows[sorted[partner]], lambda)?;
    }
    Ok(out)
}

/// Returns the originals followed by one augmented copy of each, in input order.
///
/// Each copy is driven by an RNG stream keyed on `cfg.seed` and the window's
/// provenance, and mix-up partners are chosen by rank in provenance order, so
/// the output does not depend on the order of `windows`.
pub fn augment_set(windows: &[Window], cfg: &AugmentConfig) -> Result<Vec<Window>> {
    cfg.validate()?;
    if cfg.p_mixup > 0.0 && windows.len() < 2 {
        return Err(Error::Augment(format!(
            "mix-up needs at least 2 windows, got {}",
            windows.len()
        )));
    }
    let mut sorted: Vec<usize> = (0..windows.len()).collect();
    sorted.sort_by_key(|&i| (windows[i].provenance, i));
    let mut rank = vec![0usize; windows.len()];
    for (r, &i) in sorted.iter().enumerate() {
        rank[i] = r;
    }
    let augmented: Vec<Window> = windows
        .par_iter()
        .enumerate()
        .map(|(i, w)| compound(w, rank[i], &sorted, windows, cfg))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(windows.len() * 2);
    out.extend_from_slice(windows);
    out.extend(augmented);
    Ok(out)
}
