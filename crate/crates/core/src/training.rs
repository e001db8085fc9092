//! Loss, batched gradients, Adam, and the training procedures: two-stage
//! multi-subject training with early stopping and per-subject adaptation.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_set, AugmentConfig};
use crate::checkpoint::{Checkpoint, CheckpointStage};
use crate::dataset::Dataset;
use crate::encoder::{build_variant, forward_taped, model_backward, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, MetricsReport};
use crate::linalg::Real;
use crate::rng::{derive_seed, named_seed, rng_from};
use crate::windowing::{materialize_split, FoldPlan, Role, Window, WINDOW_STRIDE};

/// Softmax cross-entropy against a (possibly soft) target distribution.
/// Returns the loss and its gradient with respect to the logits.
pub fn cce_loss<T: Real>(logits: &[T], target: &[T]) -> (T, Vec<T>) {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = logits.iter().map(|&z| (z - max).exp()).sum();
    let log_z = max + sum.ln();
    let loss = logits.iter().zip(target).map(|(&z, &y)| y * (log_z - z)).sum();
    let total: T = target.iter().copied().sum();
    let grad = logits
        .iter()
        .zip(target)
        .map(|(&z, &y)| (z - log_z).exp() * total - y)
        .collect();
    (loss, grad)
}

/// Mean batch loss and its gradient set.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub loss: f64,
    pub grads: ModelParams<T>,
}

const GRAD_CHUNK: usize = 8;

/// Exact gradients of the mean cross-entropy over `batch`.
///
/// With `stochastic_seed` set, each example draws its dropout and DropPath
/// masks from a stream keyed on the seed and its batch position; with `None`
/// the forward pass is deterministic. Examples run in parallel but are summed
/// in a fixed order, so results do not depend on the thread count.
pub fn compute_gradients<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    batch: &[&Window],
    stochastic_seed: Option<u64>,
) -> Result<Gradients<T>> {
    if batch.is_empty() {
        return Err(Error::Config("gradient batch is empty".into()));
    }
    let inv_b = T::one() / T::from_usize(batch.len()).unwrap();
    let partials: Vec<(f64, ModelParams<T>)> = batch
        .par_chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut g = params.zeros_like();
            let mut loss = 0.0;
            for (j, w) in chunk.iter().enumerate() {
                let x: Vec<T> = w.samples.iter().map(|&v| T::from_f32_lossy(v)).collect();
                let target: Vec<T> =
                    w.label.to_dense(cfg.n_classes).iter().map(|&v| T::from_f32_lossy(v)).collect();
                let mut rng = stochastic_seed.map(|s| rng_from(derive_seed(s, &[(ci * GRAD_CHUNK + j) as u64])));
                let (out, tape) = forward_taped(params, cfg, &x, rng.as_mut(), false)?;
                let (l, mut dlogits) = cce_loss(&out.logits, &target);
                loss += l.to_f64().unwrap();
                dlogits.iter_mut().for_each(|v| *v *= inv_b);
                model_backward(params, cfg, &tape, &dlogits, &mut g);
            }
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;
    let mut iter = partials.into_iter();
    let (mut loss, mut grads) = iter.next().unwrap();
    for (l, g) in iter {
        loss += l;
        for ((_, acc), (_, t)) in grads.tensors_mut().into_iter().zip(g.tensors()) {
            for (a, &b) in acc.data.iter_mut().zip(&t.data) {
                *a += b;
            }
        }
    }
    for (name, t) in grads.tensors() {
        if t.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerics(format!("non-finite gradient in {name}")));
        }
    }
    Ok(Gradients { loss: loss / batch.len() as f64, grads })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), t: 0 }
    }
}

/// One bias-corrected Adam update; increments `state.t` first.
pub fn adam_step<T: Real>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut AdamState<T>,
    lr: f64,
    opt: &OptimizerConfig,
) {
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (T::lit(opt.beta1), T::lit(opt.beta2));
    let c1 = T::lit(1.0 - opt.beta1.powi(t));
    let c2 = T::lit(1.0 - opt.beta2.powi(t));
    let lr = T::lit(lr);
    let eps = T::lit(opt.epsilon);
    let one = T::one();
    let p = params.tensors_mut();
    let g = grads.tensors();
    let m = state.m.tensors_mut();
    let v = state.v.tensors_mut();
    for (((p, g), m), v) in p.into_iter().zip(g).zip(m).zip(v) {
        for (((pv, &gv), mv), vv) in p.1.data.iter_mut().zip(&g.1.data).zip(m.1.data.iter_mut()).zip(v.1.data.iter_mut()) {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let m_hat = *mv / c1;
            let v_hat = *vv / c2;
            *pv -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub learning_rate: f64,
    pub epochs_max: usize,
    pub batch_size: usize,
    pub patience: usize,
    /// The augmentation seed is re-derived per fold from the master seed.
    pub augment: AugmentConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs_max: 50,
            batch_size: 64,
            patience: 5,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub learning_rate: f64,
    pub epochs_max: usize,
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub learning_rate: f64,
    pub epochs_max: usize,
    pub patience: usize,
    /// Update only the classification head.
    pub head_only: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, epochs_max: 30, patience: 5, head_only: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub stage1: Stage1Config,
    pub stage2: StageConfig,
    pub adapt: AdaptConfig,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Caps optimizer steps per epoch (the epoch's shuffled order is truncated).
    pub max_batches_per_epoch: Option<usize>,
    /// Caps validation windows used for early stopping (evenly strided subset).
    pub max_val_windows: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1: Stage1Config::default(),
            stage2: StageConfig { learning_rate: 1e-4, epochs_max: 20, patience: 5 },
            adapt: AdaptConfig::default(),
            optimizer: OptimizerConfig::default(),
            seed: 0,
            max_batches_per_epoch: None,
            max_val_windows: None,
        }
    }
}

impl TrainConfig {
    /// Short schedule for the desk-scale model: capped epochs and validation
    /// sets, and a faster adaptation rate to make up for the few calibration
    /// steps per epoch.
    pub fn desk() -> Self {
        let mut tc = Self::default();
        tc.stage1.epochs_max = 4;
        tc.stage2.epochs_max = 2;
        tc.adapt.learning_rate = 1e-3;
        tc.max_batches_per_epoch = Some(30);
        tc.max_val_windows = Some(500);
        tc
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        for (name, lr) in [
            ("stage1.learning_rate", self.stage1.learning_rate),
            ("stage2.learning_rate", self.stage2.learning_rate),
            ("adapt.learning_rate", self.adapt.learning_rate),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return err(format!("{name} must be positive, got {lr}"));
            }
        }
        if self.stage2.learning_rate >= self.stage1.learning_rate {
            return err(format!(
                "stage2.learning_rate ({}) must be below stage1.learning_rate ({})",
                self.stage2.learning_rate, self.stage1.learning_rate
            ));
        }
        for (name, p) in [
            ("stage1.patience", self.stage1.patience),
            ("stage2.patience", self.stage2.patience),
            ("adapt.patience", self.adapt.patience),
        ] {
            if p == 0 {
                return err(format!("{name} must be at least 1"));
            }
        }
        if self.stage1.batch_size == 0 {
            return err("stage1.batch_size must be at least 1".into());
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.epsilon > 0.0) {
            return err("optimizer needs betas in [0, 1) and a positive epsilon".into());
        }
        if self.max_batches_per_epoch == Some(0) || self.max_val_windows == Some(0) {
            return err("caps must be at least 1 when set".into());
        }
        self.stage1.augment.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_macro_f1: f64,
    pub learning_rate: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    pub fn best_val_f1(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.records[e].val_macro_f1)
    }

    /// One JSON object per epoch.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Evenly strided subset of at most `cap` windows.
pub fn strided_subset(windows: &[Window], cap: Option<usize>) -> Vec<Window> {
    match cap {
        Some(c) if c < windows.len() => (0..c).map(|i| windows[i * windows.len() / c].clone()).collect(),
        _ => windows.to_vec(),
    }
}

/// Settings for one early-stopped optimization run.
pub struct LoopSpec<'a> {
    pub tag: &'a str,
    pub learning_rate: f64,
    pub epochs_max: usize,
    pub patience: usize,
    pub batch_size: usize,
    /// Base of the shuffle and mask streams.
    pub seed: u64,
    pub head_only: bool,
}

/// Minibatch Adam from fresh optimizer state with early stopping on
/// validation macro-F1; returns the best-validation parameters.
pub fn train_loop(
    params: ModelParams<f32>,
    cfg: &ModelConfig,
    tc: &TrainConfig,
    train: &[Window],
    val: &[Window],
    spec: &LoopSpec<'_>,
) -> Result<(ModelParams<f32>, TrainLog)> {
    let mut log = TrainLog::default();
    if spec.epochs_max == 0 {
        return Ok((params, log));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::FoldPlan(format!("{}: empty training or validation split", spec.tag)));
    }
    let mut current = params;
    let mut best = current.clone();
    let mut best_f1 = f64::NEG_INFINITY;
    let mut since_best = 0;
    let mut state = AdamState::new(&current);
    let start = Instant::now();
    for epoch in 0..spec.epochs_max {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_from(derive_seed(spec.seed, &[epoch as u64])));
        let n_batches = order
            .len()
            .div_ceil(spec.batch_size)
            .min(tc.max_batches_per_epoch.unwrap_or(usize::MAX));
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(spec.batch_size).take(n_batches).enumerate() {
            let batch: Vec<&Window> = idx.iter().map(|&i| &train[i]).collect();
            let mask_seed = derive_seed(spec.seed, &[epoch as u64, b as u64 + 1]);
            let mut g = compute_gradients(&current, cfg, &batch, Some(mask_seed))?;
            if spec.head_only {
                for (name, t) in g.grads.tensors_mut() {
                    if !name.starts_with("head.") {
                        t.fill(0.0);
                    }
                }
            }
            loss_sum += g.loss;
            adam_step(&mut current, &g.grads, &mut state, spec.learning_rate, &tc.optimizer);
        }
        let val_f1 = evaluate(&current, cfg, val)?.macro_f1;
        log.records.push(EpochRecord {
            stage: spec.tag.to_string(),
            epoch,
            train_loss: loss_sum / n_batches as f64,
            val_macro_f1: val_f1,
            learning_rate: spec.learning_rate,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
        if val_f1 > best_f1 {
            best_f1 = val_f1;
            best = current.clone();
            log.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= spec.patience {
                break;
            }
        }
    }
    Ok((best, log))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

/// Windows for a fold's multi-subject roles, after checking that none comes
/// from the held-out subject.
pub fn source_windows(fold: &FoldPlan, role: Role, ds: &Dataset, cfg: &ModelConfig) -> Result<Vec<Window>> {
    let windows = materialize_split(fold, role, ds, cfg.window_len, WINDOW_STRIDE.min(cfg.window_len))?;
    if windows.is_empty() {
        return Err(Error::FoldPlan(format!("fold {}: role {role} is empty", fold.fold_index)));
    }
    if !role.is_adaptation() {
        if let Some(w) = windows.iter().find(|w| w.provenance.subject == fold.held_out_subject) {
            return Err(Error::Leakage(format!(
                "fold {}: {role} window from held-out subject {}",
                fold.fold_index, w.provenance.subject
            )));
        }
    }
    Ok(windows)
}

/// Windows shared by every stage of a fold.
pub struct FoldData {
    pub ms_train: Vec<Window>,
    pub ms_val: Vec<Window>,
    pub ms_test: Vec<Window>,
}

impl FoldData {
    pub fn load(fold: &FoldPlan, ds: &Dataset, cfg: &ModelConfig) -> Result<Self> {
        Ok(Self {
            ms_train: source_windows(fold, Role::MsTrain, ds, cfg)?,
            ms_val: source_windows(fold, Role::MsVal, ds, cfg)?,
            ms_test: source_windows(fold, Role::MsTest, ds, cfg)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
}

/// Stage 1 trains `init` on the augmented training windows; stage 2 continues
/// from a stage-1 checkpoint on the raw windows at the lower rate.
pub fn train_stage(
    stage: Stage,
    fold: &FoldPlan,
    data: &FoldData,
    init: &Checkpoint,
    tc: &TrainConfig,
) -> Result<StageResult> {
    tc.validate()?;
    let cfg = &init.config;
    if stage == Stage::Two && init.stage != CheckpointStage::Stage1 {
        return Err(Error::Config(format!("stage 2 needs a stage-1 checkpoint, got {:?}", init.stage)));
    }
    if init.exposed_subjects.contains(&fold.held_out_subject) {
        return Err(Error::Leakage(format!(
            "fold {}: initial weights have seen held-out subject {}",
            fold.fold_index, fold.held_out_subject
        )));
    }
    let fold_seed = derive_seed(tc.seed, &[fold.fold_index as u64]);
    let val = strided_subset(&data.ms_val, tc.max_val_windows);
    let (train, spec) = match stage {
        Stage::One => {
            let aug = AugmentConfig { seed: named_seed(fold_seed, "augment"), ..tc.stage1.augment.clone() };
            (
                augment_set(&data.ms_train, &aug)?,
                LoopSpec {
                    tag: "stage1",
                    learning_rate: tc.stage1.learning_rate,
                    epochs_max: tc.stage1.epochs_max,
                    patience: tc.stage1.patience,
                    batch_size: tc.stage1.batch_size,
                    seed: named_seed(fold_seed, "stage1"),
                    head_only: false,
                },
            )
        }
        Stage::Two => (
            data.ms_train.clone(),
            LoopSpec {
                tag: "stage2",
                learning_rate: tc.stage2.learning_rate,
                epochs_max: tc.stage2.epochs_max,
                patience: tc.stage2.patience,
                batch_size: tc.stage1.batch_size,
                seed: named_seed(fold_seed, "stage2"),
                head_only: false,
            },
        ),
    };
    let (params, log) = train_loop(init.params.clone(), cfg, tc, &train, &val, &spec)?;
    let mut exposed: BTreeSet<u32> = init.exposed_subjects.iter().copied().collect();
    if !log.records.is_empty() {
        exposed.extend(train.iter().map(|w| w.provenance.subject));
    }
    Ok(StageResult {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            seed: tc.seed,
            stage: match stage {
                Stage::One => CheckpointStage::Stage1,
                Stage::Two => CheckpointStage::Stage2,
            },
            exposed_subjects: exposed.into_iter().collect(),
            params,
        },
        log,
    })
}

/// Freshly initialized checkpoint for a fold, seeded from the master seed.
pub fn init_checkpoint(cfg: &ModelConfig, tc: &TrainConfig) -> Result<Checkpoint> {
    Ok(Checkpoint {
        config: cfg.clone(),
        seed: tc.seed,
        stage: CheckpointStage::Init,
        exposed_subjects: Vec::new(),
        params: build_variant(cfg, named_seed(tc.seed, "init"))?,
    })
}

#[derive(Debug, Clone)]
pub struct FoldRun {
    pub stage1: StageResult,
    pub stage2: Option<StageResult>,
    pub stage1_test: MetricsReport,
    pub stage2_test: Option<MetricsReport>,
}

impl FoldRun {
    pub fn final_checkpoint(&self) -> &Checkpoint {
        self.stage2.as_ref().map_or(&self.stage1.checkpoint, |s| &s.checkpoint)
    }

    pub fn final_test(&self) -> &MetricsReport {
        self.stage2_test.as_ref().unwrap_or(&self.stage1_test)
    }
}

/// Stage 1, optionally stage 2, each followed by a test evaluation.
pub fn train_fold(fold: &FoldPlan, ds: &Dataset, cfg: &ModelConfig, tc: &TrainConfig, run_stage2: bool) -> Result<FoldRun> {
    let data = FoldData::load(fold, ds, cfg)?;
    let init = init_checkpoint(cfg, tc)?;
    let stage1 = train_stage(Stage::One, fold, &data, &init, tc)?;
    let mut stage1_test = evaluate(&stage1.checkpoint.params, cfg, &data.ms_test)?;
    stage1_test.fold_index = Some(fold.fold_index);
    let (stage2, stage2_test) = if run_stage2 {
        let s2 = train_stage(Stage::Two, fold, &data, &stage1.checkpoint, tc)?;
        let mut r = evaluate(&s2.checkpoint.params, cfg, &data.ms_test)?;
        r.fold_index = Some(fold.fold_index);
        (Some(s2), Some(r))
    } else {
        (None, None)
    };
    Ok(FoldRun { stage1, stage2, stage1_test, stage2_test })
}

#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub checkpoint: Checkpoint,
    pub pre: MetricsReport,
    pub post: MetricsReport,
    pub log: TrainLog,
}

/// Direct-transfer evaluation on the held-out subject, fine-tuning on its
/// calibration trial with early stopping on its validation trial, and a
/// second evaluation.
pub fn fine_tune_adapt(fold: &FoldPlan, ds: &Dataset, pretrained: &Checkpoint, tc: &TrainConfig) -> Result<AdaptOutcome> {
    tc.validate()?;
    if pretrained.exposed_subjects.contains(&fold.held_out_subject) {
        return Err(Error::Leakage(format!(
            "fold {}: pretrained weights have seen held-out subject {}",
            fold.fold_index, fold.held_out_subject
        )));
    }
    let cfg = &pretrained.config;
    let calib = source_windows(fold, Role::AdaptCalib, ds, cfg)?;
    let val = source_windows(fold, Role::AdaptVal, ds, cfg)?;
    let test = source_windows(fold, Role::AdaptTest, ds, cfg)?;
    let mut pre = evaluate(&pretrained.params, cfg, &test)?;
    pre.fold_index = Some(fold.fold_index);
    let spec = LoopSpec {
        tag: "adapt",
        learning_rate: tc.adapt.learning_rate,
        epochs_max: tc.adapt.epochs_max,
        patience: tc.adapt.patience,
        batch_size: tc.stage1.batch_size,
        seed: named_seed(derive_seed(tc.seed, &[fold.fold_index as u64]), "adapt"),
        head_only: tc.adapt.head_only,
    };
    let val = strided_subset(&val, tc.max_val_windows);
    let (params, log) = train_loop(pretrained.params.clone(), cfg, tc, &calib, &val, &spec)?;
    let post = if log.records.is_empty() {
        pre.clone()
    } else {
        let mut r = evaluate(&params, cfg, &test)?;
        r.fold_index = Some(fold.fold_index);
        r
    };
    let mut exposed = pretrained.exposed_subjects.clone();
    if !log.records.is_empty() {
        exposed.push(fold.held_out_subject);
        exposed.sort_unstable();
        exposed.dedup();
    }
    Ok(AdaptOutcome {
        checkpoint: Checkpoint {
            config: cfg.clone(),
            seed: tc.seed,
            stage: CheckpointStage::Adapted,
            exposed_subjects: exposed,
            params,
        },
        pre,
        post,
        log,
    })
}
