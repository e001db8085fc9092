//! Pre-LN Transformer encoder, pooling + MLP head, and assembly of the
//! architecture variants.
//!
//! Every forward function here has a taped twin used by training; the
//! backward passes consume those tapes and accumulate into a gradient set that
//! has the same layout as [`ModelParams`].

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::embedding::{
    fuse_backward, fuse_taped, sinusoidal_pe, stem_backward, stem_forward_taped,
    time2vec_backward, time2vec_forward, FuseTape, FusionDims, FusionMode, FusionNormParams,
    StemParams, StemShape, StemTape, Time2VecParams,
};
use crate::error::{Error, Result};
use crate::linalg::{gemm, Real, Tensor, View, ViewMut};
use crate::nn::{
    layer_norm_rows, layer_norm_rows_backward, leaky_relu, leaky_relu_grad, linear,
    linear_backward, softmax_rows, LnCache,
};
use crate::rng::{named_seed, rng_from, SeedRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Time2Vec,
    StandardPe,
    NoPe,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Time2Vec => "Time2Vec Transformer",
            Variant::StandardPe => "Standard Transformer",
            Variant::NoPe => "No-PE Transformer",
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub d_t2v: usize,
    /// Hidden width of the classification MLP.
    pub d_head: usize,
    pub fusion: FusionMode,
    pub variant: Variant,
    pub leaky_alpha: f64,
    pub dropout_p: f64,
    pub droppath_p: f64,
    pub n_classes: usize,
    pub window_len: usize,
    pub n_channels: usize,
    pub stem_f1: usize,
    pub stem_f2: usize,
    pub kernel1: usize,
    pub kernel2: usize,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 144,
            d_t2v: 128,
            d_head: 64,
            fusion: FusionMode::NormAdd,
            variant: Variant::Time2Vec,
            leaky_alpha: 0.01,
            dropout_p: 0.1,
            droppath_p: 0.1,
            n_classes: 10,
            window_len: 1000,
            n_channels: 2,
            stem_f1: 32,
            stem_f2: 64,
            kernel1: 61,
            kernel2: 7,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    /// A narrow, shallow model that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 64,
            d_t2v: 32,
            d_head: 32,
            stem_f1: 8,
            stem_f2: 16,
            ..Self::default()
        }
    }

    /// The gradient-check configuration.
    pub fn tiny() -> Self {
        Self {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ff: 32,
            d_t2v: 16,
            d_head: 16,
            window_len: 32,
            stem_f1: 4,
            stem_f2: 8,
            dropout_p: 0.0,
            droppath_p: 0.0,
            ..Self::default()
        }
    }

    /// Switches to `variant` with its matching fusion mode (Time2Vec keeps
    /// the current fusion when it is a Time2Vec mode).
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self.fusion = match variant {
            Variant::Time2Vec if self.fusion.has_time2vec() => self.fusion,
            Variant::Time2Vec => FusionMode::NormAdd,
            Variant::StandardPe => FusionMode::SinusoidalAdd,
            Variant::NoPe => FusionMode::None,
        };
        if self.fusion != FusionMode::Concat && variant == Variant::Time2Vec {
            self.d_t2v = self.d_model;
        }
        self
    }

    pub fn d_spatial(&self) -> usize {
        match self.fusion {
            FusionMode::Concat => self.d_model.saturating_sub(self.d_t2v),
            _ => self.d_model,
        }
    }

    pub fn d_time(&self) -> usize {
        match self.fusion {
            FusionMode::Concat | FusionMode::Add | FusionMode::NormAdd => self.d_t2v,
            FusionMode::SinusoidalAdd => self.d_model,
            FusionMode::None => 0,
        }
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn stem_shape(&self) -> StemShape {
        StemShape {
            window_len: self.window_len,
            n_channels: self.n_channels,
            kernel1: self.kernel1,
            kernel2: self.kernel2,
            f1: self.stem_f1,
            f2: self.stem_f2,
            d_spatial: self.d_spatial(),
        }
    }

    pub fn seq_len(&self) -> usize {
        self.stem_shape().seq_len()
    }

    pub fn fusion_dims(&self) -> FusionDims {
        FusionDims {
            n_positions: self.seq_len(),
            d_spatial: self.d_spatial(),
            d_time: self.d_time(),
            d_model: self.d_model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return err(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.window_len == 0 || !self.window_len.is_multiple_of(4) {
            return err(format!("window_len ({}) must be a positive multiple of 4", self.window_len));
        }
        for (name, p) in [("dropout_p", self.dropout_p), ("droppath_p", self.droppath_p)] {
            if !(0.0..1.0).contains(&p) {
                return err(format!("{name} ({p}) must lie in [0, 1)"));
            }
        }
        if !(self.leaky_alpha > 0.0 && self.leaky_alpha < 1.0) {
            return err(format!("leaky_alpha ({}) must lie in (0, 1)", self.leaky_alpha));
        }
        if self.n_classes < 2 || self.n_channels == 0 || self.d_ff == 0 || self.d_head == 0 {
            return err("n_classes >= 2 and positive n_channels, d_ff, d_head required".into());
        }
        if self.stem_f1 == 0 || self.stem_f2 == 0 || self.kernel1 == 0 || self.kernel2 == 0 {
            return err("stem widths and kernels must be positive".into());
        }
        if !(self.ln_eps > 0.0) {
            return err("ln_eps must be positive".into());
        }
        let consistent = match self.variant {
            Variant::Time2Vec => self.fusion.has_time2vec(),
            Variant::StandardPe => self.fusion == FusionMode::SinusoidalAdd,
            Variant::NoPe => self.fusion == FusionMode::None,
        };
        if !consistent {
            return err(format!(
                "variant {:?} is incompatible with fusion {:?}",
                self.variant, self.fusion
            ));
        }
        if self.fusion.has_time2vec() && self.d_t2v == 0 {
            return err("d_t2v must be at least 1".into());
        }
        if self.fusion == FusionMode::Concat && self.d_t2v >= self.d_model {
            return err(format!(
                "concat fusion needs d_t2v ({}) < d_model ({})",
                self.d_t2v, self.d_model
            ));
        }
        if self.fusion == FusionMode::SinusoidalAdd && !self.d_model.is_multiple_of(2) {
            return err("sinusoidal encodings need an even d_model".into());
        }
        self.fusion_dims().check(self.fusion)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayerParams<T> {
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    /// `[d_model, d_model]`; head `j` owns columns `j*d_k..(j+1)*d_k`.
    pub w_q: Tensor<T>,
    pub b_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub b_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub b_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    /// `[d_model, d_ff]`.
    pub w_1: Tensor<T>,
    pub b_1: Tensor<T>,
    /// `[d_ff, d_model]`.
    pub w_2: Tensor<T>,
    pub b_2: Tensor<T>,
}

/// Final layer norm and the two-layer classification MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams<T> {
    pub ln_gamma: Tensor<T>,
    pub ln_beta: Tensor<T>,
    pub w_1: Tensor<T>,
    pub b_1: Tensor<T>,
    pub w_2: Tensor<T>,
    pub b_2: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    pub stem: StemParams<T>,
    pub time2vec: Option<Time2VecParams<T>>,
    pub fusion_norm: Option<FusionNormParams<T>>,
    pub layers: Vec<EncoderLayerParams<T>>,
    pub head: HeadParams<T>,
}

macro_rules! tensor_fields {
    ($ty:ident { $($f:ident),* $(,)? }) => {
        impl<T: Real> $ty<T> {
            fn push_refs<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
                $( out.push((format!("{prefix}{}", stringify!($f)), &self.$f)); )*
            }
            fn push_muts<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
                $( out.push((format!("{prefix}{}", stringify!($f)), &mut self.$f)); )*
            }
        }
    };
}

tensor_fields!(StemParams { conv1_w, conv1_b, conv2_w, conv2_b, proj_w, proj_b });
tensor_fields!(Time2VecParams { omega, phi });
tensor_fields!(FusionNormParams { spatial_gamma, spatial_beta, time_gamma, time_beta });
tensor_fields!(EncoderLayerParams {
    ln1_gamma, ln1_beta, w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o,
    ln2_gamma, ln2_beta, w_1, b_1, w_2, b_2,
});
tensor_fields!(HeadParams { ln_gamma, ln_beta, w_1, b_1, w_2, b_2 });

impl<T: Real> ModelParams<T> {
    /// Every learnable array with a dotted name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.stem.push_refs("stem.", &mut out);
        if let Some(t) = &self.time2vec {
            t.push_refs("time2vec.", &mut out);
        }
        if let Some(n) = &self.fusion_norm {
            n.push_refs("fusion.", &mut out);
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.push_refs(&format!("layers.{i}."), &mut out);
        }
        self.head.push_refs("head.", &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        self.stem.push_muts("stem.", &mut out);
        if let Some(t) = &mut self.time2vec {
            t.push_muts("time2vec.", &mut out);
        }
        if let Some(n) = &mut self.fusion_norm {
            n.push_muts("fusion.", &mut out);
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.push_muts(&format!("layers.{i}."), &mut out);
        }
        self.head.push_muts("head.", &mut out);
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(T::zero());
        }
        z
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let mut out: ModelParams<U> = ModelParams {
            stem: StemParams {
                conv1_w: self.stem.conv1_w.cast(),
                conv1_b: self.stem.conv1_b.cast(),
                conv2_w: self.stem.conv2_w.cast(),
                conv2_b: self.stem.conv2_b.cast(),
                proj_w: self.stem.proj_w.cast(),
                proj_b: self.stem.proj_b.cast(),
            },
            time2vec: self.time2vec.as_ref().map(|t| Time2VecParams {
                omega: t.omega.cast(),
                phi: t.phi.cast(),
            }),
            fusion_norm: None,
            layers: Vec::new(),
            head: HeadParams {
                ln_gamma: self.head.ln_gamma.cast(),
                ln_beta: self.head.ln_beta.cast(),
                w_1: self.head.w_1.cast(),
                b_1: self.head.b_1.cast(),
                w_2: self.head.w_2.cast(),
                b_2: self.head.b_2.cast(),
            },
        };
        out.fusion_norm = self.fusion_norm.as_ref().map(|n| FusionNormParams {
            spatial_gamma: n.spatial_gamma.cast(),
            spatial_beta: n.spatial_beta.cast(),
            time_gamma: n.time_gamma.cast(),
            time_beta: n.time_beta.cast(),
        });
        out.layers = self
            .layers
            .iter()
            .map(|l| EncoderLayerParams {
                ln1_gamma: l.ln1_gamma.cast(),
                ln1_beta: l.ln1_beta.cast(),
                w_q: l.w_q.cast(),
                b_q: l.b_q.cast(),
                w_k: l.w_k.cast(),
                b_k: l.b_k.cast(),
                w_v: l.w_v.cast(),
                b_v: l.b_v.cast(),
                w_o: l.w_o.cast(),
                b_o: l.b_o.cast(),
                ln2_gamma: l.ln2_gamma.cast(),
                ln2_beta: l.ln2_beta.cast(),
                w_1: l.w_1.cast(),
                b_1: l.b_1.cast(),
                w_2: l.w_2.cast(),
                b_2: l.b_2.cast(),
            })
            .collect();
        out
    }

    /// Checks every tensor's shape against `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = build_variant::<T>(cfg, 0)?;
        let ours = self.tensors();
        let theirs = expected.tensors();
        if ours.len() != theirs.len() {
            return Err(Error::Config(format!(
                "parameter set has {} tensors, config implies {}",
                ours.len(),
                theirs.len()
            )));
        }
        for ((name, t), (ename, e)) in ours.iter().zip(&theirs) {
            if name != ename || t.shape != e.shape || t.data.len() != e.data.len() {
                return Err(Error::Config(format!(
                    "tensor {name} has shape {:?}, config implies {ename} {:?}",
                    t.shape, e.shape
                )));
            }
        }
        Ok(())
    }
}

/// Scaled dot-product attention weights `softmax(Q K^T / sqrt(d_k))`, `n x n`.
pub fn attention_weights<T: Real>(q: &[T], k: &[T], n: usize, d_k: usize) -> Result<Vec<T>> {
    let mut a = vec![T::zero(); n * n];
    let scale = T::one() / T::from_usize(d_k).unwrap().sqrt();
    gemm(scale, View::rm(q, n, d_k), View::rm(k, n, d_k).t(), ViewMut::rm(&mut a, n, n), false);
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerics("non-finite attention scores".into()));
    }
    softmax_rows(&mut a, n);
    Ok(a)
}

/// `softmax(Q K^T / sqrt(d_k)) V` for `n x d_k` inputs.
pub fn scaled_dot_product_attention<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    n: usize,
    d_k: usize,
) -> Result<Vec<T>> {
    let a = attention_weights(q, k, n, d_k)?;
    let mut out = vec![T::zero(); n * d_k];
    gemm(T::one(), View::rm(&a, n, n), View::rm(v, n, d_k), ViewMut::rm(&mut out, n, d_k), false);
    Ok(out)
}

struct AttnTape<T> {
    ln: LnCache<T>,
    u: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// `n_heads` stacked `n x n` weight matrices.
    attn: Vec<T>,
    /// Concatenated head outputs.
    o: Vec<T>,
}

struct FfnTape<T> {
    ln: LnCache<T>,
    u: Vec<T>,
    pre: Vec<T>,
    act: Vec<T>,
}

/// A residual branch as executed: its tape, the DropPath/dropout scale, and
/// the dropout mask (already scaled), or `None` when the branch was dropped.
struct Branch<Tape, T> {
    tape: Tape,
    mask: Option<Vec<T>>,
    scale: T,
}

pub(crate) struct LayerTape<T> {
    attn: Option<Branch<AttnTape<T>, T>>,
    ffn: Option<Branch<FfnTape<T>, T>>,
}

/// Stochastic regularization for one forward pass.
struct Stochastic<'a> {
    rng: &'a mut SeedRng,
    dropout_p: f64,
    droppath_p: f64,
}

impl Stochastic<'_> {
    /// DropPath decision: `None` if the branch is dropped, else its scale.
    fn keep_branch<T: Real>(&mut self) -> Option<T> {
        if self.droppath_p == 0.0 {
            return Some(T::one());
        }
        (!self.rng.random_bool(self.droppath_p)).then(|| T::lit(1.0 / (1.0 - self.droppath_p)))
    }

    fn dropout_mask<T: Real>(&mut self, len: usize) -> Option<Vec<T>> {
        if self.dropout_p == 0.0 {
            return None;
        }
        let keep = T::lit(1.0 / (1.0 - self.dropout_p));
        Some(
            (0..len)
                .map(|_| if self.rng.random_bool(self.dropout_p) { T::zero() } else { keep })
                .collect(),
        )
    }
}

fn mhsa_taped<T: Real>(
    u: &[T],
    layer: &EncoderLayerParams<T>,
    n: usize,
    d: usize,
    n_heads: usize,
) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
    let q = linear(u, &layer.w_q.data, &layer.b_q.data, n, d, d);
    let k = linear(u, &layer.w_k.data, &layer.b_k.data, n, d, d);
    let v = linear(u, &layer.w_v.data, &layer.b_v.data, n, d, d);
    let dk = d / n_heads;
    let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
    let mut attn = vec![T::zero(); n_heads * n * n];
    let mut o = vec![T::zero(); n * d];
    for (j, a) in attn.chunks_exact_mut(n * n).enumerate() {
        let c0 = j * dk;
        gemm(
            scale,
            View::block(&q, n, d, c0, dk),
            View::block(&k, n, d, c0, dk).t(),
            ViewMut::rm(a, n, n),
            false,
        );
        softmax_rows(a, n);
        gemm(
            T::one(),
            View::rm(a, n, n),
            View::block(&v, n, d, c0, dk),
            ViewMut::block(&mut o, n, d, c0, dk),
            false,
        );
    }
    let out = linear(&o, &layer.w_o.data, &layer.b_o.data, n, d, d);
    (out, q, k, v, attn, o)
}

/// Multi-head self-attention `Concat(head_1..head_h) W^O` over an `n x d_model` input.
pub fn mhsa_forward<T: Real>(h: &[T], layer: &EncoderLayerParams<T>, n_heads: usize) -> Vec<T> {
    let d = layer.w_q.shape[0];
    mhsa_taped(h, layer, h.len() / d, d, n_heads).0
}

/// `LeakyReLU(x W1 + b1) W2 + b2` applied to each row of `x`.
pub fn ffn_forward<T: Real>(x: &[T], layer: &EncoderLayerParams<T>, alpha: T) -> Vec<T> {
    let d = layer.w_1.shape[0];
    let d_ff = layer.w_1.shape[1];
    let rows = x.len() / d;
    let act: Vec<T> = linear(x, &layer.w_1.data, &layer.b_1.data, rows, d, d_ff)
        .into_iter()
        .map(|v| leaky_relu(v, alpha))
        .collect();
    linear(&act, &layer.w_2.data, &layer.b_2.data, rows, d_ff, d)
}

fn apply_branch<T: Real>(h: &mut [T], f: &[T], mask: Option<&[T]>, scale: T) {
    match mask {
        Some(m) => {
            for ((hv, &fv), &mv) in h.iter_mut().zip(f).zip(m) {
                *hv += scale * mv * fv;
            }
        }
        None => {
            for (hv, &fv) in h.iter_mut().zip(f) {
                *hv += scale * fv;
            }
        }
    }
}

fn layer_forward_taped<T: Real>(
    h: &mut Vec<T>,
    layer: &EncoderLayerParams<T>,
    cfg: &ModelConfig,
    mut stoch: Option<&mut Stochastic<'_>>,
) -> LayerTape<T> {
    let d = cfg.d_model;
    let n = h.len() / d;
    let eps = T::lit(cfg.ln_eps);
    let alpha = T::lit(cfg.leaky_alpha);

    let keep1 = match stoch.as_deref_mut() {
        Some(s) => s.keep_branch::<T>(),
        None => Some(T::one()),
    };
    let attn = keep1.map(|scale| {
        let mut u = vec![T::zero(); n * d];
        let ln = layer_norm_rows(h, d, &layer.ln1_gamma.data, &layer.ln1_beta.data, eps, &mut u);
        let (out, q, k, v, attn, o) = mhsa_taped(&u, layer, n, d, cfg.n_heads);
        let mask = stoch.as_deref_mut().and_then(|s| s.dropout_mask::<T>(n * d));
        apply_branch(h, &out, mask.as_deref(), scale);
        Branch { tape: AttnTape { ln, u, q, k, v, attn, o }, mask, scale }
    });

    let keep2 = match stoch.as_deref_mut() {
        Some(s) => s.keep_branch::<T>(),
        None => Some(T::one()),
    };
    let ffn = keep2.map(|scale| {
        let mut u = vec![T::zero(); n * d];
        let ln = layer_norm_rows(h, d, &layer.ln2_gamma.data, &layer.ln2_beta.data, eps, &mut u);
        let pre = linear(&u, &layer.w_1.data, &layer.b_1.data, n, d, cfg.d_ff);
        let act: Vec<T> = pre.iter().map(|&v| leaky_relu(v, alpha)).collect();
        let out = linear(&act, &layer.w_2.data, &layer.b_2.data, n, cfg.d_ff, d);
        let mask = stoch.and_then(|s| s.dropout_mask::<T>(n * d));
        apply_branch(h, &out, mask.as_deref(), scale);
        Branch { tape: FfnTape { ln, u, pre, act }, mask, scale }
    });
    LayerTape { attn, ffn }
}

fn branch_grad<T: Real>(dh: &[T], mask: Option<&[T]>, scale: T) -> Vec<T> {
    match mask {
        Some(m) => dh.iter().zip(m).map(|(&g, &mv)| g * mv * scale).collect(),
        None => dh.iter().map(|&g| g * scale).collect(),
    }
}

/// Backward through one layer; `dh` holds d(out) on entry and d(in) on exit.
fn layer_backward<T: Real>(
    dh: &mut [T],
    tape: &LayerTape<T>,
    layer: &EncoderLayerParams<T>,
    g: &mut EncoderLayerParams<T>,
    cfg: &ModelConfig,
) {
    let d = cfg.d_model;
    let n = dh.len() / d;
    let alpha = T::lit(cfg.leaky_alpha);

    if let Some(br) = &tape.ffn {
        let t = &br.tape;
        let df = branch_grad(dh, br.mask.as_deref(), br.scale);
        let mut dact = linear_backward(
            &df, &t.act, &layer.w_2.data, &mut g.w_2.data, &mut g.b_2.data, n, cfg.d_ff, d, true,
        )
        .unwrap();
        for (x, &p) in dact.iter_mut().zip(&t.pre) {
            *x *= leaky_relu_grad(p, alpha);
        }
        let du = linear_backward(
            &dact, &t.u, &layer.w_1.data, &mut g.w_1.data, &mut g.b_1.data, n, d, cfg.d_ff, true,
        )
        .unwrap();
        layer_norm_rows_backward(
            &du, &t.ln, &layer.ln2_gamma.data, &mut g.ln2_gamma.data, &mut g.ln2_beta.data, dh, true,
        );
    }

    if let Some(br) = &tape.attn {
        let t = &br.tape;
        let datt = branch_grad(dh, br.mask.as_deref(), br.scale);
        let d_o = linear_backward(
            &datt, &t.o, &layer.w_o.data, &mut g.w_o.data, &mut g.b_o.data, n, d, d, true,
        )
        .unwrap();
        let dk = d / cfg.n_heads;
        let scale = T::one() / T::from_usize(dk).unwrap().sqrt();
        let mut dq = vec![T::zero(); n * d];
        let mut dkm = vec![T::zero(); n * d];
        let mut dv = vec![T::zero(); n * d];
        let mut ds = vec![T::zero(); n * n];
        for (j, a) in t.attn.chunks_exact(n * n).enumerate() {
            let c0 = j * dk;
            gemm(
                T::one(),
                View::block(&d_o, n, d, c0, dk),
                View::block(&t.v, n, d, c0, dk).t(),
                ViewMut::rm(&mut ds, n, n),
                false,
            );
            gemm(
                T::one(),
                View::rm(a, n, n).t(),
                View::block(&d_o, n, d, c0, dk),
                ViewMut::block(&mut dv, n, d, c0, dk),
                false,
            );
            // Softmax backward: dS = A * (dA - rowsum(dA * A)).
            for (srow, arow) in ds.chunks_exact_mut(n).zip(a.chunks_exact(n)) {
                let dot: T = srow.iter().zip(arow).map(|(&x, &y)| x * y).sum();
                for (x, &y) in srow.iter_mut().zip(arow) {
                    *x = y * (*x - dot);
                }
            }
            gemm(
                scale,
                View::rm(&ds, n, n),
                View::block(&t.k, n, d, c0, dk),
                ViewMut::block(&mut dq, n, d, c0, dk),
                false,
            );
            gemm(
                scale,
                View::rm(&ds, n, n).t(),
                View::block(&t.q, n, d, c0, dk),
                ViewMut::block(&mut dkm, n, d, c0, dk),
                false,
            );
        }
        let mut du = linear_backward(&dq, &t.u, &layer.w_q.data, &mut g.w_q.data, &mut g.b_q.data, n, d, d, true)
            .unwrap();
        let du_k = linear_backward(&dkm, &t.u, &layer.w_k.data, &mut g.w_k.data, &mut g.b_k.data, n, d, d, true)
            .unwrap();
        let du_v = linear_backward(&dv, &t.u, &layer.w_v.data, &mut g.w_v.data, &mut g.b_v.data, n, d, d, true)
            .unwrap();
        for ((x, &a), &b) in du.iter_mut().zip(&du_k).zip(&du_v) {
            *x += a + b;
        }
        layer_norm_rows_backward(
            &du, &t.ln, &layer.ln1_gamma.data, &mut g.ln1_gamma.data, &mut g.ln1_beta.data, dh, true,
        );
    }
}

/// Whether a forward pass is stochastic.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut SeedRng),
}

/// One Pre-LN encoder layer:
/// `H' = H + b1 * Drop(MHSA(LN(H)))`, `out = H' + b2 * Drop(FFN(LN(H')))`.
pub fn encoder_layer_forward<T: Real>(
    h: &[T],
    layer: &EncoderLayerParams<T>,
    cfg: &ModelConfig,
    mode: Mode<'_>,
) -> Vec<T> {
    let mut out = h.to_vec();
    match mode {
        Mode::Eval => {
            layer_forward_taped(&mut out, layer, cfg, None);
        }
        Mode::Train(rng) => {
            let mut s = Stochastic { rng, dropout_p: cfg.dropout_p, droppath_p: cfg.droppath_p };
            layer_forward_taped(&mut out, layer, cfg, Some(&mut s));
        }
    }
    out
}

/// Per-position L2 norms of the two streams as they enter the fusion step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchNorms {
    pub spatial: Vec<f64>,
    pub temporal: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    pub logits: Vec<T>,
    pub diagnostics: Option<BranchNorms>,
}

pub(crate) struct Tape<T> {
    stem: StemTape<T>,
    fuse: FuseTape<T>,
    layers: Vec<LayerTape<T>>,
    final_ln: LnCache<T>,
    pooled: Vec<T>,
    hid_pre: Vec<T>,
    hid_act: Vec<T>,
}

fn row_norms<T: Real>(x: &[T], d: usize) -> Vec<f64> {
    x.chunks_exact(d)
        .map(|r| r.iter().map(|v| v.to_f64().unwrap().powi(2)).sum::<f64>().sqrt())
        .collect()
}

pub(crate) fn forward_taped<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    x: &[T],
    rng: Option<&mut SeedRng>,
    diagnostics: bool,
) -> Result<(ForwardOutput<T>, Tape<T>)> {
    if x.len() != cfg.window_len * cfg.n_channels {
        return Err(Error::Config(format!(
            "window has {} values, model expects {}x{}",
            x.len(),
            cfg.window_len,
            cfg.n_channels
        )));
    }
    let alpha = T::lit(cfg.leaky_alpha);
    let eps = T::lit(cfg.ln_eps);
    let shape = cfg.stem_shape();
    let n = shape.seq_len();
    let d = cfg.d_model;

    let (zs, stem_tape) = stem_forward_taped(x, &params.stem, &shape, alpha);
    let zt = match cfg.fusion {
        FusionMode::Concat | FusionMode::Add | FusionMode::NormAdd => {
            let p = params
                .time2vec
                .as_ref()
                .ok_or_else(|| Error::Config("Time2Vec parameters missing".into()))?;
            Some(time2vec_forward(n, p))
        }
        FusionMode::SinusoidalAdd => Some(sinusoidal_pe(n, d)?),
        FusionMode::None => None,
    };
    let fused = fuse_taped(
        &zs,
        zt.as_deref(),
        cfg.fusion,
        params.fusion_norm.as_ref(),
        &cfg.fusion_dims(),
        eps,
        diagnostics,
    )?;
    let diag = diagnostics.then(|| BranchNorms {
        spatial: row_norms(fused.spatial_branch.as_deref().unwrap(), cfg.d_spatial()),
        temporal: fused.time_branch.as_deref().map(|t| row_norms(t, cfg.d_time())),
    });

    let mut h = fused.z;
    let mut stoch = rng.map(|rng| Stochastic {
        rng,
        dropout_p: cfg.dropout_p,
        droppath_p: cfg.droppath_p,
    });
    let layers = params
        .layers
        .iter()
        .map(|l| layer_forward_taped(&mut h, l, cfg, stoch.as_mut()))
        .collect();

    let mut y = vec![T::zero(); n * d];
    let final_ln = layer_norm_rows(&h, d, &params.head.ln_gamma.data, &params.head.ln_beta.data, eps, &mut y);
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut pooled = vec![T::zero(); d];
    for row in y.chunks_exact(d) {
        for (p, &v) in pooled.iter_mut().zip(row) {
            *p += v;
        }
    }
    pooled.iter_mut().for_each(|p| *p *= inv_n);
    let hid_pre = linear(&pooled, &params.head.w_1.data, &params.head.b_1.data, 1, d, cfg.d_head);
    let hid_act: Vec<T> = hid_pre.iter().map(|&v| leaky_relu(v, alpha)).collect();
    let logits = linear(&hid_act, &params.head.w_2.data, &params.head.b_2.data, 1, cfg.d_head, cfg.n_classes);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerics("non-finite logits".into()));
    }
    Ok((
        ForwardOutput { logits, diagnostics: diag },
        Tape {
            stem: stem_tape,
            fuse: fused.tape,
            layers,
            final_ln,
            pooled,
            hid_pre,
            hid_act,
        },
    ))
}

/// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(logits).
pub(crate) fn model_backward<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    tape: &Tape<T>,
    dlogits: &[T],
    grads: &mut ModelParams<T>,
) {
    let alpha = T::lit(cfg.leaky_alpha);
    let shape = cfg.stem_shape();
    let n = shape.seq_len();
    let d = cfg.d_model;
    let head = &params.head;
    let gh = &mut grads.head;

    let mut dhid = linear_backward(
        dlogits, &tape.hid_act, &head.w_2.data, &mut gh.w_2.data, &mut gh.b_2.data, 1, cfg.d_head,
        cfg.n_classes, true,
    )
    .unwrap();
    for (x, &p) in dhid.iter_mut().zip(&tape.hid_pre) {
        *x *= leaky_relu_grad(p, alpha);
    }
    let dpooled = linear_backward(
        &dhid, &tape.pooled, &head.w_1.data, &mut gh.w_1.data, &mut gh.b_1.data, 1, d, cfg.d_head, true,
    )
    .unwrap();
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let dy: Vec<T> = (0..n).flat_map(|_| dpooled.iter().map(|&v| v * inv_n)).collect();
    let mut dh = vec![T::zero(); n * d];
    layer_norm_rows_backward(&dy, &tape.final_ln, &head.ln_gamma.data, &mut gh.ln_gamma.data, &mut gh.ln_beta.data, &mut dh, false);

    for ((layer, lt), gl) in params.layers.iter().zip(&tape.layers).zip(grads.layers.iter_mut()).rev() {
        layer_backward(&mut dh, lt, layer, gl, cfg);
    }

    let (dzs, dzt) = fuse_backward(
        &dh,
        &tape.fuse,
        cfg.fusion,
        params.fusion_norm.as_ref(),
        grads.fusion_norm.as_mut(),
        &cfg.fusion_dims(),
    );
    if let (Some(dzt), Some(p), Some(g)) = (dzt, params.time2vec.as_ref(), grads.time2vec.as_mut()) {
        time2vec_backward(&dzt, p, g);
    }
    stem_backward(&dzs, &tape.stem, &params.stem, &mut grads.stem, &shape, alpha);
}

/// Full forward pass: stem -> temporal embedding -> fusion -> encoder stack ->
/// final LN -> mean pooling -> MLP head. Returns logits and, when asked, the
/// pre-fusion branch norms.
pub fn model_forward<T: Real>(
    window: &[T],
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    mode: Mode<'_>,
    diagnostics: bool,
) -> Result<ForwardOutput<T>> {
    let rng = match mode {
        Mode::Eval => None,
        Mode::Train(r) => Some(r),
    };
    Ok(forward_taped(params, cfg, window, rng, diagnostics)?.0)
}

/// Encoder stack + head applied to an already-fused token sequence (eval mode).
/// Used to probe symmetry properties of the encoder independent of the stem.
pub fn encode_tokens<T: Real>(tokens: &[T], params: &ModelParams<T>, cfg: &ModelConfig) -> Vec<T> {
    let d = cfg.d_model;
    let n = tokens.len() / d;
    let alpha = T::lit(cfg.leaky_alpha);
    let mut h = tokens.to_vec();
    for l in &params.layers {
        layer_forward_taped(&mut h, l, cfg, None);
    }
    let mut y = vec![T::zero(); n * d];
    layer_norm_rows(&h, d, &params.head.ln_gamma.data, &params.head.ln_beta.data, T::lit(cfg.ln_eps), &mut y);
    let mut pooled = vec![T::zero(); d];
    for row in y.chunks_exact(d) {
        for (p, &v) in pooled.iter_mut().zip(row) {
            *p += v;
        }
    }
    let inv_n = T::one() / T::from_usize(n).unwrap();
    pooled.iter_mut().for_each(|p| *p *= inv_n);
    let hid: Vec<T> = linear(&pooled, &params.head.w_1.data, &params.head.b_1.data, 1, d, cfg.d_head)
        .into_iter()
        .map(|v| leaky_relu(v, alpha))
        .collect();
    linear(&hid, &params.head.w_2.data, &params.head.b_2.data, 1, cfg.d_head, cfg.n_classes)
}

fn uniform_tensor<T: Real>(shape: &[usize], fan_in: usize, rng: &mut SeedRng) -> Tensor<T> {
    let bound = (3.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).unwrap();
    Tensor {
        shape: shape.to_vec(),
        data: (0..shape.iter().product::<usize>()).map(|_| T::lit(dist.sample(rng))).collect(),
    }
}

/// Freshly initialized parameters for `cfg`, fully determined by `seed`.
///
/// Weights are uniform in `+-sqrt(3 / fan_in)`, biases zero, layer-norm gains
/// one. Time2Vec frequencies are log-uniform in `[1/L, pi]` with the linear
/// term at `1/L` and phases uniform in `[0, 2pi)`.
pub fn build_variant<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut rng = rng_from(named_seed(seed, "init"));
    let d = cfg.d_model;
    let c = cfg.n_channels;
    let (k1, k2, f1, f2) = (cfg.kernel1, cfg.kernel2, cfg.stem_f1, cfg.stem_f2);
    let ds = cfg.d_spatial();
    let stem = StemParams {
        conv1_w: uniform_tensor(&[k1, c, f1], k1 * c, &mut rng),
        conv1_b: Tensor::zeros(&[f1]),
        conv2_w: uniform_tensor(&[k2, f1, f2], k2 * f1, &mut rng),
        conv2_b: Tensor::zeros(&[f2]),
        proj_w: uniform_tensor(&[f2, ds], f2, &mut rng),
        proj_b: Tensor::zeros(&[ds]),
    };
    let time2vec = cfg.fusion.has_time2vec().then(|| {
        let l = cfg.seq_len() as f64;
        let (lo, hi) = ((1.0 / l).ln(), std::f64::consts::PI.ln());
        let mut omega = Vec::with_capacity(cfg.d_t2v);
        let mut phi = Vec::with_capacity(cfg.d_t2v);
        for i in 0..cfg.d_t2v {
            if i == 0 {
                omega.push(T::lit(1.0 / l));
                phi.push(T::zero());
            } else {
                omega.push(T::lit(rng.random_range(lo..=hi).exp()));
                phi.push(T::lit(rng.random_range(0.0..std::f64::consts::TAU)));
            }
        }
        Time2VecParams {
            omega: Tensor { shape: vec![cfg.d_t2v], data: omega },
            phi: Tensor { shape: vec![cfg.d_t2v], data: phi },
        }
    });
    let fusion_norm = (cfg.fusion == FusionMode::NormAdd).then(|| FusionNormParams {
        spatial_gamma: Tensor::filled(&[d], T::one()),
        spatial_beta: Tensor::zeros(&[d]),
        time_gamma: Tensor::filled(&[d], T::one()),
        time_beta: Tensor::zeros(&[d]),
    });
    let layers = (0..cfg.n_layers)
        .map(|_| EncoderLayerParams {
            ln1_gamma: Tensor::filled(&[d], T::one()),
            ln1_beta: Tensor::zeros(&[d]),
            w_q: uniform_tensor(&[d, d], d, &mut rng),
            b_q: Tensor::zeros(&[d]),
            w_k: uniform_tensor(&[d, d], d, &mut rng),
            b_k: Tensor::zeros(&[d]),
            w_v: uniform_tensor(&[d, d], d, &mut rng),
            b_v: Tensor::zeros(&[d]),
            w_o: uniform_tensor(&[d, d], d, &mut rng),
            b_o: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::filled(&[d], T::one()),
            ln2_beta: Tensor::zeros(&[d]),
            w_1: uniform_tensor(&[d, cfg.d_ff], d, &mut rng),
            b_1: Tensor::zeros(&[cfg.d_ff]),
            w_2: uniform_tensor(&[cfg.d_ff, d], cfg.d_ff, &mut rng),
            b_2: Tensor::zeros(&[d]),
        })
        .collect();
    let head = HeadParams {
        ln_gamma: Tensor::filled(&[d], T::one()),
        ln_beta: Tensor::zeros(&[d]),
        w_1: uniform_tensor(&[d, cfg.d_head], d, &mut rng),
        b_1: Tensor::zeros(&[cfg.d_head]),
        w_2: uniform_tensor(&[cfg.d_head, cfg.n_classes], cfg.d_head, &mut rng),
        b_2: Tensor::zeros(&[cfg.n_classes]),
    };
    Ok(ModelParams { stem, time2vec, fusion_norm, layers, head })
}
