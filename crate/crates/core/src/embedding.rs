//! Tokenization of raw windows and temporal embeddings.
//!
//! The stem is conv(k1, stride 2) -> LeakyReLU -> conv(k2, stride 2) ->
//! LeakyReLU -> position-wise projection, turning a `T x C` window into a
//! `T/4 x d_spatial` sequence. The temporal branch is Time2Vec, fixed
//! sinusoidal encodings, or nothing, and the two streams are fused by
//! concatenation, addition, or per-branch layer-normalized addition.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Real, Tensor};
use crate::nn::{
    layer_norm_rows, layer_norm_rows_backward, leaky_relu, leaky_relu_grad, linear,
    linear_backward, ConvGeom, LnCache,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Concat,
    Add,
    NormAdd,
    SinusoidalAdd,
    None,
}

impl FusionMode {
    pub fn has_time2vec(self) -> bool {
        matches!(self, FusionMode::Concat | FusionMode::Add | FusionMode::NormAdd)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StemParams<T> {
    /// `[k1, C, F1]`, flattened so a patch row multiplies it directly.
    pub conv1_w: Tensor<T>,
    pub conv1_b: Tensor<T>,
    /// `[k2, F1, F2]`.
    pub conv2_w: Tensor<T>,
    pub conv2_b: Tensor<T>,
    /// `[F2, d_spatial]`.
    pub proj_w: Tensor<T>,
    pub proj_b: Tensor<T>,
}

/// Frequencies and phases; index 0 is the linear term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Time2VecParams<T> {
    pub omega: Tensor<T>,
    pub phi: Tensor<T>,
}

/// Per-branch layer-norm affines used by normalized addition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionNormParams<T> {
    pub spatial_gamma: Tensor<T>,
    pub spatial_beta: Tensor<T>,
    pub time_gamma: Tensor<T>,
    pub time_beta: Tensor<T>,
}

/// Shapes the stem needs.
#[derive(Debug, Clone, Copy)]
pub struct StemShape {
    pub window_len: usize,
    pub n_channels: usize,
    pub kernel1: usize,
    pub kernel2: usize,
    pub f1: usize,
    pub f2: usize,
    pub d_spatial: usize,
}

impl StemShape {
    pub fn geoms(&self) -> (ConvGeom, ConvGeom) {
        let g1 = ConvGeom::same(self.window_len, self.n_channels, self.kernel1, 2);
        let g2 = ConvGeom::same(g1.out_len, self.f1, self.kernel2, 2);
        (g1, g2)
    }

    pub fn seq_len(&self) -> usize {
        self.geoms().1.out_len
    }
}

pub(crate) struct StemTape<T> {
    cols1: Vec<T>,
    pre1: Vec<T>,
    cols2: Vec<T>,
    pre2: Vec<T>,
    act2: Vec<T>,
}

pub(crate) fn stem_forward_taped<T: Real>(
    x: &[T],
    p: &StemParams<T>,
    shape: &StemShape,
    alpha: T,
) -> (Vec<T>, StemTape<T>) {
    let (g1, g2) = shape.geoms();
    let cols1 = g1.im2col(x);
    let pre1 = linear(&cols1, &p.conv1_w.data, &p.conv1_b.data, g1.out_len, g1.patch_len(), shape.f1);
    let act1: Vec<T> = pre1.iter().map(|&v| leaky_relu(v, alpha)).collect();
    let cols2 = g2.im2col(&act1);
    let pre2 = linear(&cols2, &p.conv2_w.data, &p.conv2_b.data, g2.out_len, g2.patch_len(), shape.f2);
    let act2: Vec<T> = pre2.iter().map(|&v| leaky_relu(v, alpha)).collect();
    let z = linear(&act2, &p.proj_w.data, &p.proj_b.data, g2.out_len, shape.f2, shape.d_spatial);
    (z, StemTape { cols1, pre1, cols2, pre2, act2 })
}

pub(crate) fn stem_backward<T: Real>(
    dz: &[T],
    tape: &StemTape<T>,
    p: &StemParams<T>,
    g: &mut StemParams<T>,
    shape: &StemShape,
    alpha: T,
) {
    let (g1, g2) = shape.geoms();
    let mut dact2 = linear_backward(
        dz, &tape.act2, &p.proj_w.data, &mut g.proj_w.data, &mut g.proj_b.data,
        g2.out_len, shape.f2, shape.d_spatial, true,
    )
    .unwrap();
    for (d, &pre) in dact2.iter_mut().zip(&tape.pre2) {
        *d *= leaky_relu_grad(pre, alpha);
    }
    let dcols2 = linear_backward(
        &dact2, &tape.cols2, &p.conv2_w.data, &mut g.conv2_w.data, &mut g.conv2_b.data,
        g2.out_len, g2.patch_len(), shape.f2, true,
    )
    .unwrap();
    let mut dact1 = vec![T::zero(); g1.out_len * shape.f1];
    g2.col2im(&dcols2, &mut dact1);
    for (d, &pre) in dact1.iter_mut().zip(&tape.pre1) {
        *d *= leaky_relu_grad(pre, alpha);
    }
    linear_backward(
        &dact1, &tape.cols1, &p.conv1_w.data, &mut g.conv1_w.data, &mut g.conv1_b.data,
        g1.out_len, g1.patch_len(), shape.f1, false,
    );
}

/// Spatial latent sequence `T/4 x d_spatial` of one window.
pub fn stem_forward<T: Real>(x: &[T], p: &StemParams<T>, shape: &StemShape, alpha: T) -> Result<Vec<T>> {
    if !shape.window_len.is_multiple_of(4) {
        return Err(Error::Config(format!(
            "window length {} is not divisible by 4",
            shape.window_len
        )));
    }
    if x.len() != shape.window_len * shape.n_channels {
        return Err(Error::Config(format!(
            "window has {} values, expected {}x{}",
            x.len(),
            shape.window_len,
            shape.n_channels
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerics("non-finite value in stem input".into()));
    }
    Ok(stem_forward_taped(x, p, shape, alpha).0)
}

/// `n_positions x d_t2v` Time2Vec embedding of the token indices `0..n_positions`.
pub fn time2vec_forward<T: Real>(n_positions: usize, p: &Time2VecParams<T>) -> Vec<T> {
    let d = p.omega.len();
    let mut out = vec![T::zero(); n_positions * d];
    for tau in 0..n_positions {
        let t = T::from_usize(tau).unwrap();
        let row = &mut out[tau * d..(tau + 1) * d];
        for i in 0..d {
            let arg = p.omega.data[i] * t + p.phi.data[i];
            row[i] = if i == 0 { arg } else { arg.sin() };
        }
    }
    out
}

pub(crate) fn time2vec_backward<T: Real>(
    dz: &[T],
    p: &Time2VecParams<T>,
    g: &mut Time2VecParams<T>,
) {
    let d = p.omega.len();
    for (tau, row) in dz.chunks_exact(d).enumerate() {
        let t = T::from_usize(tau).unwrap();
        for i in 0..d {
            let local = if i == 0 {
                row[i]
            } else {
                row[i] * (p.omega.data[i] * t + p.phi.data[i]).cos()
            };
            g.omega.data[i] += local * t;
            g.phi.data[i] += local;
        }
    }
}

/// Fixed sinusoidal encodings: `PE(pos, 2i) = sin(pos / 10000^(2i/d))`,
/// `PE(pos, 2i+1) = cos(pos / 10000^(2i/d))`.
pub fn sinusoidal_pe<T: Real>(n_positions: usize, d_model: usize) -> Result<Vec<T>> {
    if !d_model.is_multiple_of(2) {
        return Err(Error::Config(format!("sinusoidal encoding needs even d_model, got {d_model}")));
    }
    let mut out = vec![T::zero(); n_positions * d_model];
    for pos in 0..n_positions {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            out[pos * d_model + 2 * i] = T::lit(angle.sin());
            out[pos * d_model + 2 * i + 1] = T::lit(angle.cos());
        }
    }
    Ok(out)
}

/// Layer norm of a single vector with population variance.
pub fn layer_norm<T: Real>(v: &[T], gamma: &[T], beta: &[T], eps: T) -> Vec<T> {
    let mut out = vec![T::zero(); v.len()];
    layer_norm_rows(v, v.len(), gamma, beta, eps, &mut out);
    out
}

/// Dimensions the fusion step operates on.
#[derive(Debug, Clone, Copy)]
pub struct FusionDims {
    pub n_positions: usize,
    pub d_spatial: usize,
    pub d_time: usize,
    pub d_model: usize,
}

impl FusionDims {
    pub fn check(&self, mode: FusionMode) -> Result<()> {
        let FusionDims { d_spatial, d_time, d_model, .. } = *self;
        let err = |m: String| Err(Error::Config(m));
        match mode {
            FusionMode::Concat if d_spatial + d_time != d_model => err(format!(
                "concat fusion needs d_spatial + d_t2v = d_model ({d_spatial} + {d_time} != {d_model})"
            )),
            FusionMode::Add | FusionMode::NormAdd if d_spatial != d_model || d_time != d_model => {
                err(format!(
                    "additive fusion needs d_spatial = d_t2v = d_model ({d_spatial}, {d_time}, {d_model})"
                ))
            }
            FusionMode::SinusoidalAdd | FusionMode::None if d_spatial != d_model => err(format!(
                "{mode:?} fusion needs d_spatial = d_model ({d_spatial} != {d_model})"
            )),
            _ => Ok(()),
        }
    }
}

pub(crate) struct FuseTape<T> {
    spatial_ln: Option<LnCache<T>>,
    time_ln: Option<LnCache<T>>,
}

/// Output of fusion plus the branch vectors as they enter the combination.
pub(crate) struct Fused<T> {
    pub z: Vec<T>,
    pub spatial_branch: Option<Vec<T>>,
    pub time_branch: Option<Vec<T>>,
    pub tape: FuseTape<T>,
}

pub(crate) fn fuse_taped<T: Real>(
    zs: &[T],
    zt: Option<&[T]>,
    mode: FusionMode,
    norms: Option<&FusionNormParams<T>>,
    dims: &FusionDims,
    eps: T,
    keep_branches: bool,
) -> Result<Fused<T>> {
    dims.check(mode)?;
    let n = dims.n_positions;
    fn need_time<T>(zt: Option<&[T]>, mode: FusionMode) -> Result<&[T]> {
        zt.ok_or_else(|| Error::Config(format!("{mode:?} fusion needs a temporal stream")))
    }
    let mut tape = FuseTape { spatial_ln: None, time_ln: None };
    let keep = |v: &[T]| keep_branches.then(|| v.to_vec());
    let out = match mode {
        FusionMode::Concat => {
            let zt = need_time(zt, mode)?;
            let mut z = vec![T::zero(); n * dims.d_model];
            for r in 0..n {
                let row = &mut z[r * dims.d_model..(r + 1) * dims.d_model];
                row[..dims.d_spatial].copy_from_slice(&zs[r * dims.d_spatial..(r + 1) * dims.d_spatial]);
                row[dims.d_spatial..].copy_from_slice(&zt[r * dims.d_time..(r + 1) * dims.d_time]);
            }
            Fused { z, spatial_branch: keep(zs), time_branch: keep(zt), tape }
        }
        FusionMode::Add | FusionMode::SinusoidalAdd => {
            let zt = need_time(zt, mode)?;
            let z = zs.iter().zip(zt).map(|(&a, &b)| a + b).collect();
            Fused { z, spatial_branch: keep(zs), time_branch: keep(zt), tape }
        }
        FusionMode::NormAdd => {
            let zt = need_time(zt, mode)?;
            let p = norms.ok_or_else(|| Error::Config("normalized addition needs its LN affines".into()))?;
            let d = dims.d_model;
            let mut s = vec![T::zero(); n * d];
            let mut t = vec![T::zero(); n * d];
            tape.spatial_ln = Some(layer_norm_rows(zs, d, &p.spatial_gamma.data, &p.spatial_beta.data, eps, &mut s));
            tape.time_ln = Some(layer_norm_rows(zt, d, &p.time_gamma.data, &p.time_beta.data, eps, &mut t));
            let z = s.iter().zip(&t).map(|(&a, &b)| a + b).collect();
            let (sb, tb) = if keep_branches { (Some(s), Some(t)) } else { (None, None) };
            Fused { z, spatial_branch: sb, time_branch: tb, tape }
        }
        FusionMode::None => Fused {
            z: zs.to_vec(),
            spatial_branch: keep(zs),
            time_branch: None,
            tape,
        },
    };
    Ok(out)
}

/// Returns `(d z_spatial, d z_time)`.
pub(crate) fn fuse_backward<T: Real>(
    dz: &[T],
    tape: &FuseTape<T>,
    mode: FusionMode,
    norms: Option<&FusionNormParams<T>>,
    gnorms: Option<&mut FusionNormParams<T>>,
    dims: &FusionDims,
) -> (Vec<T>, Option<Vec<T>>) {
    let n = dims.n_positions;
    match mode {
        FusionMode::Concat => {
            let mut ds = vec![T::zero(); n * dims.d_spatial];
            let mut dt = vec![T::zero(); n * dims.d_time];
            for r in 0..n {
                let row = &dz[r * dims.d_model..(r + 1) * dims.d_model];
                ds[r * dims.d_spatial..(r + 1) * dims.d_spatial].copy_from_slice(&row[..dims.d_spatial]);
                dt[r * dims.d_time..(r + 1) * dims.d_time].copy_from_slice(&row[dims.d_spatial..]);
            }
            (ds, Some(dt))
        }
        FusionMode::Add => (dz.to_vec(), Some(dz.to_vec())),
        FusionMode::SinusoidalAdd | FusionMode::None => (dz.to_vec(), None),
        FusionMode::NormAdd => {
            let p = norms.expect("norm-add params");
            let g = gnorms.expect("norm-add grads");
            let mut ds = vec![T::zero(); dz.len()];
            let mut dt = vec![T::zero(); dz.len()];
            layer_norm_rows_backward(
                dz,
                tape.spatial_ln.as_ref().unwrap(),
                &p.spatial_gamma.data,
                &mut g.spatial_gamma.data,
                &mut g.spatial_beta.data,
                &mut ds,
                false,
            );
            layer_norm_rows_backward(
                dz,
                tape.time_ln.as_ref().unwrap(),
                &p.time_gamma.data,
                &mut g.time_gamma.data,
                &mut g.time_beta.data,
                &mut dt,
                false,
            );
            (ds, Some(dt))
        }
    }
}

/// Combines the spatial sequence with the temporal stream (if any).
pub fn fuse<T: Real>(
    z_spatial: &[T],
    z_time: Option<&[T]>,
    mode: FusionMode,
    norms: Option<&FusionNormParams<T>>,
    dims: &FusionDims,
    eps: T,
) -> Result<Vec<T>> {
    Ok(fuse_taped(z_spatial, z_time, mode, norms, dims, eps, false)?.z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn t2v(omega: Vec<f64>, phi: Vec<f64>) -> Time2VecParams<f64> {
        Time2VecParams {
            omega: Tensor { shape: vec![omega.len()], data: omega },
            phi: Tensor { shape: vec![phi.len()], data: phi },
        }
    }

    #[test]
    fn time2vec_closed_forms() {
        let p = t2v(vec![0.3, 2.0 * PI / 250.0, 0.7], vec![0.4, 0.0, 1.1]);
        let z = time2vec_forward(250, &p);
        assert_eq!(z[0], 0.4);
        assert_eq!(z[2], 1.1f64.sin());
        assert!(z[125 * 3 + 1].abs() < 1e-12);
        assert!((z[10 * 3] - (0.3 * 10.0 + 0.4)).abs() < 1e-15);
    }

    #[test]
    fn sinusoidal_values() {
        let pe: Vec<f64> = sinusoidal_pe(250, 16).unwrap();
        assert!(pe[..16].iter().step_by(2).all(|&v| v == 0.0));
        assert!(pe[1..16].iter().step_by(2).all(|&v| v == 1.0));
        assert!((pe[16] - 0.841_470_984_807_896_5).abs() < 1e-12);
        assert!(pe.iter().all(|v| v.abs() <= 1.0));
        assert!(matches!(sinusoidal_pe::<f64>(10, 15), Err(Error::Config(_))));
    }

    #[test]
    fn layer_norm_cases() {
        let out = layer_norm(&[1.0f64, 2.0, 3.0], &[1.0; 3], &[0.0; 3], 0.0);
        let expect = [-1.224_744_871, 0.0, 1.224_744_871];
        for (a, b) in out.iter().zip(expect) {
            assert!((a - b).abs() < 1e-4);
        }
        let flat = layer_norm(&[5.0f64; 4], &[1.0; 4], &[0.25; 4], 1e-5);
        assert!(flat.iter().all(|&v| (v - 0.25).abs() < 1e-12));
        let affine = layer_norm(&[1.0f64, 2.0, 3.0], &[2.0; 3], &[1.0; 3], 0.0);
        for (a, b) in affine.iter().zip(expect) {
            assert!((a - (2.0 * b + 1.0)).abs() < 1e-4);
        }
    }

    #[test]
    fn fusion_shapes_and_errors() {
        let n = 250;
        let zs = vec![0.5f64; n * 64];
        let zt = vec![0.25f64; n * 64];
        let dims = FusionDims { n_positions: n, d_spatial: 64, d_time: 64, d_model: 128 };
        let z = fuse(&zs, Some(&zt), FusionMode::Concat, None, &dims, 1e-5).unwrap();
        assert_eq!(z.len(), 250 * 128);
        assert_eq!(z[63], 0.5);
        assert_eq!(z[64], 0.25);

        let bad = FusionDims { n_positions: n, d_spatial: 128, d_time: 96, d_model: 128 };
        let zs = vec![0.0f64; n * 128];
        let zt = vec![0.0f64; n * 96];
        assert!(matches!(
            fuse(&zs, Some(&zt), FusionMode::Add, None, &bad, 1e-5),
            Err(Error::Config(_))
        ));
    }
}
