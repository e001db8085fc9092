//! Position-wise primitives with hand-written backward passes.
//!
//! All matrices are row-major with one row per sequence position.

use crate::linalg::{add_row_bias, col_sums_into, matmul, matmul_nt, matmul_tn, Real};

pub fn leaky_relu<T: Real>(x: T, alpha: T) -> T {
    if x > T::zero() {
        x
    } else {
        alpha * x
    }
}

pub fn leaky_relu_grad<T: Real>(pre: T, alpha: T) -> T {
    if pre > T::zero() {
        T::one()
    } else {
        alpha
    }
}

/// Saved state of a row-wise layer norm: normalized rows and reciprocal std per row.
pub struct LnCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// Normalizes every row of `x` (`rows x d`) with population variance.
pub fn layer_norm_rows<T: Real>(
    x: &[T],
    d: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
    out: &mut [T],
) -> LnCache<T> {
    let rows = x.len() / d;
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_d = T::one() / T::from_usize(d).unwrap();
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        let xh = &mut xhat[r * d..(r + 1) * d];
        let o = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            xh[j] = (row[j] - mean) * rs;
            o[j] = gamma[j] * xh[j] + beta[j];
        }
    }
    LnCache { xhat, rstd }
}

/// Backward of [`layer_norm_rows`]; accumulates into `dgamma`/`dbeta` and writes
/// (or adds, when `acc`) the input gradient into `dx`.
pub fn layer_norm_rows_backward<T: Real>(
    dy: &[T],
    cache: &LnCache<T>,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
    dx: &mut [T],
    acc: bool,
) {
    let d = gamma.len();
    let inv_d = T::one() / T::from_usize(d).unwrap();
    let mut dxhat = vec![T::zero(); d];
    for (r, &rs) in cache.rstd.iter().enumerate() {
        let g = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for j in 0..d {
            dgamma[j] += g[j] * xh[j];
            dbeta[j] += g[j];
            dxhat[j] = g[j] * gamma[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_xhat += dxhat[j] * xh[j];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let out = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            let v = rs * (dxhat[j] - mean_dxhat - xh[j] * mean_dxhat_xhat);
            if acc {
                out[j] += v;
            } else {
                out[j] = v;
            }
        }
    }
}

/// Max-subtracted softmax over each row of length `n`, in place.
pub fn softmax_rows<T: Real>(x: &mut [T], n: usize) {
    for row in x.chunks_exact_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Geometry of a 1-D "same"-padded strided convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_len: usize,
    pub in_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_len: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    pub fn same(in_len: usize, in_ch: usize, kernel: usize, stride: usize) -> Self {
        let out_len = in_len.div_ceil(stride);
        let pad_total = ((out_len.saturating_sub(1)) * stride + kernel).saturating_sub(in_len);
        Self {
            in_len,
            in_ch,
            kernel,
            stride,
            out_len,
            pad_left: pad_total / 2,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.in_ch
    }

    /// Input row feeding tap `k` of output position `o`, if not in the padding.
    #[inline]
    fn src_row(&self, o: usize, k: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad_left as isize;
        (pos >= 0 && (pos as usize) < self.in_len).then_some(pos as usize)
    }

    /// Unfolds `x` (`in_len x in_ch`) into `out_len x (kernel * in_ch)` patches.
    pub fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let pl = self.patch_len();
        let mut cols = vec![T::zero(); self.out_len * pl];
        for o in 0..self.out_len {
            let dst = &mut cols[o * pl..(o + 1) * pl];
            let start = (o * self.stride) as isize - self.pad_left as isize;
            let lo = (-start).max(0) as usize;
            let hi = ((self.in_len as isize - start).min(self.kernel as isize)).max(0) as usize;
            if lo < hi {
                let src0 = (start + lo as isize) as usize * self.in_ch;
                let n = (hi - lo) * self.in_ch;
                dst[lo * self.in_ch..lo * self.in_ch + n].copy_from_slice(&x[src0..src0 + n]);
            }
        }
        cols
    }

    /// Scatters patch gradients back onto the input (adjoint of [`Self::im2col`]).
    pub fn col2im<T: Real>(&self, dcols: &[T], dx: &mut [T]) {
        let pl = self.patch_len();
        for o in 0..self.out_len {
            let src = &dcols[o * pl..(o + 1) * pl];
            for k in 0..self.kernel {
                if let Some(r) = self.src_row(o, k) {
                    let d = &mut dx[r * self.in_ch..(r + 1) * self.in_ch];
                    for (dv, sv) in d.iter_mut().zip(&src[k * self.in_ch..(k + 1) * self.in_ch]) {
                        *dv += *sv;
                    }
                }
            }
        }
    }
}

/// Dense layer `y = x W + b` over `rows` positions.
pub fn linear<T: Real>(x: &[T], w: &[T], b: &[T], rows: usize, d_in: usize, d_out: usize) -> Vec<T> {
    let mut y = vec![T::zero(); rows * d_out];
    matmul(x, w, &mut y, rows, d_in, d_out, false);
    add_row_bias(&mut y, b);
    y
}

/// Backward of [`linear`]: accumulates `dw`, `db`; returns `dx` when requested.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Real>(
    dy: &[T],
    x: &[T],
    w: &[T],
    dw: &mut [T],
    db: &mut [T],
    rows: usize,
    d_in: usize,
    d_out: usize,
    want_dx: bool,
) -> Option<Vec<T>> {
    matmul_tn(x, dy, dw, d_in, rows, d_out, true);
    col_sums_into(dy, db);
    want_dx.then(|| {
        let mut dx = vec![T::zero(); rows * d_in];
        matmul_nt(dy, w, &mut dx, rows, d_out, d_in, false);
        dx
    })
}
