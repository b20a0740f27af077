//! Graph-free numeric kernels. The autodiff graph calls into these for its
//! forward and backward passes; they are also usable directly.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Additive mask value for a banned attention logit.
pub const MASKED: f64 = f64::NEG_INFINITY;

/// `c = op(a) · op(b) + beta · c` where `op` optionally transposes.
///
/// `a` holds an `m×k` matrix (or `k×m` when `ta`), `b` holds `k×n` (or `n×k`
/// when `tb`), `c` is `m×n` row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: out length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the length asserts above guarantee every strided access lies
    // within the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// 2-D matrix product of `[m,k]` and `[k,n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank("matmul", 2)?;
    b.expect_rank("matmul", 2)?;
    let (m, k) = (a.dim(0), a.dim(1));
    if b.dim(0) != k {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            expected: vec![k, b.dim(1)],
            got: b.shape().to_vec(),
        });
    }
    let n = b.dim(1);
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut out);
    Tensor::new(&[m, n], out)
}

/// Numerically stable softmax along `axis`.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(TensorError::InvalidAxis {
            op: "softmax",
            axis,
            rank: x.rank(),
        });
    }
    x.check_finite("softmax")?;
    let shape = x.shape();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut max = f64::NEG_INFINITY;
            for j in 0..len {
                max = max.max(src[base + j * inner]);
            }
            let mut sum = 0.0;
            for j in 0..len {
                let e = (src[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                sum += e;
            }
            for j in 0..len {
                out[base + j * inner] /= sum;
            }
        }
    }
    Tensor::new(shape, out)
}

/// Row-wise softmax of an `[m,n]` buffer where `allowed[j]` (or the whole row
/// when every entry is banned) decides which logits participate. Banned
/// entries get probability 0; a row with no admissible entry is all zeros.
pub fn masked_softmax_rows(logits: &[f64], m: usize, n: usize, allowed: Option<&[bool]>) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let row = &logits[r * n..(r + 1) * n];
        let mrow = allowed.map(|a| &a[r * n..(r + 1) * n]);
        let ok = |j: usize| mrow.is_none_or(|a| a[j]);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if ok(j) {
                max = max.max(v);
            }
        }
        if max == f64::NEG_INFINITY {
            continue;
        }
        let dst = &mut out[r * n..(r + 1) * n];
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if ok(j) {
                let e = (v - max).exp();
                dst[j] = e;
                sum += e;
            }
        }
        for v in dst.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Backward of a row softmax given its output `y` and upstream `dy`.
pub fn softmax_rows_backward(y: &[f64], dy: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut dx = vec![0.0; m * n];
    for r in 0..m {
        let yr = &y[r * n..(r + 1) * n];
        let dyr = &dy[r * n..(r + 1) * n];
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        for j in 0..n {
            dx[r * n + j] = yr[j] * (dyr[j] - dot);
        }
    }
    dx
}

/// `softmax(Q Kᵀ / √d + mask) V` for `Q:[Lq,d]`, `K:[Lk,d]`, `V:[Lk,c]`.
///
/// Mask entries are either finite (added to the logit) or [`MASKED`]. A query
/// row whose keys are all masked produces a zero output row.
pub fn scaled_dot_attention(q: &Tensor, k: &Tensor, v: &Tensor, additive_mask: Option<&Tensor>) -> Result<Tensor> {
    q.expect_rank("attention", 2)?;
    k.expect_rank("attention", 2)?;
    v.expect_rank("attention", 2)?;
    let (lq, d) = (q.dim(0), q.dim(1));
    let lk = k.dim(0);
    if k.dim(1) != d || v.dim(0) != lk {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            expected: vec![lk, d],
            got: k.shape().to_vec(),
        });
    }
    if d == 0 {
        return Err(TensorError::Invalid {
            op: "attention",
            msg: "head dim must be positive".into(),
        });
    }
    q.check_finite("attention")?;
    k.check_finite("attention")?;
    v.check_finite("attention")?;
    let c = v.dim(1);
    let mut logits = vec![0.0; lq * lk];
    gemm(lq, d, lk, q.data(), false, k.data(), true, 0.0, &mut logits);
    let scale = 1.0 / (d as f64).sqrt();
    let mut allowed = None;
    if let Some(mask) = additive_mask {
        mask.expect_shape("attention mask", &[lq, lk])?;
        let mut ok = vec![true; lq * lk];
        for ((&mv, l), o) in mask.data().iter().zip(logits.iter_mut()).zip(ok.iter_mut()) {
            if mv == MASKED {
                *o = false;
                *l = 0.0;
            } else if mv.is_finite() {
                *l = *l * scale + mv;
            } else {
                return Err(TensorError::NonFinite { op: "attention mask" });
            }
        }
        allowed = Some(ok);
    } else {
        for l in &mut logits {
            *l *= scale;
        }
    }
    let probs = masked_softmax_rows(&logits, lq, lk, allowed.as_deref());
    let mut out = vec![0.0; lq * c];
    gemm(lq, lk, c, &probs, false, v.data(), false, 0.0, &mut out);
    Tensor::new(&[lq, c], out)
}

/// Geometry of a 2-D convolution over a `[C,H,W]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

impl ConvGeom {
    /// Output columns `ox` whose input column `ox·stride + kx − pad` is in range.
    fn valid_cols(&self, kx: usize, ow: usize) -> std::ops::Range<usize> {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let hi = ((self.width + self.pad).saturating_sub(kx)).div_ceil(self.stride).min(ow);
        lo..hi.max(lo)
    }
}

/// Unfold `[C,H,W]` into `[C·k·k, H'·W']` patch columns (zero padding).
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let ncol = oh * ow;
    let mut cols = vec![0.0; g.col_rows() * ncol];
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * ncol..(row + 1) * ncol];
                let oxs = g.valid_cols(kx, ow);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let d = &mut dst[oy * ow + oxs.start..oy * ow + oxs.end];
                    let ix0 = oxs.start * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        d.copy_from_slice(&src_row[ix0..ix0 + d.len()]);
                    } else {
                        for (j, v) in d.iter_mut().enumerate() {
                            *v = src_row[ix0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch columns back into `[C,H,W]`.
pub fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let ncol = oh * ow;
    let mut x = vec![0.0; g.channels * g.height * g.width];
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * ncol..(row + 1) * ncol];
                let oxs = g.valid_cols(kx, ow);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let s = &src[oy * ow + oxs.start..oy * ow + oxs.end];
                    let ix0 = oxs.start * g.stride + kx - g.pad;
                    for (j, v) in s.iter().enumerate() {
                        dst_row[ix0 + j * g.stride] += v;
                    }
                }
            }
        }
    }
    x
}

/// Convolution forward: `w` is `[O, C·k·k]`, optional bias `[O]`.
pub fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, out_ch: usize, g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let ncol = oh * ow;
    let mut out = vec![0.0; out_ch * ncol];
    if g.kernel == 1 && g.stride == 1 && g.pad == 0 {
        gemm(out_ch, g.channels, ncol, w, false, x, false, 0.0, &mut out);
    } else {
        let cols = im2col(x, g);
        gemm(out_ch, g.col_rows(), ncol, w, false, &cols, false, 0.0, &mut out);
    }
    if let Some(b) = bias {
        for (o, &bv) in b.iter().enumerate() {
            for v in &mut out[o * ncol..(o + 1) * ncol] {
                *v += bv;
            }
        }
    }
    out
}

/// Convolution backward. Returns `(dx, dw, db)`, each only when requested.
#[allow(clippy::type_complexity)]
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    out_ch: usize,
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (oh, ow) = g.out_hw();
    let ncol = oh * ow;
    let pointwise = g.kernel == 1 && g.stride == 1 && g.pad == 0;
    let krows = g.col_rows();
    let dw = want_dw.then(|| {
        let mut dw = vec![0.0; out_ch * krows];
        if pointwise {
            gemm(out_ch, ncol, krows, dy, false, x, true, 0.0, &mut dw);
        } else {
            let cols = im2col(x, g);
            gemm(out_ch, ncol, krows, dy, false, &cols, true, 0.0, &mut dw);
        }
        dw
    });
    let dx = want_dx.then(|| {
        let mut dcols = vec![0.0; krows * ncol];
        gemm(krows, out_ch, ncol, w, true, dy, false, 0.0, &mut dcols);
        if pointwise {
            dcols
        } else {
            col2im(&dcols, g)
        }
    });
    let db = want_db.then(|| (0..out_ch).map(|o| dy[o * ncol..(o + 1) * ncol].iter().sum()).collect());
    (dx, dw, db)
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Group statistics for `[C, S]` data: per-group `(mean, 1/std)`.
pub fn group_norm_stats(x: &[f64], channels: usize, spatial: usize, groups: usize) -> (Vec<f64>, Vec<f64>) {
    let per = channels / groups * spatial;
    let mut means = Vec::with_capacity(groups);
    let mut rstds = Vec::with_capacity(groups);
    for gi in 0..groups {
        let seg = &x[gi * per..(gi + 1) * per];
        let mean = seg.iter().sum::<f64>() / per as f64;
        let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per as f64;
        means.push(mean);
        rstds.push(1.0 / (var + GROUP_NORM_EPS).sqrt());
    }
    (means, rstds)
}
