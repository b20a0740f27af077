//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records every op applied during one forward pass. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and returns
//! gradients for every node that depends on a trainable leaf.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::kernels::{self, ConvGeom};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Rc<Tensor>),
    ScalarMul { x: Var, s: Var },
    AddColBias { x: Var, b: Var },
    AddRowBias { x: Var, b: Var },
    MulCol { x: Var, g: Var },
    MulRow { x: Var, g: Var },
    Silu(Var),
    Sigmoid(Var),
    Abs(Var),
    SoftmaxRows(Var),
    Transpose(Var),
    Reshape(Var),
    Concat0(Vec<Var>),
    Slice0 { x: Var, start: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    AvgPool2(Var),
    Upsample2(Var),
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: (Vec<f64>, Vec<f64>) },
    MeanCols(Var),
    MaxCols { x: Var, argmax: Vec<usize> },
    MeanRows(Var),
    MaxRows { x: Var, argmax: Vec<usize> },
    Sum(Var),
    GradScale(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every non-frozen parameter that took part in the pass.
    pub fn param_grads(&self) -> ParamGrads {
        let mut out = ParamGrads::new();
        for &(id, v) in &self.params {
            if let Some(g) = self.get(v) {
                out.insert_or_add(id, g.clone());
            }
        }
        out
    }
}

fn as_2d(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    t.expect_rank(op, 2)?;
    Ok((t.dim(0), t.dim(1)))
}

fn as_3d(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    t.expect_rank(op, 3)?;
    Ok((t.dim(0), t.dim(1), t.dim(2)))
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
            params: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name(&op) });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked (used by gradient checks).
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameter leaf; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param,
            needs_grad: !p.frozen,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = as_2d(self.value(a), "matmul")?;
        let (br, bc) = as_2d(self.value(b), "matmul")?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                expected: vec![k, n],
                got: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), ta, self.value(b).data(), tb, 0.0, &mut out);
        let ng = self.needs(a) || self.needs(b);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Sum of several same-shaped nodes.
    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let (&first, rest) = xs.split_first().ok_or(TensorError::Invalid {
            op: "add_n",
            msg: "empty input".into(),
        })?;
        let mut acc = first;
        for &x in rest {
            acc = self.add(acc, x)?;
        }
        Ok(acc)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    /// Elementwise product with a constant of the same shape (e.g. a mask).
    pub fn mul_const(&mut self, x: Var, c: Rc<Tensor>) -> Result<Var> {
        let out = self.value(x).zip_map(&c, |a, b| a * b)?;
        let ng = self.needs(x);
        self.push(out, Op::MulConst(x, c), ng)
    }

    /// `s · x` where `s` is a one-element node.
    pub fn scalar_mul(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "scalar_mul",
                expected: vec![1],
                got: self.shape(s).to_vec(),
            });
        }
        let sv = self.value(s).item();
        let out = self.value(x).map(|v| v * sv);
        let ng = self.needs(x) || self.needs(s);
        self.push(out, Op::ScalarMul { x, s }, ng)
    }

    /// `x[m,n] + b[m]` broadcast along columns. Rank-3 `[C,H,W]` inputs are
    /// treated as `[C, H·W]`.
    pub fn add_col_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.value(x);
        let m = xv.dim(0);
        let n = xv.numel() / m.max(1);
        self.value(b).expect_shape("add_col_bias", &[m])?;
        let bv = self.value(b).data();
        let mut out = xv.clone();
        for (r, chunk) in out.data_mut().chunks_mut(n).enumerate() {
            for v in chunk {
                *v += bv[r];
            }
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(out, Op::AddColBias { x, b }, ng)
    }

    /// `x[m,n] + b[n]` broadcast along rows.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, n) = as_2d(self.value(x), "add_row_bias")?;
        self.value(b).expect_shape("add_row_bias", &[n])?;
        let bv = self.value(b).data();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (v, bb) in chunk.iter_mut().zip(bv) {
                *v += bb;
            }
        }
        let ng = self.needs(x) || self.needs(b);
        self.push(out, Op::AddRowBias { x, b }, ng)
    }

    /// `x[m,n] * g[m]` (per-row gate). Rank-3 inputs are flattened as in
    /// [`Graph::add_col_bias`].
    pub fn mul_col(&mut self, x: Var, g: Var) -> Result<Var> {
        let xv = self.value(x);
        let m = xv.dim(0);
        let n = xv.numel() / m.max(1);
        self.value(g).expect_shape("mul_col", &[m])?;
        let gv = self.value(g).data();
        let mut out = xv.clone();
        for (r, chunk) in out.data_mut().chunks_mut(n).enumerate() {
            for v in chunk {
                *v *= gv[r];
            }
        }
        let ng = self.needs(x) || self.needs(g);
        self.push(out, Op::MulCol { x, g }, ng)
    }

    /// `x[m,n] * g[n]` (per-column gate). Rank-3 `[C,H,W]` inputs use `n = H·W`.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let xv = self.value(x);
        let m = xv.dim(0);
        let n = xv.numel() / m.max(1);
        self.value(g).expect_shape("mul_row", &[n])?;
        let gv = self.value(g).data();
        let mut out = xv.clone();
        for chunk in out.data_mut().chunks_mut(n) {
            for (v, gg) in chunk.iter_mut().zip(gv) {
                *v *= gg;
            }
        }
        let ng = self.needs(x) || self.needs(g);
        self.push(out, Op::MulRow { x, g }, ng)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v / (1.0 + (-v).exp()));
        let ng = self.needs(x);
        self.push(out, Op::Silu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        let ng = self.needs(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::abs);
        let ng = self.needs(x);
        self.push(out, Op::Abs(x), ng)
    }

    /// Row softmax of a 2-D node. `allowed` (row-major, same length) bans
    /// entries; fully banned rows come out as zeros.
    pub fn softmax_rows(&mut self, x: Var, allowed: Option<&[bool]>) -> Result<Var> {
        let (m, n) = as_2d(self.value(x), "softmax_rows")?;
        if let Some(a) = allowed {
            if a.len() != m * n {
                return Err(TensorError::ShapeMismatch {
                    op: "softmax_rows mask",
                    expected: vec![m, n],
                    got: vec![a.len()],
                });
            }
        }
        let out = kernels::masked_softmax_rows(self.value(x).data(), m, n, allowed);
        let ng = self.needs(x);
        self.push(Tensor::new(&[m, n], out)?, Op::SoftmaxRows(x), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        let ng = self.needs(x);
        self.push(out, Op::Transpose(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        self.push(out, Op::Reshape(x), ng)
    }

    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat0(&vals)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::Concat0(parts.to_vec()), ng)
    }

    pub fn slice0(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).slice0(start, len)?;
        let ng = self.needs(x);
        self.push(out, Op::Slice0 { x, start }, ng)
    }

    /// 2-D convolution of `x:[C,H,W]` with `w:[O,C,k,k]` and optional bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, wd) = as_3d(self.value(x), "conv2d")?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[1] != c || ws[2] != ws[3] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d weight",
                expected: vec![ws.first().copied().unwrap_or(0), c, 3, 3],
                got: ws,
            });
        }
        let (o, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("kernel {k} does not fit input {h}x{wd} with pad {pad}"),
            });
        }
        if let Some(b) = b {
            self.value(b).expect_shape("conv2d bias", &[o])?;
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kernel: k,
            stride,
            pad,
        };
        let (oh, ow) = geom.out_hw();
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            o,
            &geom,
        );
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Tensor::new(&[o, oh, ow], out)?, Op::Conv2d { x, w, b, geom }, ng)
    }

    /// 2×2 average pooling with stride 2 (even H and W required).
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = as_3d(self.value(x), "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::Invalid {
                op: "avg_pool2",
                msg: format!("odd spatial size {h}x{w}"),
            });
        }
        let src = self.value(x).data();
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let b = ch * h * w;
                    let s = src[b + 2 * y * w + 2 * xx]
                        + src[b + 2 * y * w + 2 * xx + 1]
                        + src[b + (2 * y + 1) * w + 2 * xx]
                        + src[b + (2 * y + 1) * w + 2 * xx + 1];
                    out[ch * oh * ow + y * ow + xx] = 0.25 * s;
                }
            }
        }
        let ng = self.needs(x);
        self.push(Tensor::new(&[c, oh, ow], out)?, Op::AvgPool2(x), ng)
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = as_3d(self.value(x), "upsample2")?;
        let src = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[ch * oh * ow + y * ow + xx] = src[ch * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.needs(x);
        self.push(Tensor::new(&[c, oh, ow], out)?, Op::Upsample2(x), ng)
    }

    /// Group normalization over `x:[C,...]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.dim(0);
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::Invalid {
                op: "group_norm",
                msg: format!("{c} channels not divisible into {groups} groups"),
            });
        }
        self.value(gamma).expect_shape("group_norm gamma", &[c])?;
        self.value(beta).expect_shape("group_norm beta", &[c])?;
        let s = xv.numel() / c;
        let stats = kernels::group_norm_stats(xv.data(), c, s, groups);
        let cpg = c / groups;
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = xv.clone();
        for (ch, chunk) in out.data_mut().chunks_mut(s).enumerate() {
            let gi = ch / cpg;
            let (mu, rs) = (stats.0[gi], stats.1[gi]);
            for v in chunk {
                *v = (*v - mu) * rs * gv[ch] + bv[ch];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            ng,
        )
    }

    /// Mean over columns of `x[m,n]` (rank-3 flattened), giving `[m]`.
    pub fn mean_cols(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let m = xv.dim(0);
        let n = xv.numel() / m.max(1);
        let out: Vec<f64> = xv.data().chunks(n).map(|c| c.iter().sum::<f64>() / n as f64).collect();
        let ng = self.needs(x);
        self.push(Tensor::new(&[m], out)?, Op::MeanCols(x), ng)
    }

    /// Max over columns of `x[m,n]`, giving `[m]`.
    pub fn max_cols(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let m = xv.dim(0);
        let n = xv.numel() / m.max(1);
        let mut out = Vec::with_capacity(m);
        let mut argmax = Vec::with_capacity(m);
        for c in xv.data().chunks(n) {
            let (i, v) = argmax_of(c);
            out.push(v);
            argmax.push(i);
        }
        let ng = self.needs(x);
        self.push(Tensor::new(&[m], out)?, Op::MaxCols { x, argmax }, ng)
    }

    /// Mean over rows of `x[m,n]` (rank-3 flattened), giving `[n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let m = xv.dim(0);
        let n = xv.numel() / m.max(1);
        let mut out = vec![0.0; n];
        for c in xv.data().chunks(n) {
            for (o, v) in out.iter_mut().zip(c) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= m as f64;
        }
        let ng = self.needs(x);
        self.push(Tensor::new(&[n], out)?, Op::MeanRows(x), ng)
    }

    /// Max over rows of `x[m,n]`, giving `[n]`.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let m = xv.dim(0);
        let n = xv.numel() / m.max(1);
        let d = xv.data();
        let mut out = vec![f64::NEG_INFINITY; n];
        let mut argmax = vec![0; n];
        for r in 0..m {
            for j in 0..n {
                if d[r * n + j] > out[j] {
                    out[j] = d[r * n + j];
                    argmax[j] = r;
                }
            }
        }
        let ng = self.needs(x);
        self.push(Tensor::new(&[n], out)?, Op::MaxRows { x, argmax }, ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.needs(x);
        self.push(out, Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean squared difference between two same-shaped nodes.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Identity in the forward pass; multiplies the gradient by `factor` on the
    /// way back. `factor = 1` is a no-op.
    pub fn grad_scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = self.value(x).clone();
        let ng = self.needs(x);
        self.push(out, Op::GradScale(x, factor), ng)
    }

    /// Reverse pass from a one-element node.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: format!("root must be a scalar, got shape {:?}", rv.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(rv.shape(), vec![1.0])?);
        for idx in (0..=root.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul { a, b, ta, tb } => {
                let av = self.value(a);
                let bv = self.value(b);
                let (m, n) = (y.dim(0), y.dim(1));
                let k = if ta { av.dim(0) } else { av.dim(1) };
                if self.needs(a) {
                    // dA = dY · op(B)ᵀ, stored in A's layout
                    let mut da = vec![0.0; m * k];
                    if ta {
                        // A is stored [k,m]: dA_stored = op(B) · dYᵀ
                        kernels::gemm(k, n, m, bv.data(), tb, dy.data(), true, 0.0, &mut da);
                    } else {
                        kernels::gemm(m, n, k, dy.data(), false, bv.data(), !tb, 0.0, &mut da);
                    }
                    self.accum(grads, a, Tensor::new(av.shape(), da)?);
                }
                if self.needs(b) {
                    let mut db = vec![0.0; k * n];
                    if tb {
                        // B is stored [n,k]: dB_stored = dYᵀ · op(A)
                        kernels::gemm(n, m, k, dy.data(), true, av.data(), ta, 0.0, &mut db);
                    } else {
                        kernels::gemm(k, m, n, av.data(), !ta, dy.data(), false, 0.0, &mut db);
                    }
                    self.accum(grads, b, Tensor::new(bv.shape(), db)?);
                }
            }
            &Op::Add(a, b) => {
                self.accum(grads, a, dy.clone());
                self.accum(grads, b, dy.clone());
            }
            &Op::Sub(a, b) => {
                self.accum(grads, a, dy.clone());
                self.accum(grads, b, dy.map(|v| -v));
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    self.accum(grads, a, dy.zip_map(self.value(b), |g, v| g * v)?);
                }
                if self.needs(b) {
                    self.accum(grads, b, dy.zip_map(self.value(a), |g, v| g * v)?);
                }
            }
            &Op::Scale(x, s) => self.accum(grads, x, dy.map(|v| v * s)),
            Op::MulConst(x, c) => self.accum(grads, *x, dy.zip_map(c, |g, m| g * m)?),
            &Op::ScalarMul { x, s } => {
                if self.needs(x) {
                    let sv = self.value(s).item();
                    self.accum(grads, x, dy.map(|v| v * sv));
                }
                if self.needs(s) {
                    let d: f64 = dy.data().iter().zip(self.value(x).data()).map(|(g, v)| g * v).sum();
                    self.accum(grads, s, Tensor::new(self.value(s).shape(), vec![d])?);
                }
            }
            &Op::AddColBias { x, b } => {
                self.accum(grads, x, dy.clone());
                if self.needs(b) {
                    let m = dy.dim(0);
                    let n = dy.numel() / m;
                    let db: Vec<f64> = dy.data().chunks(n).map(|c| c.iter().sum()).collect();
                    self.accum(grads, b, Tensor::new(&[m], db)?);
                }
            }
            &Op::AddRowBias { x, b } => {
                self.accum(grads, x, dy.clone());
                if self.needs(b) {
                    let n = dy.dim(1);
                    let mut db = vec![0.0; n];
                    for c in dy.data().chunks(n) {
                        for (o, v) in db.iter_mut().zip(c) {
                            *o += v;
                        }
                    }
                    self.accum(grads, b, Tensor::new(&[n], db)?);
                }
            }
            &Op::MulCol { x, g } => {
                let xv = self.value(x);
                let gv = self.value(g).data();
                let m = xv.dim(0);
                let n = xv.numel() / m;
                if self.needs(x) {
                    let mut dx = dy.clone();
                    for (r, c) in dx.data_mut().chunks_mut(n).enumerate() {
                        for v in c {
                            *v *= gv[r];
                        }
                    }
                    self.accum(grads, x, dx);
                }
                if self.needs(g) {
                    let dg: Vec<f64> = dy
                        .data()
                        .chunks(n)
                        .zip(xv.data().chunks(n))
                        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum())
                        .collect();
                    self.accum(grads, g, Tensor::new(&[m], dg)?);
                }
            }
            &Op::MulRow { x, g } => {
                let xv = self.value(x);
                let gv = self.value(g).data();
                let m = xv.dim(0);
                let n = xv.numel() / m;
                if self.needs(x) {
                    let mut dx = dy.clone();
                    for c in dx.data_mut().chunks_mut(n) {
                        for (v, gg) in c.iter_mut().zip(gv) {
                            *v *= gg;
                        }
                    }
                    self.accum(grads, x, dx);
                }
                if self.needs(g) {
                    let mut dg = vec![0.0; n];
                    for (a, b) in dy.data().chunks(n).zip(xv.data().chunks(n)) {
                        for j in 0..n {
                            dg[j] += a[j] * b[j];
                        }
                    }
                    self.accum(grads, g, Tensor::new(&[n], dg)?);
                }
            }
            &Op::Silu(x) => {
                let d = dy.zip_map(self.value(x), |g, v| {
                    let s = sigmoid(v);
                    g * (s + v * s * (1.0 - s))
                })?;
                self.accum(grads, x, d);
            }
            &Op::Sigmoid(x) => {
                let d = dy.zip_map(y, |g, s| g * s * (1.0 - s))?;
                self.accum(grads, x, d);
            }
            &Op::Abs(x) => {
                let d = dy.zip_map(self.value(x), |g, v| g * v.signum() * (v != 0.0) as u8 as f64)?;
                self.accum(grads, x, d);
            }
            &Op::SoftmaxRows(x) => {
                let (m, n) = (y.dim(0), y.dim(1));
                let d = kernels::softmax_rows_backward(y.data(), dy.data(), m, n);
                self.accum(grads, x, Tensor::new(&[m, n], d)?);
            }
            &Op::Transpose(x) => self.accum(grads, x, dy.transpose()?),
            &Op::Reshape(x) => {
                let shape = self.value(x).shape().to_vec();
                self.accum(grads, x, dy.clone().reshape(&shape)?);
            }
            Op::Concat0(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).dim(0);
                    if self.needs(p) {
                        self.accum(grads, p, dy.slice0(off, len)?);
                    }
                    off += len;
                }
            }
            &Op::Slice0 { x, start } => {
                if self.needs(x) {
                    let xv = self.value(x);
                    let inner: usize = xv.shape()[1..].iter().product();
                    let mut dx = Tensor::zeros(xv.shape());
                    dx.data_mut()[start * inner..start * inner + dy.numel()].copy_from_slice(dy.data());
                    self.accum(grads, x, dx);
                }
            }
            &Op::Conv2d { x, w, b, geom } => {
                let o = y.dim(0);
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(x).data(),
                    self.value(w).data(),
                    dy.data(),
                    o,
                    &geom,
                    self.needs(x),
                    self.needs(w),
                    b.is_some_and(|b| self.needs(b)),
                );
                if let Some(dx) = dx {
                    self.accum(grads, x, Tensor::new(self.value(x).shape(), dx)?);
                }
                if let Some(dw) = dw {
                    self.accum(grads, w, Tensor::new(self.value(w).shape(), dw)?);
                }
                if let (Some(db), Some(b)) = (db, b) {
                    self.accum(grads, b, Tensor::new(&[o], db)?);
                }
            }
            &Op::AvgPool2(x) => {
                let xs = self.value(x).shape().to_vec();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for yy in 0..h {
                        for xx in 0..w {
                            dx[ch * h * w + yy * w + xx] = 0.25 * dy.data()[ch * oh * ow + (yy / 2) * ow + xx / 2];
                        }
                    }
                }
                self.accum(grads, x, Tensor::new(&xs, dx)?);
            }
            &Op::Upsample2(x) => {
                let xs = self.value(x).shape().to_vec();
                let (c, h, w) = (xs[0], xs[1], xs[2]);
                let (oh, ow) = (2 * h, 2 * w);
                let mut dx = vec![0.0; c * h * w];
                for ch in 0..c {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            dx[ch * h * w + (yy / 2) * w + xx / 2] += dy.data()[ch * oh * ow + yy * ow + xx];
                        }
                    }
                }
                self.accum(grads, x, Tensor::new(&xs, dx)?);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let xv = self.value(*x);
                let c = xv.dim(0);
                let s = xv.numel() / c;
                let cpg = c / groups;
                let gv = self.value(*gamma).data();
                let (means, rstds) = stats;
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; xv.numel()];
                let per = (cpg * s) as f64;
                for gi in 0..*groups {
                    let (mu, rs) = (means[gi], rstds[gi]);
                    let lo = gi * cpg * s;
                    let hi = lo + cpg * s;
                    let mut sum_dxh = 0.0;
                    let mut sum_dxh_xh = 0.0;
                    for i in lo..hi {
                        let ch = i / s;
                        let xh = (xv.data()[i] - mu) * rs;
                        let g = dy.data()[i];
                        dgamma[ch] += g * xh;
                        dbeta[ch] += g;
                        let dxh = g * gv[ch];
                        sum_dxh += dxh;
                        sum_dxh_xh += dxh * xh;
                    }
                    for i in lo..hi {
                        let ch = i / s;
                        let xh = (xv.data()[i] - mu) * rs;
                        let dxh = dy.data()[i] * gv[ch];
                        dx[i] = rs / per * (per * dxh - sum_dxh - xh * sum_dxh_xh);
                    }
                }
                self.accum(grads, *x, Tensor::new(xv.shape(), dx)?);
                self.accum(grads, *gamma, Tensor::new(&[c], dgamma)?);
                self.accum(grads, *beta, Tensor::new(&[c], dbeta)?);
            }
            &Op::MeanCols(x) => {
                let xv = self.value(x);
                let m = xv.dim(0);
                let n = xv.numel() / m;
                let mut dx = Tensor::zeros(xv.shape());
                for (r, c) in dx.data_mut().chunks_mut(n).enumerate() {
                    let g = dy.data()[r] / n as f64;
                    c.fill(g);
                }
                self.accum(grads, x, dx);
            }
            Op::MaxCols { x, argmax } => {
                let xv = self.value(*x);
                let m = xv.dim(0);
                let n = xv.numel() / m;
                let mut dx = Tensor::zeros(xv.shape());
                for (r, &j) in argmax.iter().enumerate() {
                    dx.data_mut()[r * n + j] = dy.data()[r];
                }
                self.accum(grads, *x, dx);
            }
            &Op::MeanRows(x) => {
                let xv = self.value(x);
                let m = xv.dim(0);
                let n = xv.numel() / m;
                let mut dx = Tensor::zeros(xv.shape());
                for c in dx.data_mut().chunks_mut(n) {
                    for (v, g) in c.iter_mut().zip(dy.data()) {
                        *v = g / m as f64;
                    }
                }
                self.accum(grads, x, dx);
            }
            Op::MaxRows { x, argmax } => {
                let xv = self.value(*x);
                let m = xv.dim(0);
                let n = xv.numel() / m;
                let mut dx = Tensor::zeros(xv.shape());
                for (j, &r) in argmax.iter().enumerate() {
                    dx.data_mut()[r * n + j] = dy.data()[j];
                }
                self.accum(grads, *x, dx);
            }
            &Op::Sum(x) => {
                let g = dy.item();
                self.accum(grads, x, Tensor::full(self.value(x).shape(), g));
            }
            &Op::GradScale(x, f) => self.accum(grads, x, dy.map(|v| v * f)),
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn argmax_of(c: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in c.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Param => "param",
        Op::MatMul { .. } => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::MulConst(..) => "mul_const",
        Op::ScalarMul { .. } => "scalar_mul",
        Op::AddColBias { .. } => "add_col_bias",
        Op::AddRowBias { .. } => "add_row_bias",
        Op::MulCol { .. } => "mul_col",
        Op::MulRow { .. } => "mul_row",
        Op::Silu(_) => "silu",
        Op::Sigmoid(_) => "sigmoid",
        Op::Abs(_) => "abs",
        Op::SoftmaxRows(_) => "softmax_rows",
        Op::Transpose(_) => "transpose",
        Op::Reshape(_) => "reshape",
        Op::Concat0(_) => "concat0",
        Op::Slice0 { .. } => "slice0",
        Op::Conv2d { .. } => "conv2d",
        Op::AvgPool2(_) => "avg_pool2",
        Op::Upsample2(_) => "upsample2",
        Op::GroupNorm { .. } => "group_norm",
        Op::MeanCols(_) => "mean_cols",
        Op::MaxCols { .. } => "max_cols",
        Op::MeanRows(_) => "mean_rows",
        Op::MaxRows { .. } => "max_rows",
        Op::Sum(_) => "sum",
        Op::GradScale(..) => "grad_scale",
    }
}
