//! Trainable building blocks. Each block owns `ParamId`s into a
//! [`ParamStore`] and records its forward pass onto a [`Graph`].

use rand::Rng;

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::params::{Init, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.init(format!("{name}.w"), &[out_dim, in_dim], init, rng)?;
        let b = if bias {
            Some(store.init(format!("{name}.b"), &[out_dim], Init::Zeros, rng)?)
        } else {
            None
        };
        Ok(Self { w, b, in_dim, out_dim })
    }

    /// Token-major input `x:[n, in]` to `[n, out]`.
    pub fn forward_rows(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul_t(x, false, w, true)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_row_bias(y, b)
            }
            None => Ok(y),
        }
    }

    /// Channel-major input `x:[in, n]` to `[out, n]`.
    pub fn forward_cols(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(w, x)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_col_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Stack of linear layers with SiLU between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(TensorError::Invalid {
                op: "Mlp::new",
                msg: "need at least input and output dims".into(),
            });
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::new(store, &format!("{name}.{i}"), d[0], d[1], true, Init::FanIn(d[0]), rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn forward_rows(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward_rows(g, x)?;
            if i != last {
                x = g.silu(x)?;
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// Same-padded convolution (`pad = kernel / 2`).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = store.init(format!("{name}.w"), &[out_ch, in_ch, kernel, kernel], init, rng)?;
        let b = Some(store.init(format!("{name}.b"), &[out_ch], Init::Zeros, rng)?);
        Ok(Self {
            w,
            b,
            in_ch,
            out_ch,
            kernel,
            stride,
            pad: kernel / 2,
        })
    }

    pub fn fan_in(in_ch: usize, kernel: usize) -> Init {
        Init::FanIn(in_ch * kernel * kernel)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = self.b.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize, rng: &mut impl Rng) -> Result<Self> {
        if channels % groups != 0 {
            return Err(TensorError::Invalid {
                op: "GroupNorm::new",
                msg: format!("{channels} channels, {groups} groups"),
            });
        }
        Ok(Self {
            gamma: store.init(format!("{name}.gamma"), &[channels], Init::Ones, rng)?,
            beta: store.init(format!("{name}.beta"), &[channels], Init::Zeros, rng)?,
            groups,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.group_norm(x, gamma, beta, self.groups)
    }
}

/// Convolutional block attention: a channel gate from pooled descriptors
/// through a shared MLP, then a spatial gate from channel-pooled maps through
/// a `k×k` convolution. Both gates are sigmoids.
#[derive(Clone, Debug)]
pub struct Cbam {
    pub fc1: Linear,
    pub fc2: Linear,
    pub spatial: Conv2d,
    pub channels: usize,
}

impl Cbam {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        reduction: usize,
        spatial_kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hidden = (channels / reduction.max(1)).max(1);
        let fc1 = Linear::new(store, &format!("{name}.fc1"), channels, hidden, true, Init::FanIn(channels), rng)?;
        let fc2 = Linear::new(store, &format!("{name}.fc2"), hidden, channels, true, Init::FanIn(hidden), rng)?;
        let spatial = Conv2d::new(
            store,
            &format!("{name}.spatial"),
            2,
            1,
            spatial_kernel,
            1,
            Conv2d::fan_in(2, spatial_kernel),
            rng,
        )?;
        Ok(Self {
            fc1,
            fc2,
            spatial,
            channels,
        })
    }

    fn shared_mlp(&self, g: &mut Graph, v: Var) -> Result<Var> {
        let row = g.reshape(v, &[1, self.channels])?;
        let h = self.fc1.forward_rows(g, row)?;
        let h = g.silu(h)?;
        let o = self.fc2.forward_rows(g, h)?;
        g.reshape(o, &[self.channels])
    }

    /// Channel gate `[C]` of `x:[C,H,W]`.
    pub fn channel_gate(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let avg = g.mean_cols(x)?;
        let max = g.max_cols(x)?;
        let a = self.shared_mlp(g, avg)?;
        let m = self.shared_mlp(g, max)?;
        let s = g.add(a, m)?;
        g.sigmoid(s)
    }

    /// Spatial gate `[H·W]` of `x:[C,H,W]`.
    pub fn spatial_gate(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (h, w) = (shape[1], shape[2]);
        let avg = g.mean_rows(x)?;
        let max = g.max_rows(x)?;
        let stacked = g.concat0(&[avg, max])?;
        let stacked = g.reshape(stacked, &[2, h, w])?;
        let logit = self.spatial.forward(g, stacked)?;
        let logit = g.reshape(logit, &[h * w])?;
        g.sigmoid(logit)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let c = g.shape(x)[0];
        if c != self.channels {
            return Err(TensorError::ShapeMismatch {
                op: "cbam",
                expected: vec![self.channels],
                got: vec![c],
            });
        }
        let cg = self.channel_gate(g, x)?;
        let x1 = g.mul_col(x, cg)?;
        let sg = self.spatial_gate(g, x1)?;
        g.mul_row(x1, sg)
    }
}

/// Attention output and the row-stochastic probability matrix it used.
pub struct AttentionOut {
    pub out: Var,
    pub probs: Var,
}

/// `softmax(Q Kᵀ/√d) V` on graph nodes, `q:[Lq,d]`, `k:[Lk,d]`, `v:[Lk,c]`.
/// `allowed` (row-major `[Lq,Lk]`) bans entries; fully banned rows give 0.
pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var, allowed: Option<&[bool]>) -> Result<AttentionOut> {
    let d = g.shape(q)[1];
    let logits = g.matmul_t(q, false, k, true)?;
    let logits = g.scale(logits, 1.0 / (d as f64).sqrt())?;
    let probs = g.softmax_rows(logits, allowed)?;
    let out = g.matmul(probs, v)?;
    Ok(AttentionOut { out, probs })
}
