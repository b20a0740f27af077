//! Three-level UNet-lite over `[3, H, W]` images with cross-attention to text
//! tokens at every level.

use migc_tensor::nn::{attention, Conv2d, GroupNorm, Linear, Mlp};
use migc_tensor::{Graph, Init, ParamStore, Tensor, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::Result;

/// Sinusoidal timestep features: `dim/2` sines then `dim/2` cosines.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let a = t as f64 * freq;
        out[i] = a.sin();
        out[half + i] = a.cos();
    }
    Tensor::new(&[dim], out).expect("embedding length")
}

/// Attention sites, encoder to decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    Enc0,
    Enc1,
    Mid,
    Dec1,
    Dec0,
}

impl Site {
    pub const ALL: [Site; 5] = [Site::Enc0, Site::Enc1, Site::Mid, Site::Dec1, Site::Dec0];
}

/// Cross-attention from image features to text tokens. Produces the residual
/// `W_o · softmax(Q Kᵀ/√d) V` on group-normalized features.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub norm: GroupNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub channels: usize,
}

/// Residual `[C, HW]` and attention probabilities `[HW, L]`.
pub struct Shading {
    pub residual: Var,
    pub probs: Var,
}

impl CrossAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        text_dim: usize,
        head_dim: usize,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), channels, groups, rng)?,
            q: Linear::new(store, &format!("{name}.q"), channels, head_dim, false, Init::FanIn(channels), rng)?,
            k: Linear::new(store, &format!("{name}.k"), text_dim, head_dim, false, Init::FanIn(text_dim), rng)?,
            v: Linear::new(store, &format!("{name}.v"), text_dim, head_dim, false, Init::FanIn(text_dim), rng)?,
            o: Linear::new(store, &format!("{name}.o"), head_dim, channels, true, Init::FanIn(head_dim), rng)?,
            channels,
        })
    }

    /// Group-normalized features flattened to `[C, HW]`.
    pub fn normalize(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let n = self.norm.forward(g, x)?;
        Ok(g.reshape(n, &[s[0], s[1] * s[2]])?)
    }

    pub fn shade(&self, g: &mut Graph, xn: Var, tokens: Var) -> Result<Shading> {
        let q = self.q.forward_cols(g, xn)?;
        let q = g.transpose(q)?;
        let k = self.k.forward_rows(g, tokens)?;
        let v = self.v.forward_rows(g, tokens)?;
        let a = attention(g, q, k, v, None)?;
        let out = g.transpose(a.out)?;
        let residual = self.o.forward_cols(g, out)?;
        Ok(Shading {
            residual,
            probs: a.probs,
        })
    }
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    pub norm1: GroupNorm,
    pub conv1: Conv2d,
    pub time: Linear,
    pub norm2: GroupNorm,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        time_dim: usize,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let skip = if in_ch != out_ch {
            Some(Conv2d::new(store, &format!("{name}.skip"), in_ch, out_ch, 1, 1, Conv2d::fan_in(in_ch, 1), rng)?)
        } else {
            None
        };
        Ok(Self {
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), in_ch, groups, rng)?,
            conv1: Conv2d::new(store, &format!("{name}.conv1"), in_ch, out_ch, 3, 1, Conv2d::fan_in(in_ch, 3), rng)?,
            time: Linear::new(store, &format!("{name}.time"), time_dim, out_ch, true, Init::FanIn(time_dim), rng)?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), out_ch, groups, rng)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, Conv2d::fan_in(out_ch, 3), rng)?,
            skip,
        })
    }

    /// `temb` is the activated time embedding `[1, time_dim]`.
    pub fn forward(&self, g: &mut Graph, x: Var, temb: Var) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let h = g.silu(h)?;
        let h = self.conv1.forward(g, h)?;
        let tb = self.time.forward_rows(g, temb)?;
        let tb = g.reshape(tb, &[self.conv1.out_ch])?;
        let h = g.add_col_bias(h, tb)?;
        let h = self.norm2.forward(g, h)?;
        let h = g.silu(h)?;
        let h = self.conv2.forward(g, h)?;
        let s = match &self.skip {
            Some(c) => c.forward(g, x)?,
            None => x,
        };
        Ok(g.add(s, h)?)
    }
}

/// Supplies the residual added at each attention site. The backbone's own
/// behaviour is [`GlobalPrompt`]: the plain cross-attention residual.
pub trait ResidualHook {
    fn residual(
        &mut self,
        g: &mut Graph,
        site: Site,
        ca: &CrossAttention,
        xn: Var,
        global: &Shading,
    ) -> Result<Var>;
}

pub struct GlobalPrompt;

impl ResidualHook for GlobalPrompt {
    fn residual(&mut self, _: &mut Graph, _: Site, _: &CrossAttention, _: Var, global: &Shading) -> Result<Var> {
        Ok(global.residual)
    }
}

#[derive(Clone, Debug)]
pub struct Unet {
    pub time_mlp: Mlp,
    pub time_dim: usize,
    pub conv_in: Conv2d,
    pub res_enc0: ResBlock,
    pub ca_enc0: CrossAttention,
    pub down0: Conv2d,
    pub res_enc1: ResBlock,
    pub ca_enc1: CrossAttention,
    pub down1: Conv2d,
    pub res_mid: ResBlock,
    pub ca_mid: CrossAttention,
    pub up1: Conv2d,
    pub res_dec1: ResBlock,
    pub ca_dec1: CrossAttention,
    pub up0: Conv2d,
    pub res_dec0: ResBlock,
    pub ca_dec0: CrossAttention,
    pub norm_out: GroupNorm,
    pub conv_out: Conv2d,
}

impl Unet {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let [c0, c1, c2] = cfg.channels;
        let (td, gr) = (cfg.time_dim, cfg.groups);
        let n = |s: &str| format!("{name}.{s}");
        let ca = |store: &mut ParamStore, s: &str, c: usize, rng: &mut _| {
            CrossAttention::new(store, &n(s), c, cfg.text_dim, cfg.head_dim, gr, rng)
        };
        Ok(Self {
            time_mlp: Mlp::new(store, &n("time_mlp"), &[td, td, td], rng)?,
            time_dim: td,
            conv_in: Conv2d::new(store, &n("conv_in"), 3, c0, 3, 1, Conv2d::fan_in(3, 3), rng)?,
            res_enc0: ResBlock::new(store, &n("res_enc0"), c0, c0, td, gr, rng)?,
            ca_enc0: ca(store, "ca_enc0", c0, rng)?,
            down0: Conv2d::new(store, &n("down0"), c0, c1, 3, 2, Conv2d::fan_in(c0, 3), rng)?,
            res_enc1: ResBlock::new(store, &n("res_enc1"), c1, c1, td, gr, rng)?,
            ca_enc1: ca(store, "ca_enc1", c1, rng)?,
            down1: Conv2d::new(store, &n("down1"), c1, c2, 3, 2, Conv2d::fan_in(c1, 3), rng)?,
            res_mid: ResBlock::new(store, &n("res_mid"), c2, c2, td, gr, rng)?,
            ca_mid: ca(store, "ca_mid", c2, rng)?,
            up1: Conv2d::new(store, &n("up1"), c2, c1, 3, 1, Conv2d::fan_in(c2, 3), rng)?,
            res_dec1: ResBlock::new(store, &n("res_dec1"), 2 * c1, c1, td, gr, rng)?,
            ca_dec1: ca(store, "ca_dec1", c1, rng)?,
            up0: Conv2d::new(store, &n("up0"), c1, c0, 3, 1, Conv2d::fan_in(c1, 3), rng)?,
            res_dec0: ResBlock::new(store, &n("res_dec0"), 2 * c0, c0, td, gr, rng)?,
            ca_dec0: ca(store, "ca_dec0", c0, rng)?,
            norm_out: GroupNorm::new(store, &n("norm_out"), c0, gr, rng)?,
            conv_out: Conv2d::new(store, &n("conv_out"), c0, 3, 3, 1, Conv2d::fan_in(c0, 3), rng)?,
        })
    }

    pub fn attention(&self, site: Site) -> &CrossAttention {
        match site {
            Site::Enc0 => &self.ca_enc0,
            Site::Enc1 => &self.ca_enc1,
            Site::Mid => &self.ca_mid,
            Site::Dec1 => &self.ca_dec1,
            Site::Dec0 => &self.ca_dec0,
        }
    }

    fn attend(&self, g: &mut Graph, site: Site, x: Var, tokens: Var, hook: &mut dyn ResidualHook) -> Result<Var> {
        let ca = self.attention(site);
        let xn = ca.normalize(g, x)?;
        let global = ca.shade(g, xn, tokens)?;
        let r = hook.residual(g, site, ca, xn, &global)?;
        let shape = g.shape(x).to_vec();
        let r = g.reshape(r, &shape)?;
        Ok(g.add(x, r)?)
    }

    /// Predicted noise `[3, H, W]` for `z:[3, H, W]` at step `t` given prompt
    /// tokens `[L, text_dim]`.
    pub fn forward(&self, g: &mut Graph, z: Var, t: usize, tokens: Var, hook: &mut dyn ResidualHook) -> Result<Var> {
        let te = g.input(timestep_embedding(t, self.time_dim).reshape(&[1, self.time_dim])?);
        let temb = self.time_mlp.forward_rows(g, te)?;
        let temb = g.silu(temb)?;

        let h = self.conv_in.forward(g, z)?;
        let h = self.res_enc0.forward(g, h, temb)?;
        let skip0 = self.attend(g, Site::Enc0, h, tokens, hook)?;
        let h = self.down0.forward(g, skip0)?;
        let h = self.res_enc1.forward(g, h, temb)?;
        let skip1 = self.attend(g, Site::Enc1, h, tokens, hook)?;
        let h = self.down1.forward(g, skip1)?;
        let h = self.res_mid.forward(g, h, temb)?;
        let h = self.attend(g, Site::Mid, h, tokens, hook)?;

        let h = g.upsample2(h)?;
        let h = self.up1.forward(g, h)?;
        let h = g.concat0(&[h, skip1])?;
        let h = self.res_dec1.forward(g, h, temb)?;
        let h = self.attend(g, Site::Dec1, h, tokens, hook)?;
        let h = g.upsample2(h)?;
        let h = self.up0.forward(g, h)?;
        let h = g.concat0(&[h, skip0])?;
        let h = self.res_dec0.forward(g, h, temb)?;
        let h = self.attend(g, Site::Dec0, h, tokens, hook)?;

        let h = self.norm_out.forward(g, h)?;
        let h = g.silu(h)?;
        Ok(self.conv_out.forward(g, h)?)
    }
}
