//! Multi-instance generation controller: per-instance shading, enhancement
//! attention, background and layout shading, and the shading aggregation
//! controller (SAC).

use migc_tensor::nn::{attention, Cbam, Conv2d, Linear, Mlp};
use migc_tensor::{fourier_embed, FourierSpec, Graph, Init, ParamId, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::config::{MigcComponents, ModelConfig};
use crate::error::{CoreError, Result};
use crate::geometry::{build_layout_attention_mask, BoundingBox, LayoutAttentionMask, Mask, MaskSet};
use crate::unet::{CrossAttention, Shading, Site};
use crate::vocab::{description_tokens, Description, ToyVocab};

fn mask_var(g: &mut Graph, m: &Mask) -> Var {
    g.input(Tensor::new(&[m.len()], m.to_f64()).expect("mask length"))
}

fn check_res(expected: (usize, usize), m: &Mask) -> Result<()> {
    if m.resolution() != expected {
        return Err(CoreError::Resolution {
            expected,
            got: m.resolution(),
        });
    }
    Ok(())
}

/// `ca(xn, tokens) ⊙ mask`, with `xn:[C, HW]` the normalized features of a
/// frozen cross-attention layer at resolution `res`.
pub fn cross_attention_shading(
    g: &mut Graph,
    ca: &CrossAttention,
    xn: Var,
    res: (usize, usize),
    tokens: Var,
    mask: &Mask,
) -> Result<Var> {
    check_res(res, mask)?;
    let s = ca.shade(g, xn, tokens)?;
    let m = mask_var(g, mask);
    Ok(g.mul_row(s.residual, m)?)
}

/// Background shading: the global prompt through the frozen layer, kept on
/// the background mask.
pub fn background_shading(
    g: &mut Graph,
    ca: &CrossAttention,
    xn: Var,
    res: (usize, usize),
    prompt: Var,
    background: &Mask,
) -> Result<Var> {
    cross_attention_shading(g, ca, xn, res, prompt, background)
}

/// Position token `MLP(Fourier(box))` as `[1, text_dim]`.
pub fn position_token(g: &mut Graph, mlp: &Mlp, fourier: &FourierSpec, bbox: &BoundingBox) -> Result<Var> {
    let f = fourier_embed(bbox.coords(), fourier)?;
    let n = f.numel();
    let x = g.input(f.reshape(&[1, n])?);
    Ok(mlp.forward_rows(g, x)?)
}

/// `[E(desc); MLP(Fourier(box))]`, `[L_TEXT + 1, text_dim]`. The null
/// description with the sentinel box is the padding token.
pub fn make_grounded_tokens(
    g: &mut Graph,
    vocab: &ToyVocab,
    mlp: &Mlp,
    fourier: &FourierSpec,
    desc: Option<&Description>,
    bbox: &BoundingBox,
) -> Result<Var> {
    let text = vocab.embed(g, &description_tokens(desc))?;
    let pos = position_token(g, mlp, fourier, bbox)?;
    Ok(g.concat0(&[text, pos])?)
}

#[derive(Clone, Debug)]
pub struct EnhancementAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl EnhancementAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        text_dim: usize,
        head_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), channels, head_dim, false, Init::FanIn(channels), rng)?,
            k: Linear::new(store, &format!("{name}.k"), text_dim, head_dim, false, Init::FanIn(text_dim), rng)?,
            v: Linear::new(store, &format!("{name}.v"), text_dim, head_dim, false, Init::FanIn(text_dim), rng)?,
            o: Linear::new(store, &format!("{name}.o"), head_dim, channels, true, Init::Zeros, rng)?,
        })
    }
}

/// `r_f + o(attention(q(xn), k(G), v(G))) ⊙ mask`.
pub fn enhancement_attention(
    g: &mut Graph,
    ea: &EnhancementAttention,
    xn: Var,
    grounded: Var,
    mask: &Mask,
    r_f: Var,
) -> Result<Var> {
    let q = ea.q.forward_cols(g, xn)?;
    let q = g.transpose(q)?;
    let k = ea.k.forward_rows(g, grounded)?;
    let v = ea.v.forward_rows(g, grounded)?;
    let a = attention(g, q, k, v, None)?;
    let out = g.transpose(a.out)?;
    let out = ea.o.forward_cols(g, out)?;
    if g.shape(out)[1] != mask.len() {
        return Err(CoreError::Resolution {
            expected: (g.shape(out)[1], 1),
            got: mask.resolution(),
        });
    }
    let m = mask_var(g, mask);
    let out = g.mul_row(out, m)?;
    Ok(g.add(r_f, out)?)
}

#[derive(Clone, Debug)]
pub struct LayoutAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl LayoutAttention {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, head_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), channels, head_dim, false, Init::FanIn(channels), rng)?,
            k: Linear::new(store, &format!("{name}.k"), channels, head_dim, false, Init::FanIn(channels), rng)?,
            v: Linear::new(store, &format!("{name}.v"), channels, head_dim, false, Init::FanIn(channels), rng)?,
            o: Linear::new(store, &format!("{name}.o"), head_dim, channels, true, Init::FanIn(head_dim), rng)?,
        })
    }
}

/// Pixel self-attention over `xn:[C, HW]` restricted by `mask`.
pub fn layout_attention(g: &mut Graph, la: &LayoutAttention, xn: Var, mask: &LayoutAttentionMask) -> Result<Var> {
    let n = g.shape(xn)[1];
    if mask.num_pixels() != n {
        return Err(CoreError::Resolution {
            expected: (n, 1),
            got: (mask.num_pixels(), 1),
        });
    }
    let q = la.q.forward_cols(g, xn)?;
    let k = la.k.forward_cols(g, xn)?;
    let v = la.v.forward_cols(g, xn)?;
    let (q, k, v) = (g.transpose(q)?, g.transpose(k)?, g.transpose(v)?);
    let a = attention(g, q, k, v, Some(mask.allowed()))?;
    let out = g.transpose(a.out)?;
    Ok(la.o.forward_cols(g, out)?)
}

/// Shading results entering the SAC, each `[C, HW]`.
#[derive(Clone, Debug)]
pub struct ShadingSet {
    pub instances: Vec<Var>,
    pub background: Var,
    /// `None` when layout attention is ablated.
    pub layout: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Sac {
    pub intra_in: Conv2d,
    pub intra_cbam: Cbam,
    pub intra_out: Conv2d,
    pub inter_cbam: Cbam,
    pub head: Conv2d,
    pub max_num: usize,
    pub channels: usize,
}

impl Sac {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        hidden: usize,
        max_num: usize,
        reduction: usize,
        spatial_kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let slots = max_num + 2;
        let n = |s: &str| format!("{name}.{s}");
        Ok(Self {
            intra_in: Conv2d::new(store, &n("intra_in"), channels + 1, hidden, 3, 1, Conv2d::fan_in(channels + 1, 3), rng)?,
            intra_cbam: Cbam::new(store, &n("intra_cbam"), hidden, reduction, spatial_kernel, rng)?,
            intra_out: Conv2d::new(store, &n("intra_out"), hidden, 1, 3, 1, Conv2d::fan_in(hidden, 3), rng)?,
            inter_cbam: Cbam::new(store, &n("inter_cbam"), slots, reduction, spatial_kernel, rng)?,
            head: Conv2d::new(store, &n("head"), slots, slots, 1, 1, Init::Zeros, rng)?,
            max_num,
            channels,
        })
    }

    pub fn slots(&self) -> usize {
        self.max_num + 2
    }

    /// Instance intra-attention: `concat(R, M)` → conv → CBAM → conv, giving
    /// one `[1, H, W]` map.
    pub fn intra(&self, g: &mut Graph, r: Var, mask: &Mask) -> Result<Var> {
        let (h, w) = mask.resolution();
        let r = g.reshape(r, &[self.channels, h, w])?;
        let m = g.input(mask.to_tensor().reshape(&[1, h, w])?);
        let x = g.concat0(&[r, m])?;
        let x = self.intra_in.forward(g, x)?;
        let x = self.intra_cbam.forward(g, x)?;
        Ok(self.intra_out.forward(g, x)?)
    }
}

/// Slot assignment for the SAC: instance `k` goes to slot `order[k]` among the
/// first `max_num` slots; the remaining ones hold padding. Background and
/// layout occupy the last two slots and never move.
pub fn pad_shading_channels(n: usize, max_num: usize, shuffle: Option<&mut (dyn rand::RngCore + '_)>) -> Result<Vec<usize>> {
    if n > max_num {
        return Err(CoreError::TooManyInstances { n, max_num });
    }
    let mut perm: Vec<usize> = (0..max_num).collect();
    if let Some(rng) = shuffle {
        perm.shuffle(rng);
    }
    perm.truncate(n);
    Ok(perm)
}

pub struct SacOutput {
    pub r_final: Var,
    /// Per-pixel slot weights `[max_num + 2, HW]`.
    pub weights: Var,
    /// Slots taking part in the softmax.
    pub active: Vec<bool>,
    /// Feature map for each active slot, `[C, HW]`.
    pub slot_features: Vec<Option<Var>>,
}

/// `R_final = Σ_k w_k ⊙ R_k` with per-pixel softmax weights over the active
/// slots. `order` comes from [`pad_shading_channels`].
pub fn sac_aggregate(g: &mut Graph, sac: &Sac, shading: &ShadingSet, masks: &MaskSet, order: &[usize]) -> Result<SacOutput> {
    let n = shading.instances.len();
    if n > sac.max_num {
        return Err(CoreError::TooManyInstances { n, max_num: sac.max_num });
    }
    if order.len() != n || masks.instances.len() != n {
        return Err(CoreError::Request("shading, masks and slot order disagree in length".into()));
    }
    let (h, w) = masks.resolution();
    let slots = sac.slots();
    let mut features: Vec<Option<Var>> = vec![None; slots];
    let mut maps: Vec<Option<Var>> = vec![None; slots];
    for (k, (&r, m)) in shading.instances.iter().zip(&masks.instances).enumerate() {
        features[order[k]] = Some(r);
        maps[order[k]] = Some(sac.intra(g, r, m)?);
    }
    features[sac.max_num] = Some(shading.background);
    maps[sac.max_num] = Some(sac.intra(g, shading.background, &masks.background)?);
    if let Some(la) = shading.layout {
        features[sac.max_num + 1] = Some(la);
        maps[sac.max_num + 1] = Some(sac.intra(g, la, &masks.layout)?);
    }
    let active: Vec<bool> = features.iter().map(Option::is_some).collect();
    if maps.iter().any(Option::is_none) {
        let zero = g.input(Tensor::zeros(&[sac.channels, h * w]));
        let f_zero = sac.intra(g, zero, &Mask::zeros(h, w))?;
        for m in maps.iter_mut().filter(|m| m.is_none()) {
            *m = Some(f_zero);
        }
    }
    let maps: Vec<Var> = maps.into_iter().map(Option::unwrap).collect();
    let stacked = g.concat0(&maps)?;
    let inter = sac.inter_cbam.forward(g, stacked)?;
    let logits = sac.head.forward(g, inter)?;
    let logits = g.reshape(logits, &[slots, h * w])?;
    let logits = g.transpose(logits)?;
    let allowed: Vec<bool> = (0..h * w).flat_map(|_| active.iter().copied()).collect();
    let wts = g.softmax_rows(logits, Some(&allowed))?;
    let weights = g.transpose(wts)?;
    let r_final = combine(g, weights, &features)?;
    Ok(SacOutput {
        r_final,
        weights,
        active,
        slot_features: features,
    })
}

fn combine(g: &mut Graph, weights: Var, features: &[Option<Var>]) -> Result<Var> {
    let hw = g.shape(weights)[1];
    let mut terms = Vec::new();
    for (k, f) in features.iter().enumerate() {
        if let Some(f) = *f {
            let wk = g.slice0(weights, k, 1)?;
            let wk = g.reshape(wk, &[hw])?;
            terms.push(g.mul_row(f, wk)?);
        }
    }
    Ok(g.add_n(&terms)?)
}

/// Replacement for the SAC when it is ablated: at each pixel, the plain
/// average of the entries whose masks cover it.
pub fn average_aggregate(g: &mut Graph, shading: &ShadingSet, masks: &MaskSet) -> Result<SacOutput> {
    let (h, w) = masks.resolution();
    let hw = h * w;
    let n = shading.instances.len();
    let slots = n + 2;
    let mut features: Vec<Option<Var>> = shading.instances.iter().map(|&v| Some(v)).collect();
    let mut covers: Vec<&Mask> = masks.instances.iter().collect();
    features.push(Some(shading.background));
    covers.push(&masks.background);
    features.push(shading.layout);
    covers.push(&masks.layout);
    let mut wdata = vec![0.0; slots * hw];
    for p in 0..hw {
        let on: Vec<usize> = (0..slots).filter(|&k| features[k].is_some() && covers[k].bits()[p]).collect();
        for &k in &on {
            wdata[k * hw + p] = 1.0 / on.len() as f64;
        }
    }
    let weights = g.input(Tensor::new(&[slots, hw], wdata)?);
    let r_final = combine(g, weights, &features)?;
    Ok(SacOutput {
        r_final,
        weights,
        active: features.iter().map(Option::is_some).collect(),
        slot_features: features,
    })
}

/// MIGC at one attention site.
#[derive(Clone, Debug)]
pub struct MigcLayer {
    pub site: Site,
    pub ea: EnhancementAttention,
    pub la: LayoutAttention,
    pub sac: Sac,
    /// Blend from the backbone residual to the MIGC residual; starts at 0.
    pub gate: ParamId,
    pub channels: usize,
    pub resolution: (usize, usize),
}

/// The deployed controller: a shared position MLP and one layer per site.
#[derive(Clone, Debug)]
pub struct Migc {
    pub pos_mlp: Mlp,
    pub fourier: FourierSpec,
    pub layers: Vec<MigcLayer>,
    pub max_num: usize,
    pub components: MigcComponents,
}

pub const MIGC_SITES: [Site; 2] = [Site::Mid, Site::Dec1];

impl Migc {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let fourier = FourierSpec::geometric(cfg.fourier_bands);
        let fin = fourier.output_len();
        let pos_mlp = Mlp::new(
            store,
            &format!("{name}.pos_mlp"),
            &[fin, cfg.pos_hidden_mult * cfg.text_dim, cfg.text_dim],
            rng,
        )?;
        let mut layers = Vec::new();
        for site in MIGC_SITES {
            let (channels, div) = match site {
                Site::Mid => (cfg.channels[2], 4),
                _ => (cfg.channels[1], 2),
            };
            let side = cfg.resolution / div;
            let kernel = if side <= 8 { 3 } else { 7 };
            let ln = match site {
                Site::Mid => format!("{name}.mid"),
                _ => format!("{name}.dec1"),
            };
            layers.push(MigcLayer {
                site,
                ea: EnhancementAttention::new(store, &format!("{ln}.ea"), channels, cfg.text_dim, cfg.head_dim, rng)?,
                la: LayoutAttention::new(store, &format!("{ln}.la"), channels, cfg.head_dim, rng)?,
                sac: Sac::new(
                    store,
                    &format!("{ln}.sac"),
                    channels,
                    cfg.sac_hidden,
                    cfg.max_num,
                    cfg.cbam_reduction,
                    kernel,
                    rng,
                )?,
                gate: store.init(format!("{ln}.gate"), &[1], Init::Zeros, rng)?,
                channels,
                resolution: (side, side),
            });
        }
        Ok(Self {
            pos_mlp,
            fourier,
            layers,
            max_num: cfg.max_num,
            components: cfg.components,
        })
    }

    pub fn layer(&self, site: Site) -> Option<&MigcLayer> {
        self.layers.iter().find(|l| l.site == site)
    }
}

/// Per-request inputs shared by every MIGC layer of one forward pass.
pub struct LayoutContext {
    pub descriptions: Vec<Description>,
    pub boxes: Vec<BoundingBox>,
    /// Description tokens `[L_TEXT, text_dim]` per instance.
    pub phrases: Vec<Var>,
    /// Grounded tokens per instance.
    pub grounded: Vec<Var>,
    pub prompt: Var,
}

impl LayoutContext {
    pub fn build(
        g: &mut Graph,
        vocab: &ToyVocab,
        migc: &Migc,
        descriptions: &[Description],
        boxes: &[BoundingBox],
        prompt: Var,
    ) -> Result<Self> {
        if descriptions.len() != boxes.len() {
            return Err(CoreError::Request("descriptions and boxes differ in count".into()));
        }
        if descriptions.len() > migc.max_num {
            return Err(CoreError::TooManyInstances {
                n: descriptions.len(),
                max_num: migc.max_num,
            });
        }
        let mut phrases = Vec::new();
        let mut grounded = Vec::new();
        for (d, b) in descriptions.iter().zip(boxes) {
            let p = vocab.embed(g, &description_tokens(Some(d)))?;
            let pos = position_token(g, &migc.pos_mlp, &migc.fourier, b)?;
            grounded.push(g.concat0(&[p, pos])?);
            phrases.push(p);
        }
        Ok(Self {
            descriptions: descriptions.to_vec(),
            boxes: boxes.to_vec(),
            phrases,
            grounded,
            prompt,
        })
    }
}

/// Values captured from one MIGC layer for inspection.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub site: Site,
    pub masks: MaskSet,
    pub r_f: Vec<Tensor>,
    pub r_s: Vec<Tensor>,
    pub r_bg: Tensor,
    pub r_la: Option<Tensor>,
    pub weights: Tensor,
    pub active: Vec<bool>,
    /// Feature map per slot, `None` for inactive slots.
    pub slot_features: Vec<Option<Tensor>>,
    pub r_final: Tensor,
    pub residual: Tensor,
}

/// Runs one MIGC layer and returns the residual to add at `layer.site`.
/// `shuffle` permutes instance and padding slots (training).
#[allow(clippy::too_many_arguments)]
pub fn migc_forward(
    g: &mut Graph,
    migc: &Migc,
    layer: &MigcLayer,
    ca: &CrossAttention,
    xn: Var,
    global: &Shading,
    ctx: &LayoutContext,
    shuffle: Option<&mut (dyn rand::RngCore + '_)>,
    trace: Option<&mut Vec<LayerTrace>>,
) -> Result<Var> {
    let (h, w) = layer.resolution;
    if g.shape(xn) != [layer.channels, h * w] {
        return Err(CoreError::Resolution {
            expected: (layer.channels, h * w),
            got: (g.shape(xn)[0], g.shape(xn)[1]),
        });
    }
    let masks = MaskSet::from_boxes(&ctx.boxes, h, w)?;
    let comp = migc.components;
    let mut r_f = Vec::new();
    let mut r_s = Vec::new();
    for (i, m) in masks.instances.iter().enumerate() {
        let f = cross_attention_shading(g, ca, xn, (h, w), ctx.phrases[i], m)?;
        let s = if comp.enhancement {
            enhancement_attention(g, &layer.ea, xn, ctx.grounded[i], m, f)?
        } else {
            f
        };
        r_f.push(f);
        r_s.push(s);
    }
    // same frozen layer and prompt as the global residual, so reuse it
    let bg = mask_var(g, &masks.background);
    let r_bg = g.mul_row(global.residual, bg)?;
    let r_la = if comp.layout_attention {
        let a = build_layout_attention_mask(&masks.regions())?;
        Some(layout_attention(g, &layer.la, xn, &a)?)
    } else {
        None
    };
    let shading = ShadingSet {
        instances: r_s.clone(),
        background: r_bg,
        layout: r_la,
    };
    let out = if comp.sac {
        let order = pad_shading_channels(r_s.len(), layer.sac.max_num, shuffle)?;
        sac_aggregate(g, &layer.sac, &shading, &masks, &order)?
    } else {
        average_aggregate(g, &shading, &masks)?
    };
    let alpha = g.param(layer.gate);
    let delta = g.sub(out.r_final, global.residual)?;
    let delta = g.scalar_mul(delta, alpha)?;
    let residual = g.add(global.residual, delta)?;
    if let Some(tr) = trace {
        let val = |g: &Graph, v: &Var| g.value(*v).clone();
        tr.push(LayerTrace {
            site: layer.site,
            r_f: r_f.iter().map(|v| val(g, v)).collect(),
            r_s: r_s.iter().map(|v| val(g, v)).collect(),
            r_bg: val(g, &r_bg),
            r_la: r_la.map(|v| val(g, &v)),
            weights: val(g, &out.weights),
            active: out.active.clone(),
            slot_features: out.slot_features.iter().map(|f| f.map(|v| val(g, &v))).collect(),
            r_final: val(g, &out.r_final),
            residual: val(g, &residual),
            masks,
        });
    }
    Ok(residual)
}
