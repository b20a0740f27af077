//! Denoising and inhibition losses and the optimizer step.

use std::rc::Rc;

use migc_tensor::{AdamW, Graph, ParamGrads, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_noise, gaussian};
use crate::error::{CoreError, Result};
use crate::geometry::{Mask, MaskSet};
use crate::model::{Conditioning, ForwardOptions, Model};
use crate::request::Instance;
use crate::vocab::L_TEXT;

/// Per-instance cross-attention maps, each `[H, W]` (or flat `[HW]`).
#[derive(Clone, Debug, Default)]
pub struct AttentionMapStack {
    pub maps: Vec<Tensor>,
}

/// `Σ_i Σ_p |A_i(p) − mean_bg(A_i)| · M_bg(p)`. An empty background gives 0.
pub fn inhibition_loss(stack: &AttentionMapStack, background: &Mask) -> Result<f64> {
    let n_bg = background.count();
    if n_bg == 0 {
        return Ok(0.0);
    }
    let bits = background.bits();
    let mut total = 0.0;
    for a in &stack.maps {
        if a.numel() != bits.len() {
            return Err(CoreError::Resolution {
                expected: background.resolution(),
                got: (a.numel(), 1),
            });
        }
        let mean = a.data().iter().zip(bits).filter(|(_, &b)| b).map(|(v, _)| v).sum::<f64>() / n_bg as f64;
        total += a
            .data()
            .iter()
            .zip(bits)
            .filter(|(_, &b)| b)
            .map(|(v, _)| (v - mean).abs())
            .sum::<f64>();
    }
    Ok(total)
}

/// Per-instance maps `[HW]` from prompt attention `probs:[HW, L]`: the mean
/// over each instance's description token columns.
pub fn instance_maps(g: &mut Graph, probs: Var, n_instances: usize) -> Result<Vec<Var>> {
    let l = g.shape(probs)[1];
    if n_instances * L_TEXT > l {
        return Err(CoreError::Request(format!(
            "{n_instances} instances need {} prompt tokens, have {l}",
            n_instances * L_TEXT
        )));
    }
    let pt = g.transpose(probs)?;
    (0..n_instances)
        .map(|i| {
            let cols = g.slice0(pt, i * L_TEXT, L_TEXT)?;
            Ok(g.mean_rows(cols)?)
        })
        .collect()
}

/// Graph form of [`inhibition_loss`] over maps `[HW]`.
pub fn inhibition_loss_graph(g: &mut Graph, maps: &[Var], background: &Mask) -> Result<Var> {
    let n_bg = background.count();
    let hw = background.len();
    if n_bg == 0 || maps.is_empty() {
        return Ok(g.input(Tensor::scalar(0.0)));
    }
    let m = Rc::new(Tensor::new(&[hw], background.to_f64())?);
    let ones = g.input(Tensor::ones(&[hw]));
    let mut terms = Vec::new();
    for &a in maps {
        let masked = g.mul_const(a, m.clone())?;
        let s = g.sum(masked)?;
        let mean = g.scale(s, 1.0 / n_bg as f64)?;
        let mean_b = g.scalar_mul(ones, mean)?;
        let dev = g.sub(a, mean_b)?;
        let dev = g.abs(dev)?;
        let dev = g.mul_const(dev, m.clone())?;
        terms.push(g.sum(dev)?);
    }
    Ok(g.add_n(&terms)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Inhibition loss weight λ.
    pub lambda: f64,
    /// Average the inhibition term over the map's pixels instead of summing.
    pub ihbt_pixel_mean: bool,
    /// Instances per training sample; extra instances are dropped smallest first.
    pub k_train: usize,
    pub seed: u64,
    /// Probability of replacing the prompt with the null prompt (backbone stage).
    pub prompt_dropout: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 32,
            epochs: 1,
            lambda: 0.1,
            ihbt_pixel_mean: true,
            k_train: 4,
            seed: 0,
            prompt_dropout: 0.1,
            weight_decay: 0.01,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::Config(m.into()));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.batch_size == 0 || self.k_train == 0 {
            return bad("batch_size and k_train must be positive");
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad("lambda must be >= 0");
        }
        if !(0.0..=1.0).contains(&self.prompt_dropout) {
            return bad("prompt_dropout must lie in [0, 1]");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        Ok(())
    }
}

/// Image in `[-1, 1]` with its layout.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub image: Tensor,
    pub instances: Vec<Instance>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// θ alone, global prompts only.
    Backbone,
    /// θ′ with θ frozen.
    Migc,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub l_ldm: f64,
    pub l_ihbt: f64,
    pub l_total: f64,
}

/// Keep at most `k` instances, largest boxes first, in their original order.
/// Fewer than `k` instances need no explicit null entries: a null instance
/// has an empty mask and zero shading, so it enters the SAC exactly like a
/// padding slot.
pub fn fit_instances(instances: &[Instance], k: usize) -> Vec<Instance> {
    if instances.len() <= k {
        return instances.to_vec();
    }
    let mut idx: Vec<usize> = (0..instances.len()).collect();
    idx.sort_by(|&a, &b| instances[b].bbox.area().total_cmp(&instances[a].bbox.area()).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx.into_iter().map(|i| instances[i]).collect()
}

/// Loss and parameter gradients of one sample.
pub fn sample_loss(
    model: &Model,
    sample: &TrainingSample,
    cfg: &TrainConfig,
    stage: Stage,
    rng: &mut ChaCha8Rng,
) -> Result<(StepLosses, ParamGrads)> {
    let r = model.config.resolution;
    sample.image.expect_shape("training sample", &[3, r, r])?;
    let t = rng.random_range(1..=model.schedule.timesteps());
    let eps = gaussian(&[3, r, r], rng);
    let z_t = forward_noise(&sample.image, t, &eps, &model.schedule)?;
    let instances = fit_instances(&sample.instances, cfg.k_train);
    let descs: Vec<_> = instances.iter().map(|i| i.desc).collect();
    let boxes: Vec<_> = instances.iter().map(|i| i.bbox).collect();
    let cond = match stage {
        Stage::Backbone if rng.random::<f64>() < cfg.prompt_dropout => Conditioning::null(),
        _ => Conditioning::new(&descs, descs.clone(), boxes.clone()),
    };

    let mut g = Graph::new(&model.params);
    let z = g.input(z_t);
    let migc = stage == Stage::Migc;
    let mut shuffle_rng = rand_chacha::ChaCha8Rng::from_rng(rng);
    let opts = ForwardOptions {
        migc,
        shuffle: if migc { Some(&mut shuffle_rng) } else { None },
        trace: None,
    };
    let pred = model.predict_in(&mut g, z, t, &cond, opts)?;
    let target = g.input(eps);
    let l_ldm = g.mse(pred.eps, target)?;
    let use_ihbt = migc && cfg.lambda > 0.0 && !descs.is_empty();
    let (total, l_ihbt) = if use_ihbt {
        let side = r / 2;
        let masks = MaskSet::from_boxes(&boxes, side, side)?;
        let maps = instance_maps(&mut g, pred.loss_probs, descs.len())?;
        let mut ih = inhibition_loss_graph(&mut g, &maps, &masks.background)?;
        if cfg.ihbt_pixel_mean {
            ih = g.scale(ih, 1.0 / (side * side) as f64)?;
        }
        let weighted = g.scale(ih, cfg.lambda)?;
        (g.add(l_ldm, weighted)?, Some(ih))
    } else {
        (l_ldm, None)
    };
    let losses = StepLosses {
        l_ldm: g.value(l_ldm).item(),
        l_ihbt: l_ihbt.map_or(0.0, |v| g.value(v).item()),
        l_total: g.value(total).item(),
    };
    if !losses.l_total.is_finite() {
        return Err(CoreError::Numerical {
            stage: "training_step".into(),
            detail: format!("non-finite loss {losses:?} at t = {t}"),
        });
    }
    let grads = g.backward(total)?.param_grads();
    Ok((losses, grads))
}

/// One optimizer step on the mean loss over `batch`. Only non-frozen
/// parameters move; [`Stage`] decides which side is frozen.
pub fn training_step(
    model: &mut Model,
    opt: &mut AdamW,
    batch: &[TrainingSample],
    cfg: &TrainConfig,
    stage: Stage,
    rng: &mut ChaCha8Rng,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(CoreError::Request("empty batch".into()));
    }
    prepare_stage(model, stage);
    let mut grads = ParamGrads::new();
    let mut sum = StepLosses::default();
    for s in batch {
        let (l, gr) = sample_loss(model, s, cfg, stage, rng)?;
        sum.l_ldm += l.l_ldm;
        sum.l_ihbt += l.l_ihbt;
        grads.accumulate(gr);
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(CoreError::Numerical {
            stage: "training_step".into(),
            detail: "non-finite gradient".into(),
        });
    }
    opt.step(&mut model.params, &grads);
    let l_ldm = sum.l_ldm / n;
    let l_ihbt = sum.l_ihbt / n;
    Ok(StepLosses {
        l_ldm,
        l_ihbt,
        l_total: l_ldm + cfg.lambda * l_ihbt,
    })
}

/// Freeze the side of the model the stage does not train.
pub fn prepare_stage(model: &mut Model, stage: Stage) {
    match stage {
        Stage::Backbone => {
            model.set_backbone_frozen(false);
            model.set_migc_frozen(true);
        }
        Stage::Migc => {
            model.set_backbone_frozen(true);
            model.set_migc_frozen(false);
        }
    }
}
