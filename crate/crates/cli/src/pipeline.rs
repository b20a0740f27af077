//! Training, generation and benchmark routines shared by the commands.

use std::path::Path;

use migc_bench::io::write_png;
use migc_bench::layout::{generate_corpus, layout_seeds, CorpusItem};
use migc_bench::run::{bench_items, evaluate_items, BenchItem};
use migc_bench::{BenchLayout, EvalConfig, EvalRecord};
use migc_core::diffusion::{sample, SampleOptions};
use migc_core::train::training_step;
use migc_core::{GenerationRequest, MigcComponents, Model, Stage, StepLosses, TrainConfig, TrainingSample};
use migc_tensor::{AdamW, AdamWConfig, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};

/// Variants of the MIGC training run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// No enhancement attention.
    Ea,
    /// No layout attention.
    La,
    /// Plain average in place of the aggregation controller.
    Sac,
    /// No inhibition loss.
    Loss,
}

impl Ablation {
    pub fn components(ablation: Option<Ablation>) -> MigcComponents {
        let mut c = MigcComponents::default();
        match ablation {
            Some(Ablation::Ea) => c.enhancement = false,
            Some(Ablation::La) => c.layout_attention = false,
            Some(Ablation::Sac) => c.sac = false,
            _ => {}
        }
        c
    }

    pub fn train_config(ablation: Option<Ablation>, base: &TrainConfig) -> TrainConfig {
        let mut t = base.clone();
        if ablation == Some(Ablation::Loss) {
            t.lambda = 0.0;
        }
        t
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    #[serde(rename = "L_LDM")]
    pub l_ldm: f64,
    #[serde(rename = "L_ihbt")]
    pub l_ihbt: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
}

/// Renders mapped from `[0, 1]` to the model's `[-1, 1]`.
pub fn training_samples(items: &[CorpusItem]) -> Vec<TrainingSample> {
    items
        .iter()
        .map(|it| TrainingSample {
            image: it.render.image.map(|v| 2.0 * v - 1.0),
            instances: it.instances.clone(),
        })
        .collect()
}

pub fn corpus(cfg: &RunConfig) -> Result<Vec<TrainingSample>> {
    Ok(training_samples(&generate_corpus(&cfg.corpus, &cfg.bench)?))
}

/// `cfg.epochs` passes over `samples` in seeded shuffled order. Returns the
/// sample-weighted mean losses of each epoch.
pub fn train_stage(
    model: &mut Model,
    samples: &[TrainingSample],
    cfg: &TrainConfig,
    stage: Stage,
    mut on_epoch: impl FnMut(&EpochLosses),
) -> Result<Vec<EpochLosses>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(CliError::Usage("empty training set".into()));
    }
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        weight_decay: cfg.weight_decay,
        ..AdamWConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut out = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = StepLosses::default();
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainingSample> = chunk.iter().map(|&i| samples[i].clone()).collect();
            let l = training_step(model, &mut opt, &batch, cfg, stage, &mut rng)?;
            let n = chunk.len() as f64;
            sum.l_ldm += l.l_ldm * n;
            sum.l_ihbt += l.l_ihbt * n;
            sum.l_total += l.l_total * n;
        }
        let n = samples.len() as f64;
        let e = EpochLosses {
            epoch,
            l_ldm: sum.l_ldm / n,
            l_ihbt: sum.l_ihbt / n,
            l_total: sum.l_total / n,
        };
        on_epoch(&e);
        out.push(e);
    }
    model.params.set_all_frozen(false);
    Ok(out)
}

/// Stage 0: a fresh backbone trained on global prompts.
pub fn pretrain_backbone(
    cfg: &RunConfig,
    samples: &[TrainingSample],
    on_epoch: impl FnMut(&EpochLosses),
) -> Result<(Model, Vec<EpochLosses>)> {
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let losses = train_stage(&mut model, samples, &cfg.pretrain, Stage::Backbone, on_epoch)?;
    Ok((model, losses))
}

/// Fresh MIGC (from the config's seed) on top of `backbone`'s weights.
pub fn attach_backbone(cfg: &RunConfig, backbone: &Model) -> Result<Model> {
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let ids = model.params.len();
    for (_, p) in backbone.params.iter() {
        if model.params.id(&p.name).is_none() {
            return Err(CliError::Usage(format!("backbone parameter {} is unknown to this model", p.name)));
        }
    }
    let fresh_migc = model.params.clone();
    let loaded = model.params.load_values_from(&backbone.params)?;
    if loaded != ids || backbone.params.len() != ids {
        return Err(CliError::Usage("backbone checkpoint does not match the model config".into()));
    }
    for (id, p) in fresh_migc.iter() {
        if p.name.starts_with(migc_core::model::MIGC_PREFIX) {
            *model.params.value_mut(id) = p.value.clone();
        }
    }
    Ok(model)
}

/// MIGC trained on a frozen copy of `backbone`.
pub fn train_migc(
    cfg: &RunConfig,
    backbone: &Model,
    ablation: Option<Ablation>,
    samples: &[TrainingSample],
    on_epoch: impl FnMut(&EpochLosses),
) -> Result<(Model, Vec<EpochLosses>)> {
    let mut model = attach_backbone(cfg, backbone)?;
    model.set_components(Ablation::components(ablation));
    let tc = Ablation::train_config(ablation, &cfg.train);
    let losses = train_stage(&mut model, samples, &tc, Stage::Migc, on_epoch)?;
    Ok((model, losses))
}

pub fn request_for(layout: &BenchLayout, seed: u64, model: &Model) -> GenerationRequest {
    GenerationRequest {
        prompt: layout.prompt.clone(),
        instances: layout.instances.clone(),
        seed,
        steps: model.config.sample_steps,
        cfg_scale: model.config.cfg_scale,
    }
}

pub fn image_name(item: &BenchItem<'_>) -> String {
    format!("L{}_{:03}_s{}.png", item.layout.level, item.layout.layout, item.seed)
}

/// Generate every (layout, seed) image and evaluate it. Records come back in
/// item order whatever the worker count.
pub fn bench_model(
    model: &Model,
    layouts: &[BenchLayout],
    cfg: &RunConfig,
    migc: bool,
    workers: usize,
    eval: &EvalConfig,
    save_images: Option<&Path>,
) -> Result<Vec<EvalRecord>> {
    let seeds = layout_seeds(&cfg.bench);
    let items = bench_items(layouts, &seeds);
    let records = evaluate_items(&items, workers, eval, |it| {
        let req = request_for(it.layout, it.seed, model);
        let img = sample(model, &req, SampleOptions { migc, migc_steps: None })?;
        if let Some(dir) = save_images {
            write_png(&dir.join(image_name(it)), &img)?;
        }
        Ok::<Tensor, migc_bench::BenchError>(img)
    })?;
    Ok(records)
}
