//! Finite-difference suite over every trainable block, run through the full
//! denoiser prediction of a small model with MIGC switched on.

use migc_core::model::{Conditioning, ForwardOptions};
use migc_core::{BoundingBox, Color, Description, Model, ModelConfig, Shape};
use migc_tensor::{grad_check, GradCheckOptions, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;

pub const TOLERANCE: f64 = 1e-4;

/// Name of each block and the parameter-name test selecting it.
pub const BLOCKS: [(&str, fn(&str) -> bool); 9] = [
    ("ea", |n| n.starts_with("migc.") && n.contains(".ea.")),
    ("la", |n| n.starts_with("migc.") && n.contains(".la.")),
    ("sac", |n| n.starts_with("migc.") && n.contains(".sac.")),
    ("gate", |n| n.starts_with("migc.") && n.ends_with(".gate")),
    ("pos_mlp", |n| n.starts_with("migc.pos_mlp.")),
    ("backbone_resblocks", |n| n.starts_with("unet.res_")),
    ("backbone_cross_attention", |n| n.starts_with("unet.ca_")),
    ("backbone_other", |n| {
        n.starts_with("unet.") && !n.starts_with("unet.res_") && !n.starts_with("unet.ca_")
    }),
    ("vocab", |n| n.starts_with("vocab.")),
];

#[derive(Clone, Debug, Serialize)]
pub struct BlockReport {
    pub block: String,
    pub params: usize,
    pub coords: usize,
    pub max_rel_err: f64,
    pub worst: Option<String>,
    pub passed: bool,
}

/// Resolution 8: MIGC runs at 2×2 and 4×4.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        resolution: 8,
        channels: [4, 8, 8],
        groups: 2,
        time_dim: 8,
        text_dim: 6,
        head_dim: 4,
        max_num: 3,
        fourier_bands: 2,
        pos_hidden_mult: 2,
        sac_hidden: 4,
        cbam_reduction: 2,
        timesteps: 50,
        sample_steps: 4,
        ..ModelConfig::default()
    }
}

/// Small model whose MIGC weights are random, so no branch sits at its
/// zero init and every block carries gradient.
pub fn fixture_model(seed: u64) -> Result<Model> {
    let mut model = Model::new(small_config(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for id in model.params.ids_with_prefix("migc.") {
        for v in model.params.value_mut(id).data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    for l in &model.migc.layers {
        model.params.value_mut(l.gate).data_mut()[0] = rng.random_range(0.5..1.0);
    }
    Ok(model)
}

fn sq_sum(g: &mut Graph, x: Var) -> migc_tensor::Result<Var> {
    let s = g.mul(x, x)?;
    g.sum(s)
}

/// Check one block. With `corrupt`, the objective gains a term whose value
/// counts but whose gradient is dropped, so the check must fail.
pub fn check_block(model: &Model, block: &str, select: fn(&str) -> bool, corrupt: bool) -> Result<BlockReport> {
    let mut m = model.clone();
    m.params.set_all_frozen(true);
    let mut n_params = 0;
    let ids: Vec<_> = m.params.iter().filter(|(_, p)| select(&p.name)).map(|(id, _)| id).collect();
    for id in ids {
        m.params.set_frozen(id, false);
        n_params += 1;
    }
    let d = [
        Description::new(Color::Red, Shape::Square),
        Description::new(Color::Yellow, Shape::Circle),
    ];
    let cond = Conditioning::new(
        &d,
        d.to_vec(),
        vec![
            BoundingBox::new(0.0, 0.0, 0.625, 0.5)?,
            BoundingBox::new(0.25, 0.375, 1.0, 1.0)?,
        ],
    );
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let z = Tensor::from_fn(&[3, 8, 8], |_| rng.random_range(-1.5..1.5));
    let rep = grad_check(
        &m.params,
        &[],
        |g, _| {
            let zv = g.input(z.clone());
            let opts = ForwardOptions {
                migc: true,
                ..Default::default()
            };
            let p = m.predict_in(g, zv, 20, &cond, opts).map_err(|e| migc_tensor::TensorError::Invalid {
                op: "gradcheck",
                msg: e.to_string(),
            })?;
            let obj = sq_sum(g, p.eps)?;
            if corrupt {
                let cut = g.input(g.value(p.eps).clone());
                let extra = sq_sum(g, cut)?;
                return g.add(obj, extra);
            }
            Ok(obj)
        },
        &GradCheckOptions {
            max_coords_per_tensor: Some(3),
            ..Default::default()
        },
    )?;
    Ok(BlockReport {
        block: block.into(),
        params: n_params,
        coords: rep.coords_checked,
        max_rel_err: rep.max_rel_err,
        passed: rep.passes(TOLERANCE) && rep.coords_checked > 0,
        worst: rep.worst,
    })
}

/// Blocks whose names are in `only` (all when empty).
pub fn run_suite(seed: u64, only: &[String], corrupt: bool) -> Result<Vec<BlockReport>> {
    let model = fixture_model(seed)?;
    BLOCKS
        .iter()
        .filter(|(name, _)| only.is_empty() || only.iter().any(|o| o == name))
        .map(|(name, sel)| check_block(&model, name, *sel, corrupt))
        .collect()
}
