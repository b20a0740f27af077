#![allow(dead_code)]

use migc_core::config::ModelConfig;
use migc_core::geometry::BoundingBox;
use migc_core::{Color, Description, Model, Shape};
use migc_tensor::ParamStore;
use rand::Rng;

/// Resolution 8: the mid layer runs at 2×2 and the decoder layer at 4×4.
pub fn tiny_config() -> ModelConfig {
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

pub fn tiny_model(seed: u64) -> Model {
    Model::new(tiny_config(), seed).unwrap()
}

/// Overwrite every parameter under `prefix` with uniform noise in `[-s, s]`.
pub fn randomize(store: &mut ParamStore, prefix: &str, s: f64, rng: &mut impl Rng) {
    for id in store.ids_with_prefix(prefix) {
        for v in store.value_mut(id).data_mut() {
            *v = rng.random_range(-s..s);
        }
    }
}

/// MIGC with every branch switched on: random weights and gates in `[0.5, 1)`.
pub fn randomize_migc(model: &mut Model, rng: &mut impl Rng) {
    randomize(&mut model.params, "migc.", 0.5, rng);
    for l in &model.migc.layers {
        model.params.value_mut(l.gate).data_mut()[0] = rng.random_range(0.5..1.0);
    }
}

pub fn desc(c: Color, s: Shape) -> Description {
    Description::new(c, s)
}

pub fn random_desc(rng: &mut impl Rng) -> Description {
    Description::new(
        Color::ALL[rng.random_range(0..Color::ALL.len())],
        Shape::ALL[rng.random_range(0..Shape::ALL.len())],
    )
}

/// Box with corners on a 1/8 grid.
pub fn random_box(rng: &mut impl Rng) -> BoundingBox {
    let x1 = rng.random_range(0..7);
    let y1 = rng.random_range(0..7);
    let x2 = rng.random_range(x1 + 1..=8);
    let y2 = rng.random_range(y1 + 1..=8);
    BoundingBox::new(x1 as f64 / 8.0, y1 as f64 / 8.0, x2 as f64 / 8.0, y2 as f64 / 8.0).unwrap()
}
