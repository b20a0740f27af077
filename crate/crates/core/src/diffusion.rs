//! Noise schedule, forward process, classifier-free guidance and the
//! deterministic DDIM sampler.

use migc_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{CoreError, Result};
use crate::model::{Conditioning, Model};
use crate::request::GenerationRequest;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 2 {
            return Err(CoreError::Config("schedule needs at least 2 timesteps".into()));
        }
        let betas = (0..timesteps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64)
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(CoreError::Config("betas must be nonempty and lie in [0, 1)".into()));
        }
        let mut acc = 1.0;
        let alpha_bar = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alpha_bar })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `ᾱ_t` for `t ∈ [0, T]`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            t if t <= self.timesteps() => Ok(self.alpha_bar[t - 1]),
            t => Err(CoreError::Request(format!("timestep {t} outside [1, {}]", self.timesteps()))),
        }
    }
}

/// `z_t = √ᾱ_t z0 + √(1−ᾱ_t) ε` for `t ∈ [1, T]`.
pub fn forward_noise(z0: &Tensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if t == 0 {
        return Err(CoreError::Request("timestep 0 outside [1, T]".into()));
    }
    let ab = schedule.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z0.zip_map(eps, |z, e| a * z + b * e)?)
}

/// `ε_u + scale · (ε_c − ε_u)`.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, scale: f64) -> Result<Tensor> {
    Ok(eps_uncond.zip_map(eps_cond, |u, c| u + scale * (c - u))?)
}

/// Descending sampler timesteps: `steps` evenly strided values ending at 1.
pub fn ddim_timesteps(timesteps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > timesteps {
        return Err(CoreError::Request(format!("steps {steps} outside [1, {timesteps}]")));
    }
    let stride = timesteps / steps;
    Ok((0..steps).rev().map(|i| i * stride + 1).collect())
}

/// One deterministic DDIM update from `t` to `t_prev`. Returns `(z_prev, x0)`
/// with the `x0` estimate clamped to `[-1, 1]`.
pub fn ddim_step(z: &Tensor, eps: &Tensor, t: usize, t_prev: usize, schedule: &NoiseSchedule) -> Result<(Tensor, Tensor)> {
    let ab = schedule.alpha_bar(t)?;
    let ab_prev = schedule.alpha_bar(t_prev)?;
    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x0 = z.zip_map(eps, |z, e| ((z - sb * e) / sa).clamp(-1.0, 1.0))?;
    let (pa, pb) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
    // re-derive ε from the clamped x0 so the update stays on the same trajectory
    let eps_hat = z.zip_map(&x0, |z, x| (z - sa * x) / sb)?;
    let z_prev = x0.zip_map(&eps_hat, |x, e| pa * x + pb * e)?;
    Ok((z_prev, x0))
}

/// Standard normal tensor from a seeded ChaCha stream.
pub fn gaussian(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| StandardNormal.sample(rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleOptions {
    /// Use MIGC at all; `false` gives the baseline sampler.
    pub migc: bool,
    /// Override of the MIGC-active step count.
    pub migc_steps: Option<usize>,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            migc: true,
            migc_steps: None,
        }
    }
}

/// Decoded image `[3, H, W]` in `[0, 1]`.
pub fn sample(model: &Model, request: &GenerationRequest, opts: SampleOptions) -> Result<Tensor> {
    request.validate()?;
    let cfg = &model.config;
    let cond = Conditioning::from_request(request)?;
    let null = Conditioning::null();
    let r = cfg.resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
    let mut z = gaussian(&[3, r, r], &mut rng);
    let ts = ddim_timesteps(model.schedule.timesteps(), request.steps)?;
    let migc_steps = if opts.migc {
        opts.migc_steps.unwrap_or_else(|| cfg.migc_steps_for(request.steps))
    } else {
        0
    };
    for (i, &t) in ts.iter().enumerate() {
        let migc_on = i < migc_steps;
        let eps_c = model.denoise_predict(&z, t, &cond, migc_on)?;
        let eps = if request.cfg_scale == 1.0 {
            eps_c
        } else {
            let uncond_migc = migc_on && !cfg.uncond_bypasses_migc;
            let eps_u = model.denoise_predict(&z, t, &null, uncond_migc)?;
            cfg_combine(&eps_u, &eps_c, request.cfg_scale)?
        };
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let (zn, _) = ddim_step(&z, &eps, t, t_prev, &model.schedule)?;
        if !zn.is_finite() {
            return Err(CoreError::Numerical {
                stage: "sample".into(),
                detail: format!("non-finite latent at t = {t}"),
            });
        }
        z = zn;
    }
    Ok(z.map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)))
}
