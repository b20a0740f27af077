//! The full denoiser: backbone, vocabulary and MIGC over one parameter store.

use migc_tensor::{Graph, ParamStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::{MigcComponents, ModelConfig};
use crate::diffusion::NoiseSchedule;
use crate::error::{CoreError, Result};
use crate::geometry::BoundingBox;
use crate::migc::{migc_forward, LayerTrace, LayoutContext, Migc};
use crate::request::GenerationRequest;
use crate::unet::{CrossAttention, ResidualHook, Shading, Site, Unet};
use crate::vocab::{prompt_tokens, Description, ToyVocab};

/// Parameter-name prefixes of the backbone θ; everything under
/// [`MIGC_PREFIX`] is θ′.
pub const BACKBONE_PREFIXES: [&str; 2] = ["unet.", "vocab."];
pub const MIGC_PREFIX: &str = "migc.";

/// Site whose global cross-attention maps feed the inhibition loss.
pub const LOSS_SITE: Site = Site::Dec1;

/// Prompt token ids plus the instance layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    pub prompt: Vec<usize>,
    pub descriptions: Vec<Description>,
    pub boxes: Vec<BoundingBox>,
}

impl Conditioning {
    /// Null prompt and no instances (the unconditional branch).
    pub fn null() -> Self {
        Self::new(&[], Vec::new(), Vec::new())
    }

    pub fn new(prompt_descs: &[Description], descriptions: Vec<Description>, boxes: Vec<BoundingBox>) -> Self {
        Self {
            prompt: prompt_tokens(prompt_descs),
            descriptions,
            boxes,
        }
    }

    /// Layout from the instances, prompt from the request's prompt text.
    pub fn from_request(r: &GenerationRequest) -> Result<Self> {
        Ok(Self::new(&r.prompt_descriptions()?, r.descriptions(), r.boxes()))
    }

    /// Real instances only: null/sentinel padding entries are dropped.
    pub fn instances(&self) -> (Vec<Description>, Vec<BoundingBox>) {
        self.descriptions
            .iter()
            .zip(&self.boxes)
            .filter(|(_, b)| !b.is_sentinel())
            .map(|(d, b)| (*d, *b))
            .unzip()
    }
}

/// Per-pass options.
#[derive(Default)]
pub struct ForwardOptions<'a> {
    pub migc: bool,
    /// Shuffle SAC instance/padding slots (training).
    pub shuffle: Option<&'a mut dyn rand::RngCore>,
    pub trace: Option<&'a mut Vec<LayerTrace>>,
}

pub struct Prediction {
    pub eps: Var,
    /// Global-prompt attention probabilities `[HW, L]` at [`LOSS_SITE`].
    pub loss_probs: Var,
}

struct MigcHook<'m, 'o> {
    migc: &'m Migc,
    ctx: Option<LayoutContext>,
    shuffle: Option<&'o mut dyn rand::RngCore>,
    trace: Option<&'o mut Vec<LayerTrace>>,
    captured: Option<Var>,
}

impl ResidualHook for MigcHook<'_, '_> {
    fn residual(&mut self, g: &mut Graph, site: Site, ca: &CrossAttention, xn: Var, global: &Shading) -> Result<Var> {
        if site == LOSS_SITE {
            self.captured = Some(global.probs);
        }
        match (&self.ctx, self.migc.layer(site)) {
            (Some(ctx), Some(layer)) => migc_forward(
                g,
                self.migc,
                layer,
                ca,
                xn,
                global,
                ctx,
                self.shuffle.as_deref_mut(),
                self.trace.as_deref_mut(),
            ),
            _ => Ok(global.residual),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub vocab: ToyVocab,
    pub unet: Unet,
    pub migc: Migc,
    pub schedule: NoiseSchedule,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let vocab = ToyVocab::new(&mut params, "vocab", config.text_dim, &mut rng)?;
        let unet = Unet::new(&mut params, "unet", &config, &mut rng)?;
        let migc = Migc::new(&mut params, "migc", &config, &mut rng)?;
        let schedule = NoiseSchedule::linear(config.timesteps, config.beta_start, config.beta_end)?;
        Ok(Self {
            config,
            params,
            vocab,
            unet,
            migc,
            schedule,
        })
    }

    pub fn set_backbone_frozen(&mut self, frozen: bool) {
        for p in BACKBONE_PREFIXES {
            self.params.set_frozen_prefix(p, frozen);
        }
    }

    pub fn set_migc_frozen(&mut self, frozen: bool) {
        self.params.set_frozen_prefix(MIGC_PREFIX, frozen);
    }

    /// Switch MIGC sub-modules on or off; parameters are kept either way.
    pub fn set_components(&mut self, components: MigcComponents) {
        self.config.components = components;
        self.migc.components = components;
    }

    /// SHA-256 over the names and little-endian values of backbone parameters.
    pub fn backbone_hash(&self) -> String {
        self.hash_where(|name| BACKBONE_PREFIXES.iter().any(|p| name.starts_with(p)))
    }

    pub fn migc_hash(&self) -> String {
        self.hash_where(|name| name.starts_with(MIGC_PREFIX))
    }

    fn hash_where(&self, keep: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (_, p) in self.params.iter().filter(|(_, p)| keep(&p.name)) {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Record the denoiser on `g` for latent node `z:[3, H, W]`.
    pub fn predict_in(
        &self,
        g: &mut Graph,
        z: Var,
        t: usize,
        cond: &Conditioning,
        opts: ForwardOptions<'_>,
    ) -> Result<Prediction> {
        let prompt = self.vocab.embed(g, &cond.prompt)?;
        let ctx = if opts.migc {
            let (descs, boxes) = cond.instances();
            Some(LayoutContext::build(g, &self.vocab, &self.migc, &descs, &boxes, prompt)?)
        } else {
            None
        };
        let mut hook = MigcHook {
            migc: &self.migc,
            ctx,
            shuffle: opts.shuffle,
            trace: opts.trace,
            captured: None,
        };
        let eps = self.unet.forward(g, z, t, prompt, &mut hook)?;
        let loss_probs = hook.captured.expect("loss site visited");
        Ok(Prediction { eps, loss_probs })
    }

    /// `ε̂(z_t, t, cond)` with MIGC on or off.
    pub fn denoise_predict(&self, z_t: &Tensor, t: usize, cond: &Conditioning, migc: bool) -> Result<Tensor> {
        self.denoise_traced(z_t, t, cond, migc, None)
    }

    pub fn denoise_traced(
        &self,
        z_t: &Tensor,
        t: usize,
        cond: &Conditioning,
        migc: bool,
        trace: Option<&mut Vec<LayerTrace>>,
    ) -> Result<Tensor> {
        let r = self.config.resolution;
        z_t.expect_shape("denoise_predict", &[3, r, r])?;
        if t == 0 || t > self.schedule.timesteps() {
            return Err(CoreError::Request(format!("timestep {t} outside [1, {}]", self.schedule.timesteps())));
        }
        let mut g = Graph::new(&self.params);
        let z = g.input(z_t.clone());
        let opts = ForwardOptions {
            migc,
            shuffle: None,
            trace,
        };
        let p = self.predict_in(&mut g, z, t, cond, opts)?;
        Ok(g.value(p.eps).clone())
    }
}
