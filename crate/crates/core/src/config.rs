use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Which MIGC sub-modules are active. Disabling one gives the matching
/// ablation variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MigcComponents {
    pub enhancement: bool,
    pub layout_attention: bool,
    pub sac: bool,
}

impl Default for MigcComponents {
    fn default() -> Self {
        Self {
            enhancement: true,
            layout_attention: true,
            sac: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Square image side in pixels.
    pub resolution: usize,
    /// Feature channels at the three UNet levels (full, 1/2, 1/4 resolution).
    pub channels: [usize; 3],
    pub groups: usize,
    pub time_dim: usize,
    /// Text token width.
    pub text_dim: usize,
    pub head_dim: usize,
    /// Largest instance count the SAC channel budget admits.
    pub max_num: usize,
    pub fourier_bands: usize,
    /// Hidden width of the position MLP as a multiple of `text_dim`.
    pub pos_hidden_mult: usize,
    pub sac_hidden: usize,
    pub cbam_reduction: usize,
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sample_steps: usize,
    /// MIGC-active sampler steps; `None` means the first half, rounded up.
    pub migc_steps: Option<usize>,
    pub cfg_scale: f64,
    /// Unconditional CFG branch skips MIGC (null layout).
    pub uncond_bypasses_migc: bool,
    pub components: MigcComponents,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            channels: [16, 32, 64],
            groups: 8,
            time_dim: 64,
            text_dim: 32,
            head_dim: 32,
            max_num: 8,
            fourier_bands: 8,
            pos_hidden_mult: 4,
            sac_hidden: 16,
            cbam_reduction: 4,
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sample_steps: 50,
            migc_steps: None,
            cfg_scale: 7.5,
            uncond_bypasses_migc: true,
            components: MigcComponents::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.resolution == 0 || self.resolution % 4 != 0 {
            return bad(format!("resolution {} must be a positive multiple of 4", self.resolution));
        }
        for c in self.channels {
            if c == 0 || self.groups == 0 || c % self.groups != 0 {
                return bad(format!("channels {:?} must be multiples of groups {}", self.channels, self.groups));
            }
        }
        if self.time_dim == 0 || self.time_dim % 2 != 0 {
            return bad("time_dim must be even and positive".into());
        }
        if self.text_dim == 0 || self.head_dim == 0 || self.sac_hidden == 0 || self.fourier_bands == 0 {
            return bad("text_dim, head_dim, sac_hidden and fourier_bands must be positive".into());
        }
        if self.max_num == 0 {
            return bad("max_num must be positive".into());
        }
        if self.timesteps < 2 || !(0.0 < self.beta_start && self.beta_start < self.beta_end && self.beta_end < 1.0) {
            return bad("need timesteps >= 2 and 0 < beta_start < beta_end < 1".into());
        }
        if self.sample_steps == 0 || self.sample_steps > self.timesteps {
            return bad(format!("sample_steps must lie in [1, {}]", self.timesteps));
        }
        if let Some(m) = self.migc_steps {
            if m > self.sample_steps {
                return bad("migc_steps cannot exceed sample_steps".into());
            }
        }
        if !self.cfg_scale.is_finite() || self.cfg_scale < 0.0 {
            return bad("cfg_scale must be finite and >= 0".into());
        }
        Ok(())
    }

    pub fn migc_steps_for(&self, steps: usize) -> usize {
        match self.migc_steps {
            Some(m) => m.min(steps),
            None => steps.div_ceil(2),
        }
    }
}
