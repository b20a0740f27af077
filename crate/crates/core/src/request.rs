//! Generation requests: global prompt, instance boxes and descriptions, and
//! sampler settings.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::geometry::BoundingBox;
use crate::vocab::Description;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub desc: Description,
    pub bbox: BoundingBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub instances: Vec<Instance>,
    pub seed: u64,
    pub steps: usize,
    pub cfg_scale: f64,
}

impl GenerationRequest {
    /// Request whose prompt is the template expansion of its instances.
    pub fn from_instances(instances: Vec<Instance>, seed: u64, steps: usize, cfg_scale: f64) -> Self {
        let descs: Vec<Description> = instances.iter().map(|i| i.desc).collect();
        Self {
            prompt: template_prompt(&descs),
            instances,
            seed,
            steps,
            cfg_scale,
        }
    }

    pub fn descriptions(&self) -> Vec<Description> {
        self.instances.iter().map(|i| i.desc).collect()
    }

    pub fn boxes(&self) -> Vec<BoundingBox> {
        self.instances.iter().map(|i| i.bbox).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(CoreError::Request("steps must be positive".into()));
        }
        if !self.cfg_scale.is_finite() || self.cfg_scale < 0.0 {
            return Err(CoreError::Request(format!("cfg_scale {} must be finite and >= 0", self.cfg_scale)));
        }
        for inst in &self.instances {
            let b = inst.bbox;
            BoundingBox::new(b.x1, b.y1, b.x2, b.y2)?;
            if b.is_sentinel() {
                return Err(CoreError::Request(format!("instance '{}' has the padding box", inst.desc)));
            }
        }
        parse_prompt(&self.prompt)?;
        Ok(())
    }

    /// Descriptions encoded by the global prompt.
    pub fn prompt_descriptions(&self) -> Result<Vec<Description>> {
        parse_prompt(&self.prompt)
    }
}

/// `"a red circle"`, `"a red circle and a blue square"`, and so on with one
/// `and` between consecutive instances.
pub fn template_prompt(descs: &[Description]) -> String {
    descs.iter().map(|d| format!("a {d}")).collect::<Vec<_>>().join(" and ")
}

/// Inverse of [`template_prompt`]. The empty prompt has no descriptions.
pub fn parse_prompt(prompt: &str) -> Result<Vec<Description>> {
    let p = prompt.trim();
    if p.is_empty() {
        return Ok(Vec::new());
    }
    let bad = || CoreError::Request(format!("prompt {prompt:?} does not follow 'a <color> <shape> and a <color> <shape> ...'"));
    p.split(" and ")
        .map(|s| {
            let s = s.trim().strip_prefix("a ").ok_or_else(bad)?;
            s.parse::<Description>().map_err(|_| bad())
        })
        .collect()
}
