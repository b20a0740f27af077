//! Layout request files for `generate`.

use std::path::Path;

use migc_core::request::template_prompt;
use migc_core::{BoundingBox, Color, Description, GenerationRequest, Instance, Shape};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestInstance {
    /// `"<color> <shape>"`, or just the shape when `color` is given.
    pub desc: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    #[serde(default)]
    pub color: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutRequestFile {
    /// Global prompt; built from the instances when absent.
    #[serde(default)]
    pub prompt: Option<String>,
    pub instances: Vec<RequestInstance>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_cfg_scale")]
    pub cfg_scale: f64,
}

fn default_steps() -> usize {
    50
}

fn default_cfg_scale() -> f64 {
    7.5
}

fn bad(msg: String) -> CliError {
    CliError::Usage(format!("request: {msg}"))
}

impl RequestInstance {
    pub fn description(&self) -> Result<Description> {
        let words: Vec<&str> = self.desc.split_whitespace().collect();
        let (color, shape) = match (words.as_slice(), &self.color) {
            ([c, s], None) => (c.to_string(), s.to_string()),
            ([c, s], Some(given)) if c == given => (given.clone(), s.to_string()),
            ([c, _], Some(given)) => return Err(bad(format!("desc says '{c}' but color is '{given}'"))),
            ([s], Some(given)) => (given.clone(), s.to_string()),
            _ => return Err(bad(format!("cannot read description '{}'", self.desc))),
        };
        let color: Color = color.parse().map_err(|_| bad(format!("unknown color '{color}'")))?;
        let shape: Shape = shape.parse().map_err(|_| bad(format!("unknown shape '{shape}'")))?;
        Ok(Description::new(color, shape))
    }
}

impl LayoutRequestFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| bad(format!("{}: {e}", path.display())))
    }

    /// Validated generation request for the file's own seed.
    pub fn resolve(&self) -> Result<GenerationRequest> {
        let instances = self
            .instances
            .iter()
            .map(|i| {
                let [x1, y1, x2, y2] = i.bbox;
                Ok(Instance {
                    desc: i.description()?,
                    bbox: BoundingBox::new(x1, y1, x2, y2).map_err(|e| bad(e.to_string()))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let descs: Vec<Description> = instances.iter().map(|i| i.desc).collect();
        let req = GenerationRequest {
            prompt: self.prompt.clone().unwrap_or_else(|| template_prompt(&descs)),
            instances,
            seed: self.seed,
            steps: self.steps,
            cfg_scale: self.cfg_scale,
        };
        req.validate()?;
        Ok(req)
    }
}
