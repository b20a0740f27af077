//! Layout geometry, the multi-instance generation controller (MIGC) and a
//! toy text-conditioned diffusion backbone it plugs into.
//!
//! The backbone is a small pixel-space UNet. MIGC runs at its two
//! lowest-resolution attention sites: each instance is shaded separately by
//! masked cross-attention plus a trainable enhancement attention, the
//! background and a layout self-attention are shaded alongside, and the
//! shading aggregation controller blends them with per-pixel softmax weights.

pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod migc;
pub mod model;
pub mod request;
pub mod train;
pub mod unet;
pub mod vocab;

pub use config::{MigcComponents, ModelConfig};
pub use error::{CoreError, Result};
pub use geometry::{BoundingBox, Mask, MaskSet};
pub use model::{Conditioning, Model};
pub use request::{GenerationRequest, Instance};
pub use train::{Stage, StepLosses, TrainConfig, TrainingSample};
pub use vocab::{Color, Description, Shape};
