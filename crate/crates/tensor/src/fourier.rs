//! Sinusoidal embedding of normalized box coordinates.

use std::f64::consts::PI;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct FourierSpec {
    pub frequencies: Vec<f64>,
}

impl Default for FourierSpec {
    /// Eight bands on the geometric ladder `1, 2, 4, …, 128`.
    fn default() -> Self {
        Self::geometric(8)
    }
}

impl FourierSpec {
    pub fn geometric(bands: usize) -> Self {
        Self {
            frequencies: (0..bands).map(|j| (1u64 << j) as f64).collect(),
        }
    }

    pub fn bands(&self) -> usize {
        self.frequencies.len()
    }

    /// Embedding length for a 4-coordinate box.
    pub fn output_len(&self) -> usize {
        4 * 2 * self.bands()
    }
}

/// Embed `[x1, y1, x2, y2]`: for each coordinate `c` and band frequency `f`,
/// emits `sin(f·π·c), cos(f·π·c)`.
pub fn fourier_embed(coords: [f64; 4], spec: &FourierSpec) -> Result<Tensor> {
    if spec.frequencies.is_empty() {
        return Err(TensorError::Invalid {
            op: "fourier_embed",
            msg: "no frequency bands".into(),
        });
    }
    if let Some(c) = coords.iter().find(|c| !(0.0..=1.0).contains(*c)) {
        return Err(TensorError::Invalid {
            op: "fourier_embed",
            msg: format!("coordinate {c} outside [0, 1]"),
        });
    }
    let mut out = Vec::with_capacity(spec.output_len());
    for c in coords {
        for &f in &spec.frequencies {
            let a = f * PI * c;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    Tensor::new(&[out.len()], out)
}
