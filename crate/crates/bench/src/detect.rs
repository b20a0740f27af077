//! Oracle detector: color segmentation, 4-connected components and a
//! template-overlap shape test.

use std::collections::VecDeque;

use migc_core::{BoundingBox, Description, Mask};
use migc_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::color::{ColorRangeTable, BACKGROUND_GRAY};
use crate::error::{BenchError, Result};
use crate::render::{pixel, shape_mask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    /// Minimum component area as a fraction of the image.
    pub min_area_frac: f64,
    /// A component matches the target shape when its IoU with the shape
    /// drawn in the component's own box is at least `1 - shape_tolerance`.
    pub shape_tolerance: f64,
    /// A pixel counts as foreground when some channel is this far from the
    /// background gray.
    pub foreground_threshold: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            min_area_frac: 0.25 / 64.0,
            shape_tolerance: 0.15,
            foreground_threshold: 0.15,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.min_area_frac) || !unit(self.shape_tolerance) || !unit(self.foreground_threshold) {
            return Err(BenchError::Config("detector thresholds must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    /// Tight box of the component.
    pub bbox: BoundingBox,
    /// The connected component itself.
    pub component: Mask,
    /// Foreground pixels inside `bbox`, the segment handed to attribute checks.
    pub region: Mask,
}

fn dims(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        [3, h, w] if *h > 0 && *w > 0 => Ok((*h, *w)),
        s => Err(BenchError::Image(format!("expected [3, H, W], got {s:?}"))),
    }
}

pub fn color_mask(image: &Tensor, desc: &Description, ranges: &ColorRangeTable) -> Result<Mask> {
    let (h, w) = dims(image)?;
    let bits = (0..h * w).map(|p| ranges.contains(desc.color, pixel(image, p))).collect();
    Ok(Mask::from_bits(h, w, bits)?)
}

/// 4-connected components in raster order of their first pixel.
pub fn components(m: &Mask) -> Vec<Mask> {
    let (h, w) = m.resolution();
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if !m.bits()[start] || seen[start] {
            continue;
        }
        let mut comp = Mask::zeros(h, w);
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(p) = queue.pop_front() {
            let (y, x) = (p / w, p % w);
            comp.set(y, x, true);
            let mut push = |q: usize| {
                if m.bits()[q] && !seen[q] {
                    seen[q] = true;
                    queue.push_back(q);
                }
            };
            if x > 0 {
                push(p - 1);
            }
            if x + 1 < w {
                push(p + 1);
            }
            if y > 0 {
                push(p - w);
            }
            if y + 1 < h {
                push(p + w);
            }
        }
        out.push(comp);
    }
    out
}

/// Tight pixel box of a nonempty mask, normalized.
pub fn tight_box(m: &Mask) -> Option<BoundingBox> {
    let (h, w) = m.resolution();
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for (p, _) in m.bits().iter().enumerate().filter(|(_, &b)| b) {
        let (y, x) = (p / w, p % w);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x + 1);
        y1 = y1.max(y + 1);
    }
    (x1 > x0).then(|| {
        BoundingBox::new(x0 as f64 / w as f64, y0 as f64 / h as f64, x1 as f64 / w as f64, y1 as f64 / h as f64)
            .expect("pixel box is valid")
    })
}

fn is_foreground(rgb: [f64; 3], threshold: f64) -> bool {
    rgb.iter().any(|c| (c - BACKGROUND_GRAY).abs() > threshold)
}

fn mask_iou(a: &Mask, b: &Mask) -> f64 {
    let (mut inter, mut uni) = (0usize, 0usize);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += (x && y) as usize;
        uni += (x || y) as usize;
    }
    if uni == 0 {
        0.0
    } else {
        inter as f64 / uni as f64
    }
}

/// Components of the target color that are large enough and overlap the
/// target shape drawn in their own box.
pub fn detect_instances(
    image: &Tensor,
    target: &Description,
    ranges: &ColorRangeTable,
    cfg: &DetectorConfig,
) -> Result<Vec<Detection>> {
    let (h, w) = dims(image)?;
    let min_area = cfg.min_area_frac * (h * w) as f64;
    let mut out = Vec::new();
    for comp in components(&color_mask(image, target, ranges)?) {
        if (comp.count() as f64) < min_area {
            continue;
        }
        let bbox = tight_box(&comp).expect("component is nonempty");
        let frame = migc_core::geometry::rasterize_mask(&bbox, h, w)?;
        let template = shape_mask(target.shape, &bbox, h, w)?;
        if mask_iou(&comp, &template) < 1.0 - cfg.shape_tolerance {
            continue;
        }
        let bits = (0..h * w)
            .map(|p| frame.bits()[p] && is_foreground(pixel(image, p), cfg.foreground_threshold))
            .collect();
        out.push(Detection {
            bbox,
            component: comp,
            region: Mask::from_bits(h, w, bits)?,
        });
    }
    Ok(out)
}
