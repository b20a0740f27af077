//! Position and attribute verdicts and the run-level metrics.

use std::collections::BTreeMap;

use migc_core::geometry::iou;
use migc_core::{BoundingBox, Color, Description, Instance, Mask};
use migc_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::color::ColorRangeTable;
use crate::detect::{detect_instances, DetectorConfig};
use crate::error::{BenchError, Result};
use crate::render::pixel;

/// Which detection stands for an instance when several are found.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    /// Highest IoU with the target box.
    #[default]
    MaxIou,
    /// Detection whose center is closest to the target box center.
    Closest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// IoU threshold t.
    pub iou_threshold: f64,
    /// Color fraction threshold S.
    pub color_threshold: f64,
    pub match_rule: MatchRule,
    pub detector: DetectorConfig,
    pub colors: ColorRangeTable,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            color_threshold: 0.2,
            match_rule: MatchRule::MaxIou,
            detector: DetectorConfig::default(),
            colors: ColorRangeTable::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(BenchError::Config("iou_threshold must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.color_threshold) {
            return Err(BenchError::Config("color_threshold must lie in [0, 1]".into()));
        }
        self.detector.validate()?;
        self.colors.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PositionVerdict {
    pub correct: bool,
    pub best_iou: f64,
    /// Index of the matched detection.
    pub matched: Option<usize>,
}

fn center(b: &BoundingBox) -> (f64, f64) {
    ((b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0)
}

pub fn position_eval(detections: &[BoundingBox], gt: &BoundingBox, t: f64, rule: MatchRule) -> PositionVerdict {
    let key = |b: &BoundingBox| match rule {
        MatchRule::MaxIou => iou(b, gt),
        MatchRule::Closest => {
            let ((x, y), (gx, gy)) = (center(b), center(gt));
            -((x - gx).powi(2) + (y - gy).powi(2))
        }
    };
    // first of equal keys wins
    let mut matched: Option<usize> = None;
    for (i, d) in detections.iter().enumerate() {
        if matched.is_none_or(|m| key(d) > key(&detections[m])) {
            matched = Some(i);
        }
    }
    let best_iou = matched.map_or(0.0, |m| iou(&detections[m], gt));
    PositionVerdict {
        correct: best_iou >= t,
        best_iou,
        matched,
    }
}

/// Fraction of `region` pixels inside the color's range, and whether it
/// reaches `s`. An empty region fails with fraction 0.
pub fn attribute_eval(image: &Tensor, region: &Mask, color: Color, ranges: &ColorRangeTable, s: f64) -> (bool, f64) {
    let n = region.count();
    if n == 0 {
        return (false, 0.0);
    }
    let hits = region
        .bits()
        .iter()
        .enumerate()
        .filter(|(p, &b)| b && ranges.contains(color, pixel(image, *p)))
        .count();
    let frac = hits as f64 / n as f64;
    (frac >= s, frac)
}

/// Verdict for one instance of one generated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub level: usize,
    pub layout: usize,
    pub seed: u64,
    pub instance: usize,
    pub desc: Description,
    pub gt_box: BoundingBox,
    pub best_iou: f64,
    pub position_correct: bool,
    /// Color fraction of the matched detection's segment.
    pub color_fraction: f64,
    pub color_correct: bool,
    pub fully_correct: bool,
}

impl EvalRecord {
    /// IoU counted toward mIoU: zero when the color is wrong.
    pub fn miou_term(&self) -> f64 {
        if self.color_correct {
            self.best_iou
        } else {
            0.0
        }
    }
}

/// Identifies the image a record belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ImageKey {
    pub level: usize,
    pub layout: usize,
    pub seed: u64,
}

/// Evaluate every instance of `instances` against `image`.
pub fn evaluate_image(image: &Tensor, instances: &[Instance], key: ImageKey, cfg: &EvalConfig) -> Result<Vec<EvalRecord>> {
    instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let dets = detect_instances(image, &inst.desc, &cfg.colors, &cfg.detector)?;
            let boxes: Vec<BoundingBox> = dets.iter().map(|d| d.bbox).collect();
            let pos = position_eval(&boxes, &inst.bbox, cfg.iou_threshold, cfg.match_rule);
            let (color_correct, color_fraction) = match pos.matched {
                Some(m) => attribute_eval(image, &dets[m].region, inst.desc.color, &cfg.colors, cfg.color_threshold),
                None => (false, 0.0),
            };
            Ok(EvalRecord {
                level: key.level,
                layout: key.layout,
                seed: key.seed,
                instance: i,
                desc: inst.desc,
                gt_box: inst.bbox,
                best_iou: pos.best_iou,
                position_correct: pos.correct,
                color_fraction,
                color_correct,
                fully_correct: pos.correct && color_correct,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n_images: usize,
    pub n_instances: usize,
    pub instance_success_rate: f64,
    pub miou: f64,
    /// Share of images whose instances are all position-correct.
    pub image_success_rate: f64,
}

/// Metrics over `records`. Sums run in sorted record order, so the result
/// does not depend on the order records arrive in.
pub fn compute_metrics(records: &[EvalRecord]) -> Result<Metrics> {
    if records.is_empty() {
        return Err(BenchError::Empty);
    }
    let mut sorted: Vec<&EvalRecord> = records.iter().collect();
    sorted.sort_by_key(|r| (r.level, r.layout, r.seed, r.instance));
    let n = sorted.len() as f64;
    let isr = sorted.iter().filter(|r| r.fully_correct).count() as f64 / n;
    let miou = sorted.iter().map(|r| r.miou_term()).sum::<f64>() / n;
    let mut images: BTreeMap<ImageKey, bool> = BTreeMap::new();
    for r in &sorted {
        let key = ImageKey {
            level: r.level,
            layout: r.layout,
            seed: r.seed,
        };
        *images.entry(key).or_insert(true) &= r.position_correct;
    }
    let ok = images.values().filter(|&&v| v).count() as f64;
    Ok(Metrics {
        n_images: images.len(),
        n_instances: sorted.len(),
        instance_success_rate: isr,
        miou,
        image_success_rate: ok / images.len() as f64,
    })
}

/// Metrics per level, then over all records (level `None`).
pub fn metrics_by_level(records: &[EvalRecord]) -> Result<Vec<(Option<usize>, Metrics)>> {
    let mut levels: BTreeMap<usize, Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        levels.entry(r.level).or_default().push(r.clone());
    }
    let mut out = Vec::new();
    for (l, rs) in &levels {
        out.push((Some(*l), compute_metrics(rs)?));
    }
    out.push((None, compute_metrics(records)?));
    Ok(out)
}
