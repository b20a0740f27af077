//! Boxes, rasterized masks, the layout attention predicate and IoU.

use migc_tensor::{Tensor, MASKED};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Normalized `[x1, y1, x2, y2]` box. The all-zero box is the padding sentinel.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub const SENTINEL: BoundingBox = BoundingBox {
        x1: 0.0,
        y1: 0.0,
        x2: 0.0,
        y2: 0.0,
    };

    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let c = [x1, y1, x2, y2];
        if c.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(CoreError::InvalidBox(c, "coordinates must lie in [0, 1]"));
        }
        let b = Self { x1, y1, x2, y2 };
        if b.is_sentinel() {
            return Ok(b);
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(CoreError::InvalidBox(c, "need x1 < x2 and y1 < y2"));
        }
        Ok(b)
    }

    pub fn is_sentinel(&self) -> bool {
        self.coords() == [0.0; 4]
    }

    pub fn coords(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = CoreError;
    fn try_from(c: [f64; 4]) -> Result<Self> {
        Self::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        b.coords()
    }
}

/// Binary `H×W` grid, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            bits: vec![false; h * w],
        }
    }

    pub fn ones(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            bits: vec![true; h * w],
        }
    }

    pub fn from_bits(h: usize, w: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(CoreError::Resolution {
                expected: (h, w),
                got: (bits.len(), 1),
            });
        }
        Ok(Self { h, w, bits })
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.w + c] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// 0/1 values as a `[H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.h, self.w], self.to_f64()).expect("mask shape")
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as u8 as f64).collect()
    }

    pub fn complement(&self) -> Mask {
        Mask {
            h: self.h,
            w: self.w,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    fn check_same(&self, other: &Mask) -> Result<()> {
        if self.resolution() != other.resolution() {
            return Err(CoreError::Resolution {
                expected: self.resolution(),
                got: other.resolution(),
            });
        }
        Ok(())
    }
}

/// Pixel `(r, c)` is set iff its center `((c+½)/W, (r+½)/H)` lies in
/// `[x1, x2) × [y1, y2)`. The sentinel box yields an empty mask.
pub fn rasterize_mask(b: &BoundingBox, h: usize, w: usize) -> Result<Mask> {
    if h == 0 || w == 0 {
        return Err(CoreError::Resolution {
            expected: (1, 1),
            got: (h, w),
        });
    }
    // re-validate: fields are public
    let b = BoundingBox::new(b.x1, b.y1, b.x2, b.y2)?;
    let mut m = Mask::zeros(h, w);
    if b.is_sentinel() {
        return Ok(m);
    }
    for r in 0..h {
        let y = (r as f64 + 0.5) / h as f64;
        if y < b.y1 || y >= b.y2 {
            continue;
        }
        for c in 0..w {
            let x = (c as f64 + 0.5) / w as f64;
            if x >= b.x1 && x < b.x2 {
                m.set(r, c, true);
            }
        }
    }
    Ok(m)
}

/// `1 − max(masks)` at resolution `(h, w)`.
pub fn background_mask(masks: &[Mask], h: usize, w: usize) -> Result<Mask> {
    let mut bg = Mask::ones(h, w);
    for m in masks {
        bg.check_same(m)?;
        for (b, &v) in bg.bits.iter_mut().zip(&m.bits) {
            *b &= !v;
        }
    }
    Ok(bg)
}

/// Instance masks, their background complement and the all-ones layout mask,
/// all at one feature resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSet {
    pub instances: Vec<Mask>,
    pub background: Mask,
    pub layout: Mask,
}

impl MaskSet {
    pub fn from_boxes(boxes: &[BoundingBox], h: usize, w: usize) -> Result<Self> {
        let instances = boxes
            .iter()
            .map(|b| rasterize_mask(b, h, w))
            .collect::<Result<Vec<_>>>()?;
        Self::from_masks(instances, h, w)
    }

    pub fn from_masks(instances: Vec<Mask>, h: usize, w: usize) -> Result<Self> {
        let background = background_mask(&instances, h, w)?;
        Ok(Self {
            instances,
            background,
            layout: Mask::ones(h, w),
        })
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.layout.resolution()
    }

    /// The region set used by layout attention: background first, then instances.
    pub fn regions(&self) -> Vec<&Mask> {
        std::iter::once(&self.background).chain(&self.instances).collect()
    }
}

/// Pixel-pair pass/ban predicate over `HW × HW`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutAttentionMask {
    n: usize,
    pass: Vec<bool>,
}

impl LayoutAttentionMask {
    pub fn num_pixels(&self) -> usize {
        self.n
    }

    pub fn passes(&self, p: usize, q: usize) -> bool {
        self.pass[p * self.n + q]
    }

    /// Row-major `[HW, HW]` predicate, `true` = may attend.
    pub fn allowed(&self) -> &[bool] {
        &self.pass
    }

    /// Additive form: 0 where the pair passes, [`MASKED`] where it is banned.
    pub fn to_additive(&self) -> Tensor {
        let data = self.pass.iter().map(|&p| if p { 0.0 } else { MASKED }).collect();
        Tensor::new(&[self.n, self.n], data).expect("square mask")
    }
}

/// Pixels `p` and `q` may attend to each other iff some region contains both.
pub fn build_layout_attention_mask(regions: &[&Mask]) -> Result<LayoutAttentionMask> {
    let Some(first) = regions.first() else {
        return Err(CoreError::Request("layout attention needs at least one region".into()));
    };
    let n = first.len();
    let words = regions.len().div_ceil(64);
    let mut member = vec![0u64; n * words];
    for (k, m) in regions.iter().enumerate() {
        first.check_same(m)?;
        for (p, &b) in m.bits.iter().enumerate() {
            if b {
                member[p * words + k / 64] |= 1 << (k % 64);
            }
        }
    }
    let mut pass = vec![false; n * n];
    for p in 0..n {
        let mp = &member[p * words..(p + 1) * words];
        for q in 0..n {
            let mq = &member[q * words..(q + 1) * words];
            pass[p * n + q] = mp.iter().zip(mq).any(|(a, b)| a & b != 0);
        }
    }
    Ok(LayoutAttentionMask { n, pass })
}

/// Intersection over union of two `[x1, y1, x2, y2]` rectangles in any common
/// unit. Degenerate unions give 0.
pub fn iou_coords(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |r: [f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    iou_coords(a.coords(), b.coords())
}
