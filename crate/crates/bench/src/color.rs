//! HSV conversion and per-color acceptance ranges.

use std::collections::BTreeMap;

use migc_core::Color;
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};

/// Hexcone conversion of an RGB triple in `[0, 1]` to `(h°, s, v)`, with
/// `h ∈ [0, 360)`. Achromatic pixels get hue 0.
pub fn rgb_to_hsv(rgb: [f64; 3]) -> (f64, f64, f64) {
    let [r, g, b] = rgb;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let v = max;
    let s = if max > 0.0 { d / max } else { 0.0 };
    if d == 0.0 {
        return (0.0, s, v);
    }
    let h = if max == r {
        60.0 * ((g - b) / d)
    } else if max == g {
        60.0 * ((b - r) / d) + 120.0
    } else {
        60.0 * ((r - g) / d) + 240.0
    };
    let h = h.rem_euclid(360.0);
    (if h >= 360.0 { 0.0 } else { h }, s, v)
}

/// Accepted region of HSV space. Intervals are `[lo, hi)`, except that an
/// upper bound at the top of its axis (360° or 1) is inclusive. An empty hue
/// list accepts any hue.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorRange {
    #[serde(default)]
    pub hue: Vec<[f64; 2]>,
    pub sat: [f64; 2],
    pub val: [f64; 2],
}

fn within(x: f64, [lo, hi]: [f64; 2], top: f64) -> bool {
    x >= lo && (x < hi || (hi >= top && x <= top))
}

impl ColorRange {
    pub fn contains(&self, (h, s, v): (f64, f64, f64)) -> bool {
        (self.hue.is_empty() || self.hue.iter().any(|&r| within(h, r, 360.0)))
            && within(s, self.sat, 1.0)
            && within(v, self.val, 1.0)
    }

    fn validate(&self, c: Color) -> Result<()> {
        let ok = |[lo, hi]: [f64; 2], top: f64| 0.0 <= lo && lo < hi && hi <= top;
        if !self.hue.iter().all(|&r| ok(r, 360.0)) || !ok(self.sat, 1.0) || !ok(self.val, 1.0) {
            return Err(BenchError::Config(format!("color range for {} is out of bounds", c.name())));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ColorRangeTable {
    pub ranges: BTreeMap<Color, ColorRange>,
}

impl Default for ColorRangeTable {
    fn default() -> Self {
        let chroma = |hue: Vec<[f64; 2]>| ColorRange {
            hue,
            sat: [0.4, 1.0],
            val: [0.3, 1.0],
        };
        let ranges = BTreeMap::from([
            (Color::Red, chroma(vec![[0.0, 15.0], [345.0, 360.0]])),
            (Color::Yellow, chroma(vec![[45.0, 70.0]])),
            (Color::Green, chroma(vec![[90.0, 150.0]])),
            (Color::Blue, chroma(vec![[200.0, 260.0]])),
            (
                Color::Brown,
                ColorRange {
                    hue: vec![[10.0, 40.0]],
                    sat: [0.3, 1.0],
                    val: [0.2, 0.7],
                },
            ),
            (
                Color::White,
                ColorRange {
                    hue: vec![],
                    sat: [0.0, 0.2],
                    val: [0.85, 1.0],
                },
            ),
            (
                Color::Black,
                ColorRange {
                    hue: vec![],
                    sat: [0.0, 1.0],
                    val: [0.0, 0.15],
                },
            ),
        ]);
        Self { ranges }
    }
}

impl ColorRangeTable {
    pub fn validate(&self) -> Result<()> {
        for c in Color::ALL {
            self.ranges
                .get(&c)
                .ok_or_else(|| BenchError::Config(format!("no color range for {}", c.name())))?
                .validate(c)?;
        }
        Ok(())
    }

    pub fn contains(&self, c: Color, rgb: [f64; 3]) -> bool {
        self.ranges.get(&c).is_some_and(|r| r.contains(rgb_to_hsv(rgb)))
    }
}

/// Fill color used by the ground-truth renderer.
pub fn palette_rgb(c: Color) -> [f64; 3] {
    match c {
        Color::Red => [0.9, 0.1, 0.1],
        Color::Yellow => [0.95, 0.85, 0.1],
        Color::Green => [0.1, 0.75, 0.2],
        Color::Blue => [0.15, 0.3, 0.9],
        Color::White => [0.97, 0.97, 0.97],
        Color::Black => [0.05, 0.05, 0.05],
        Color::Brown => [0.55, 0.3, 0.1],
    }
}

pub const BACKGROUND_GRAY: f64 = 0.5;
