//! Benchmark layouts, color assignment, prompts and the training corpus.

use migc_core::request::template_prompt;
use migc_core::{BoundingBox, Color, Description, Instance, Shape};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};
use crate::render::{render_ground_truth, Render};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSpec {
    /// Instance counts; level `i` has exactly `i` instances.
    pub levels: Vec<usize>,
    pub layouts_per_level: usize,
    pub seeds_per_layout: usize,
    pub palette: Vec<Color>,
    pub shapes: Vec<Shape>,
    /// Smallest and largest box side as a fraction of the image.
    pub min_side: f64,
    pub max_side: f64,
    pub resolution: usize,
    /// Source layouts carry up to this many extra instances before the
    /// largest `level` are kept.
    pub extra_source_instances: usize,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            levels: vec![2, 3, 4],
            layouts_per_level: 50,
            seeds_per_layout: 4,
            palette: Color::ALL.to_vec(),
            shapes: Shape::ALL.to_vec(),
            min_side: 0.125,
            max_side: 0.5,
            resolution: 32,
            extra_source_instances: 2,
            max_retries: 10_000,
            seed: 0,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BenchError::Config(m.into()));
        if self.levels.is_empty() || self.levels.iter().any(|l| !(2..=6).contains(l)) {
            return bad("levels must be a nonempty subset of 2..=6");
        }
        if self.layouts_per_level == 0 || self.seeds_per_layout == 0 {
            return bad("layouts_per_level and seeds_per_layout must be positive");
        }
        if self.palette.is_empty() || self.shapes.is_empty() {
            return bad("palette and shapes must be nonempty");
        }
        if !(0.0 < self.min_side && self.min_side <= self.max_side && self.max_side <= 1.0) {
            return bad("need 0 < min_side <= max_side <= 1");
        }
        if self.resolution == 0 || self.pixel_sides().0 > self.pixel_sides().1 {
            return bad("resolution too small for the side limits");
        }
        Ok(())
    }

    /// Side limits in whole pixels.
    pub fn pixel_sides(&self) -> (usize, usize) {
        let r = self.resolution as f64;
        ((self.min_side * r).ceil().max(1.0) as usize, (self.max_side * r).floor() as usize)
    }
}

/// Instance boxes and shapes of one layout, before colors are assigned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub level: usize,
    pub index: usize,
    pub boxes: Vec<BoundingBox>,
    pub shapes: Vec<Shape>,
}

/// Integer pixel box `[x0, y0, x1, y1)`.
type PixBox = [usize; 4];

fn random_pix_box(rng: &mut impl Rng, res: usize, lo: usize, hi: usize) -> PixBox {
    let w = rng.random_range(lo..=hi);
    let h = rng.random_range(lo..=hi);
    let x = rng.random_range(0..=res - w);
    let y = rng.random_range(0..=res - h);
    [x, y, x + w, y + h]
}

fn separated(a: &PixBox, b: &PixBox, gap: usize) -> bool {
    a[2] + gap <= b[0] || b[2] + gap <= a[0] || a[3] + gap <= b[1] || b[3] + gap <= a[1]
}

fn to_box(p: &PixBox, res: usize) -> BoundingBox {
    let r = res as f64;
    BoundingBox::new(p[0] as f64 / r, p[1] as f64 / r, p[2] as f64 / r, p[3] as f64 / r).expect("pixel box")
}

fn pix_iou(a: &PixBox, b: &PixBox) -> f64 {
    let f = |p: &PixBox| p.map(|v| v as f64);
    migc_core::geometry::iou_coords(f(a), f(b))
}

/// Place `n` boxes by rejection sampling; `ok` decides whether a candidate
/// may join the boxes placed so far.
fn place(
    n: usize,
    spec: &BenchmarkSpec,
    rng: &mut impl Rng,
    ok: impl Fn(&PixBox, &[PixBox]) -> bool,
) -> Result<Vec<PixBox>> {
    let (lo, hi) = spec.pixel_sides();
    let mut attempts = 0;
    let mut placed = Vec::with_capacity(n);
    while placed.len() < n {
        attempts += 1;
        if attempts > spec.max_retries {
            return Err(BenchError::Infeasible {
                level: n,
                retries: spec.max_retries,
            });
        }
        let c = random_pix_box(rng, spec.resolution, lo, hi);
        if ok(&c, &placed) {
            placed.push(c);
        }
    }
    Ok(placed)
}

/// `layouts_per_level` layouts of exactly `level` instances. Boxes are snapped
/// to the pixel grid and kept one pixel apart, so same-colored instances never
/// touch. Source layouts may hold extra instances; the largest `level` stay.
pub fn sample_layouts(spec: &BenchmarkSpec, level: usize, rng: &mut impl Rng) -> Result<Vec<Layout>> {
    spec.validate()?;
    if !(2..=6).contains(&level) {
        return Err(BenchError::Config(format!("level {level} outside 2..=6")));
    }
    (0..spec.layouts_per_level)
        .map(|index| {
            let n_src = level + rng.random_range(0..=spec.extra_source_instances);
            let boxes = match place(n_src, spec, rng, |c, placed| placed.iter().all(|p| separated(c, p, 1))) {
                Ok(b) => b,
                // crowded source layout: retry with exactly `level` boxes
                Err(_) => place(level, spec, rng, |c, placed| placed.iter().all(|p| separated(c, p, 1)))?,
            };
            let mut idx: Vec<usize> = (0..boxes.len()).collect();
            let area = |p: &PixBox| (p[2] - p[0]) * (p[3] - p[1]);
            idx.sort_by(|&a, &b| area(&boxes[b]).cmp(&area(&boxes[a])).then(a.cmp(&b)));
            idx.truncate(level);
            idx.sort_unstable();
            let shapes = idx.iter().map(|_| *spec.shapes.choose(rng).expect("nonempty")).collect();
            Ok(Layout {
                level,
                index,
                boxes: idx.iter().map(|&i| to_box(&boxes[i], spec.resolution)).collect(),
                shapes,
            })
        })
        .collect()
}

/// One palette color per instance, drawn independently.
pub fn assign_colors(layout: &Layout, palette: &[Color], rng: &mut impl Rng) -> Result<Vec<Instance>> {
    if palette.is_empty() {
        return Err(BenchError::Config("empty palette".into()));
    }
    Ok(layout
        .boxes
        .iter()
        .zip(&layout.shapes)
        .map(|(b, s)| Instance {
            desc: Description::new(*palette.choose(rng).expect("nonempty"), *s),
            bbox: *b,
        })
        .collect())
}

pub fn build_prompt(instances: &[Instance]) -> String {
    let d: Vec<Description> = instances.iter().map(|i| i.desc).collect();
    template_prompt(&d)
}

/// A colored benchmark layout, one manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchLayout {
    pub level: usize,
    pub layout: usize,
    pub prompt: String,
    pub instances: Vec<Instance>,
}

fn level_rng(seed: u64, level: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ level as u64)
}

/// All colored layouts of the benchmark, level by level.
pub fn build_benchmark(spec: &BenchmarkSpec) -> Result<Vec<BenchLayout>> {
    spec.validate()?;
    let mut out = Vec::new();
    for &level in &spec.levels {
        let mut rng = level_rng(spec.seed, level);
        for l in sample_layouts(spec, level, &mut rng)? {
            let instances = assign_colors(&l, &spec.palette, &mut rng)?;
            out.push(BenchLayout {
                level,
                layout: l.index,
                prompt: build_prompt(&instances),
                instances,
            });
        }
    }
    Ok(out)
}

/// Generation seeds used for every layout.
pub fn layout_seeds(spec: &BenchmarkSpec) -> Vec<u64> {
    (0..spec.seeds_per_layout as u64).map(|s| spec.seed + s).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub size: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Largest pairwise IoU between boxes of one image.
    pub max_overlap_iou: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            size: 5000,
            min_instances: 1,
            max_instances: 4,
            max_overlap_iou: 0.3,
            seed: 1,
        }
    }
}

/// Training image with its instances.
pub struct CorpusItem {
    pub instances: Vec<Instance>,
    pub render: Render,
}

/// Synthetic training images drawn with the benchmark's palette, shapes and
/// side limits. Boxes may overlap up to `max_overlap_iou`.
pub fn generate_corpus(corpus: &CorpusSpec, bench: &BenchmarkSpec) -> Result<Vec<CorpusItem>> {
    bench.validate()?;
    if corpus.min_instances == 0 || corpus.min_instances > corpus.max_instances {
        return Err(BenchError::Config("need 1 <= min_instances <= max_instances".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(corpus.seed);
    (0..corpus.size)
        .map(|_| {
            let n = rng.random_range(corpus.min_instances..=corpus.max_instances);
            let boxes = place(n, bench, &mut rng, |c, placed| {
                placed.iter().all(|p| pix_iou(c, p) <= corpus.max_overlap_iou)
            })?;
            let layout = Layout {
                level: n,
                index: 0,
                boxes: boxes.iter().map(|b| to_box(b, bench.resolution)).collect(),
                shapes: (0..n).map(|_| *bench.shapes.choose(&mut rng).expect("nonempty")).collect(),
            };
            let instances = assign_colors(&layout, &bench.palette, &mut rng)?;
            let render = render_ground_truth(&instances, bench.resolution)?;
            Ok(CorpusItem { instances, render })
        })
        .collect()
}
