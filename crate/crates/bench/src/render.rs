//! Ground-truth renders: flat-colored shapes filling their boxes over gray.

use migc_core::geometry::rasterize_mask;
use migc_core::{BoundingBox, Instance, Mask, Shape};
use migc_tensor::Tensor;

use crate::color::{palette_rgb, BACKGROUND_GRAY};
use crate::error::Result;

/// Pixels of `shape` inscribed in `bbox` on an `h × w` grid. Every shape
/// touches all four sides of the box's pixel extent.
pub fn shape_mask(shape: Shape, bbox: &BoundingBox, h: usize, w: usize) -> Result<Mask> {
    let frame = rasterize_mask(bbox, h, w)?;
    let mut m = frame.clone();
    let bw = bbox.width() * w as f64;
    let bh = bbox.height() * h as f64;
    for y in 0..h {
        for x in 0..w {
            if !m.get(y, x) {
                continue;
            }
            let u = ((x as f64 + 0.5) / w as f64 - bbox.x1) / bbox.width();
            let v = ((y as f64 + 0.5) / h as f64 - bbox.y1) / bbox.height();
            let inside = match shape {
                Shape::Square => true,
                Shape::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
                // apex at the top; widened by half a pixel so the apex row is never empty
                Shape::Triangle => (u - 0.5).abs() <= v / 2.0 + 0.5 / bw,
                // arms at least one pixel wide in boxes under 3 px
                Shape::Cross => {
                    (u - 0.5).abs() <= (1.0 / 6.0f64).max(0.5 / bw) || (v - 0.5).abs() <= (1.0 / 6.0f64).max(0.5 / bh)
                }
            };
            m.set(y, x, inside);
        }
    }
    touch_edges(&mut m, &frame);
    Ok(m)
}

/// Thin boxes can leave an edge row or column of the frame empty; light its
/// pixel(s) nearest the center line.
fn touch_edges(m: &mut Mask, frame: &Mask) {
    let (h, w) = frame.resolution();
    let rows: Vec<usize> = (0..h).filter(|&y| (0..w).any(|x| frame.get(y, x))).collect();
    let cols: Vec<usize> = (0..w).filter(|&x| (0..h).any(|y| frame.get(y, x))).collect();
    let (Some(&y0), Some(&y1), Some(&x0), Some(&x1)) = (rows.first(), rows.last(), cols.first(), cols.last()) else {
        return;
    };
    let center = |lo: usize, hi: usize| [(lo + hi) / 2, (lo + hi).div_ceil(2)];
    for y in [y0, y1] {
        if !(x0..=x1).any(|x| m.get(y, x)) {
            center(x0, x1).into_iter().for_each(|x| m.set(y, x, true));
        }
    }
    for x in [x0, x1] {
        if !(y0..=y1).any(|y| m.get(y, x)) {
            center(y0, y1).into_iter().for_each(|y| m.set(y, x, true));
        }
    }
}

pub struct Render {
    /// `[3, res, res]` in `[0, 1]`.
    pub image: Tensor,
    /// Visible pixels of each instance after occlusion by later ones.
    pub regions: Vec<Mask>,
}

/// Draw instances in order; later ones cover earlier ones.
pub fn render_ground_truth(instances: &[Instance], res: usize) -> Result<Render> {
    let hw = res * res;
    let mut owner: Vec<Option<usize>> = vec![None; hw];
    for (k, inst) in instances.iter().enumerate() {
        let m = shape_mask(inst.desc.shape, &inst.bbox, res, res)?;
        for (p, &on) in m.bits().iter().enumerate() {
            if on {
                owner[p] = Some(k);
            }
        }
    }
    let mut image = Tensor::full(&[3, res, res], BACKGROUND_GRAY);
    let mut regions = vec![Mask::zeros(res, res); instances.len()];
    for (p, o) in owner.iter().enumerate() {
        if let Some(k) = *o {
            let rgb = palette_rgb(instances[k].desc.color);
            for c in 0..3 {
                image.data_mut()[c * hw + p] = rgb[c];
            }
            regions[k].set(p / res, p % res, true);
        }
    }
    Ok(Render { image, regions })
}

/// RGB triple of pixel `p` of a `[3, H, W]` image.
pub fn pixel(image: &Tensor, p: usize) -> [f64; 3] {
    let hw = image.numel() / 3;
    let d = image.data();
    [d[p], d[hw + p], d[2 * hw + p]]
}
