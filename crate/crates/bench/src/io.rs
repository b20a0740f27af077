//! PNG images, JSONL manifests and the metrics CSV.

use std::io::{BufRead, Write};
use std::path::Path;

use migc_tensor::Tensor;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{BenchError, Result};
use crate::eval::Metrics;

/// 8-bit RGB PNG of a `[3, H, W]` image in `[0, 1]`.
pub fn encode_png(image: &Tensor) -> Result<Vec<u8>> {
    let [3, h, w] = image.shape() else {
        return Err(BenchError::Image(format!("expected [3, H, W], got {:?}", image.shape())));
    };
    let (h, w) = (*h, *w);
    let hw = h * w;
    let d = image.data();
    let mut rgb = Vec::with_capacity(hw * 3);
    for p in 0..hw {
        for c in 0..3 {
            rgb.push((d[c * hw + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut wr = enc.write_header().map_err(|e| BenchError::Image(e.to_string()))?;
        wr.write_image_data(&rgb).map_err(|e| BenchError::Image(e.to_string()))?;
    }
    Ok(out)
}

pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode_png(image)?)?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<Tensor> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut dec = png::Decoder::new(file);
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| BenchError::Image(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| BenchError::Image("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| BenchError::Image(format!("{}: {e}", path.display())))?;
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        c => return Err(BenchError::Image(format!("unsupported color type {c:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let hw = h * w;
    let mut t = Tensor::zeros(&[3, h, w]);
    for p in 0..hw {
        for c in 0..3 {
            let src = if channels < 3 { 0 } else { c };
            t.data_mut()[c * hw + p] = buf[p * channels + src] as f64 / 255.0;
        }
    }
    Ok(t)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut f, r).map_err(|e| BenchError::Manifest { line: 0, msg: e.to_string() })?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| BenchError::Manifest {
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

pub const METRICS_HEADER: [&str; 5] = ["level", "n_images", "instance_success_rate", "miou", "R"];

/// CSV with one row per level and a final `all` row.
pub fn write_metrics_csv(w: impl Write, rows: &[(Option<usize>, Metrics)]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(METRICS_HEADER)?;
    for (level, m) in rows {
        wr.write_record([
            level.map_or("all".to_string(), |l| format!("L{l}")),
            m.n_images.to_string(),
            format!("{:.6}", m.instance_success_rate),
            format!("{:.6}", m.miou),
            format!("{:.6}", m.image_success_rate),
        ])?;
    }
    wr.flush()?;
    Ok(())
}
