use std::path::Path;

use serde_json::json;
use st_mtl::autodiff::{Graph, Tensor};
use st_mtl::data::{encode_pgm, encode_ppm, read_manifest, read_sample};
use st_mtl::trainer::{PreparedSample, ATTENTION_TOLERANCE};
use st_mtl::{Error, Result};

use crate::commands::restore;

/// Class-query row of the moving class; row 0 is background.
const MOVING_CLASS: usize = 1;

/// Bilinearly upscales a coarse `[h·w]` map and min-max normalises it to bytes.
fn to_image(row: &[f64], grid: (usize, usize), image: (usize, usize)) -> Result<Vec<u8>> {
    let mut g = Graph::inference();
    let v = g.constant(&Tensor::new(&[1, grid.0, grid.1], row.to_vec())?);
    let up = g.upsample_bilinear(v, image.0, image.1)?;
    let vals = g.value(up);
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Ok(vals
        .iter()
        .map(|v| if span > 0.0 { ((v - lo) / span * 255.0).round() as u8 } else { 0 })
        .collect())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn overlay(frame: &Tensor, mask: Option<&[usize]>, boxes: &[[f64; 4]]) -> Tensor {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let plane = h * w;
    let mut out = frame.clone();
    let d = out.data_mut();
    if let Some(m) = mask {
        for (p, &c) in m.iter().enumerate() {
            if c == 1 {
                d[p] *= 0.5;
                d[plane + p] = 0.5 * d[plane + p] + 0.5;
                d[2 * plane + p] *= 0.5;
            }
        }
    }
    for b in boxes {
        let x0 = ((b[0] - b[2] / 2.0) * w as f64).round().clamp(0.0, w as f64 - 1.0) as usize;
        let x1 = ((b[0] + b[2] / 2.0) * w as f64).round().clamp(1.0, w as f64) as usize - 1;
        let y0 = ((b[1] - b[3] / 2.0) * h as f64).round().clamp(0.0, h as f64 - 1.0) as usize;
        let y1 = ((b[1] + b[3] / 2.0) * h as f64).round().clamp(1.0, h as f64) as usize - 1;
        let mut paint = |x: usize, y: usize| {
            let p = y * w + x;
            d[p] = 1.0;
            d[plane + p] = 0.0;
            d[2 * plane + p] = 0.0;
        };
        for x in x0..=x1.max(x0) {
            paint(x, y0);
            paint(x, y1.max(y0));
        }
        for y in y0..=y1.max(y0) {
            paint(x0, y);
            paint(x1.max(x0), y);
        }
    }
    out
}

pub fn viz_attn(checkpoint: &Path, sample: &str, out: &Path, data: Option<&Path>) -> Result<()> {
    let (ck, trainer) = restore(checkpoint, None)?;
    let dir = match data {
        Some(d) => d.to_path_buf(),
        None if !ck.config.dataset.is_empty() => ck.config.dataset.clone().into(),
        None => return Err(Error::Config("dataset: no --data given and the checkpoint names none".into())),
    };
    let manifest = read_manifest(&dir)?;
    if !manifest.samples.iter().any(|s| s == sample) {
        return Err(Error::Data(format!("sample {sample} not found in {}", dir.display())));
    }
    let raw = read_sample(&dir, sample, manifest.frames)?;
    let prepared = PreparedSample::new(&raw, &trainer.config)?;
    let pred = trainer.predict(&prepared)?;
    let err = pred.attention.max_row_sum_error();
    if err > ATTENTION_TOLERANCE {
        return Err(Error::Numeric(format!("attention rows deviate from 1 by {err:e}")));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg = trainer.model.config.clone();
    let grid = cfg.grid();
    let image = (cfg.image_h, cfg.image_w);
    let mut files = Vec::new();
    let mut top_query = None;
    if let Some(det) = &pred.attention.det {
        let (best, _) = pred
            .boxes
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, b)| if b.moving_prob() > acc.1 { (i, b.moving_prob()) } else { acc });
        let name = "det_top_query.pgm";
        write(&out.join(name), &encode_pgm(&to_image(det.row(best), grid, image)?, image.0, image.1))?;
        files.push(name.to_string());
        top_query = Some(best);
    }
    if let Some(seg) = &pred.attention.seg {
        for (class, name) in [(0, "class_background.pgm"), (MOVING_CLASS, "class_moving.pgm")] {
            write(&out.join(name), &encode_pgm(&to_image(seg.row(class), grid, image)?, image.0, image.1))?;
            files.push(name.to_string());
        }
    }
    let boxes: Vec<[f64; 4]> = pred
        .boxes
        .iter()
        .filter(|b| b.moving_prob() >= 0.5)
        .map(|b| b.bbox.to_array())
        .collect();
    let mask = pred.mask();
    let frame = prepared.frames.last().expect("at least one frame");
    write(&out.join("overlay.ppm"), &encode_ppm(&overlay(frame, mask.as_deref(), &boxes)))?;
    files.push("overlay.ppm".into());
    println!(
        "{}",
        json!({
            "sample": sample,
            "files": files,
            "top_query": top_query,
            "detections": boxes.len(),
            "max_row_sum_error": err,
        })
    );
    Ok(())
}
