//! Synthetic moving-shapes clips with exact boxes, motion masks and flow,
//! plus their on-disk format.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::Tensor;
use crate::backbone::difference_flow;
use crate::error::{Error, Result};
use crate::geometry::BBox;

const MAX_PLACEMENT_TRIES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub movers: usize,
    pub distractors: usize,
    /// Object extent range in pixels (rectangle sides, circle diameters).
    pub min_size: usize,
    pub max_size: usize,
    /// Per-axis speed bound in pixels per frame.
    pub max_speed: i64,
    pub noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            frames: 2,
            movers: 2,
            distractors: 1,
            min_size: 12,
            max_size: 20,
            max_speed: 3,
            noise: 0.05,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return bad("scene needs at least one frame and a nonzero size".into());
        }
        if self.movers > 3 || self.distractors > 3 {
            return bad(format!(
                "scene supports up to 3 movers and 3 static objects, got {} and {}",
                self.movers, self.distractors
            ));
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return bad(format!("invalid size range {}..={}", self.min_size, self.max_size));
        }
        if self.max_speed < 1 && self.movers > 0 {
            return bad("max_speed must be at least 1 when movers are present".into());
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Rectangle,
    Circle,
}

/// One rendered object. `x`, `y` are the top-left of its extent at frame 0.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub kind: ShapeKind,
    pub x: i64,
    pub y: i64,
    /// Rectangle width/height; circles use `w` as the diameter.
    pub w: i64,
    pub h: i64,
    pub vx: i64,
    pub vy: i64,
    pub colour: [f64; 3],
}

impl SceneObject {
    pub fn is_moving(&self) -> bool {
        self.vx != 0 || self.vy != 0
    }

    /// Pixels `(x, y)` covered at frame `t`.
    pub fn pixels(&self, t: usize) -> Vec<(i64, i64)> {
        let (ox, oy) = (self.x + self.vx * t as i64, self.y + self.vy * t as i64);
        let mut out = Vec::new();
        match self.kind {
            ShapeKind::Rectangle => {
                for y in oy..oy + self.h {
                    for x in ox..ox + self.w {
                        out.push((x, y));
                    }
                }
            }
            ShapeKind::Circle => {
                let r = self.w as f64 / 2.0;
                let (cx, cy) = (ox as f64 + r, oy as f64 + r);
                for y in oy..oy + self.w {
                    for x in ox..ox + self.w {
                        let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                        if dx * dx + dy * dy <= r * r {
                            out.push((x, y));
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoSample {
    pub id: String,
    /// `T` frames `[3×H×W]`, 8-bit quantised values in `[0, 1]`.
    pub frames: Vec<Tensor>,
    /// `T−1` forward flows `[2×H×W]`; flow `t` maps frame `t` to `t+1`.
    pub flows: Vec<Tensor>,
    /// Last-frame boxes of moving objects.
    pub boxes: Vec<BBox>,
    /// Last-frame motion mask, 0 background and 1 moving.
    pub mask: Vec<usize>,
    pub height: usize,
    pub width: usize,
}

/// Per-sample seed from the dataset seed and sample index (splitmix64).
pub fn sample_seed(global: u64, index: u64) -> u64 {
    let mut z = global
        .wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn texture(seed: u64, x: i64, y: i64) -> f64 {
    let h = sample_seed(seed, ((x as u64) << 32) ^ (y as u64 & 0xFFFF_FFFF));
    (h >> 11) as f64 / (1u64 << 53) as f64 - 0.5
}

fn quantise(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Renders explicit objects; movers are those with nonzero velocity.
pub fn render_scene(spec: &SceneSpec, objects: &[SceneObject], seed: u64, id: &str) -> Result<VideoSample> {
    let (h, w, t_len) = (spec.height, spec.width, spec.frames);
    let plane = h * w;
    let inside = |(x, y): (i64, i64)| x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h;
    let bg_seed = seed ^ 0xB6;
    let bg_level = 0.15;
    let mut frames = Vec::with_capacity(t_len);
    let mut owner_per_frame = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut owner: Vec<Option<usize>> = vec![None; plane];
        let mut data = vec![0.0; 3 * plane];
        for y in 0..h {
            for x in 0..w {
                let n = spec.noise * texture(bg_seed, x as i64, y as i64);
                for c in 0..3 {
                    data[c * plane + y * w + x] = bg_level + n;
                }
            }
        }
        for (k, obj) in objects.iter().enumerate() {
            let (ox, oy) = (obj.x + obj.vx * t as i64, obj.y + obj.vy * t as i64);
            for (x, y) in obj.pixels(t) {
                if !inside((x, y)) {
                    return Err(Error::Generation(format!("object {k} leaves the frame at step {t}")));
                }
                let p = y as usize * w + x as usize;
                if owner[p].is_some() {
                    return Err(Error::Generation(format!("object {k} overlaps another at step {t}")));
                }
                owner[p] = Some(k);
                let n = spec.noise * texture(seed ^ (k as u64 + 1), x - ox, y - oy);
                for c in 0..3 {
                    data[c * plane + p] = obj.colour[c] + n;
                }
            }
        }
        data.iter_mut().for_each(|v| *v = quantise(*v));
        frames.push(Tensor::new(&[3, h, w], data)?);
        owner_per_frame.push(owner);
    }
    let mut flows = Vec::with_capacity(t_len.saturating_sub(1));
    for owner in owner_per_frame.iter().take(t_len.saturating_sub(1)) {
        let mut data = vec![0.0; 2 * plane];
        for (p, o) in owner.iter().enumerate() {
            if let Some(k) = o {
                data[p] = objects[*k].vx as f64;
                data[plane + p] = objects[*k].vy as f64;
            }
        }
        flows.push(Tensor::new(&[2, h, w], data)?);
    }
    let last = t_len - 1;
    let mut mask = vec![0usize; plane];
    let mut boxes = Vec::new();
    for (k, obj) in objects.iter().enumerate() {
        if !obj.is_moving() {
            continue;
        }
        let px = obj.pixels(last);
        let x0 = px.iter().map(|p| p.0).min().unwrap_or(0);
        let x1 = px.iter().map(|p| p.0).max().unwrap_or(-1) + 1;
        let y0 = px.iter().map(|p| p.1).min().unwrap_or(0);
        let y1 = px.iter().map(|p| p.1).max().unwrap_or(-1) + 1;
        for &(x, y) in &px {
            debug_assert_eq!(owner_per_frame[last][y as usize * w + x as usize], Some(k));
            mask[y as usize * w + x as usize] = 1;
        }
        boxes.push(BBox::from_corners(
            x0 as f64 / w as f64,
            y0 as f64 / h as f64,
            x1 as f64 / w as f64,
            y1 as f64 / h as f64,
        ));
    }
    Ok(VideoSample {
        id: id.to_string(),
        frames,
        flows,
        boxes,
        mask,
        height: h,
        width: w,
    })
}

fn overlaps(a: &SceneObject, b: &SceneObject, frames: usize) -> bool {
    (0..frames).any(|t| {
        let pa = a.pixels(t);
        let pb = b.pixels(t);
        pa.iter().any(|p| pb.contains(p))
    })
}

fn fits(o: &SceneObject, spec: &SceneSpec) -> bool {
    let (ext_w, ext_h) = (o.w, if o.kind == ShapeKind::Circle { o.w } else { o.h });
    (0..spec.frames).all(|t| {
        let (x, y) = (o.x + o.vx * t as i64, o.y + o.vy * t as i64);
        x >= 0 && y >= 0 && x + ext_w <= spec.width as i64 && y + ext_h <= spec.height as i64
    })
}

/// Draws object placements for a scene: movers first, then static objects.
pub fn sample_objects(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Result<Vec<SceneObject>> {
    spec.validate()?;
    let mut objects: Vec<SceneObject> = Vec::new();
    let total = spec.movers + spec.distractors;
    for k in 0..total {
        let moving = k < spec.movers;
        // the first static object is a look-alike of the first mover
        let twin = (k == spec.movers && spec.movers > 0).then(|| objects[0].clone());
        let kind = if let Some(t) = &twin {
            t.kind
        } else if rng.gen_bool(0.5) {
            ShapeKind::Rectangle
        } else {
            ShapeKind::Circle
        };
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let w = rng.gen_range(spec.min_size..=spec.max_size) as i64;
            let h = rng.gen_range(spec.min_size..=spec.max_size) as i64;
            let (vx, vy) = if moving {
                loop {
                    let v = (
                        rng.gen_range(-spec.max_speed..=spec.max_speed),
                        rng.gen_range(-spec.max_speed..=spec.max_speed),
                    );
                    if v != (0, 0) {
                        break v;
                    }
                }
            } else {
                (0, 0)
            };
            let colour = [
                rng.gen_range(0.45..0.95),
                rng.gen_range(0.45..0.95),
                rng.gen_range(0.45..0.95),
            ];
            let x = rng.gen_range(0..spec.width as i64);
            let y = rng.gen_range(0..spec.height as i64);
            let mut cand = SceneObject {
                kind,
                x,
                y,
                w,
                h,
                vx,
                vy,
                colour,
            };
            if let Some(t) = &twin {
                (cand.w, cand.h, cand.colour) = (t.w, t.h, t.colour);
            }
            if fits(&cand, spec) && !objects.iter().any(|o| overlaps(o, &cand, spec.frames)) {
                placed = Some(cand);
                break;
            }
        }
        match placed {
            Some(o) => objects.push(o),
            None => {
                return Err(Error::Generation(format!(
                    "could not place object {k} after {MAX_PLACEMENT_TRIES} attempts"
                )))
            }
        }
    }
    Ok(objects)
}

/// Draws a random scene from `spec` and renders it.
pub fn generate_sample(spec: &SceneSpec, seed: u64, id: &str) -> Result<VideoSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = sample_objects(spec, &mut rng)?;
    render_scene(spec, &objects, seed, id)
}

pub fn generate_dataset(spec: &SceneSpec, num: usize, seed: u64) -> Result<Vec<VideoSample>> {
    (0..num)
        .map(|i| generate_sample(spec, sample_seed(seed, i as u64), &format!("{i:06}")))
        .collect()
}

/// Scenes in pairs that share their final frame exactly but differ in which
/// of two look-alike objects moved; only earlier frames and flow separate
/// them. Needs one mover and at least one static object.
pub fn generate_ambiguous_pairs(spec: &SceneSpec, pairs: usize, seed: u64) -> Result<Vec<VideoSample>> {
    if spec.movers != 1 || spec.distractors == 0 || spec.frames < 2 {
        return Err(Error::Config(format!(
            "ambiguous pairs need 1 mover, a static object and 2+ frames, got {} movers, {} static, {} frames",
            spec.movers, spec.distractors, spec.frames
        )));
    }
    let last = spec.frames as i64 - 1;
    let mut out = Vec::with_capacity(2 * pairs);
    for i in 0..pairs {
        let mut made = None;
        for attempt in 0..MAX_PLACEMENT_TRIES as u64 {
            let s = sample_seed(seed, (i as u64) << 16 | attempt);
            let objects = sample_objects(spec, &mut ChaCha8Rng::seed_from_u64(s))?;
            let (m, d) = (&objects[0], &objects[1]);
            let mut swapped = objects.clone();
            swapped[0] = SceneObject {
                x: m.x + m.vx * last,
                y: m.y + m.vy * last,
                vx: 0,
                vy: 0,
                ..m.clone()
            };
            swapped[1] = SceneObject {
                x: d.x - m.vx * last,
                y: d.y - m.vy * last,
                vx: m.vx,
                vy: m.vy,
                ..d.clone()
            };
            let clear = swapped.iter().all(|o| fits(o, spec))
                && (0..swapped.len()).all(|a| (a + 1..swapped.len()).all(|b| !overlaps(&swapped[a], &swapped[b], spec.frames)));
            if clear {
                let a = render_scene(spec, &objects, s, &format!("{i:05}a"))?;
                let b = render_scene(spec, &swapped, s, &format!("{i:05}b"))?;
                debug_assert_eq!(a.frames.last(), b.frames.last());
                made = Some((a, b));
                break;
            }
        }
        let (a, b) = made.ok_or_else(|| Error::Generation(format!("could not build ambiguous pair {i}")))?;
        out.push(a);
        out.push(b);
    }
    Ok(out)
}

/// Where the model's motion channels come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowSource {
    GroundTruth,
    Diff,
    Zero,
}

impl std::str::FromStr for FlowSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ground-truth" | "gt" => Ok(FlowSource::GroundTruth),
            "diff" => Ok(FlowSource::Diff),
            "zero" => Ok(FlowSource::Zero),
            other => Err(Error::Config(format!(
                "unknown flow source {other:?} (expected ground-truth, diff or zero)"
            ))),
        }
    }
}

/// The last `steps` frames of a clip and their aligned motion channels.
/// The final frame has no successor and gets zero flow.
pub fn model_inputs(sample: &VideoSample, steps: usize, source: FlowSource) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let t_len = sample.frames.len();
    if steps == 0 || steps > t_len {
        return Err(Error::Data(format!(
            "sample {} has {t_len} frames, model needs {steps}",
            sample.id
        )));
    }
    let zero = Tensor::zeros(&[2, sample.height, sample.width]);
    let mut frames = Vec::with_capacity(steps);
    let mut flows = Vec::with_capacity(steps);
    for t in t_len - steps..t_len {
        frames.push(sample.frames[t].clone());
        let flow = if t + 1 == t_len {
            zero.clone()
        } else {
            match source {
                FlowSource::GroundTruth => sample.flows[t].clone(),
                FlowSource::Diff => difference_flow(&sample.frames[t], &sample.frames[t + 1])?,
                FlowSource::Zero => zero.clone(),
            }
        };
        flows.push(flow);
    }
    Ok((frames, flows))
}

// ---- on-disk format ------------------------------------------------------

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, offset: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

pub fn encode_ppm(t: &Tensor) -> Vec<u8> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let plane = h * w;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in 0..plane {
        for c in 0..3 {
            out.push((t.data()[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

pub fn encode_pgm(values: &[u8], h: usize, w: usize) -> Vec<u8> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(values);
    out
}

/// Parses a binary PPM/PGM header; returns `(width, height, data offset)`.
fn parse_pnm_header(bytes: &[u8], magic: &str, path: &Path) -> Result<(usize, usize, usize)> {
    if !bytes.starts_with(magic.as_bytes()) {
        return Err(parse_err(path, 0, format!("expected {magic} magic")));
    }
    let mut pos = magic.len();
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| b.is_ascii_digit()) {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(path, pos, "expected a header number"));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(path, start, "header number out of range"))?;
    }
    if fields[2] != 255 {
        return Err(parse_err(path, pos, format!("unsupported maxval {}", fields[2])));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(parse_err(path, pos, "missing whitespace after header"));
    }
    Ok((fields[0], fields[1], pos + 1))
}

pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let (w, h, off) = parse_pnm_header(bytes, "P6", path)?;
    let need = 3 * w * h;
    if bytes.len() < off + need {
        return Err(parse_err(
            path,
            bytes.len(),
            format!("expected {need} bytes of pixel data, found {}", bytes.len() - off),
        ));
    }
    let plane = w * h;
    let mut data = vec![0.0; need];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = bytes[off + 3 * p + c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn decode_pgm(bytes: &[u8], path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, off) = parse_pnm_header(bytes, "P5", path)?;
    if bytes.len() < off + w * h {
        return Err(parse_err(
            path,
            bytes.len(),
            format!("expected {} bytes of pixel data, found {}", w * h, bytes.len() - off),
        ));
    }
    Ok((h, w, bytes[off..off + w * h].to_vec()))
}

/// `FLO2`, u32 height, u32 width, then interleaved `(dx, dy)` f32 pairs.
pub fn encode_flo2(t: &Tensor) -> Vec<u8> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let plane = h * w;
    let mut out = Vec::with_capacity(12 + 8 * plane);
    out.extend_from_slice(b"FLO2");
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for p in 0..plane {
        out.extend_from_slice(&(t.data()[p] as f32).to_le_bytes());
        out.extend_from_slice(&(t.data()[plane + p] as f32).to_le_bytes());
    }
    out
}

pub fn decode_flo2(bytes: &[u8], path: &Path) -> Result<Tensor> {
    if bytes.len() < 12 {
        return Err(parse_err(path, bytes.len(), "expected a 12-byte header"));
    }
    if &bytes[..4] != b"FLO2" {
        return Err(parse_err(path, 0, "expected FLO2 magic"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let need = h * w * 8;
    if bytes.len() != 12 + need {
        return Err(parse_err(
            path,
            bytes.len(),
            format!("expected {need} bytes of flow data, found {}", bytes.len() - 12),
        ));
    }
    let plane = h * w;
    let mut data = vec![0.0; 2 * plane];
    for (p, chunk) in bytes[12..].chunks_exact(8).enumerate() {
        data[p] = f32::from_le_bytes(chunk[..4].try_into().expect("4 bytes")) as f64;
        data[plane + p] = f32::from_le_bytes(chunk[4..].try_into().expect("4 bytes")) as f64;
    }
    Tensor::new(&[2, h, w], data)
}

#[derive(Serialize, Deserialize)]
struct Labels {
    boxes: Vec<[f64; 4]>,
    class: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub num_samples: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub samples: Vec<String>,
}

fn to_json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serialisable value");
    s.push('\n');
    s.into_bytes()
}

pub fn write_dataset(samples: &[VideoSample], dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let first = samples.first();
    let manifest = Manifest {
        num_samples: samples.len(),
        height: first.map_or(0, |s| s.height),
        width: first.map_or(0, |s| s.width),
        frames: first.map_or(0, |s| s.frames.len()),
        samples: samples.iter().map(|s| s.id.clone()).collect(),
    };
    for s in samples {
        let sd = dir.join(&s.id);
        fs::create_dir_all(&sd).map_err(|e| Error::io(&sd, e))?;
        for (t, f) in s.frames.iter().enumerate() {
            write_file(&sd.join(format!("frame_{t}.ppm")), &encode_ppm(f))?;
        }
        for (t, f) in s.flows.iter().enumerate() {
            write_file(&sd.join(format!("flow_{t}.flo2")), &encode_flo2(f))?;
        }
        let mask: Vec<u8> = s.mask.iter().map(|&m| if m == 1 { 255 } else { 0 }).collect();
        write_file(&sd.join("mask.pgm"), &encode_pgm(&mask, s.height, s.width))?;
        let labels = Labels {
            boxes: s.boxes.iter().map(|b| b.to_array()).collect(),
            class: vec!["moving".into(); s.boxes.len()],
        };
        write_file(&sd.join("labels.json"), &to_json_bytes(&labels))?;
    }
    write_file(&dir.join("manifest.json"), &to_json_bytes(&manifest))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let bytes = read_file(&path)?;
    serde_json::from_slice(&bytes).map_err(|e| json_err(&path, &bytes, e))
}

fn json_err(path: &Path, bytes: &[u8], e: serde_json::Error) -> Error {
    // serde_json reports line/column; convert to a byte offset
    let mut offset = 0;
    for (i, line) in bytes.split(|&b| b == b'\n').enumerate() {
        if i + 1 == e.line() {
            offset += e.column().saturating_sub(1);
            break;
        }
        offset += line.len() + 1;
    }
    parse_err(path, offset.min(bytes.len()), e.to_string())
}

pub fn read_sample(dir: &Path, id: &str, frames: usize) -> Result<VideoSample> {
    let sd: PathBuf = dir.join(id);
    let mut fr = Vec::with_capacity(frames);
    for t in 0..frames {
        let p = sd.join(format!("frame_{t}.ppm"));
        fr.push(decode_ppm(&read_file(&p)?, &p)?);
    }
    let (h, w) = (fr[0].shape()[1], fr[0].shape()[2]);
    let mut flows = Vec::with_capacity(frames.saturating_sub(1));
    for t in 0..frames.saturating_sub(1) {
        let p = sd.join(format!("flow_{t}.flo2"));
        let f = decode_flo2(&read_file(&p)?, &p)?;
        if f.shape() != [2, h, w] {
            return Err(parse_err(&p, 4, format!("flow is {:?}, frames are {h}x{w}", &f.shape()[1..])));
        }
        flows.push(f);
    }
    let mp = sd.join("mask.pgm");
    let (mh, mw, mask) = decode_pgm(&read_file(&mp)?, &mp)?;
    if (mh, mw) != (h, w) {
        return Err(parse_err(&mp, 0, format!("mask is {mh}x{mw}, frames are {h}x{w}")));
    }
    let lp = sd.join("labels.json");
    let bytes = read_file(&lp)?;
    let labels: Labels = serde_json::from_slice(&bytes).map_err(|e| json_err(&lp, &bytes, e))?;
    Ok(VideoSample {
        id: id.to_string(),
        frames: fr,
        flows,
        boxes: labels.boxes.iter().map(|b| BBox::from_slice(b)).collect(),
        mask: mask.iter().map(|&m| (m > 127) as usize).collect(),
        height: h,
        width: w,
    })
}

pub fn read_dataset(dir: &Path) -> Result<Vec<VideoSample>> {
    let m = read_manifest(dir)?;
    if m.samples.len() != m.num_samples {
        return Err(Error::Data(format!(
            "manifest lists {} samples but declares {}",
            m.samples.len(),
            m.num_samples
        )));
    }
    m.samples.iter().map(|id| read_sample(dir, id, m.frames)).collect()
}

/// Summary line for a written dataset.
pub fn manifest_summary(m: &Manifest) -> serde_json::Value {
    json!({
        "num_samples": m.num_samples,
        "height": m.height,
        "width": m.width,
        "frames": m.frames,
    })
}
