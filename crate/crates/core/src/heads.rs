//! Detection head (per-query class logits and sigmoid boxes) and
//! segmentation head (class-query rows reshaped to the grid, upsampled,
//! refined by one convolution).

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::backbone::ConvParams;
use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const MOVING: usize = 0;
pub const NO_OBJECT: usize = 1;

/// One decoded detection: box in normalised (cx, cy, width, height) and
/// logits over {moving, no-object}.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxPrediction {
    pub bbox: BBox,
    pub logits: [f64; 2],
}

impl BoxPrediction {
    pub fn moving_prob(&self) -> f64 {
        let m = self.logits[0].max(self.logits[1]);
        let a = (self.logits[0] - m).exp();
        let b = (self.logits[1] - m).exp();
        a / (a + b)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: store.insert_uniform(format!("{prefix}.weight"), &[d_in, d_out], d_in, rng),
            bias: store.insert_uniform(format!("{prefix}.bias"), &[d_out], d_in, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct DetectionHead {
    pub class: Linear,
    pub box_mlp: [Linear; 3],
}

/// Graph handles for a detection head pass: `logits [N_o×2]`, `boxes [N_o×4]`.
#[derive(Clone, Copy, Debug)]
pub struct DetectionOutput {
    pub logits: Var,
    pub boxes: Var,
}

impl DetectionOutput {
    pub fn predictions(&self, g: &Graph) -> Vec<BoxPrediction> {
        g.value(self.logits)
            .chunks_exact(2)
            .zip(g.value(self.boxes).chunks_exact(4))
            .map(|(l, b)| BoxPrediction {
                bbox: BBox::from_slice(b),
                logits: [l[0], l[1]],
            })
            .collect()
    }
}

impl DetectionHead {
    pub fn new(store: &mut ParamStore, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        DetectionHead {
            class: Linear::new(store, "det_head.class", dim, 2, rng),
            box_mlp: [
                Linear::new(store, "det_head.box0", dim, dim, rng),
                Linear::new(store, "det_head.box1", dim, dim, rng),
                Linear::new(store, "det_head.box2", dim, 4, rng),
            ],
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, feats: Var) -> Result<DetectionOutput> {
        let logits = self.class.forward(g, store, feats)?;
        let mut h = feats;
        for (i, layer) in self.box_mlp.iter().enumerate() {
            h = layer.forward(g, store, h)?;
            if i < 2 {
                h = g.relu(h);
            }
        }
        Ok(DetectionOutput {
            logits,
            boxes: g.sigmoid(h),
        })
    }
}

#[derive(Clone, Debug)]
pub struct SegmentationHead {
    pub refine: ConvParams,
    pub grid: (usize, usize),
    pub image: (usize, usize),
}

impl SegmentationHead {
    pub fn new(
        store: &mut ParamStore,
        classes: usize,
        dim: usize,
        grid: (usize, usize),
        image: (usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if dim != grid.0 * grid.1 {
            return Err(Error::Config(format!(
                "segmentation needs model width d = H*W, got d = {dim} and H*W = {}",
                grid.0 * grid.1
            )));
        }
        Ok(SegmentationHead {
            refine: ConvParams::new(store, "seg_head.refine", classes, classes, 3, rng),
            grid,
            image,
        })
    }

    /// `feats: [N_c × HW]` to mask logits `[N_c × H₁ × W₁]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, feats: Var) -> Result<Var> {
        let up = self.upsampled(g, feats)?;
        self.refine.forward(g, store, up, 1, 1)
    }

    /// The reshaped and upsampled maps before the refinement convolution.
    pub fn upsampled(&self, g: &mut Graph, feats: Var) -> Result<Var> {
        let s = g.shape(feats).to_vec();
        let (h, w) = self.grid;
        if s.len() != 2 || s[1] != h * w {
            return Err(Error::Config(format!(
                "segmentation features have width {} but the grid needs d = H*W = {}",
                s.get(1).copied().unwrap_or(0),
                h * w
            )));
        }
        let maps = g.reshape(feats, &[s[0], h, w])?;
        g.upsample_bilinear(maps, self.image.0, self.image.1)
    }
}

/// Per-pixel argmax of `[N_c × H₁ × W₁]` logits.
pub fn mask_argmax(logits: &Tensor) -> Vec<usize> {
    let s = logits.shape();
    let plane = s[1] * s[2];
    (0..plane)
        .map(|p| {
            (0..s[0])
                .max_by(|&a, &b| {
                    logits.data()[a * plane + p]
                        .partial_cmp(&logits.data()[b * plane + p])
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(b.cmp(&a))
                })
                .unwrap_or(0)
        })
        .collect()
}
