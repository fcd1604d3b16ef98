//! Convolutional stems for RGB and flow, fused by channel concatenation and a
//! 1×1 projection to the model width.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = c_in * k * k;
        ConvParams {
            weight: store.insert_uniform(format!("{prefix}.weight"), &[c_out, c_in, k, k], fan_in, rng),
            bias: store.insert_uniform(format!("{prefix}.bias"), &[c_out], fan_in, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.conv2d(x, w, Some(b), stride, pad)
    }
}

#[derive(Clone, Debug)]
pub struct BackboneParams {
    pub rgb: Vec<ConvParams>,
    pub flow: Vec<ConvParams>,
    pub proj: ConvParams,
    pub dim: usize,
}

/// One time step's fused features, `[HW × d]` with rows `p = row·W + col`.
#[derive(Clone, Copy, Debug)]
pub struct FrameFeatures {
    pub features: Var,
    pub height: usize,
    pub width: usize,
}

impl BackboneParams {
    /// Both stems must have the same number of stride-2 stages.
    pub fn new(
        store: &mut ParamStore,
        rgb_widths: &[usize],
        flow_widths: &[usize],
        dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if rgb_widths.len() != flow_widths.len() || rgb_widths.is_empty() {
            return Err(Error::Config(format!(
                "rgb stem has {} stages and flow stem {}; both need the same nonzero count",
                rgb_widths.len(),
                flow_widths.len()
            )));
        }
        let stem = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c0: usize, widths: &[usize]| {
            let mut c_in = c0;
            widths
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    let p = ConvParams::new(store, &format!("backbone.{name}{i}"), c_in, c, 3, rng);
                    c_in = c;
                    p
                })
                .collect::<Vec<_>>()
        };
        let rgb = stem(store, rng, "rgb", 3, rgb_widths);
        let flow = stem(store, rng, "flow", 2, flow_widths);
        let fused = rgb_widths[rgb_widths.len() - 1] + flow_widths[flow_widths.len() - 1];
        let proj = ConvParams::new(store, "backbone.proj", fused, dim, 1, rng);
        Ok(BackboneParams {
            rgb,
            flow,
            proj,
            dim,
        })
    }

    pub fn stride(&self) -> usize {
        1 << self.rgb.len()
    }

    pub fn grid(&self, image_h: usize, image_w: usize) -> Result<(usize, usize)> {
        let s = self.stride();
        if image_h % s != 0 || image_w % s != 0 || image_h == 0 || image_w == 0 {
            return Err(Error::Config(format!(
                "image {image_h}x{image_w} is not a multiple of backbone stride {s}"
            )));
        }
        Ok((image_h / s, image_w / s))
    }

    fn run_stem(
        stem: &[ConvParams],
        g: &mut Graph,
        store: &ParamStore,
        mut x: Var,
    ) -> Result<Var> {
        for conv in stem {
            let y = conv.forward(g, store, x, 2, 1)?;
            x = g.relu(y);
        }
        Ok(x)
    }

    /// `rgb: [3×H₁×W₁]`, `flow: [2×H₁×W₁]`.
    pub fn extract_frame_features(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        rgb: &Tensor,
        flow: &Tensor,
    ) -> Result<FrameFeatures> {
        let (rs, fs) = (rgb.shape(), flow.shape());
        if rs.len() != 3 || fs.len() != 3 || rs[0] != 3 || fs[0] != 2 || rs[1..] != fs[1..] {
            return Err(Error::dim("extract_frame_features", rs, fs));
        }
        let (h, w) = self.grid(rs[1], rs[2])?;
        let x_rgb = g.constant(rgb);
        let x_flow = g.constant(flow);
        let a = Self::run_stem(&self.rgb, g, store, x_rgb)?;
        let b = Self::run_stem(&self.flow, g, store, x_flow)?;
        let (ca, cb) = (g.shape(a)[0], g.shape(b)[0]);
        let a = g.reshape(a, &[ca, h * w])?;
        let b = g.reshape(b, &[cb, h * w])?;
        let fused = g.concat_rows(&[a, b])?;
        let fused = g.reshape(fused, &[ca + cb, h, w])?;
        let projected = self.proj.forward(g, store, fused, 1, 0)?;
        let flat = g.reshape(projected, &[self.dim, h * w])?;
        Ok(FrameFeatures {
            features: g.transpose(flat)?,
            height: h,
            width: w,
        })
    }
}

/// Motion cue from two RGB frames when no flow is available: the x- and
/// y-Sobel responses of the signed grey-level temporal difference.
pub fn difference_flow(prev: &Tensor, next: &Tensor) -> Result<Tensor> {
    let s = prev.shape();
    if s.len() != 3 || s[0] != 3 || s != next.shape() {
        return Err(Error::dim("difference_flow", s, next.shape()));
    }
    let (h, w) = (s[1], s[2]);
    let plane = h * w;
    let diff: Vec<f64> = (0..plane)
        .map(|p| (0..3).map(|c| next.data()[c * plane + p] - prev.data()[c * plane + p]).sum::<f64>() / 3.0)
        .collect();
    let at = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            diff[y as usize * w + x as usize]
        }
    };
    let mut out = vec![0.0; 2 * plane];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            let p = y as usize * w + x as usize;
            out[p] = gx;
            out[plane + p] = gy;
        }
    }
    Tensor::new(&[2, h, w], out)
}
