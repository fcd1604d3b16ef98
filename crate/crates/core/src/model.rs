//! Spatio-temporal transformer: temporal feature traces, encoder over the
//! traces, query decoder, last-frame selection and the multi-task wirings.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{DecoderLayer, EncoderLayer};
use crate::autodiff::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::backbone::BackboneParams;
use crate::error::{Error, Result};
use crate::heads::{DetectionHead, DetectionOutput, SegmentationHead};
use crate::posenc::{apply_pe, build_spatial_pe, build_temporal_pe, SpatialPe, TemporalPe};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Shared encoder, one decoder per task.
    Early,
    /// Shared encoder and decoder with joint queries.
    Late,
    DetOnly,
    SegOnly,
}

impl Mode {
    pub fn has_detection(self) -> bool {
        self != Mode::SegOnly
    }

    pub fn has_segmentation(self) -> bool {
        self != Mode::DetOnly
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Early => "early",
            Mode::Late => "late",
            Mode::DetOnly => "det-only",
            Mode::SegOnly => "seg-only",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early" => Ok(Mode::Early),
            "late" => Ok(Mode::Late),
            "det-only" => Ok(Mode::DetOnly),
            "seg-only" => Ok(Mode::SegOnly),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected early, late, det-only or seg-only)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mode: Mode,
    pub frames: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub d: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ff_dim: usize,
    pub num_object_queries: usize,
    pub num_class_queries: usize,
    pub rgb_widths: Vec<usize>,
    pub flow_widths: Vec<usize>,
    pub decoder_query_self_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mode: Mode::Late,
            frames: 2,
            image_h: 64,
            image_w: 64,
            d: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ff_dim: 4 * 2 * 64,
            num_object_queries: 100,
            num_class_queries: 2,
            rgb_widths: vec![16, 32, 64],
            flow_widths: vec![8, 16, 32],
            decoder_query_self_attention: true,
        }
    }
}

impl ModelConfig {
    pub fn model_dim(&self) -> usize {
        self.frames * self.d
    }

    pub fn stride(&self) -> usize {
        1 << self.rgb_widths.len()
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.stride(), self.image_w / self.stride())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.frames == 0 {
            return bad("frames must be at least 1".into());
        }
        if self.dec_layers == 0 {
            return bad("dec_layers must be at least 1".into());
        }
        if self.rgb_widths.is_empty() || self.rgb_widths.len() != self.flow_widths.len() {
            return bad("rgb_widths and flow_widths need the same nonzero length".into());
        }
        let s = self.stride();
        if self.image_h % s != 0 || self.image_w % s != 0 {
            return bad(format!(
                "image {}x{} is not a multiple of backbone stride {s}",
                self.image_h, self.image_w
            ));
        }
        let (h, w) = self.grid();
        if self.mode.has_segmentation() && self.d != h * w {
            return bad(format!(
                "segmentation needs d = H*W, got d = {} and H*W = {}",
                self.d,
                h * w
            ));
        }
        if self.d % 4 != 0 {
            return bad(format!("d = {} must be a multiple of 4", self.d));
        }
        if self.heads == 0 || self.model_dim() % self.heads != 0 {
            return bad(format!(
                "model width {} is not divisible by {} heads",
                self.model_dim(),
                self.heads
            ));
        }
        if self.ff_dim < self.model_dim() {
            return bad(format!(
                "ff_dim {} is smaller than model width {}",
                self.ff_dim,
                self.model_dim()
            ));
        }
        if self.mode.has_detection() && self.num_object_queries == 0 {
            return bad("num_object_queries must be positive".into());
        }
        if self.mode.has_segmentation() && self.num_class_queries != 2 {
            return bad(format!(
                "num_class_queries must be 2 (background, moving), got {}",
                self.num_class_queries
            ));
        }
        Ok(())
    }
}

/// `[HW × T·d]` trace; columns `[t·d, (t+1)·d)` hold step `t`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureTrace {
    pub trace: Var,
    pub height: usize,
    pub width: usize,
    pub steps: usize,
    pub dim: usize,
}

/// Learnable `[N_q × T·d]` queries; rows `[0, N_o)` are object queries and
/// `[N_o, N_o + N_c)` class queries.
#[derive(Clone, Debug)]
pub struct JointQuerySet {
    pub param: ParamId,
    pub num_object: usize,
    pub num_class: usize,
}

impl JointQuerySet {
    pub fn len(&self) -> usize {
        self.num_object + self.num_class
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Decoder output after last-frame selection and the final layer's
/// cross-attention (one `[N_q × HW]` map per head).
#[derive(Clone, Debug)]
pub struct DecodedQueries {
    pub features: Var,
    pub cross_attention: Vec<Var>,
}

pub fn aggregate_traces(
    g: &mut Graph,
    steps: &[Var],
    spe: &SpatialPe,
    tpe: &TemporalPe,
) -> Result<FeatureTrace> {
    if steps.is_empty() || steps.len() > tpe.steps() {
        return Err(Error::Config(format!(
            "{} steps for a temporal encoding of {} steps",
            steps.len(),
            tpe.steps()
        )));
    }
    let first = g.shape(steps[0]).to_vec();
    let mut encoded = Vec::with_capacity(steps.len());
    for (t, &s) in steps.iter().enumerate() {
        if g.shape(s) != first.as_slice() {
            return Err(Error::dim("aggregate_traces", &first, g.shape(s)));
        }
        encoded.push(apply_pe(g, s, spe, &tpe.row(t))?);
    }
    let trace = if encoded.len() == 1 {
        encoded[0]
    } else {
        g.concat_last(&encoded)?
    };
    Ok(FeatureTrace {
        trace,
        height: spe.height,
        width: spe.width,
        steps: steps.len(),
        dim: first[1],
    })
}

/// Encoder stack over the trace; returns the encoded trace and each layer's
/// per-head self-attention maps.
pub fn st_encode(
    g: &mut Graph,
    store: &ParamStore,
    layers: &[EncoderLayer],
    trace: Var,
) -> Result<(Var, Vec<Vec<Var>>)> {
    let width = g.shape(trace)[1];
    let mut x = trace;
    let mut maps = Vec::with_capacity(layers.len());
    for layer in layers {
        if layer.attn.dim != width {
            return Err(Error::Config(format!(
                "encoder width {} does not match trace width {width}",
                layer.attn.dim
            )));
        }
        let (y, w) = layer.forward(g, store, x)?;
        x = y;
        maps.push(w);
    }
    Ok((x, maps))
}

/// Decoder stack; returns `[N_q × T·d]` and the final layer's per-head
/// cross-attention.
pub fn st_decode(
    g: &mut Graph,
    store: &ParamStore,
    layers: &[DecoderLayer],
    queries: Var,
    memory: Var,
) -> Result<(Var, Vec<Var>)> {
    let (qw, mw) = (g.shape(queries)[1], g.shape(memory)[1]);
    let mut q = queries;
    let mut last = Vec::new();
    for layer in layers {
        if layer.cross_attn.dim != qw || qw != mw {
            return Err(Error::Config(format!(
                "decoder width {} with query width {qw} and memory width {mw}",
                layer.cross_attn.dim
            )));
        }
        let (y, w) = layer.forward(g, store, q, memory)?;
        q = y;
        last = w;
    }
    Ok((q, last))
}

/// Columns `[(T−1)·d, T·d)` of the decoded queries.
pub fn select_last_frame(g: &mut Graph, decoded: Var, steps: usize, d: usize) -> Result<Var> {
    let width = g.shape(decoded)[1];
    if steps == 0 || width != steps * d {
        return Err(Error::Contract(format!(
            "decoded width {width} is not {steps} steps of width {d}"
        )));
    }
    if steps == 1 {
        return Ok(decoded);
    }
    g.slice_last(decoded, (steps - 1) * d, steps * d)
}

pub fn split_joint_queries(g: &mut Graph, selected: Var, num_object: usize) -> Result<(Var, Var)> {
    let rows = g.shape(selected)[0];
    if num_object > rows {
        return Err(Error::Contract(format!(
            "cannot split {rows} query rows at {num_object}"
        )));
    }
    let det = g.slice_rows(selected, 0, num_object)?;
    let seg = g.slice_rows(selected, num_object, rows)?;
    Ok((det, seg))
}

#[derive(Clone, Debug)]
pub struct DecoderStack {
    pub layers: Vec<DecoderLayer>,
    pub queries: JointQuerySet,
}

#[derive(Clone, Debug, Default)]
pub struct AttentionMaps {
    /// `[N_o × HW]`, head-averaged.
    pub det: Option<Tensor>,
    /// `[N_c × HW]`, head-averaged; row `c` is class `c`.
    pub seg: Option<Tensor>,
}

impl AttentionMaps {
    /// Largest deviation of any row sum from 1 (zero when no maps are present).
    pub fn max_row_sum_error(&self) -> f64 {
        [&self.det, &self.seg]
            .into_iter()
            .flatten()
            .flat_map(|t| {
                let n = t.shape()[1];
                t.data().chunks(n).map(|r| (r.iter().sum::<f64>() - 1.0).abs()).collect::<Vec<_>>()
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct MtlOutput {
    pub det: Option<DetectionOutput>,
    /// `[N_c × H₁ × W₁]` mask logits.
    pub seg: Option<Var>,
    pub attention: AttentionMaps,
}

impl MtlOutput {
    pub fn detection(&self) -> Result<DetectionOutput> {
        self.det
            .ok_or_else(|| Error::Contract("model mode has no detection head".into()))
    }

    pub fn segmentation(&self) -> Result<Var> {
        self.seg
            .ok_or_else(|| Error::Contract("model mode has no segmentation head".into()))
    }
}

#[derive(Clone, Debug)]
pub struct StMtlModel {
    pub config: ModelConfig,
    pub backbone: BackboneParams,
    pub spe: SpatialPe,
    pub tpe: TemporalPe,
    pub encoder: Vec<EncoderLayer>,
    /// Late and single-task modes use one stack; early mode uses
    /// `[detection, segmentation]`.
    pub decoders: Vec<DecoderStack>,
    pub det_head: Option<DetectionHead>,
    pub seg_head: Option<SegmentationHead>,
}

fn head_average(g: &Graph, heads: &[Var]) -> Tensor {
    let mut out = g.tensor(heads[0]);
    for &h in &heads[1..] {
        for (o, v) in out.data_mut().iter_mut().zip(g.value(h)) {
            *o += v;
        }
    }
    let n = heads.len() as f64;
    out.data_mut().iter_mut().for_each(|v| *v /= n);
    out
}

impl StMtlModel {
    /// Builds the model and registers its parameters in `store` in a fixed order.
    pub fn new(config: &ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = config.grid();
        let md = config.model_dim();
        let backbone = BackboneParams::new(store, &config.rgb_widths, &config.flow_widths, config.d, &mut rng)?;
        let spe = build_spatial_pe(h, w, config.d)?;
        let tpe = build_temporal_pe(config.frames, config.d)?;
        let encoder = (0..config.enc_layers)
            .map(|i| EncoderLayer::new(store, &format!("encoder.{i}"), md, config.heads, config.ff_dim, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let (n_o, n_c) = (config.num_object_queries, config.num_class_queries);
        let groups: Vec<(&str, usize, usize)> = match config.mode {
            Mode::Early => vec![("det_decoder", n_o, 0), ("seg_decoder", 0, n_c)],
            Mode::Late => vec![("decoder", n_o, n_c)],
            Mode::DetOnly => vec![("decoder", n_o, 0)],
            Mode::SegOnly => vec![("decoder", 0, n_c)],
        };
        let mut decoders = Vec::new();
        for (name, num_object, num_class) in groups {
            let param = store.insert_uniform(format!("{name}.queries"), &[num_object + num_class, md], md, &mut rng);
            let layers = (0..config.dec_layers)
                .map(|i| {
                    DecoderLayer::new(
                        store,
                        &format!("{name}.{i}"),
                        md,
                        config.heads,
                        config.ff_dim,
                        config.decoder_query_self_attention,
                        &mut rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            decoders.push(DecoderStack {
                layers,
                queries: JointQuerySet {
                    param,
                    num_object,
                    num_class,
                },
            });
        }
        let det_head = config
            .mode
            .has_detection()
            .then(|| DetectionHead::new(store, config.d, &mut rng));
        let seg_head = if config.mode.has_segmentation() {
            Some(SegmentationHead::new(
                store,
                n_c,
                config.d,
                (h, w),
                (config.image_h, config.image_w),
                &mut rng,
            )?)
        } else {
            None
        };
        Ok(StMtlModel {
            config: config.clone(),
            backbone,
            spe,
            tpe,
            encoder,
            decoders,
            det_head,
            seg_head,
        })
    }

    /// Backbone plus temporal aggregation for `T` frames and their flows.
    pub fn trace(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        frames: &[Tensor],
        flows: &[Tensor],
    ) -> Result<FeatureTrace> {
        if frames.len() != self.config.frames || flows.len() != frames.len() {
            return Err(Error::Data(format!(
                "model expects {} frames with flows, got {} frames and {} flows",
                self.config.frames,
                frames.len(),
                flows.len()
            )));
        }
        let mut steps = Vec::with_capacity(frames.len());
        for (rgb, flow) in frames.iter().zip(flows) {
            steps.push(self.backbone.extract_frame_features(g, store, rgb, flow)?.features);
        }
        aggregate_traces(g, &steps, &self.spe, &self.tpe)
    }

    /// Runs a decoder stack on `memory` and selects the last frame.
    pub fn decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        stack: &DecoderStack,
        memory: Var,
    ) -> Result<DecodedQueries> {
        let q = g.param(store, stack.queries.param);
        let (decoded, cross) = st_decode(g, store, &stack.layers, q, memory)?;
        let features = select_last_frame(g, decoded, self.config.frames, self.config.d)?;
        Ok(DecodedQueries {
            features,
            cross_attention: cross,
        })
    }

    pub fn forward_mtl(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        frames: &[Tensor],
        flows: &[Tensor],
    ) -> Result<MtlOutput> {
        let trace = self.trace(g, store, frames, flows)?;
        let (memory, _) = st_encode(g, store, &self.encoder, trace.trace)?;
        let mut det_feats = None;
        let mut seg_feats = None;
        let mut attention = AttentionMaps::default();
        for stack in &self.decoders {
            let dq = self.decode(g, store, stack, memory)?;
            let maps = head_average(g, &dq.cross_attention);
            let (n_o, n_c) = (stack.queries.num_object, stack.queries.num_class);
            match (n_o > 0, n_c > 0) {
                (true, true) => {
                    let (det, seg) = split_joint_queries(g, dq.features, n_o)?;
                    det_feats = Some(det);
                    seg_feats = Some(seg);
                    let hw = maps.shape()[1];
                    let (a, b) = maps.data().split_at(n_o * hw);
                    attention.det = Some(Tensor::new(&[n_o, hw], a.to_vec())?);
                    attention.seg = Some(Tensor::new(&[n_c, hw], b.to_vec())?);
                }
                (true, false) => {
                    det_feats = Some(dq.features);
                    attention.det = Some(maps);
                }
                _ => {
                    seg_feats = Some(dq.features);
                    attention.seg = Some(maps);
                }
            }
        }
        let det = match (&self.det_head, det_feats) {
            (Some(head), Some(f)) => Some(head.forward(g, store, f)?),
            _ => None,
        };
        let seg = match (&self.seg_head, seg_feats) {
            (Some(head), Some(f)) => Some(head.forward(g, store, f)?),
            _ => None,
        };
        Ok(MtlOutput { det, seg, attention })
    }
}
