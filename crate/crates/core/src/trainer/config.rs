use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::FlowSource;
use crate::error::{Error, Result};
use crate::matching::LossWeights;
use crate::model::{Mode, ModelConfig};

/// Flat training configuration; every key can be set from JSON or
/// `key=value` overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
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

    pub epochs: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    pub lr_warm_start: f64,
    pub lr_warm_end: f64,
    pub warm_epochs: usize,
    pub lr_decay_start: f64,
    pub lr_decay_end: f64,
    pub grad_clip: f64,

    pub lambda_class: f64,
    pub lambda_l1: f64,
    pub lambda_giou: f64,
    pub no_object_weight: f64,
    pub w_det: f64,
    pub w_seg: f64,

    pub seed: u64,
    pub dataset: String,
    pub val_dataset: Option<String>,
    pub out_dir: String,
    pub flow_source: FlowSource,
    /// Evaluate every this many epochs; 0 evaluates only after the last.
    pub eval_every: usize,
    pub resume: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        TrainConfig {
            mode: m.mode,
            frames: m.frames,
            image_h: m.image_h,
            image_w: m.image_w,
            d: m.d,
            heads: m.heads,
            enc_layers: m.enc_layers,
            dec_layers: m.dec_layers,
            ff_dim: m.ff_dim,
            num_object_queries: m.num_object_queries,
            num_class_queries: m.num_class_queries,
            rgb_widths: m.rgb_widths,
            flow_widths: m.flow_widths,
            decoder_query_self_attention: m.decoder_query_self_attention,
            epochs: 50,
            batch_size: 4,
            max_steps: None,
            lr_warm_start: 1e-3,
            lr_warm_end: 5e-3,
            warm_epochs: 5,
            lr_decay_start: 1e-3,
            lr_decay_end: 1e-5,
            grad_clip: 1.0,
            lambda_class: 1.0,
            lambda_l1: 5.0,
            lambda_giou: 2.0,
            no_object_weight: 0.1,
            w_det: 1.0,
            w_seg: 1.0,
            seed: 0,
            dataset: String::new(),
            val_dataset: None,
            out_dir: "runs/default".into(),
            flow_source: FlowSource::GroundTruth,
            eval_every: 1,
            resume: None,
        }
    }
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            mode: self.mode,
            frames: self.frames,
            image_h: self.image_h,
            image_w: self.image_w,
            d: self.d,
            heads: self.heads,
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            ff_dim: self.ff_dim,
            num_object_queries: self.num_object_queries,
            num_class_queries: self.num_class_queries,
            rgb_widths: self.rgb_widths.clone(),
            flow_widths: self.flow_widths.clone(),
            decoder_query_self_attention: self.decoder_query_self_attention,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            class: self.lambda_class,
            l1: self.lambda_l1,
            giou: self.lambda_giou,
            no_object: self.no_object_weight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let lrs = [
            ("lr_warm_start", self.lr_warm_start),
            ("lr_warm_end", self.lr_warm_end),
            ("lr_decay_start", self.lr_decay_start),
            ("lr_decay_end", self.lr_decay_end),
        ];
        for (k, v) in lrs {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("{k} must be positive, got {v}")));
            }
        }
        if self.warm_epochs > self.epochs {
            return Err(Error::Config(format!(
                "warm_epochs {} exceeds epochs {}",
                self.warm_epochs, self.epochs
            )));
        }
        Ok(())
    }

    /// Parses JSON text and applies `key=value` overrides. Dotted keys address
    /// nested objects; values are parsed as JSON, falling back to strings.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut v: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config JSON: {e}")))?;
        if !v.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut cur = &mut v;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let obj = cur
                    .as_object_mut()
                    .ok_or_else(|| Error::Config(format!("override key {key:?} does not address an object")))?;
                if i + 1 == parts.len() {
                    obj.insert(part.to_string(), parsed.clone());
                    break;
                }
                cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
            }
        }
        serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, overrides)
    }
}
