//! Mini-batch Adam training with a warm-up/decay schedule, periodic
//! evaluation, JSON-lines history and resumable checkpoints.

mod checkpoint;
mod config;
mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::autodiff::{Graph, ParamId, ParamStore, Tensor};
use crate::data::{model_inputs, read_dataset, sample_seed, VideoSample};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::heads::{mask_argmax, BoxPrediction};
use crate::loss::{match_and_loss, mtl_loss, segmentation_loss};
use crate::metrics::{EvalRecord, MetricsReport};
use crate::model::{AttentionMaps, StMtlModel};

pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use config::TrainConfig;
pub use optim::{clip_grad_norm, lr_schedule, Adam};

/// Largest tolerated deviation of an attention row sum from 1.
pub const ATTENTION_TOLERANCE: f64 = 1e-9;

const SHUFFLE_STREAM: u64 = 0x5348_5546_464c_4531;

/// Worker count from `ST_MTL_THREADS`, defaulting to 1.
pub fn threads_from_env() -> usize {
    std::env::var("ST_MTL_THREADS")
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

/// Model-ready tensors for one clip.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub frames: Vec<Tensor>,
    pub flows: Vec<Tensor>,
    pub boxes: Vec<BBox>,
    pub mask: Vec<usize>,
}

impl PreparedSample {
    pub fn new(sample: &VideoSample, cfg: &TrainConfig) -> Result<Self> {
        if sample.height != cfg.image_h || sample.width != cfg.image_w {
            return Err(Error::Config(format!(
                "sample {} is {}x{}, config expects {}x{}",
                sample.id, sample.height, sample.width, cfg.image_h, cfg.image_w
            )));
        }
        let (frames, flows) = model_inputs(sample, cfg.frames, cfg.flow_source)?;
        Ok(PreparedSample {
            frames,
            flows,
            boxes: sample.boxes.clone(),
            mask: sample.mask.clone(),
        })
    }
}

/// Model outputs for one clip, detached from the graph.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub boxes: Vec<BoxPrediction>,
    /// `[N_c × H × W]` mask logits.
    pub mask_logits: Option<Tensor>,
    pub attention: AttentionMaps,
}

impl Prediction {
    pub fn mask(&self) -> Option<Vec<usize>> {
        self.mask_logits.as_ref().map(mask_argmax)
    }
}

struct SampleOutcome {
    loss: f64,
    det: Option<f64>,
    seg: Option<f64>,
    attention_error: f64,
    grads: Vec<(ParamId, Vec<f64>)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StepStats {
    pub loss: f64,
    pub det_loss: Option<f64>,
    pub seg_loss: Option<f64>,
    pub grad_norm: f64,
    pub attention_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub loss: f64,
    pub det_loss: Option<f64>,
    pub seg_loss: Option<f64>,
    pub max_attention_error: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: StMtlModel,
    pub store: ParamStore,
    pub adam: Adam,
    pub epochs_done: usize,
    pub step: usize,
    pub best_score: Option<f64>,
    pool: rayon::ThreadPool,
}

impl Trainer {
    pub fn new(config: TrainConfig, threads: usize) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let model = StMtlModel::new(&config.model_config(), &mut store, config.seed)?;
        let adam = Adam::new(&store);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        Ok(Trainer {
            config,
            model,
            store,
            adam,
            epochs_done: 0,
            step: 0,
            best_score: None,
            pool,
        })
    }

    /// Rebuilds a trainer from a checkpoint. `config` replaces the stored one
    /// when given (for example to extend `epochs`); its model fields must agree.
    pub fn from_checkpoint(ck: &Checkpoint, config: Option<TrainConfig>, threads: usize) -> Result<Self> {
        let config = config.unwrap_or_else(|| ck.config.clone());
        let mut t = Trainer::new(config, threads)?;
        ck.restore(&mut t.store, &mut t.adam)?;
        t.epochs_done = ck.epochs_done;
        t.step = ck.step;
        t.best_score = ck.best_score;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.config, self.epochs_done, self.step, self.best_score, &self.store, &self.adam)
    }

    pub fn prepare(&self, samples: &[VideoSample]) -> Result<Vec<PreparedSample>> {
        samples.iter().map(|s| PreparedSample::new(s, &self.config)).collect()
    }

    fn sample_outcome(&self, s: &PreparedSample) -> Result<SampleOutcome> {
        let mut g = Graph::new();
        let out = self.model.forward_mtl(&mut g, &self.store, &s.frames, &s.flows)?;
        let det = match out.det {
            Some(d) => Some(match_and_loss(&mut g, &d, &s.boxes, &self.config.loss_weights())?.0),
            None => None,
        };
        let seg = match out.seg {
            Some(logits) => Some(segmentation_loss(&mut g, logits, &s.mask)?),
            None => None,
        };
        let loss = mtl_loss(&mut g, det, seg, self.config.w_det, self.config.w_seg)?;
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite training loss {value} at step {}", self.step)));
        }
        g.backward(loss)?;
        Ok(SampleOutcome {
            loss: value,
            det: det.map(|v| g.scalar(v)),
            seg: seg.map(|v| g.scalar(v)),
            attention_error: out.attention.max_row_sum_error(),
            grads: g.param_grads().map(|(id, gr)| (id, gr.to_vec())).collect(),
        })
    }

    /// One optimizer step on a mini-batch. Per-sample gradients may be
    /// computed in parallel; they are summed in batch order.
    pub fn train_step(&mut self, batch: &[&PreparedSample], lr: f64) -> Result<StepStats> {
        if batch.is_empty() {
            return Err(Error::Contract("empty mini-batch".into()));
        }
        let outcomes: Vec<Result<SampleOutcome>> =
            self.pool.install(|| batch.par_iter().map(|s| self.sample_outcome(s)).collect());
        let outcomes = outcomes.into_iter().collect::<Result<Vec<_>>>()?;
        let attention_error = outcomes.iter().map(|o| o.attention_error).fold(0.0, f64::max);
        if attention_error > ATTENTION_TOLERANCE {
            return Err(Error::Numeric(format!(
                "attention row sum off by {attention_error:e} at step {}",
                self.step
            )));
        }
        let scale = 1.0 / batch.len() as f64;
        self.store.zero_grads();
        for o in &outcomes {
            for (id, gr) in &o.grads {
                self.store.accumulate_grad(*id, gr, scale);
            }
        }
        let grad_norm = clip_grad_norm(&mut self.store, self.config.grad_clip);
        self.adam.step(&mut self.store, lr)?;
        self.step += 1;
        let mean = |f: &dyn Fn(&SampleOutcome) -> Option<f64>| -> Option<f64> {
            outcomes.iter().map(f).sum::<Option<f64>>().map(|s| s * scale)
        };
        Ok(StepStats {
            loss: outcomes.iter().map(|o| o.loss).sum::<f64>() * scale,
            det_loss: mean(&|o| o.det),
            seg_loss: mean(&|o| o.seg),
            grad_norm,
            attention_error,
        })
    }

    /// Sample order for `epoch`, a pure function of the seed and epoch.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(self.config.seed ^ SHUFFLE_STREAM, epoch as u64));
        order.shuffle(&mut rng);
        order
    }

    fn steps_left(&self) -> usize {
        self.config.max_steps.map_or(usize::MAX, |m| m.saturating_sub(self.step))
    }

    /// Runs one epoch (or until `max_steps`) and returns its record without
    /// metrics.
    pub fn train_epoch(&mut self, data: &[PreparedSample]) -> Result<EpochRecord> {
        let epoch = self.epochs_done;
        let lr = lr_schedule(epoch, &self.config);
        let order = self.epoch_order(epoch, data.len());
        let mut rec = EpochRecord {
            epoch,
            lr,
            steps: 0,
            loss: 0.0,
            det_loss: None,
            seg_loss: None,
            max_attention_error: 0.0,
            metrics: None,
            score: None,
        };
        let mut sums = (0.0, 0.0, 0.0);
        for chunk in order.chunks(self.config.batch_size) {
            if self.steps_left() == 0 {
                break;
            }
            let batch: Vec<&PreparedSample> = chunk.iter().map(|&i| &data[i]).collect();
            let st = self.train_step(&batch, lr)?;
            rec.steps += 1;
            sums.0 += st.loss;
            sums.1 += st.det_loss.unwrap_or(0.0);
            sums.2 += st.seg_loss.unwrap_or(0.0);
            rec.max_attention_error = rec.max_attention_error.max(st.attention_error);
            log::debug!("step {} loss {:.6} |g| {:.4}", self.step, st.loss, st.grad_norm);
        }
        let n = rec.steps.max(1) as f64;
        rec.loss = sums.0 / n;
        rec.det_loss = self.config.mode.has_detection().then_some(sums.1 / n);
        rec.seg_loss = self.config.mode.has_segmentation().then_some(sums.2 / n);
        self.epochs_done += 1;
        Ok(rec)
    }

    pub fn predict(&self, s: &PreparedSample) -> Result<Prediction> {
        let mut g = Graph::inference();
        let out = self.model.forward_mtl(&mut g, &self.store, &s.frames, &s.flows)?;
        Ok(Prediction {
            boxes: out.det.map(|d| d.predictions(&g)).unwrap_or_default(),
            mask_logits: out.seg.map(|v| g.tensor(v)),
            attention: out.attention,
        })
    }

    /// Detection AP over all queries scored by moving probability, and mask
    /// IoU of the moving class.
    pub fn evaluate(&self, data: &[PreparedSample]) -> Result<MetricsReport> {
        let preds: Vec<Result<Prediction>> = self.pool.install(|| data.par_iter().map(|s| self.predict(s)).collect());
        let preds = preds.into_iter().collect::<Result<Vec<_>>>()?;
        let records: Vec<EvalRecord> = preds
            .iter()
            .zip(data)
            .map(|(p, s)| EvalRecord {
                preds: p.boxes.iter().map(|b| (b.moving_prob(), b.bbox)).collect(),
                gts: s.boxes.clone(),
            })
            .collect();
        let masks: Vec<(Vec<usize>, Vec<usize>)> = preds
            .iter()
            .zip(data)
            .filter_map(|(p, s)| p.mask().map(|m| (m, s.mask.clone())))
            .collect();
        let mode = self.config.mode;
        Ok(MetricsReport::compute(
            mode.has_detection().then_some(records.as_slice()),
            mode.has_segmentation().then_some(masks.as_slice()),
            1,
        ))
    }

    /// Trains until `epochs` (or `max_steps`), evaluating on `val` (the
    /// training split when absent). With `out_dir`, appends to
    /// `history.jsonl` and writes `last.ckpt` and `best.ckpt`.
    pub fn fit(
        &mut self,
        train: &[PreparedSample],
        val: Option<&[PreparedSample]>,
        out_dir: Option<&Path>,
    ) -> Result<Vec<EpochRecord>> {
        if train.is_empty() {
            return Err(Error::Config("dataset: training split is empty".into()));
        }
        let eval_set = val.unwrap_or(train);
        let mut history = Vec::new();
        let mut log_file = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let p = dir.join("history.jsonl");
                Some((
                    std::fs::OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(&p)
                        .map_err(|e| Error::io(&p, e))?,
                    p,
                ))
            }
            None => None,
        };
        if let Some(dir) = out_dir {
            if self.epochs_done >= self.config.epochs || self.steps_left() == 0 {
                self.checkpoint().save(&dir.join("last.ckpt"))?;
            }
        }
        while self.epochs_done < self.config.epochs && self.steps_left() > 0 {
            let mut rec = self.train_epoch(train)?;
            let last = self.epochs_done == self.config.epochs || self.steps_left() == 0;
            let every = self.config.eval_every;
            if last || (every > 0 && self.epochs_done % every == 0) {
                let report = self.evaluate(eval_set)?;
                let parts: Vec<f64> = [report.map_total, report.seg_iou].into_iter().flatten().collect();
                let score = (!parts.is_empty()).then(|| parts.iter().sum::<f64>() / parts.len() as f64);
                rec.metrics = Some(report.to_json());
                rec.score = score;
                if let Some(s) = score {
                    if self.best_score.map_or(true, |b| s > b) {
                        self.best_score = Some(s);
                        if let Some(dir) = out_dir {
                            self.checkpoint().save(&dir.join("best.ckpt"))?;
                        }
                    }
                }
            }
            log::info!(
                "epoch {} lr {:.2e} loss {:.5} score {}",
                rec.epoch,
                rec.lr,
                rec.loss,
                rec.score.map_or("n/a".into(), |s| format!("{s:.4}"))
            );
            if let Some((f, p)) = log_file.as_mut() {
                let line = serde_json::to_string(&rec).expect("record serialises");
                writeln!(f, "{line}").map_err(|e| Error::io(p.as_path(), e))?;
            }
            if let Some(dir) = out_dir {
                self.checkpoint().save(&dir.join("last.ckpt"))?;
            }
            history.push(rec);
        }
        Ok(history)
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub out_dir: PathBuf,
    pub history: Vec<EpochRecord>,
    pub best_score: Option<f64>,
    pub steps: usize,
}

fn load_split(key: &str, path: &str) -> Result<Vec<VideoSample>> {
    if path.is_empty() {
        return Err(Error::Config(format!("{key}: no dataset path configured")));
    }
    let p = Path::new(path);
    if !p.is_dir() {
        return Err(Error::Config(format!("{key}: {path} is not a directory")));
    }
    let samples = read_dataset(p)?;
    if samples.is_empty() {
        return Err(Error::Config(format!("{key}: {path} holds no samples")));
    }
    Ok(samples)
}

/// File-driven training: reads the dataset(s) named in `config`, resumes
/// when `resume` is set, and writes outputs under `out_dir`. All
/// configuration and dataset errors surface before the first step.
pub fn train_with_threads(config: &TrainConfig, threads: usize) -> Result<TrainSummary> {
    config.validate()?;
    let train = load_split("dataset", &config.dataset)?;
    let val = match &config.val_dataset {
        Some(p) => Some(load_split("val_dataset", p)?),
        None => None,
    };
    let mut trainer = match &config.resume {
        Some(p) => {
            let ck = Checkpoint::load(Path::new(p))?;
            let mut cfg = config.clone();
            cfg.resume = None;
            let mut stored = ck.config.clone();
            stored.epochs = cfg.epochs;
            stored.max_steps = cfg.max_steps;
            stored.out_dir = cfg.out_dir.clone();
            stored.dataset = cfg.dataset.clone();
            stored.val_dataset = cfg.val_dataset.clone();
            stored.eval_every = cfg.eval_every;
            if stored.model_config() != cfg.model_config() {
                return Err(Error::CheckpointMismatch(format!(
                    "checkpoint {p} was trained with a different model configuration"
                )));
            }
            Trainer::from_checkpoint(&ck, Some(stored), threads)?
        }
        None => Trainer::new(config.clone(), threads)?,
    };
    let train = trainer.prepare(&train)?;
    let val = val.map(|v| trainer.prepare(&v)).transpose()?;
    let out = PathBuf::from(&config.out_dir);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let cfg_path = out.join("config.json");
    let text = serde_json::to_string_pretty(&trainer.config).expect("config serialises");
    std::fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
    let history = trainer.fit(&train, val.as_deref(), Some(&out))?;
    Ok(TrainSummary {
        out_dir: out,
        history,
        best_score: trainer.best_score,
        steps: trainer.step,
    })
}

pub fn train(config: &TrainConfig) -> Result<TrainSummary> {
    train_with_threads(config, threads_from_env())
}

/// JSON summary of a metrics report plus checkpoint progress.
pub fn eval_summary(report: &MetricsReport, ck: &Checkpoint) -> Value {
    let mut v = report.to_json();
    if let Value::Object(m) = &mut v {
        m.insert("epochs_done".into(), json!(ck.epochs_done));
        m.insert("step".into(), json!(ck.step));
    }
    v
}
