//! Little-endian binary checkpoints: magic, version, config, progress
//! counters, named parameter records, then Adam moments.

use std::path::Path;

use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

use super::optim::Adam;
use super::TrainConfig;

pub const MAGIC: &[u8; 4] = b"STMT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub epochs_done: usize,
    pub step: usize,
    pub best_score: Option<f64>,
    pub params: Vec<(String, Tensor)>,
    pub adam_step: u64,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
}

impl Checkpoint {
    pub fn capture(
        config: &TrainConfig,
        epochs_done: usize,
        step: usize,
        best_score: Option<f64>,
        store: &ParamStore,
        adam: &Adam,
    ) -> Self {
        Checkpoint {
            config: config.clone(),
            epochs_done,
            step,
            best_score,
            params: store
                .iter()
                .map(|(_, n, t)| (n.to_string(), Tensor::new(t.shape(), t.data().to_vec()).expect("shape matches data")))
                .collect(),
            adam_step: adam.step,
            adam_m: adam.m.clone(),
            adam_v: adam.v.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.config).expect("config serialises");
        put_u64(&mut out, cfg.len() as u64);
        out.extend_from_slice(&cfg);
        put_u64(&mut out, self.epochs_done as u64);
        put_u64(&mut out, self.step as u64);
        out.extend_from_slice(&self.best_score.unwrap_or(f64::NAN).to_le_bytes());
        put_u64(&mut out, self.params.len() as u64);
        for (name, t) in &self.params {
            put_u64(&mut out, name.len() as u64);
            out.extend_from_slice(name.as_bytes());
            put_u64(&mut out, t.shape().len() as u64);
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            put_f64s(&mut out, t.data());
        }
        put_u64(&mut out, self.adam_step);
        for buf in self.adam_m.iter().chain(&self.adam_v) {
            put_u64(&mut out, buf.len() as u64);
            put_f64s(&mut out, buf);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.err("bad magic, not a checkpoint"));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(r.err(&format!("unsupported checkpoint version {version}")));
        }
        let n = r.len()?;
        let config: TrainConfig =
            serde_json::from_slice(r.take(n)?).map_err(|e| r.err(&format!("config: {e}")))?;
        let epochs_done = r.u64()? as usize;
        let step = r.u64()? as usize;
        let best = r.f64()?;
        let count = r.len()?;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let n = r.len()?;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| r.err("parameter name is not UTF-8"))?;
            let ndim = r.len()?;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().product::<usize>();
            let data = r.f64s(numel)?;
            params.push((name, Tensor::new(&shape, data)?));
        }
        let adam_step = r.u64()?;
        let mut bufs = Vec::with_capacity(2 * count);
        for _ in 0..2 * count {
            let n = r.len()?;
            bufs.push(r.f64s(n)?);
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after optimizer state"));
        }
        let adam_v = bufs.split_off(count);
        Ok(Checkpoint {
            config,
            epochs_done,
            step,
            best_score: (!best.is_nan()).then_some(best),
            params,
            adam_step,
            adam_m: bufs,
            adam_v,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Copies parameters and optimizer moments into `store`/`adam`, which must
    /// hold the same names and shapes in the same order.
    pub fn restore(&self, store: &mut ParamStore, adam: &mut Adam) -> Result<()> {
        if self.params.len() != store.len() {
            let first = store
                .iter()
                .map(|(_, n, _)| n.to_string())
                .zip(self.params.iter().map(|(n, _)| n.clone()).chain(std::iter::repeat(String::new())))
                .find(|(a, b)| a != b)
                .map_or_else(|| self.params[store.len()].0.clone(), |(a, _)| a);
            return Err(Error::CheckpointMismatch(format!(
                "checkpoint has {} parameters, model has {}; first difference at {first}",
                self.params.len(),
                store.len()
            )));
        }
        for ((id, name, t), (cname, ct)) in store.iter().zip(&self.params) {
            if name != cname || t.shape() != ct.shape() {
                return Err(Error::CheckpointMismatch(format!(
                    "parameter {name} {:?} vs checkpoint {cname} {:?}",
                    t.shape(),
                    ct.shape()
                )));
            }
            if self.adam_m[id.index()].len() != t.len() || self.adam_v[id.index()].len() != t.len() {
                return Err(Error::CheckpointMismatch(format!("optimizer state for {name} has the wrong size")));
            }
        }
        let ids: Vec<_> = store.ids().collect();
        for (id, (_, ct)) in ids.into_iter().zip(&self.params) {
            store.get_mut(id).data_mut().copy_from_slice(ct.data());
        }
        adam.step = self.adam_step;
        adam.m = self.adam_m.clone();
        adam.v = self.adam_v.clone();
        Ok(())
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn err(&self, msg: &str) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.err(&format!("truncated: need {n} more bytes, {} left", self.bytes.len() - self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        if v > (self.bytes.len() as u64) * 8 {
            return Err(self.err(&format!("implausible length {v}")));
        }
        Ok(v as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
