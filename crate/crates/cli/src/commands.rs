use std::path::{Path, PathBuf};

use clap::Args;
use serde_json::json;
use st_mtl::data::{generate_dataset, manifest_summary, read_dataset, write_dataset, SceneSpec, VideoSample};
use st_mtl::trainer::{eval_summary, threads_from_env, train_with_threads, Checkpoint, TrainConfig, Trainer};
use st_mtl::{Error, Result};

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub num: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Image size as HxW.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 2)]
    pub frames: usize,
    #[arg(long, default_value_t = 2)]
    pub movers: usize,
    #[arg(long = "static", default_value_t = 1)]
    pub distractors: usize,
    /// Smallest object extent in pixels.
    #[arg(long, default_value_t = 12)]
    pub min_size: usize,
    #[arg(long, default_value_t = 20)]
    pub max_size: usize,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    let (h, w) = (parse(h)?, parse(w)?);
    if h == 0 || w == 0 {
        return Err("size must be nonzero".into());
    }
    Ok((h, w))
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let spec = SceneSpec {
        height: a.size.0,
        width: a.size.1,
        frames: a.frames,
        movers: a.movers,
        distractors: a.distractors,
        min_size: a.min_size,
        max_size: a.max_size,
        noise: a.noise,
        ..SceneSpec::default()
    };
    spec.validate()?;
    let samples = generate_dataset(&spec, a.num, a.seed)?;
    let manifest = write_dataset(&samples, &a.out)?;
    println!("{}", manifest_summary(&manifest));
    Ok(())
}

pub fn train(config: &Path, overrides: &[String]) -> Result<()> {
    let cfg = TrainConfig::load(config, overrides)?;
    let summary = train_with_threads(&cfg, threads_from_env())?;
    let last = summary.history.last();
    println!(
        "{}",
        json!({
            "out_dir": summary.out_dir.display().to_string(),
            "epochs": summary.history.len(),
            "steps": summary.steps,
            "final_loss": last.map(|r| r.loss),
            "metrics": last.and_then(|r| r.metrics.clone()),
            "best_score": summary.best_score,
        })
    );
    Ok(())
}

pub(crate) fn load_samples(dir: &Path) -> Result<Vec<VideoSample>> {
    let samples = read_dataset(dir)?;
    if samples.is_empty() {
        return Err(Error::Data(format!("{} holds no samples", dir.display())));
    }
    Ok(samples)
}

/// Restores a trainer from `checkpoint`, checking it against `config` when given.
pub(crate) fn restore(checkpoint: &Path, config: Option<&Path>) -> Result<(Checkpoint, Trainer)> {
    let ck = Checkpoint::load(checkpoint)?;
    let cfg = match config {
        Some(p) => Some(TrainConfig::load(p, &[])?),
        None => None,
    };
    let trainer = Trainer::from_checkpoint(&ck, cfg, threads_from_env())?;
    Ok((ck, trainer))
}

pub fn eval(checkpoint: &Path, data: &Path, config: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let (ck, trainer) = restore(checkpoint, config)?;
    let samples = load_samples(data)?;
    let prepared = trainer.prepare(&samples)?;
    let report = trainer.evaluate(&prepared)?;
    print!("{}", report.to_text());
    let dest = out.map(Path::to_path_buf).unwrap_or_else(|| checkpoint.with_extension("eval.json"));
    let text = serde_json::to_string_pretty(&eval_summary(&report, &ck)).expect("metrics serialise");
    std::fs::write(&dest, text + "\n").map_err(|e| Error::io(&dest, e))?;
    Ok(())
}
