//! Command implementations shared by the `hgseg` binary and the test suites.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::{Grouping, RunConfig};
use crate::data::{build_splits, split_dir, Dataset, Manifest, SceneSpec, Split};
use crate::error::{HgError, Result};
use crate::eval::{evaluate, EvalOptions, EvalReport};
use crate::train::{load_model, LogRecord, RunLayout, Trainer};

pub fn generate(
    root: &Path,
    counts: [usize; 3],
    spec: &SceneSpec,
    seed: u64,
) -> Result<Vec<Manifest>> {
    build_splits(root, counts, spec, seed)
}

#[derive(Clone, Debug)]
pub struct TrainRequest {
    /// Dataset root holding `train/` and optionally `val/`.
    pub data: PathBuf,
    pub out: PathBuf,
    pub run: RunConfig,
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub step: u64,
    pub last: Option<LogRecord>,
    pub params: usize,
    pub val: Option<EvalReport>,
    pub checkpoint: PathBuf,
}

/// Trains, checkpoints under `out/ckpt`, and evaluates on `val/` when
/// present, writing `out/logs/val_metrics.json`.
pub fn train(req: &TrainRequest) -> Result<TrainSummary> {
    let train_set = Dataset::load(&split_dir(&req.data, Split::Train))?;
    if train_set.manifest.classes != req.run.model.classes {
        return Err(HgError::Config(format!(
            "dataset has {} classes, model expects {}",
            train_set.manifest.classes, req.run.model.classes
        )));
    }
    let layout = RunLayout::new(&req.out);
    layout.create()?;
    fs::write(layout.root.join("config.toml"), toml::to_string(&req.run)?)?;
    let mut trainer = match &req.resume {
        Some(p) => Trainer::resume(req.run.clone(), &Checkpoint::load(p)?)?,
        None => Trainer::new(req.run.clone())?,
    };
    let records = trainer.run(&train_set, Some(&layout))?;
    let val_dir = split_dir(&req.data, Split::Val);
    let val = if val_dir.join(crate::data::dataset::MANIFEST).exists() {
        let val_set = Dataset::load(&val_dir)?;
        let report = evaluate(
            &trainer.model,
            &trainer.store,
            &val_set,
            &EvalOptions::default(),
        )?;
        fs::write(
            layout.logs_dir().join("val_metrics.json"),
            serde_json::to_string_pretty(&report)? + "\n",
        )?;
        Some(report)
    } else {
        None
    };
    Ok(TrainSummary {
        step: trainer.step,
        last: records.last().copied(),
        params: trainer.store.scalar_count(),
        val,
        checkpoint: layout.last_ckpt(),
    })
}

/// Same as [`train`] with the whole-level grouper fed pixel features.
pub fn train_baseline(req: &TrainRequest) -> Result<TrainSummary> {
    let mut req = req.clone();
    req.run.model.grouping = Grouping::Flat;
    train(&req)
}

pub fn eval(ckpt: &Path, split: &Path, opts: &EvalOptions) -> Result<EvalReport> {
    let (model, store, _) = load_model(ckpt)?;
    let data = Dataset::load(split)?;
    evaluate(&model, &store, &data, opts)
}
