//! Mini-batch training with per-image graphs and AdamW.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use hg_tensor::TensorError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, TrainConfig};
use crate::data::{Dataset, LabelMap, RgbImage, Sample};
use crate::error::{HgError, Result};
use crate::losses::{compute_losses, LossBreakdown};
use crate::model::Model;
use crate::params::{AdamW, Grads, ParamStore, Session};

/// Polynomial decay `lr · (1 − step/iters)^power`, evaluated before the
/// update of 0-based `step`.
pub fn lr_at(cfg: &TrainConfig, step: u64) -> f64 {
    if cfg.poly_power == 0.0 || cfg.iters == 0 {
        return cfg.lr;
    }
    let frac = (step.min(cfg.iters) as f64) / cfg.iters as f64;
    cfg.lr * (1.0 - frac).powf(cfg.poly_power)
}

/// Loss and parameter gradients for one image.
pub fn image_grads(
    model: &Model,
    store: &ParamStore,
    image: &RgbImage,
    labels: &LabelMap,
) -> Result<(Grads, LossBreakdown)> {
    let mut s = Session::new(store, true);
    let out = model.forward(&mut s, image)?;
    let (loss, breakdown) = compute_losses(&mut s, &out, labels, &model.cfg)?;
    let grads = s.param_grads(loss)?;
    Ok((grads, breakdown))
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub part_cls: f64,
    pub contrast: f64,
    pub dice: f64,
    pub mask: f64,
    pub mask_cls: f64,
    pub total: f64,
}

impl LogRecord {
    pub fn new(step: u64, l: &LossBreakdown) -> Self {
        Self {
            step,
            part_cls: l.part_cls,
            contrast: l.contrast,
            dice: l.dice,
            mask: l.mask,
            mask_cls: l.mask_cls,
            total: l.total,
        }
    }
}

/// Where a training run writes its artifacts.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn ckpt_dir(&self) -> PathBuf {
        self.root.join("ckpt")
    }

    pub fn logs_dir(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn preds_dir(&self) -> PathBuf {
        self.root.join("preds")
    }

    pub fn last_ckpt(&self) -> PathBuf {
        self.ckpt_dir().join("last.hgck")
    }

    pub fn step_ckpt(&self, step: u64) -> PathBuf {
        self.ckpt_dir().join(format!("step_{step:06}.hgck"))
    }

    pub fn train_log(&self) -> PathBuf {
        self.logs_dir().join("train.jsonl")
    }

    pub fn create(&self) -> Result<()> {
        for d in [self.ckpt_dir(), self.logs_dir(), self.preds_dir()] {
            fs::create_dir_all(d)?;
        }
        Ok(())
    }
}

pub struct Trainer {
    pub model: Model,
    pub store: ParamStore,
    pub opt: AdamW,
    pub cfg: RunConfig,
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let (model, store) = Model::new(&cfg.model)?;
        let opt = AdamW::new(&store);
        Ok(Self {
            model,
            store,
            opt,
            cfg,
            step: 0,
        })
    }

    /// Restores parameters, optimizer moments and the step counter; the
    /// checkpoint's model config must equal `cfg.model`.
    pub fn resume(cfg: RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        ckpt.check_config(&cfg.model)?;
        let mut t = Self::new(cfg)?;
        t.store.load_from(ckpt.params.clone())?;
        if let Some(opt) = &ckpt.optimizer {
            t.opt = opt.clone();
        }
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.cfg.model, self.step, &self.store, Some(&self.opt))
    }

    /// Batch indices and flip flags for `step`, derived from the seed and
    /// step alone so that resumed runs replay the same schedule.
    pub fn batch_plan(&self, step: u64, n: usize) -> Vec<(usize, bool)> {
        let seed = self.cfg.model.seed ^ step.wrapping_add(1).wrapping_mul(0xA076_1D64_78BD_642F);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.cfg.train.batch)
            .map(|_| {
                let i = rng.gen_range(0..n);
                let flip = self.cfg.train.hflip && rng.gen_bool(0.5);
                (i, flip)
            })
            .collect()
    }

    /// Runs one optimizer step on `data`; returns the batch-mean losses.
    pub fn train_step(&mut self, data: &Dataset) -> Result<LossBreakdown> {
        if data.is_empty() {
            return Err(HgError::Data("training set is empty".into()));
        }
        let plan = self.batch_plan(self.step, data.len());
        let (model, store) = (&self.model, &self.store);
        let results: Vec<Result<(Grads, LossBreakdown)>> = plan
            .par_iter()
            .map(|&(i, flip)| {
                let s = &data.samples[i];
                if flip {
                    image_grads(
                        model,
                        store,
                        &s.image.flip_horizontal(),
                        &s.labels.flip_horizontal(),
                    )
                } else {
                    image_grads(model, store, &s.image, &s.labels)
                }
            })
            .collect();
        let mut total = Grads::zeros_like(&self.store);
        let mut mean = LossBreakdown::default();
        let inv = 1.0 / plan.len() as f64;
        let samples: Vec<&Sample> = plan.iter().map(|&(i, _)| &data.samples[i]).collect();
        for r in results {
            match r {
                Ok((g, l)) => {
                    total.add_assign(&g);
                    mean.add_scaled(&l, inv);
                }
                Err(HgError::Tensor(
                    e @ (TensorError::InvalidSlice { .. } | TensorError::Domain { .. }),
                )) => {
                    return Err(self.diverged(&e.to_string(), &mean, &plan, &samples));
                }
                Err(e) => return Err(e),
            }
        }
        total.scale(inv);
        if !mean.is_finite() || !total.is_finite() {
            return Err(self.diverged("non-finite loss or gradient", &mean, &plan, &samples));
        }
        let lr = lr_at(&self.cfg.train, self.step);
        self.opt
            .update(&mut self.store, &total, lr, &self.cfg.train);
        self.step += 1;
        Ok(mean)
    }

    fn diverged(
        &self,
        reason: &str,
        losses: &LossBreakdown,
        plan: &[(usize, bool)],
        samples: &[&Sample],
    ) -> HgError {
        let dump = serde_json::json!({
            "step": self.step,
            "losses": losses,
            "batch": plan.iter().zip(samples).map(|(&(i, flip), s)| serde_json::json!({
                "index": i, "seed": s.seed, "flipped": flip,
            })).collect::<Vec<_>>(),
        });
        HgError::Diverged {
            step: self.step,
            msg: format!("{reason}; last batch: {dump}"),
        }
    }

    /// Trains until `cfg.train.iters`, logging every step to
    /// `logs/train.jsonl` and checkpointing under `ckpt/` when a layout is
    /// given.
    pub fn run(&mut self, data: &Dataset, layout: Option<&RunLayout>) -> Result<Vec<LogRecord>> {
        let mut log = match layout {
            Some(l) => {
                l.create()?;
                let f = if self.step == 0 {
                    File::create(l.train_log())?
                } else {
                    OpenOptions::new()
                        .create(true)
                        .append(true)
                        .open(l.train_log())?
                };
                Some(BufWriter::new(f))
            }
            None => None,
        };
        let mut records = Vec::new();
        let tc = self.cfg.train.clone();
        while self.step < tc.iters {
            let losses = match self.train_step(data) {
                Ok(l) => l,
                Err(e @ HgError::Diverged { .. }) => {
                    if let Some(l) = layout {
                        let _ = fs::write(l.logs_dir().join("diverged.txt"), e.to_string());
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let rec = LogRecord::new(self.step, &losses);
            if tc.log_every > 0 && (self.step.is_multiple_of(tc.log_every) || self.step == tc.iters)
            {
                if let Some(w) = log.as_mut() {
                    serde_json::to_writer(&mut *w, &rec)?;
                    w.write_all(b"\n")?;
                }
                log::info!(
                    "step {} total {:.4} part {:.4} contrast {:.4} dice {:.4} mask {:.4} cls {:.4}",
                    rec.step,
                    rec.total,
                    rec.part_cls,
                    rec.contrast,
                    rec.dice,
                    rec.mask,
                    rec.mask_cls
                );
            }
            records.push(rec);
            if let Some(l) = layout {
                if tc.ckpt_every > 0
                    && self.step.is_multiple_of(tc.ckpt_every)
                    && self.step < tc.iters
                {
                    self.checkpoint().save(&l.step_ckpt(self.step))?;
                    self.checkpoint().save(&l.last_ckpt())?;
                }
            }
        }
        if let Some(w) = log.as_mut() {
            w.flush()?;
        }
        if let Some(l) = layout {
            self.checkpoint().save(&l.last_ckpt())?;
        }
        Ok(records)
    }
}

/// Loads a checkpoint into a freshly built model.
pub fn load_model(path: &Path) -> Result<(Model, ParamStore, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let (model, mut store) = Model::new(&ckpt.config)?;
    store.load_from(ckpt.params.clone())?;
    Ok((model, store, ckpt))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::{SceneSpec, Split};

    fn tiny_run(iters: u64) -> RunConfig {
        RunConfig {
            model: ModelConfig {
                d: 16,
                heads: 2,
                ffn_hidden: 16,
                queries: 4,
                classes: 3,
                iterations: 2,
                backbone_channels: [8, 8, 16, 16],
                ..ModelConfig::default()
            },
            train: TrainConfig {
                iters,
                batch: 2,
                lr: 1e-3,
                ..TrainConfig::default()
            },
        }
    }

    fn tiny_data(n: usize) -> Dataset {
        let spec = SceneSpec {
            height: 32,
            width: 32,
            classes: 3,
            ..SceneSpec::default()
        };
        Dataset::synthesize(Split::Train, &spec, 5, n).unwrap()
    }

    #[test]
    fn poly_schedule() {
        let cfg = TrainConfig {
            iters: 100,
            lr: 1e-3,
            poly_power: 1.0,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(&cfg, 0), 1e-3);
        assert!((lr_at(&cfg, 50) - 5e-4).abs() < 1e-15);
        assert_eq!(lr_at(&cfg, 100), 0.0);
        let flat = TrainConfig {
            poly_power: 0.0,
            ..cfg
        };
        assert_eq!(lr_at(&flat, 70), 1e-3);
        let d = TrainConfig::default();
        assert_eq!((d.lr, d.weight_decay), (1e-4, 0.05));
    }

    #[test]
    fn batch_plan_depends_only_on_seed_and_step() {
        let a = Trainer::new(tiny_run(10)).unwrap();
        let b = Trainer::new(tiny_run(10)).unwrap();
        assert_eq!(a.batch_plan(3, 50), b.batch_plan(3, 50));
        assert_ne!(a.batch_plan(3, 50), a.batch_plan(4, 50));
    }

    #[test]
    fn smoke_run_reduces_the_loss() {
        let data = tiny_data(6);
        let mut t = Trainer::new(tiny_run(200)).unwrap();
        let recs = t.run(&data, None).unwrap();
        assert_eq!(recs.len(), 200);
        let first = recs[0].total;
        let last = recs[190..].iter().map(|r| r.total).sum::<f64>() / 10.0;
        assert!(last < first, "{first} -> {last}");
        assert!(recs[199].total < first);
    }

    #[test]
    fn resume_continues_exactly() {
        let data = tiny_data(4);
        let dir = tempfile::tempdir().unwrap();
        let layout = RunLayout::new(dir.path());

        let mut straight = Trainer::new(tiny_run(4)).unwrap();
        straight.run(&data, None).unwrap();

        let mut first = Trainer::new(tiny_run(4)).unwrap();
        for _ in 0..2 {
            let l = first.train_step(&data).unwrap();
            let rec = LogRecord::new(first.step, &l);
            layout.create().unwrap();
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(layout.train_log())
                .unwrap();
            writeln!(f, "{}", serde_json::to_string(&rec).unwrap()).unwrap();
        }
        first.checkpoint().save(&layout.last_ckpt()).unwrap();
        let ck = Checkpoint::load(&layout.last_ckpt()).unwrap();
        assert_eq!(ck.step, 2);
        let mut resumed = Trainer::resume(tiny_run(4), &ck).unwrap();
        assert_eq!(resumed.step, 2);
        let recs = resumed.run(&data, Some(&layout)).unwrap();
        assert_eq!(recs.iter().map(|r| r.step).collect::<Vec<_>>(), vec![3, 4]);
        assert_eq!(resumed.store, straight.store);
        assert_eq!(resumed.opt, straight.opt);
        let log = fs::read_to_string(layout.train_log()).unwrap();
        assert_eq!(log.lines().count(), 4);

        let mut other = tiny_run(4);
        other.model.tau = 0.3;
        assert!(Trainer::resume(other, &ck).is_err());
    }

    #[test]
    fn non_finite_input_reports_divergence() {
        let mut data = tiny_data(2);
        for s in &mut data.samples {
            s.image.data[0] = f32::NAN;
        }
        let dir = tempfile::tempdir().unwrap();
        let layout = RunLayout::new(dir.path());
        let mut t = Trainer::new(tiny_run(3)).unwrap();
        let err = t.run(&data, Some(&layout)).unwrap_err();
        assert!(matches!(err, HgError::Diverged { step: 0, .. }), "{err}");
        let dump = fs::read_to_string(layout.logs_dir().join("diverged.txt")).unwrap();
        assert!(dump.contains("\"seed\""));
    }
}
