//! Evaluation over clean and corrupted data in part, whole and ensemble
//! modes, optionally per part iteration.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Grouping;
use crate::data::{corrupt, CorruptionSpec, Dataset, IGNORE_LABEL};
use crate::error::Result;
use crate::inference::{ConfusionMatrix, Mode, ScoreFields};
use crate::model::Model;
use crate::params::{ParamStore, Session};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub modes: Vec<Mode>,
    /// `None` is the clean condition.
    pub conditions: Vec<Option<CorruptionSpec>>,
    /// Also report part-level mIoU for every iteration.
    pub per_iteration: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            modes: Mode::ALL.to_vec(),
            conditions: vec![None],
            per_iteration: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalEntry {
    /// `"clean"` or `kind:severity`.
    pub corruption: String,
    pub mode: Mode,
    /// 1-based part iteration for per-iteration rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<usize>,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub grouping: Grouping,
    pub images: usize,
    pub entries: Vec<EvalEntry>,
}

impl EvalReport {
    pub fn find(
        &self,
        corruption: &str,
        mode: Mode,
        iteration: Option<usize>,
    ) -> Option<&EvalEntry> {
        self.entries
            .iter()
            .find(|e| e.corruption == corruption && e.mode == mode && e.iteration == iteration)
    }

    /// Mean mIoU over the given corruption names for `mode`.
    pub fn mean_miou(&self, corruptions: &[String], mode: Mode) -> Option<f64> {
        let vals: Vec<f64> = corruptions
            .iter()
            .map(|c| self.find(c, mode, None).map(|e| e.miou))
            .collect::<Option<_>>()?;
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

pub fn condition_name(c: &Option<CorruptionSpec>) -> String {
    c.map_or_else(|| "clean".to_string(), |s| s.to_string())
}

/// Confusion matrices for one image under one condition: one per mode, then
/// one per part iteration.
fn image_confusions(
    model: &Model,
    store: &ParamStore,
    data: &Dataset,
    i: usize,
    cond: &Option<CorruptionSpec>,
    modes: &[Mode],
    iters: usize,
) -> Result<Vec<ConfusionMatrix>> {
    let sample = &data.samples[i];
    let k = model.cfg.classes;
    let image = match cond {
        Some(c) => corrupt(&sample.image, *c, sample.seed),
        None => sample.image.clone(),
    };
    let mut s = Session::new(store, false);
    let out = model.forward(&mut s, &image)?;
    let fields = ScoreFields::from_output(&s, &out)?;
    drop(s);
    let t = model.cfg.inference_index();
    let mut cms = Vec::with_capacity(modes.len() + iters);
    for &m in modes {
        let mut cm = ConfusionMatrix::new(k);
        cm.add(&fields.labels(m, t)?, &sample.labels, IGNORE_LABEL)?;
        cms.push(cm);
    }
    for it in 0..iters {
        let mut cm = ConfusionMatrix::new(k);
        cm.add(&fields.part_labels(it)?, &sample.labels, IGNORE_LABEL)?;
        cms.push(cm);
    }
    Ok(cms)
}

pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    data: &Dataset,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let hierarchical = model.part.is_some();
    let modes: Vec<Mode> = opts
        .modes
        .iter()
        .copied()
        .filter(|&m| hierarchical || m == Mode::Whole)
        .collect();
    let iters = if opts.per_iteration && hierarchical {
        model.cfg.iterations
    } else {
        0
    };
    let k = model.cfg.classes;
    let mut entries = Vec::new();
    for cond in &opts.conditions {
        let per_image: Vec<Result<Vec<ConfusionMatrix>>> = (0..data.len())
            .into_par_iter()
            .map(|i| image_confusions(model, store, data, i, cond, &modes, iters))
            .collect();
        let mut totals = vec![ConfusionMatrix::new(k); modes.len() + iters];
        for r in per_image {
            for (t, c) in totals.iter_mut().zip(r?) {
                t.merge(&c);
            }
        }
        let name = condition_name(cond);
        for (j, cm) in totals.iter().enumerate() {
            let rep = cm.report();
            let (mode, iteration) = if j < modes.len() {
                (modes[j], None)
            } else {
                (Mode::Part, Some(j - modes.len() + 1))
            };
            entries.push(EvalEntry {
                corruption: name.clone(),
                mode,
                iteration,
                per_class_iou: rep.per_class_iou,
                miou: rep.miou,
            });
        }
    }
    Ok(EvalReport {
        grouping: model.cfg.grouping,
        images: data.len(),
        entries,
    })
}
