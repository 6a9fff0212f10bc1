//! Turning grouping outputs into segmentation scores, label maps and mIoU.
//!
//! Scores are pixel-major (`pixels×K`). The part-level field `O1` lives on the
//! stride-8 grid and the whole-level field `O2` on the stride-4 grid; the
//! ensemble upsamples `O1` to stride 4 (nearest) before adding.

use hg_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::backbone::DecoderFeatures;
use crate::data::LabelMap;
use crate::error::{config_err, Result};
use crate::model::ModelOutput;
use crate::params::Session;
use crate::part::{Window, WINDOW};
use crate::whole::drop_no_object;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Part,
    Whole,
    Ensemble,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Part, Mode::Whole, Mode::Ensemble];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Part => "part",
            Mode::Whole => "whole",
            Mode::Ensemble => "ensemble",
        }
    }
}

/// `O1[j, k] = Σ_s A[j, s] · P_m[N_j(s), k]`.
pub fn assemble_part_output(probs: &Tensor, assign: &Tensor, window: &Window) -> Result<Tensor> {
    let (np, k) = probs.dims2()?;
    let hw = assign.len() / WINDOW;
    if assign.len() != window.idx.len() {
        return config_err("assignment and window sizes differ");
    }
    let mut out = vec![0.0; hw * k];
    for j in 0..hw {
        let dst = &mut out[j * k..(j + 1) * k];
        for sl in 0..WINDOW {
            let c = window.idx[j * WINDOW + sl];
            if c < 0 {
                continue;
            }
            let a = assign.data()[j * WINDOW + sl];
            debug_assert!((c as usize) < np);
            for (d, p) in dst.iter_mut().zip(probs.row(c as usize)) {
                *d += a * p;
            }
        }
    }
    Ok(Tensor::new([hw, k], out)?)
}

/// `O2[j, k] = Σ_q P_h[q, k] · M[q, j]` over the real classes.
pub fn assemble_whole_output(probs: &Tensor, masks: &Tensor) -> Result<Tensor> {
    let p = drop_no_object(probs);
    let (nq, k) = p.dims2()?;
    let (mq, px) = masks.dims2()?;
    if mq != nq {
        return config_err(format!("{nq} class rows vs {mq} masks"));
    }
    let mut out = vec![0.0; px * k];
    for q in 0..nq {
        let pr = p.row(q);
        for (j, &m) in masks.row(q).iter().enumerate() {
            for c in 0..k {
                out[j * k + c] += pr[c] * m;
            }
        }
    }
    Ok(Tensor::new([px, k], out)?)
}

/// Nearest upsampling of a pixel-major `(h·w)×K` field by `factor`.
pub fn upsample_scores(scores: &Tensor, h: usize, w: usize, factor: usize) -> Result<Tensor> {
    let (hw, k) = scores.dims2()?;
    if hw != h * w {
        return config_err(format!("{hw} score rows for a {h}x{w} grid"));
    }
    let (oh, ow) = (h * factor, w * factor);
    let mut out = Vec::with_capacity(oh * ow * k);
    for y in 0..oh {
        for x in 0..ow {
            out.extend_from_slice(scores.row((y / factor) * w + x / factor));
        }
    }
    Ok(Tensor::new([oh * ow, k], out)?)
}

/// `O = O1 + O2`.
pub fn ensemble(o1: &Tensor, o2: &Tensor) -> Result<Tensor> {
    if o1.shape() != o2.shape() {
        return config_err(format!("ensemble of {:?} and {:?}", o1.shape(), o2.shape()));
    }
    let data = o1
        .data()
        .iter()
        .zip(o2.data())
        .map(|(a, b)| a + b)
        .collect();
    Ok(Tensor::new(o1.shape().to_vec(), data)?)
}

/// Per-pixel argmax with ties resolved to the lowest class id.
pub fn argmax_labels(scores: &Tensor, h: usize, w: usize) -> Result<LabelMap> {
    let (hw, k) = scores.dims2()?;
    if hw != h * w {
        return config_err(format!("{hw} score rows for a {h}x{w} grid"));
    }
    let data = (0..hw)
        .map(|j| {
            let row = scores.row(j);
            let mut best = 0;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new(h, w, data)
}

/// Score fields of one forward pass, before argmax.
#[derive(Clone, Debug)]
pub struct ScoreFields {
    /// `O1` per part iteration on the stride-8 grid (empty in flat mode).
    pub part: Vec<Tensor>,
    /// `O2` on the stride-4 grid.
    pub whole: Tensor,
    pub k_hw: (usize, usize),
    pub k0_hw: (usize, usize),
    pub input_hw: (usize, usize),
    pub padded_hw: (usize, usize),
}

impl ScoreFields {
    pub fn from_output(s: &Session, out: &ModelOutput) -> Result<Self> {
        let part = match &out.part {
            Some(po) => po
                .iterations
                .iter()
                .map(|it| {
                    assemble_part_output(s.g.value(it.probs), s.g.value(it.assign), &po.window)
                })
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        let last = out.whole.last();
        let whole = assemble_whole_output(s.g.value(last.probs), s.g.value(last.masks))?;
        let DecoderFeatures {
            k_hw,
            k0_hw,
            input_hw,
            padded_hw,
            ..
        } = out.feats;
        Ok(Self {
            part,
            whole,
            k_hw,
            k0_hw,
            input_hw,
            padded_hw,
        })
    }

    fn to_input(&self, grid: LabelMap) -> LabelMap {
        let factor = self.padded_hw.0 / grid.height;
        grid.upsample_to(factor, self.input_hw.0, self.input_hw.1)
    }

    /// Part-level label map at input resolution from iteration `t` (0-based).
    pub fn part_labels(&self, t: usize) -> Result<LabelMap> {
        let Some(o1) = self.part.get(t) else {
            return config_err(format!("no part output for iteration {}", t + 1));
        };
        Ok(self.to_input(argmax_labels(o1, self.k_hw.0, self.k_hw.1)?))
    }

    pub fn whole_labels(&self) -> Result<LabelMap> {
        Ok(self.to_input(argmax_labels(&self.whole, self.k0_hw.0, self.k0_hw.1)?))
    }

    pub fn ensemble_labels(&self, t: usize) -> Result<LabelMap> {
        let Some(o1) = self.part.get(t) else {
            return config_err(format!("no part output for iteration {}", t + 1));
        };
        let factor = self.k0_hw.0 / self.k_hw.0;
        let up = upsample_scores(o1, self.k_hw.0, self.k_hw.1, factor)?;
        let o = ensemble(&up, &self.whole)?;
        Ok(self.to_input(argmax_labels(&o, self.k0_hw.0, self.k0_hw.1)?))
    }

    /// Label map for `mode`; flat models fall back to whole-level output for
    /// every mode.
    pub fn labels(&self, mode: Mode, t: usize) -> Result<LabelMap> {
        match mode {
            _ if self.part.is_empty() => self.whole_labels(),
            Mode::Part => self.part_labels(t),
            Mode::Whole => self.whole_labels(),
            Mode::Ensemble => self.ensemble_labels(t),
        }
    }
}

/// Accumulated `K×K` confusion counts (rows = ground truth).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap, ignore: u8) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return config_err("prediction and ground truth differ in size");
        }
        let k = self.classes;
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g == ignore {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= k || g >= k {
                return config_err(format!("label out of range for {k} classes"));
            }
            self.counts[g * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn report(&self) -> IouReport {
        let k = self.classes;
        let per_class_iou: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.counts[c * k + c];
                let fn_: u64 = (0..k).map(|p| self.counts[c * k + p]).sum::<u64>() - tp;
                let fp: u64 = (0..k).map(|g| self.counts[g * k + c]).sum::<u64>() - tp;
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        IouReport {
            per_class_iou,
            miou,
        }
    }
}

/// mIoU of a single label map.
pub fn miou(pred: &LabelMap, gt: &LabelMap, classes: usize, ignore: u8) -> Result<IouReport> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add(pred, gt, ignore)?;
    Ok(cm.report())
}
