//! Training objectives: part-level cross-entropy, pixel-to-mask contrastive
//! loss, and matched whole-level dice, mask and classification losses.

use hg_tensor::{Tensor, Var, COSINE_EPS};

use crate::config::{LossWeights, ModelConfig};
use crate::data::{LabelMap, IGNORE_LABEL};
use crate::error::{config_err, Result};
use crate::matching::hungarian;
use crate::model::ModelOutput;
use crate::params::Session;
use crate::part::distribute;

/// Probabilities are clamped to this before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;
/// Additive smoothing of the dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

/// Semantic masks of one label map: one mask per class present.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskTargets {
    pub classes: Vec<u8>,
    /// Indices of non-ignored pixels.
    pub valid: Vec<usize>,
    /// Mask index of each valid pixel.
    pub member: Vec<usize>,
    pub pixels: usize,
}

impl MaskTargets {
    pub fn from_labels(labels: &LabelMap) -> Self {
        let mut classes: Vec<u8> = labels
            .data
            .iter()
            .copied()
            .filter(|&l| l != IGNORE_LABEL)
            .collect();
        classes.sort_unstable();
        classes.dedup();
        let mut valid = Vec::new();
        let mut member = Vec::new();
        for (p, &l) in labels.data.iter().enumerate() {
            if l != IGNORE_LABEL {
                valid.push(p);
                member.push(classes.binary_search(&l).expect("class collected above"));
            }
        }
        Self {
            classes,
            valid,
            member,
            pixels: labels.data.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// `g × valid` binary masks restricted to valid pixels.
    pub fn dense_valid(&self) -> Tensor {
        let n = self.valid.len();
        let mut t = Tensor::zeros([self.len(), n]);
        for (i, &m) in self.member.iter().enumerate() {
            t.data_mut()[m * n + i] = 1.0;
        }
        t
    }

    /// `g × pixels` masks M_G over the full grid (ignored pixels are 0).
    pub fn dense(&self) -> Tensor {
        let mut t = Tensor::zeros([self.len(), self.pixels]);
        for (&p, &m) in self.valid.iter().zip(&self.member) {
            t.data_mut()[m * self.pixels + p] = 1.0;
        }
        t
    }
}

/// Pads with ignore labels to `h × w`.
pub fn pad_labels(labels: &LabelMap, h: usize, w: usize) -> LabelMap {
    let mut out = LabelMap::filled(h, w, IGNORE_LABEL);
    for y in 0..labels.height.min(h) {
        for x in 0..labels.width.min(w) {
            out.set(y, x, labels.get(y, x));
        }
    }
    out
}

/// Input-resolution labels brought to the two supervised grids.
#[derive(Clone, Debug)]
pub struct Targets {
    /// Labels on the grouping grid (stride 8).
    pub fine: LabelMap,
    /// Labels on the mask grid (stride 4).
    pub masks: MaskTargets,
    pub fine_masks: MaskTargets,
}

impl Targets {
    pub fn new(
        labels: &LabelMap,
        padded_hw: (usize, usize),
        k_stride: usize,
        k0_stride: usize,
    ) -> Self {
        let padded = pad_labels(labels, padded_hw.0, padded_hw.1);
        let fine = padded.downsample(k_stride);
        let coarse = padded.downsample(k0_stride);
        Self {
            fine_masks: MaskTargets::from_labels(&fine),
            masks: MaskTargets::from_labels(&coarse),
            fine,
        }
    }
}

/// Mean over non-ignored pixels of `−log O1[pixel, label]`. `o1` is
/// pixel-major, `(H·W)×K`.
pub fn part_cls_loss(s: &mut Session, o1: Var, labels: &LabelMap) -> Result<Var> {
    let (hw, k) = s.g.value(o1).dims2()?;
    if hw != labels.data.len() {
        return config_err(format!(
            "O1 has {hw} pixels, labels have {}",
            labels.data.len()
        ));
    }
    let idx: Vec<isize> = labels
        .data
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != IGNORE_LABEL)
        .map(|(p, &l)| {
            debug_assert!((l as usize) < k);
            (p * k + l as usize) as isize
        })
        .collect();
    if idx.is_empty() {
        return Ok(s.g.constant(Tensor::scalar(0.0)));
    }
    let n = idx.len();
    let picked = s.g.gather(o1, idx, [n])?;
    let safe = s.g.clamp_min(picked, PROB_FLOOR);
    let logs = s.g.log(safe)?;
    let m = s.g.mean_all(logs);
    Ok(s.g.neg(m))
}

/// Pixel-to-mask contrastive loss on `k` (`(H·W)×d`): each valid pixel
/// should be closer, in τ-scaled cosine, to the mean feature of its own mask
/// than to other masks' means. Returns 0 when there are no masks.
pub fn contrastive_loss(s: &mut Session, k: Var, gt: &MaskTargets, tau: f64) -> Result<Var> {
    if gt.is_empty() {
        log::warn!("contrastive loss: no ground-truth masks, contributing 0");
        return Ok(s.g.constant(Tensor::scalar(0.0)));
    }
    let g = gt.len();
    let n = gt.valid.len();
    let rows: Vec<isize> = gt.valid.iter().map(|&p| p as isize).collect();
    let kv = s.g.gather_rows(k, &rows)?;
    let sums = s.g.segment_sum(kv, &gt.member, g)?;
    let mut counts = vec![0.0; g];
    for &m in &gt.member {
        counts[m] += 1.0;
    }
    let inv =
        s.g.constant(Tensor::new([g], counts.iter().map(|c| 1.0 / c).collect())?);
    let t = s.g.mul_rows(sums, inv)?;
    let kn = s.g.normalize_rows(kv, COSINE_EPS)?;
    let tn = s.g.normalize_rows(t, COSINE_EPS)?;
    let sim = s.g.matmul_nt(kn, tn)?;
    let sim = s.g.scale(sim, 1.0 / tau);
    let lsm = s.g.log_softmax(sim, 1)?;
    let pos: Vec<isize> = gt
        .member
        .iter()
        .enumerate()
        .map(|(i, &m)| (i * g + m) as isize)
        .collect();
    let picked = s.g.gather(lsm, pos, [n])?;
    let m = s.g.mean_all(picked);
    Ok(s.g.neg(m))
}

/// Mean over rows of `1 − (2Σ p·y + s)/(Σ p + Σ y + s)`.
pub fn dice_loss(s: &mut Session, pred: Var, gt: Var) -> Result<Var> {
    let inter = s.g.mul(pred, gt)?;
    let inter = s.g.sum(inter, 1)?;
    let num = s.g.scale(inter, 2.0);
    let num = s.g.add_scalar(num, DICE_SMOOTH);
    let ps = s.g.sum(pred, 1)?;
    let gs = s.g.sum(gt, 1)?;
    let den = s.g.add(ps, gs)?;
    let den = s.g.add_scalar(den, DICE_SMOOTH);
    let ratio = s.g.div(num, den)?;
    let loss = s.g.neg(ratio);
    let loss = s.g.add_scalar(loss, 1.0);
    Ok(s.g.mean_all(loss))
}

/// Mean binary cross-entropy of `σ(logits)` against `gt`, evaluated stably
/// as `softplus(x) − x·y`.
pub fn mask_bce_loss(s: &mut Session, logits: Var, gt: Var) -> Result<Var> {
    let sp = s.g.softplus(logits);
    let xy = s.g.mul(logits, gt)?;
    let l = s.g.sub(sp, xy)?;
    Ok(s.g.mean_all(l))
}

/// One-to-one pairs `(query, ground truth)`, ordered by ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Matching {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
}

/// Weighted cross-entropy over `N_o` queries: matched queries target their
/// mask's class, the rest target the no-object column with weight
/// `no_object_weight`. Normalized by the total weight.
pub fn mask_cls_loss(
    s: &mut Session,
    class_logits: Var,
    matching: &Matching,
    classes: &[u8],
    no_object_weight: f64,
) -> Result<Var> {
    let (nq, c) = s.g.value(class_logits).dims2()?;
    let none = c - 1;
    let mut target = vec![none; nq];
    let mut weight = vec![no_object_weight; nq];
    for &(q, j) in &matching.pairs {
        target[q] = classes[j] as usize;
        weight[q] = 1.0;
    }
    let total: f64 = weight.iter().sum();
    let lsm = s.g.log_softmax(class_logits, 1)?;
    let idx = target
        .iter()
        .enumerate()
        .map(|(q, &t)| (q * c + t) as isize)
        .collect();
    let picked = s.g.gather(lsm, idx, [nq])?;
    let w = s.g.constant(Tensor::new(
        [nq],
        weight.iter().map(|w| -w / total).collect(),
    )?);
    let weighted = s.g.mul(picked, w)?;
    Ok(s.g.sum_all(weighted))
}

/// `g × N_o` matching cost:
/// `w_cls·(−P_h[q, c_j]) + w_mask·BCE(M_q, M_G,j) + w_dice·dice(M_q, M_G,j)`
/// over valid pixels.
pub fn matching_cost(
    probs: &Tensor,
    mask_logits: &Tensor,
    gt: &MaskTargets,
    w: &LossWeights,
) -> Result<Vec<Vec<f64>>> {
    let (nq, c) = probs.dims2()?;
    let (mq, px) = mask_logits.dims2()?;
    if mq != nq || px != gt.pixels {
        return config_err("matching inputs disagree in shape");
    }
    let g = gt.len();
    let n = gt.valid.len().max(1) as f64;
    let mut gt_area = vec![0.0; g];
    for &m in &gt.member {
        gt_area[m] += 1.0;
    }
    let mut columns = Vec::with_capacity(nq);
    for q in 0..nq {
        let row = mask_logits.row(q);
        let mut sp_sum = 0.0;
        let mut p_sum = 0.0;
        let mut xy = vec![0.0; g];
        let mut py = vec![0.0; g];
        for (&p, &m) in gt.valid.iter().zip(&gt.member) {
            let x = row[p];
            let prob = hg_tensor::sigmoid(x);
            sp_sum += hg_tensor::softplus(x);
            p_sum += prob;
            xy[m] += x;
            py[m] += prob;
        }
        let mut col = Vec::with_capacity(g);
        for j in 0..g {
            let bce = (sp_sum - xy[j]) / n;
            let dice = 1.0 - (2.0 * py[j] + DICE_SMOOTH) / (p_sum + gt_area[j] + DICE_SMOOTH);
            let cls = gt.classes[j] as usize;
            if cls >= c - 1 {
                return config_err(format!("label {cls} outside the {} model classes", c - 1));
            }
            col.push(w.mask_cls * -probs.row(q)[cls] + w.mask * bce + w.dice * dice);
        }
        columns.push(col);
    }
    Ok((0..g)
        .map(|j| columns.iter().map(|col| col[j]).collect())
        .collect())
}

pub fn hungarian_match(
    probs: &Tensor,
    mask_logits: &Tensor,
    gt: &MaskTargets,
    w: &LossWeights,
) -> Result<Matching> {
    let nq = probs.dims2()?.0;
    if gt.len() > nq {
        return config_err(format!(
            "{} ground-truth masks exceed {nq} queries",
            gt.len()
        ));
    }
    let cost = matching_cost(probs, mask_logits, gt, w)?;
    let cols = hungarian(&cost)?;
    let pairs: Vec<(usize, usize)> = cols.iter().enumerate().map(|(j, &q)| (q, j)).collect();
    let unmatched = (0..nq).filter(|q| !cols.contains(q)).collect();
    Ok(Matching { pairs, unmatched })
}

/// Dice, mask and class losses for one decoder layer after matching.
pub fn whole_layer_losses(
    s: &mut Session,
    mask_logits: Var,
    class_logits: Var,
    probs: Var,
    gt: &MaskTargets,
    cfg: &ModelConfig,
) -> Result<[Var; 3]> {
    let matching = hungarian_match(
        s.g.value(probs),
        s.g.value(mask_logits),
        gt,
        &cfg.loss_weights,
    )?;
    let cls = mask_cls_loss(
        s,
        class_logits,
        &matching,
        &gt.classes,
        cfg.no_object_weight,
    )?;
    if gt.is_empty() || gt.valid.is_empty() {
        let z = s.g.constant(Tensor::scalar(0.0));
        return Ok([z, z, cls]);
    }
    let px = gt.pixels;
    let nv = gt.valid.len();
    let mut idx = Vec::with_capacity(gt.len() * nv);
    for &(q, _) in &matching.pairs {
        idx.extend(gt.valid.iter().map(|&p| (q * px + p) as isize));
    }
    let logits = s.g.gather(mask_logits, idx, [gt.len(), nv])?;
    let target = s.g.constant(gt.dense_valid());
    let probs_m = s.g.sigmoid(logits);
    let dice = dice_loss(s, probs_m, target)?;
    let bce = mask_bce_loss(s, logits, target)?;
    Ok([dice, bce, cls])
}

/// Per-component values of one image's loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub part_cls: f64,
    pub contrast: f64,
    pub dice: f64,
    pub mask: f64,
    pub mask_cls: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn components(&self) -> [f64; 5] {
        [
            self.part_cls,
            self.contrast,
            self.dice,
            self.mask,
            self.mask_cls,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.components()
            .iter()
            .chain([&self.total])
            .all(|v| v.is_finite())
    }

    pub fn add_scaled(&mut self, other: &LossBreakdown, s: f64) {
        self.part_cls += s * other.part_cls;
        self.contrast += s * other.contrast;
        self.dice += s * other.dice;
        self.mask += s * other.mask;
        self.mask_cls += s * other.mask_cls;
        self.total += s * other.total;
    }
}

/// `w · components` in the order part_cls, contrast, dice, mask, mask_cls.
pub fn weighted_total(components: [f64; 5], w: &LossWeights) -> f64 {
    let ws = [w.part_cls, w.contrast, w.dice, w.mask, w.mask_cls];
    components.iter().zip(ws).map(|(c, w)| c * w).sum()
}

/// Graph version of [`weighted_total`].
pub fn total_loss(s: &mut Session, components: [Var; 5], w: &LossWeights) -> Result<Var> {
    let ws = [w.part_cls, w.contrast, w.dice, w.mask, w.mask_cls];
    let mut acc = s.g.scale(components[0], ws[0]);
    for (c, w) in components.iter().zip(ws).skip(1) {
        let t = s.g.scale(*c, w);
        acc = s.g.add(acc, t)?;
    }
    Ok(acc)
}

fn mean_vars(s: &mut Session, vs: &[Var]) -> Result<Var> {
    if vs.is_empty() {
        return Ok(s.g.constant(Tensor::scalar(0.0)));
    }
    let mut acc = vs[0];
    for &v in &vs[1..] {
        acc = s.g.add(acc, v)?;
    }
    Ok(s.g.scale(acc, 1.0 / vs.len() as f64))
}

/// Full objective for one image. Part iterations and decoder layers that
/// are supervised are averaged before weighting.
pub fn compute_losses(
    s: &mut Session,
    out: &ModelOutput,
    labels: &LabelMap,
    cfg: &ModelConfig,
) -> Result<(Var, LossBreakdown)> {
    let f = &out.feats;
    let k_stride = f.padded_hw.0 / f.k_hw.0;
    let k0_stride = f.padded_hw.0 / f.k0_hw.0;
    let targets = Targets::new(labels, f.padded_hw, k_stride, k0_stride);
    let zero = s.g.constant(Tensor::scalar(0.0));

    let (part, contrast) = match &out.part {
        Some(po) => {
            let iters: Vec<_> = if cfg.part_deep_supervision {
                po.iterations.iter().collect()
            } else {
                po.iterations.last().into_iter().collect()
            };
            let mut terms = Vec::with_capacity(iters.len());
            for it in iters {
                let o1 = distribute(s, it.assign, it.probs, &po.window)?;
                terms.push(part_cls_loss(s, o1, &targets.fine)?);
            }
            let part = mean_vars(s, &terms)?;
            let contrast = contrastive_loss(s, f.k, &targets.fine_masks, cfg.tau)?;
            (part, contrast)
        }
        None => (zero, zero),
    };

    let layers: Vec<_> = if cfg.whole_deep_supervision {
        out.whole.layers.iter().collect()
    } else {
        out.whole.layers.last().into_iter().collect()
    };
    let (mut dice, mut mask, mut cls) = (Vec::new(), Vec::new(), Vec::new());
    for l in layers {
        let [d, m, c] = whole_layer_losses(
            s,
            l.mask_logits,
            l.class_logits,
            l.probs,
            &targets.masks,
            cfg,
        )?;
        dice.push(d);
        mask.push(m);
        cls.push(c);
    }
    let dice = mean_vars(s, &dice)?;
    let mask = mean_vars(s, &mask)?;
    let cls = mean_vars(s, &cls)?;
    let comps = [part, contrast, dice, mask, cls];
    let total = total_loss(s, comps, &cfg.loss_weights)?;
    let v = |s: &Session, x: Var| s.g.value(x).item();
    let breakdown = LossBreakdown {
        part_cls: v(s, part),
        contrast: v(s, contrast),
        dice: v(s, dice),
        mask: v(s, mask),
        mask_cls: v(s, cls),
        total: v(s, total),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(h: usize, w: usize, data: Vec<u8>) -> LabelMap {
        LabelMap::new(h, w, data).unwrap()
    }

    fn scalar(s: &Session, v: Var) -> f64 {
        s.g.value(v).item()
    }

    #[test]
    fn part_cls_anchors() {
        let store = ParamStore::new();
        let mut s = Session::new(&store, false);
        let gt = labels(2, 2, vec![0, 2, 1, IGNORE_LABEL]);
        let mut onehot = Tensor::zeros([4, 3]);
        for (p, &l) in gt.data.iter().enumerate().take(3) {
            onehot.data_mut()[p * 3 + l as usize] = 1.0;
        }
        let o = s.g.constant(onehot);
        assert_eq!(
            {
                let v = part_cls_loss(&mut s, o, &gt).unwrap();
                scalar(&s, v)
            },
            0.0
        );

        let o = s.g.constant(Tensor::full([4, 5], 0.2));
        let gt5 = labels(2, 2, vec![0, 4, 3, 1]);
        let l = {
            let v = part_cls_loss(&mut s, o, &gt5).unwrap();
            scalar(&s, v)
        };
        assert!((l - 5f64.ln()).abs() < 1e-12);

        let probs = Tensor::from_rows(&[
            vec![0.7, 0.2, 0.1],
            vec![0.1, 0.1, 0.8],
            vec![0.3, 0.3, 0.4],
            vec![0.5, 0.25, 0.25],
        ]);
        let o = s.g.constant(probs);
        let gt = labels(2, 2, vec![0, 2, 1, IGNORE_LABEL]);
        let want = -(0.7f64.ln() + 0.8f64.ln() + 0.3f64.ln()) / 3.0;
        assert!(
            ({
                let v = part_cls_loss(&mut s, o, &gt).unwrap();
                scalar(&s, v)
            } - want)
                .abs()
                < 1e-12
        );

        // Zero probability is clamped rather than producing infinity.
        let o = s.g.constant(Tensor::from_rows(&[vec![0.0, 1.0]]));
        let l = {
            let v = part_cls_loss(&mut s, o, &labels(1, 1, vec![0])).unwrap();
            scalar(&s, v)
        };
        assert!((l - -PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn contrastive_single_mask_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let store = ParamStore::new();
        let mut s = Session::new(&store, false);
        let data = (0..16 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k = s.g.constant(Tensor::new([16, 4], data).unwrap());
        let gt = MaskTargets::from_labels(&LabelMap::filled(4, 4, 3));
        assert_eq!(
            {
                let v = contrastive_loss(&mut s, k, &gt, 0.1).unwrap();
                scalar(&s, v)
            },
            0.0
        );
        let none = MaskTargets::from_labels(&LabelMap::filled(4, 4, IGNORE_LABEL));
        assert_eq!(
            {
                let v = contrastive_loss(&mut s, k, &none, 0.1).unwrap();
                scalar(&s, v)
            },
            0.0
        );
    }

    #[test]
    fn contrastive_closed_form() {
        let store = ParamStore::new();
        let mut s = Session::new(&store, false);
        let gt = labels(1, 4, vec![0, 0, 1, 1]);
        let k = s.g.constant(Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ]));
        let l = {
            let v = contrastive_loss(&mut s, k, &MaskTargets::from_labels(&gt), 0.1).unwrap();
            scalar(&s, v)
        };
        let e10 = 10f64.exp();
        let want = -(e10 / (e10 + 1.0)).ln();
        assert!((l - want).abs() < 1e-12);
        assert!((l - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn contrastive_grows_as_the_positive_drifts() {
        let gt = MaskTargets::from_labels(&labels(1, 9, vec![0, 0, 0, 0, 0, 0, 0, 0, 1]));
        let mut prev = -1.0;
        for step in 0..8 {
            let theta = step as f64 * 0.2;
            let mut rows = vec![vec![1.0, 0.0]; 8];
            rows[0] = vec![theta.cos(), theta.sin()];
            rows.push(vec![0.0, 1.0]);
            let store = ParamStore::new();
            let mut s = Session::new(&store, false);
            let k = s.g.constant(Tensor::from_rows(&rows));
            let l = {
                let v = contrastive_loss(&mut s, k, &gt, 0.1).unwrap();
                scalar(&s, v)
            };
            assert!(l > prev, "step {step}: {l} <= {prev}");
            prev = l;
        }
    }

    fn mask_pair(
        pred: Vec<f64>,
        gt: Vec<f64>,
        f: fn(&mut Session, Var, Var) -> Result<Var>,
    ) -> f64 {
        let store = ParamStore::new();
        let mut s = Session::new(&store, false);
        let n = pred.len();
        let p = s.g.constant(Tensor::new([1, n], pred).unwrap());
        let y = s.g.constant(Tensor::new([1, n], gt).unwrap());
        let l = f(&mut s, p, y).unwrap();
        scalar(&s, l)
    }

    #[test]
    fn dice_anchors() {
        let ones = vec![1.0; 100];
        assert!(mask_pair(ones.clone(), ones.clone(), dice_loss) <= 0.005);
        let mut a = vec![1.0; 100];
        a.extend(vec![0.0; 100]);
        let b: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
        let disjoint = mask_pair(a.clone(), b, dice_loss);
        assert!(disjoint >= 0.99);
        assert!((disjoint - (1.0 - 1.0 / 201.0)).abs() < 1e-12);
        // Half overlap: two 100-pixel masks sharing 50 pixels.
        let mut p = vec![0.0; 150];
        let mut g = vec![0.0; 150];
        p[..100].fill(1.0);
        g[50..].fill(1.0);
        let want = 1.0 - (2.0 * 50.0 + 1.0) / (100.0 + 100.0 + 1.0);
        assert!((mask_pair(p, g, dice_loss) - want).abs() < 1e-12);
        // Soft predictions.
        let p = vec![0.2, 0.9, 0.5, 0.0];
        let g = vec![0.0, 1.0, 1.0, 0.0];
        let want = 1.0 - (2.0 * 1.4 + 1.0) / (1.6 + 2.0 + 1.0);
        assert!((mask_pair(p, g, dice_loss) - want).abs() < 1e-12);
    }

    #[test]
    fn bce_anchors() {
        let perfect = mask_pair(vec![40.0, -40.0, 40.0], vec![1.0, 0.0, 1.0], mask_bce_loss);
        assert!(perfect < 1e-15);
        let half = mask_pair(
            vec![0.0; 7],
            vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0],
            mask_bce_loss,
        );
        assert!((half - 2f64.ln()).abs() < 1e-12);
        let logits: Vec<f64> = vec![1.3, -0.4, 2.2, -3.0];
        let gt = vec![1.0, 1.0, 0.0, 0.0];
        let want: f64 = logits
            .iter()
            .zip(&gt)
            .map(|(&x, &y)| {
                let p = 1.0 / (1.0 + (-x).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 4.0;
        assert!((mask_pair(logits, gt, mask_bce_loss) - want).abs() < 1e-12);
    }

    #[test]
    fn mask_cls_anchors() {
        let store = ParamStore::new();
        let mut s = Session::new(&store, false);
        let matching = Matching {
            pairs: vec![(2, 0), (0, 1)],
            unmatched: vec![1],
        };
        let classes = [1u8, 0];
        // K = 2 real classes plus no-object. Confident and correct.
        let mut logits = Tensor::full([3, 3], -50.0);
        logits.data_mut()[2 * 3 + 1] = 50.0;
        logits.data_mut()[0] = 50.0;
        logits.data_mut()[3 + 2] = 50.0;
        let lv = s.g.constant(logits);
        assert!(
            {
                let v = mask_cls_loss(&mut s, lv, &matching, &classes, 0.1).unwrap();
                scalar(&s, v)
            } < 1e-30
        );

        // Uniform over 20 columns: every term is ln 20 regardless of weights.
        let lv = s.g.constant(Tensor::zeros([3, 20]));
        let l = {
            let v = mask_cls_loss(&mut s, lv, &matching, &classes, 0.1).unwrap();
            scalar(&s, v)
        };
        assert!((l - 20f64.ln()).abs() < 1e-12);

        let rows = vec![
            vec![0.5, -1.0, 0.2],
            vec![1.5, 0.0, -0.3],
            vec![0.1, 0.9, 0.4],
        ];
        let lv = s.g.constant(Tensor::from_rows(&rows));
        let l = {
            let v = mask_cls_loss(&mut s, lv, &matching, &classes, 0.1).unwrap();
            scalar(&s, v)
        };
        let nll = |r: &[f64], t: usize| {
            let lse = r.iter().map(|v| v.exp()).sum::<f64>().ln();
            lse - r[t]
        };
        let want = (nll(&rows[0], 0) + 0.1 * nll(&rows[1], 2) + nll(&rows[2], 1)) / 2.1;
        assert!((l - want).abs() < 1e-12);
    }

    fn brute_force(cost: &[Vec<f64>]) -> f64 {
        fn go(cost: &[Vec<f64>], j: usize, used: &mut Vec<bool>) -> f64 {
            if j == cost.len() {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for q in 0..used.len() {
                if !used[q] {
                    used[q] = true;
                    best = best.min(cost[j][q] + go(cost, j + 1, used));
                    used[q] = false;
                }
            }
            best
        }
        go(cost, 0, &mut vec![false; cost[0].len()])
    }

    #[test]
    fn matching_picks_the_perfect_query() {
        let gt = MaskTargets::from_labels(&labels(1, 4, vec![2, 2, 2, 2]));
        let probs = Tensor::from_rows(&[
            vec![0.25, 0.25, 0.25, 0.25],
            vec![0.0, 0.0, 0.999, 0.001],
            vec![0.1, 0.1, 0.1, 0.7],
        ]);
        let logits = Tensor::from_rows(&[vec![0.0; 4], vec![20.0; 4], vec![-5.0; 4]]);
        let m = hungarian_match(&probs, &logits, &gt, &LossWeights::default()).unwrap();
        assert_eq!(m.pairs, vec![(1, 0)]);
        assert_eq!(m.unmatched, vec![0, 2]);
    }

    #[test]
    fn matching_identity_structure() {
        // Query q predicts exactly mask q.
        let gt = MaskTargets::from_labels(&labels(1, 6, vec![0, 0, 1, 1, 2, 2]));
        let mut logits = Tensor::full([3, 6], -10.0);
        let mut probs = Tensor::zeros([3, 4]);
        for q in 0..3 {
            logits.data_mut()[q * 6 + 2 * q] = 10.0;
            logits.data_mut()[q * 6 + 2 * q + 1] = 10.0;
            probs.data_mut()[q * 4 + q] = 1.0;
        }
        let m = hungarian_match(&probs, &logits, &gt, &LossWeights::default()).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert!(m.unmatched.is_empty());
        let too_few = Tensor::zeros([2, 4]);
        assert!(hungarian_match(
            &too_few,
            &Tensor::zeros([2, 6]),
            &gt,
            &LossWeights::default()
        )
        .is_err());
    }

    #[test]
    fn matching_is_optimal_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        for _ in 0..40 {
            let g = rng.gen_range(1..=5usize);
            let nq = rng.gen_range(g..=6);
            let px = 12;
            let data: Vec<u8> = (0..px)
                .map(|i| {
                    if i < g {
                        i as u8
                    } else {
                        rng.gen_range(0..g as u8)
                    }
                })
                .collect();
            let gt = MaskTargets::from_labels(&labels(3, 4, data));
            let logits = Tensor::new(
                [nq, px],
                (0..nq * px).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            )
            .unwrap();
            let mut pr = Tensor::new(
                [nq, 7],
                (0..nq * 7).map(|_| rng.gen_range(0.01..1.0)).collect(),
            )
            .unwrap();
            for q in 0..nq {
                let sum: f64 = pr.row(q).iter().sum();
                pr.data_mut()[q * 7..(q + 1) * 7]
                    .iter_mut()
                    .for_each(|v| *v /= sum);
            }
            let w = LossWeights::default();
            let cost = matching_cost(&pr, &logits, &gt, &w).unwrap();
            let m = hungarian_match(&pr, &logits, &gt, &w).unwrap();
            let got: f64 = m.pairs.iter().map(|&(q, j)| cost[j][q]).sum();
            assert!((got - brute_force(&cost)).abs() < 1e-9);
        }
    }

    #[test]
    fn matching_cost_matches_the_losses() {
        // The cost entries equal the graph losses for the same pair.
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let gt = MaskTargets::from_labels(&labels(2, 3, vec![0, 1, IGNORE_LABEL, 1, 1, 0]));
        let logits =
            Tensor::new([2, 6], (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
        let probs = Tensor::from_rows(&[vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]]);
        let w = LossWeights::default();
        let cost = matching_cost(&probs, &logits, &gt, &w).unwrap();
        let dense = gt.dense_valid();
        for q in 0..2 {
            for j in 0..2 {
                let pred: Vec<f64> = gt.valid.iter().map(|&p| logits.row(q)[p]).collect();
                let y = dense.row(j).to_vec();
                let bce = mask_pair(pred.clone(), y.clone(), mask_bce_loss);
                let dice = mask_pair(
                    pred.iter().map(|&x| hg_tensor::sigmoid(x)).collect(),
                    y,
                    dice_loss,
                );
                let want = -2.0 * probs.row(q)[gt.classes[j] as usize] + 5.0 * bce + 5.0 * dice;
                assert!((cost[j][q] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn total_loss_weights() {
        let w = LossWeights::default();
        assert_eq!(weighted_total([0.0; 5], &w), 0.0);
        assert_eq!(weighted_total([1.0; 5], &w), 20.0);
        let store = ParamStore::new();
        let mut s = Session::new(&store, false);
        let one = s.g.constant(Tensor::scalar(1.0));
        let t = total_loss(&mut s, [one; 5], &w).unwrap();
        assert_eq!(scalar(&s, t), 20.0);
        let mut each = [0.0; 5];
        for i in 0..5 {
            each[i] = 1.0;
            let expected = [2.0, 6.0, 5.0, 5.0, 2.0][i];
            assert_eq!(weighted_total(each, &w), expected);
            each[i] = 0.0;
        }
    }

    #[test]
    fn total_gradient_is_the_weighted_component_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::new([3], vec![0.3, -0.7, 1.1]).unwrap());
        let w = LossWeights::default();
        let comps = |s: &mut Session| -> [Var; 5] {
            let xv = s.p(x);
            let sq = s.g.square(xv);
            let a = s.g.sum_all(sq);
            let e = s.g.exp(xv);
            let b = s.g.sum_all(e);
            let c = s.g.mean_all(xv);
            let d = s.g.sigmoid(xv);
            let d = s.g.sum_all(d);
            let sp = s.g.softplus(xv);
            let e = s.g.sum_all(sp);
            [a, b, c, d, e]
        };
        let mut s = Session::new(&store, true);
        let cs = comps(&mut s);
        let t = total_loss(&mut s, cs, &w).unwrap();
        let total = s.param_grads(t).unwrap().get(x).to_vec();
        let ws = [2.0, 6.0, 5.0, 5.0, 2.0];
        let mut want = [0.0; 3];
        for (i, wi) in ws.iter().enumerate() {
            let mut s = Session::new(&store, true);
            let cs = comps(&mut s);
            let g = s.param_grads(cs[i]).unwrap();
            for (k, v) in g.get(x).iter().enumerate() {
                want[k] += wi * v;
            }
        }
        assert!(hg_tensor::check::rel_error(&total, &want) < 1e-12);
    }

    #[test]
    fn mask_targets_cover_valid_pixels() {
        let gt = labels(2, 3, vec![4, 1, IGNORE_LABEL, 1, 4, 4]);
        let t = MaskTargets::from_labels(&gt);
        assert_eq!(t.classes, vec![1, 4]);
        assert_eq!(t.valid, vec![0, 1, 3, 4, 5]);
        let dense = t.dense();
        for p in 0..6 {
            let col: f64 = (0..2).map(|j| dense.row(j)[p]).sum();
            assert_eq!(col, if p == 2 { 0.0 } else { 1.0 });
        }
    }
}
