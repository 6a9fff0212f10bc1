//! Part-level grouping: iterative local soft clustering of stride-8 pixel
//! features into grid-initialized parts.
//!
//! Each pixel only compares itself with the centers of the 3×3 block of grid
//! cells around its home cell, so the assignment is stored windowed as
//! `(H·W)×9` rather than `N_p×(H·W)`. Slot `s = (dy+1)·3 + (dx+1)` refers to
//! the cell offset `(dy, dx)`; slots falling outside the grid hold center id
//! `-1`, affinity `-∞` and weight exactly 0.

use hg_tensor::{Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{config_err, Result};
use crate::nn::{residual_norm, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::params::{ParamStore, Session};

pub const WINDOW: usize = 9;
/// Added to the assignment mass before normalizing aggregated features.
pub const MASS_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridSpec {
    /// Feature map height and width.
    pub h: usize,
    pub w: usize,
    /// Cell size in feature pixels.
    pub r: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl GridSpec {
    pub fn new(h: usize, w: usize, r: usize) -> Result<Self> {
        if h == 0 || w == 0 || r == 0 {
            return config_err(format!("invalid grid: {h}x{w} with cell {r}"));
        }
        Ok(Self {
            h,
            w,
            r,
            grid_h: h.div_ceil(r),
            grid_w: w.div_ceil(r),
        })
    }

    pub fn num_parts(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn num_pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn home_cell(&self, pixel: usize) -> usize {
        let (y, x) = (pixel / self.w, pixel % self.w);
        (y / self.r) * self.grid_w + x / self.r
    }

    pub fn cell_sizes(&self) -> Vec<usize> {
        let mut n = vec![0; self.num_parts()];
        for p in 0..self.num_pixels() {
            n[self.home_cell(p)] += 1;
        }
        n
    }

    /// Candidate centers per pixel, `(H·W)×9`, `-1` outside the grid.
    pub fn window(&self) -> Window {
        let hw = self.num_pixels();
        let mut idx = Vec::with_capacity(hw * WINDOW);
        let mut valid = Vec::new();
        for p in 0..hw {
            let home = self.home_cell(p);
            let (cy, cx) = ((home / self.grid_w) as isize, (home % self.grid_w) as isize);
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (y, x) = (cy + dy, cx + dx);
                    if y < 0 || x < 0 || y >= self.grid_h as isize || x >= self.grid_w as isize {
                        idx.push(-1);
                    } else {
                        let c = y as usize * self.grid_w + x as usize;
                        valid.push(ValidSlot {
                            flat: idx.len(),
                            pixel: p,
                            center: c,
                        });
                        idx.push(c as isize);
                    }
                }
            }
        }
        Window { idx, valid }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValidSlot {
    /// Position in the flattened `(H·W)×9` layout.
    pub flat: usize,
    pub pixel: usize,
    pub center: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub idx: Vec<isize>,
    pub valid: Vec<ValidSlot>,
}

impl Window {
    /// `0` for valid slots and `-∞` otherwise, shaped `(H·W)×9`.
    pub fn mask(&self) -> Tensor {
        let data = self
            .idx
            .iter()
            .map(|&c| if c < 0 { f64::NEG_INFINITY } else { 0.0 })
            .collect();
        Tensor::new([self.idx.len() / WINDOW, WINDOW], data).expect("window is (H·W)×9")
    }
}

/// Q: the mean of K over each grid cell.
pub fn init_centers(s: &mut Session, k: Var, grid: &GridSpec) -> Result<Var> {
    let homes: Vec<usize> = (0..grid.num_pixels()).map(|p| grid.home_cell(p)).collect();
    let sums = s.g.segment_sum(k, &homes, grid.num_parts())?;
    let inv: Vec<f64> = grid.cell_sizes().iter().map(|&n| 1.0 / n as f64).collect();
    let inv = s.g.constant(Tensor::new([grid.num_parts()], inv)?);
    Ok(s.g.mul_rows(sums, inv)?)
}

/// D[j, s] = cos(Q_{N_j(s)}, K_j) / τ, `-∞` on invalid slots.
pub fn local_affinity(s: &mut Session, q: Var, k: Var, window: &Window, tau: f64) -> Result<Var> {
    let (hw, _) = s.g.value(k).dims2()?;
    if window.idx.len() != hw * WINDOW {
        return config_err(format!(
            "window covers {} pixels, K has {hw}",
            window.idx.len() / WINDOW
        ));
    }
    let qn = s.g.normalize_rows(q, hg_tensor::COSINE_EPS)?;
    let kn = s.g.normalize_rows(k, hg_tensor::COSINE_EPS)?;
    let pixel_of_slot = (0..hw * WINDOW).map(|f| f / WINDOW).collect();
    let dots = s.g.row_dots(qn, window.idx.clone(), kn, pixel_of_slot)?;
    let dots = s.g.reshape(dots, [hw, WINDOW])?;
    let scaled = s.g.scale(dots, 1.0 / tau);
    let mask = s.g.constant(window.mask());
    Ok(s.g.add(scaled, mask)?)
}

/// Softmax over each pixel's candidate centers.
pub fn soft_assign(s: &mut Session, d: Var) -> Result<Var> {
    Ok(s.g.softmax(d, 1)?)
}

/// `Σ_j A_ij X_j` per center, divided by `Σ_j A_ij + ε` when `normalize`.
/// With `prev`, a center whose mass is exactly zero keeps its previous row.
pub fn aggregate(
    s: &mut Session,
    a: Var,
    x: Var,
    window: &Window,
    num_parts: usize,
    normalize: bool,
    prev: Option<Var>,
) -> Result<Var> {
    let weights = valid_weights(s, a, window)?;
    let pixels = window.valid.iter().map(|v| v.pixel).collect();
    let centers: Vec<usize> = window.valid.iter().map(|v| v.center).collect();
    let sums =
        s.g.sparse_rows(weights, centers.clone(), pixels, x, num_parts)?;
    if !normalize {
        return Ok(sums);
    }
    let mass = s.g.scatter_add(weights, centers, [num_parts])?;
    let empty: Vec<usize> =
        s.g.data(mass)
            .iter()
            .enumerate()
            .filter(|(_, &m)| m == 0.0)
            .map(|(i, _)| i)
            .collect();
    let denom = s.g.add_scalar(mass, MASS_EPS);
    let out = s.g.div_rows(sums, denom)?;
    match prev {
        Some(prev) if !empty.is_empty() => {
            log::warn!(
                "{} part center(s) received no assignment mass; keeping previous features",
                empty.len()
            );
            let mut keep = vec![0.0; num_parts];
            for &i in &empty {
                keep[i] = 1.0;
            }
            let fresh: Vec<f64> = keep.iter().map(|k| 1.0 - k).collect();
            let keep = s.g.constant(Tensor::new([num_parts], keep)?);
            let fresh = s.g.constant(Tensor::new([num_parts], fresh)?);
            let a = s.g.mul_rows(out, fresh)?;
            let b = s.g.mul_rows(prev, keep)?;
            Ok(s.g.add(a, b)?)
        }
        _ => Ok(out),
    }
}

/// Per-pixel mixture of per-center rows: `out_j = Σ_s A[j,s] · P[N_j(s)]`.
/// With `P = P_m` this is the part-level segmentation `O1` (pixel-major).
pub fn distribute(s: &mut Session, a: Var, p: Var, window: &Window) -> Result<Var> {
    let hw = window.idx.len() / WINDOW;
    let weights = valid_weights(s, a, window)?;
    let pixels = window.valid.iter().map(|v| v.pixel).collect();
    let centers = window.valid.iter().map(|v| v.center).collect();
    Ok(s.g.sparse_rows(weights, pixels, centers, p, hw)?)
}

/// Assignment weights of the valid slots, in window order.
fn valid_weights(s: &mut Session, a: Var, window: &Window) -> Result<Var> {
    let flat: Vec<isize> = window.valid.iter().map(|v| v.flat as isize).collect();
    let n = flat.len();
    Ok(s.g.gather(a, flat, [n])?)
}

/// Self-attention over part tokens followed by an FFN, each post-normed.
#[derive(Clone, Debug)]
pub struct TokenRefiner {
    attn: MultiHeadAttention,
    ln1: LayerNorm,
    ffn: Mlp,
    ln2: LayerNorm,
}

impl TokenRefiner {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg.d, cfg.heads, rng),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), cfg.d),
            ffn: Mlp::new(
                store,
                &format!("{name}.ffn"),
                cfg.d,
                cfg.ffn_hidden,
                cfg.d,
                rng,
            ),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), cfg.d),
        }
    }

    pub fn forward(&self, s: &mut Session, z: Var) -> Result<Var> {
        let a = self.attn.forward(s, z, z)?;
        let z = residual_norm(s, z, a, &self.ln1)?;
        let f = self.ffn.forward(s, z)?;
        residual_norm(s, z, f, &self.ln2)
    }
}

/// Token refinement and linear classifier owned by one grouping iteration.
#[derive(Clone, Debug)]
pub struct PartStage {
    pub refine: TokenRefiner,
    pub classifier: Linear,
}

impl PartStage {
    /// Returns `(Z′, P_m)`.
    pub fn classify(&self, s: &mut Session, z: Var) -> Result<(Var, Var)> {
        let refined = self.refine.forward(s, z)?;
        let logits = self.classifier.forward(s, refined)?;
        let probs = s.g.softmax(logits, 1)?;
        Ok((refined, probs))
    }
}

#[derive(Clone, Debug)]
pub struct PartIteration {
    /// Centers used to compute this iteration's assignment.
    pub centers: Var,
    /// Soft assignment, `(H·W)×9`.
    pub assign: Var,
    /// Refined part tokens Z′, `N_p×d`.
    pub tokens: Var,
    /// Part class probabilities P_m, `N_p×K`.
    pub probs: Var,
}

#[derive(Clone, Debug)]
pub struct PartOutput {
    pub grid: GridSpec,
    pub window: Window,
    pub iterations: Vec<PartIteration>,
}

#[derive(Clone, Debug)]
pub struct PartGrouper {
    stages: Vec<PartStage>,
    r: usize,
    tau: f64,
    normalize: bool,
}

impl PartGrouper {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let stages = (0..cfg.iterations)
            .map(|t| PartStage {
                refine: TokenRefiner::new(store, &format!("part.iter{t}.refine"), cfg, rng),
                classifier: Linear::new(
                    store,
                    &format!("part.iter{t}.cls"),
                    cfg.d,
                    cfg.classes,
                    rng,
                ),
            })
            .collect();
        Self {
            stages,
            r: cfg.r,
            tau: cfg.tau,
            normalize: cfg.normalize_centers,
        }
    }

    pub fn iterations(&self) -> usize {
        self.stages.len()
    }

    /// Runs all iterations on `K` (grouping) and `V` (classification)
    /// feature maps of size `hw`.
    pub fn run(&self, s: &mut Session, k: Var, v: Var, hw: (usize, usize)) -> Result<PartOutput> {
        let grid = GridSpec::new(hw.0, hw.1, self.r)?;
        let window = grid.window();
        let np = grid.num_parts();
        let mut q = init_centers(s, k, &grid)?;
        let mut iterations = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let d = local_affinity(s, q, k, &window, self.tau)?;
            let a = soft_assign(s, d)?;
            let q_next = aggregate(s, a, k, &window, np, self.normalize, Some(q))?;
            let z = aggregate(s, a, v, &window, np, self.normalize, None)?;
            let (tokens, probs) = stage.classify(s, z)?;
            iterations.push(PartIteration {
                centers: q,
                assign: a,
                tokens,
                probs,
            });
            q = q_next;
        }
        Ok(PartOutput {
            grid,
            window,
            iterations,
        })
    }
}

/// Argmax center per pixel (ties to the lowest slot).
pub fn harden(assign: &Tensor, window: &Window) -> Vec<usize> {
    let hw = assign.len() / WINDOW;
    (0..hw)
        .map(|j| {
            let row = &assign.data()[j * WINDOW..(j + 1) * WINDOW];
            let mut best = 0;
            for sl in 1..WINDOW {
                if row[sl] > row[best] {
                    best = sl;
                }
            }
            window.idx[j * WINDOW + best] as usize
        })
        .collect()
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use crate::gradcheck::{all_coords, check_params};
    use rand::{Rng, SeedableRng};

    fn random(rng: &mut ChaCha8Rng, shape: [usize; 2]) -> Tensor {
        let data = (0..shape[0] * shape[1])
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(hg_tensor::COSINE_EPS);
        let nb = b
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(hg_tensor::COSINE_EPS);
        dot / (na * nb)
    }

    /// Dense `N_p×(H·W)` assignment from a windowed one.
    fn densify(a: &Tensor, window: &Window, np: usize) -> Vec<Vec<f64>> {
        let hw = window.idx.len() / WINDOW;
        let mut dense = vec![vec![0.0; hw]; np];
        for v in &window.valid {
            dense[v.center][v.pixel] += a.data()[v.flat];
        }
        dense
    }

    #[test]
    fn grid_counts() {
        let g = GridSpec::new(8, 8, 4).unwrap();
        assert_eq!(g.num_parts(), 4);
        let g = GridSpec::new(64, 128, 4).unwrap();
        assert_eq!((g.grid_h, g.grid_w, g.num_parts()), (16, 32, 512));
        let g = GridSpec::new(9, 5, 4).unwrap();
        assert_eq!((g.grid_h, g.grid_w), (3, 2));
        assert_eq!(g.cell_sizes().iter().sum::<usize>(), 45);
        assert!(GridSpec::new(8, 8, 0).is_err());
    }

    #[test]
    fn centers_are_cell_means() {
        let store = ParamStore::new();
        let mut s = Session::new(&store, false);
        let grid = GridSpec::new(8, 8, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let kt = random(&mut rng, [64, 3]);
        let k = s.g.constant(kt.clone());
        let q = init_centers(&mut s, k, &grid).unwrap();
        let q = s.g.value(q);
        assert_eq!(q.shape(), &[4, 3]);
        for c in 0..3 {
            let mut sum = 0.0;
            for y in 0..4 {
                for x in 0..4 {
                    sum += kt.row(y * 8 + x)[c];
                }
            }
            assert!((q.row(0)[c] - sum / 16.0).abs() < 1e-12);
        }

        let k = s.g.constant(Tensor::full([64, 3], 0.7));
        let q = init_centers(&mut s, k, &grid).unwrap();
        assert!(s.g.data(q).iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn affinity_cosine_extremes() {
        // 3×3 grid of single-pixel cells; centers form an orthonormal basis.
        let store = ParamStore::new();
        let mut s = Session::new(&store, false);
        let grid = GridSpec::new(3, 3, 1).unwrap();
        let window = grid.window();
        let q = s.g.constant(Tensor::eye(9));
        let mut kd = vec![0.0; 81];
        for j in 0..9 {
            kd[j * 9 + 4] = 1.0;
        }
        let k = s.g.constant(Tensor::new([9, 9], kd).unwrap());
        let d = local_affinity(&mut s, q, k, &window, 0.1).unwrap();
        let row = s.g.value(d).row(4).to_vec();
        for (sl, v) in row.iter().enumerate() {
            let want = if sl == 4 { 10.0 } else { 0.0 };
            assert!((v - want).abs() < 1e-9, "slot {sl}: {v}");
        }
        // Corner pixel: 4 valid slots, 5 masked.
        let corner = s.g.value(d).row(0);
        assert_eq!(corner.iter().filter(|v| v.is_finite()).count(), 4);
        assert_eq!(
            corner.iter().filter(|&&v| v == f64::NEG_INFINITY).count(),
            5
        );
    }

    #[test]
    fn windowed_affinity_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let store = ParamStore::new();
        let mut s = Session::new(&store, false);
        let grid = GridSpec::new(8, 8, 2).unwrap();
        let window = grid.window();
        let (qt, kt) = (random(&mut rng, [16, 5]), random(&mut rng, [64, 5]));
        let q = s.g.constant(qt.clone());
        let k = s.g.constant(kt.clone());
        let d = local_affinity(&mut s, q, k, &window, 0.1).unwrap();
        let d = s.g.value(d);
        for j in 0..64 {
            for sl in 0..WINDOW {
                let c = window.idx[j * WINDOW + sl];
                let got = d.row(j)[sl];
                if c < 0 {
                    assert_eq!(got, f64::NEG_INFINITY);
                } else {
                    let want = cosine(qt.row(c as usize), kt.row(j)) / 0.1;
                    assert!((got - want).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn soft_assign_anchors() {
        let store = ParamStore::new();
        let mut s = Session::new(&store, false);
        let grid = GridSpec::new(3, 3, 1).unwrap();
        let window = grid.window();
        let d = s.g.constant(window.mask());
        let a = soft_assign(&mut s, d).unwrap();
        let a = s.g.value(a);
        assert!(a.row(4).iter().all(|&w| (w - 1.0 / 9.0).abs() < 1e-12));
        let corner: Vec<f64> = a.row(0).iter().copied().filter(|&w| w > 0.0).collect();
        assert_eq!(corner.len(), 4);
        assert!(corner.iter().all(|&w| (w - 0.25).abs() < 1e-12));
        assert_eq!(a.row(0).iter().filter(|&&w| w == 0.0).count(), 5);

        // One slot at +10 among two valid slots (a 1×2 grid).
        let grid = GridSpec::new(1, 2, 1).unwrap();
        let mut logits = grid.window().mask();
        logits.data_mut()[4] = 10.0;
        let d = s.g.constant(logits);
        let a = soft_assign(&mut s, d).unwrap();
        assert!((s.g.data(a)[4] - 0.9999546).abs() < 1e-7);

        // The same slot among nine valid slots.
        let mut logits = Tensor::zeros([1, 9]);
        logits.data_mut()[4] = 10.0;
        let d = s.g.constant(logits);
        let a = soft_assign(&mut s, d).unwrap();
        let e10 = 10f64.exp();
        assert!((s.g.data(a)[4] - e10 / (e10 + 8.0)).abs() < 1e-12);
    }

    #[test]
    fn hard_assignment_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = ParamStore::new();
        let mut s = Session::new(&store, false);
        let grid = GridSpec::new(6, 10, 4).unwrap();
        let window = grid.window();
        let mut hard = Tensor::zeros([60, WINDOW]);
        for j in 0..60 {
            hard.data_mut()[j * WINDOW + 4] = 1.0;
        }
        let a = s.g.constant(hard);
        for x in [random(&mut rng, [60, 4]), random(&mut rng, [60, 7])] {
            let x = s.g.constant(x);
            let init = init_centers(&mut s, x, &grid).unwrap();
            let agg = aggregate(&mut s, a, x, &window, grid.num_parts(), true, None).unwrap();
            let err = hg_tensor::check::rel_error(s.g.data(init), s.g.data(agg));
            assert!(err < 1e-7, "{err}");
        }
    }

    #[test]
    fn shared_feature_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let store = ParamStore::new();
        let mut s = Session::new(&store, false);
        let grid = GridSpec::new(8, 8, 4).unwrap();
        let window = grid.window();
        let d = s.g.constant(random(&mut rng, [64, WINDOW]));
        let mask = s.g.constant(window.mask());
        let d = s.g.add(d, mask).unwrap();
        let a = soft_assign(&mut s, d).unwrap();
        let v: Vec<f64> = vec![0.3, -1.2, 2.0];
        let x = s.g.constant(Tensor::new([64, 3], v.repeat(64)).unwrap());
        let q = aggregate(&mut s, a, x, &window, 4, true, None).unwrap();
        for i in 0..4 {
            for c in 0..3 {
                assert!((s.g.value(q).row(i)[c] - v[c]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn aggregation_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(h, w, r) in &[(8, 8, 4), (7, 9, 2), (16, 16, 4)] {
            let store = ParamStore::new();
            let mut s = Session::new(&store, false);
            let grid = GridSpec::new(h, w, r).unwrap();
            let window = grid.window();
            let np = grid.num_parts();
            let hw = h * w;
            let d = s.g.constant(random(&mut rng, [hw, WINDOW]));
            let mask = s.g.constant(window.mask());
            let d = s.g.add(d, mask).unwrap();
            let a = soft_assign(&mut s, d).unwrap();
            let xt = random(&mut rng, [hw, 6]);
            let x = s.g.constant(xt.clone());
            for normalize in [true, false] {
                let q = aggregate(&mut s, a, x, &window, np, normalize, None).unwrap();
                let dense = densify(s.g.value(a), &window, np);
                for (i, row) in dense.iter().enumerate() {
                    let mass: f64 = row.iter().sum();
                    let denom = if normalize { mass + MASS_EPS } else { 1.0 };
                    for c in 0..6 {
                        let want: f64 = (0..hw).map(|j| row[j] * xt.row(j)[c]).sum::<f64>() / denom;
                        assert!((s.g.value(q).row(i)[c] - want).abs() < 1e-9);
                    }
                }
            }
            // O1-style distribution: dense Āᵀ·P.
            let pt = random(&mut rng, [np, 3]);
            let p = s.g.constant(pt.clone());
            let o = distribute(&mut s, a, p, &window).unwrap();
            let dense = densify(s.g.value(a), &window, np);
            for j in 0..hw {
                for c in 0..3 {
                    let want: f64 = (0..np).map(|i| dense[i][j] * pt.row(i)[c]).sum();
                    assert!((s.g.value(o).row(j)[c] - want).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn empty_center_keeps_previous_features() {
        let store = ParamStore::new();
        let mut s = Session::new(&store, false);
        let grid = GridSpec::new(4, 8, 4).unwrap();
        let window = grid.window();
        // Every pixel assigned entirely to center 0.
        let mut hard = Tensor::zeros([32, WINDOW]);
        for j in 0..32 {
            let sl = window.idx[j * WINDOW..(j + 1) * WINDOW]
                .iter()
                .position(|&c| c == 0)
                .unwrap();
            hard.data_mut()[j * WINDOW + sl] = 1.0;
        }
        let a = s.g.constant(hard);
        let x = s.g.constant(Tensor::ones([32, 2]));
        let prev =
            s.g.constant(Tensor::new([2, 2], vec![5.0, 5.0, 7.0, -7.0]).unwrap());
        let q = aggregate(&mut s, a, x, &window, 2, true, Some(prev)).unwrap();
        let q = s.g.value(q);
        assert!((q.row(0)[0] - 1.0).abs() < 1e-9);
        assert_eq!(q.row(1), &[7.0, -7.0]);
    }

    #[test]
    fn assignment_ignores_feature_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let store = ParamStore::new();
        let mut s = Session::new(&store, false);
        let grid = GridSpec::new(8, 12, 4).unwrap();
        let window = grid.window();
        let kt = random(&mut rng, [96, 8]);
        let run = |s: &mut Session, kt: Tensor| {
            let k = s.g.constant(kt);
            let q = init_centers(s, k, &grid).unwrap();
            let d = local_affinity(s, q, k, &window, 0.1).unwrap();
            let a = soft_assign(s, d).unwrap();
            s.g.data(a).to_vec()
        };
        let base = run(&mut s, kt.clone());
        for scale in [0.01, 3.0, 250.0] {
            let scaled = run(&mut s, kt.map(|v| v * scale));
            let err = base
                .iter()
                .zip(&scaled)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-9, "scale {scale}: {err}");
        }
    }

    fn refiner_setup(np: usize) -> (ParamStore, TokenRefiner, crate::params::ParamId) {
        let cfg = ModelConfig {
            d: 8,
            heads: 2,
            ffn_hidden: 12,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let refiner = TokenRefiner::new(&mut store, "r", &cfg, &mut rng);
        let z = store.add_uniform("z", &[np, 8], 1.0, &mut rng);
        (store, refiner, z)
    }

    #[test]
    fn refinement_of_a_single_token_is_finite() {
        let (store, refiner, z) = refiner_setup(1);
        let mut s = Session::new(&store, false);
        let zv = s.p(z);
        let out = refiner.forward(&mut s, zv).unwrap();
        assert_eq!(s.g.shape(out), &[1, 8]);
        assert!(s.g.data(out).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn refinement_is_permutation_equivariant() {
        let (store, refiner, z) = refiner_setup(5);
        let perm = [3isize, 0, 4, 1, 2];
        let mut s = Session::new(&store, false);
        let zv = s.p(z);
        let out = refiner.forward(&mut s, zv).unwrap();
        let zp = s.g.gather_rows(zv, &perm).unwrap();
        let out_p = refiner.forward(&mut s, zp).unwrap();
        let permuted = s.g.gather_rows(out, &perm).unwrap();
        let err = hg_tensor::check::rel_error(s.g.data(permuted), s.g.data(out_p));
        assert!(err < 1e-12);
    }

    #[test]
    fn refinement_gradients_match_finite_differences() {
        let (store, refiner, z) = refiner_setup(4);
        let check = check_params(&store, &all_coords(&store), |s| {
            let zv = s.p(z);
            let out = refiner.forward(s, zv)?;
            let w = s.g.constant(Tensor::new(
                [4, 8],
                (0..32).map(|i| (i as f64 * 0.37).sin()).collect(),
            )?);
            let prod = s.g.mul(out, w)?;
            Ok(s.g.sum_all(prod))
        })
        .unwrap();
        assert!(check.rel_error() < 1e-5, "{}", check.rel_error());
    }

    #[test]
    fn zero_classifier_gives_uniform_parts() {
        let cfg = ModelConfig {
            d: 8,
            heads: 2,
            ffn_hidden: 8,
            classes: 19,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::new();
        let stage = PartStage {
            refine: TokenRefiner::new(&mut store, "r", &cfg, &mut rng),
            classifier: Linear::new(&mut store, "c", 8, 19, &mut rng),
        };
        let z = store.add_uniform("z", &[3, 8], 1.0, &mut rng);
        let mut zeroed = store.clone();
        zeroed
            .get_mut(stage.classifier.weight())
            .data_mut()
            .fill(0.0);
        let mut s = Session::new(&zeroed, false);
        let zv = s.p(z);
        let (_, p) = stage.classify(&mut s, zv).unwrap();
        assert_eq!(s.g.shape(p), &[3, 19]);
        assert!(s.g.data(p).iter().all(|&v| (v - 1.0 / 19.0).abs() < 1e-12));

        // A shared shift of the classifier bias leaves probabilities unchanged.
        let mut s = Session::new(&store, false);
        let zv = s.p(z);
        let (_, p) = stage.classify(&mut s, zv).unwrap();
        let base = s.g.data(p).to_vec();
        let mut shifted = store.clone();
        shifted
            .get_mut(stage.classifier.bias())
            .data_mut()
            .iter_mut()
            .for_each(|b| *b += 3.5);
        let mut s = Session::new(&shifted, false);
        let zv = s.p(z);
        let (_, p) = stage.classify(&mut s, zv).unwrap();
        assert!(hg_tensor::check::rel_error(&base, s.g.data(p)) < 1e-12);
        for row in base.chunks(19) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    fn grouper(iterations: usize) -> (ParamStore, PartGrouper) {
        let cfg = ModelConfig {
            d: 8,
            heads: 2,
            ffn_hidden: 8,
            iterations,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let g = PartGrouper::new(&mut store, &cfg, &mut rng);
        (store, g)
    }

    #[test]
    fn one_iteration_is_one_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (store, pg) = grouper(1);
        let mut s = Session::new(&store, false);
        let (kt, vt) = (random(&mut rng, [64, 8]), random(&mut rng, [64, 8]));
        let k = s.g.constant(kt);
        let v = s.g.constant(vt);
        let out = pg.run(&mut s, k, v, (8, 8)).unwrap();
        assert_eq!(out.iterations.len(), 1);
        let q = init_centers(&mut s, k, &out.grid).unwrap();
        let d = local_affinity(&mut s, q, k, &out.window, 0.1).unwrap();
        let a = soft_assign(&mut s, d).unwrap();
        assert_eq!(s.g.data(a), s.g.data(out.iterations[0].assign));
    }

    #[test]
    fn assignments_partition_pixels_locally() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (store, pg) = grouper(3);
        let mut s = Session::new(&store, false);
        let k = s.g.constant(random(&mut rng, [8 * 12, 8]));
        let v = s.g.constant(random(&mut rng, [8 * 12, 8]));
        let out = pg.run(&mut s, k, v, (8, 12)).unwrap();
        let grid = out.grid;
        for it in &out.iterations {
            let a = s.g.value(it.assign);
            for j in 0..grid.num_pixels() {
                assert!((a.row(j).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
            let parts = harden(a, &out.window);
            assert_eq!(parts.len(), grid.num_pixels());
            for (j, &c) in parts.iter().enumerate() {
                let home = grid.home_cell(j);
                let dy = (home / grid.grid_w) as isize - (c / grid.grid_w) as isize;
                let dx = (home % grid.grid_w) as isize - (c % grid.grid_w) as isize;
                assert!(dy.abs() <= 1 && dx.abs() <= 1);
            }
        }
    }

    #[test]
    fn separated_regions_give_clean_boundaries() {
        // Left half and right half carry orthogonal features; the boundary
        // falls inside a grid cell so the clustering has to split it.
        let (h, w) = (8, 16);
        let (store, pg) = grouper(6);
        let mut s = Session::new(&store, false);
        let mut kd = vec![0.0; h * w * 8];
        let split = 6;
        for y in 0..h {
            for x in 0..w {
                let c = if x < split { 0 } else { 1 };
                kd[(y * w + x) * 8 + c] = 1.0;
            }
        }
        let k = s.g.constant(Tensor::new([h * w, 8], kd).unwrap());
        let out = pg.run(&mut s, k, k, (h, w)).unwrap();
        let last = out.iterations.last().unwrap();
        let parts = harden(s.g.value(last.assign), &out.window);
        let (mut hit, mut total) = (0, 0);
        for y in 0..h {
            total += 1;
            if parts[y * w + split - 1] != parts[y * w + split] {
                hit += 1;
            }
        }
        assert!(hit as f64 / total as f64 >= 0.95);
    }
}
