//! Named parameter storage, per-pass binding into a [`Graph`], and AdamW.

use std::collections::HashMap;

use hg_tensor::{Graph, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{HgError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter {name}"
        );
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.names.len() - 1)
    }

    /// Uniform Xavier init for a `fan_in × fan_out` weight.
    pub fn add_xavier(
        &mut self,
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        self.add(
            name,
            Tensor::new([fan_in, fan_out], data).expect("shape matches"),
        )
    }

    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(
            name,
            Tensor::new(shape.to_vec(), data).expect("shape matches"),
        )
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Replaces every tensor; names and shapes must match exactly.
    pub fn load_from(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.names.len() {
            return Err(HgError::Checkpoint(format!(
                "expected {} parameters, found {}",
                self.names.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.into_iter().enumerate() {
            if name != self.names[i] {
                return Err(HgError::Checkpoint(format!(
                    "parameter {i}: expected {}, found {name}",
                    self.names[i]
                )));
            }
            if t.shape() != self.tensors[i].shape() {
                return Err(HgError::Checkpoint(format!(
                    "parameter {name}: shape {:?} != {:?}",
                    t.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = t;
        }
        Ok(())
    }
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self(store.tensors.iter().map(|t| vec![0.0; t.len()]).collect())
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for x in self.0.iter_mut().flatten() {
            *x *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|x| x.is_finite())
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.0[id.0]
    }
}

/// One forward pass: a graph plus lazily bound parameter leaves.
pub struct Session<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    track_grads: bool,
    /// Largest cross-attention score matrix (rows × cols) built in this pass.
    pub peak_cross_attention: usize,
    /// Largest self-attention score matrix built in this pass.
    pub peak_self_attention: usize,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, track_grads: bool) -> Self {
        Self {
            g: Graph::new(),
            store,
            bound: vec![None; store.len()],
            track_grads,
            peak_cross_attention: 0,
            peak_self_attention: 0,
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self
            .g
            .leaf(self.store.tensors[id.0].clone(), self.track_grads);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn note_attention(&mut self, rows: usize, cols: usize, cross: bool) {
        let peak = if cross {
            &mut self.peak_cross_attention
        } else {
            &mut self.peak_self_attention
        };
        *peak = (*peak).max(rows * cols);
    }

    /// Runs backward from `loss` and collects parameter gradients.
    pub fn param_grads(&mut self, loss: Var) -> Result<Grads> {
        self.g.backward(loss)?;
        let mut out = Grads::zeros_like(self.store);
        for (i, b) in self.bound.iter().enumerate() {
            if let Some(v) = b {
                if let Some(gr) = self.g.grad(*v) {
                    out.0[i].copy_from_slice(gr);
                }
            }
        }
        Ok(out)
    }
}

/// Decoupled-weight-decay Adam. Decay applies to every parameter of rank ≥ 2
/// (weights and embeddings), not to biases or norm scales.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        let z: Vec<Vec<f64>> = store.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            step: 0,
            m: z.clone(),
            v: z,
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (i, tensor) in store.tensors.iter_mut().enumerate() {
            let decay = if tensor.rank() >= 2 {
                cfg.weight_decay
            } else {
                0.0
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in tensor.data_mut().iter_mut().enumerate() {
                let g = grads.0[i][k];
                m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g;
                v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g * g;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                *w -= lr * (mh / (vh.sqrt() + cfg.eps) + decay * *w);
            }
        }
    }
}
