//! Small layers shared by the backbone and both grouping stages.

use hg_tensor::{Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{ParamId, ParamStore, Session};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = store.add_xavier(format!("{name}.w"), fan_in, fan_out, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros([fan_out]));
        Self {
            w,
            b,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.p(self.w);
        let b = s.p(self.b);
        let y = s.g.matmul(x, w)?;
        Ok(s.g.add(y, b)?)
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones([dim]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([dim]));
        Self { gamma, beta }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let g = s.p(self.gamma);
        let b = s.p(self.beta);
        Ok(s.g.layer_norm(x, g, b, LN_EPS)?)
    }
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), d_in, hidden, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, d_out, rng),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = self.fc1.forward(s, x)?;
        let h = s.g.relu(h);
        self.fc2.forward(s, h)
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
/// No positional encodings: the output is equivariant to query order and
/// invariant to key/value order.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    /// `queries: n×d`, `context: m×d` → `n×d`. Each head's score matrix is
    /// `n×m`; its size is reported to the session as cross-attention unless
    /// `queries` and `context` are the same node.
    pub fn forward(&self, s: &mut Session, queries: Var, context: Var) -> Result<Var> {
        let q = self.q.forward(s, queries)?;
        let k = self.k.forward(s, context)?;
        let v = self.v.forward(s, context)?;
        let (n, d) = s.g.value(q).dims2()?;
        let m = s.g.shape(k)[0];
        let dh = d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = s.g.slice(q, 1, h * dh, dh)?;
            let kh = s.g.slice(k, 1, h * dh, dh)?;
            let vh = s.g.slice(v, 1, h * dh, dh)?;
            let scores = s.g.matmul_nt(qh, kh)?;
            s.note_attention(n, m, queries != context);
            let scores = s.g.scale(scores, scale);
            let attn = s.g.softmax(scores, 1)?;
            outs.push(s.g.matmul(attn, vh)?);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            s.g.concat(&outs, 1)?
        };
        self.o.forward(s, cat)
    }
}

/// Post-norm residual block: `LN(x + f(x))`.
pub fn residual_norm(s: &mut Session, x: Var, fx: Var, norm: &LayerNorm) -> Result<Var> {
    let sum = s.g.add(x, fx)?;
    norm.forward(s, sum)
}
