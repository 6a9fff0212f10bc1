//! Whole-level grouping: learnable queries attend over part tokens through a
//! stack of decoder layers; every layer emits masks over the stride-4 map
//! and class probabilities including a trailing no-object column.

use hg_tensor::{Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::nn::{residual_norm, LayerNorm, Mlp, MultiHeadAttention};
use crate::params::{ParamId, ParamStore, Session};

/// Cross-attention to the tokens, self-attention among queries, then an FFN;
/// each sub-block is wrapped as `LN(x + f(x))`.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    cross: MultiHeadAttention,
    ln_cross: LayerNorm,
    self_attn: MultiHeadAttention,
    ln_self: LayerNorm,
    ffn: Mlp,
    ln_ffn: LayerNorm,
}

impl DecoderLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            cross: MultiHeadAttention::new(store, &format!("{name}.cross"), cfg.d, cfg.heads, rng),
            ln_cross: LayerNorm::new(store, &format!("{name}.ln_cross"), cfg.d),
            self_attn: MultiHeadAttention::new(
                store,
                &format!("{name}.self"),
                cfg.d,
                cfg.heads,
                rng,
            ),
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), cfg.d),
            ffn: Mlp::new(
                store,
                &format!("{name}.ffn"),
                cfg.d,
                cfg.ffn_hidden,
                cfg.d,
                rng,
            ),
            ln_ffn: LayerNorm::new(store, &format!("{name}.ln_ffn"), cfg.d),
        }
    }

    pub fn forward(&self, s: &mut Session, e: Var, tokens: Var) -> Result<Var> {
        let c = self.cross.forward(s, e, tokens)?;
        let e = residual_norm(s, e, c, &self.ln_cross)?;
        let a = self.self_attn.forward(s, e, e)?;
        let e = residual_norm(s, e, a, &self.ln_self)?;
        let f = self.ffn.forward(s, e)?;
        residual_norm(s, e, f, &self.ln_ffn)
    }
}

/// Outputs recorded after one decoder layer.
#[derive(Clone, Debug)]
pub struct WholeLayer {
    pub queries: Var,
    /// Mask embeddings ε, `N_o×d`.
    pub embed: Var,
    /// `ε·K0ᵀ`, `N_o×(H₀·W₀)`; masks are their sigmoid.
    pub mask_logits: Var,
    pub masks: Var,
    /// `N_o×(K+1)`.
    pub class_logits: Var,
    pub probs: Var,
}

#[derive(Clone, Debug)]
pub struct WholeOutput {
    pub layers: Vec<WholeLayer>,
}

impl WholeOutput {
    pub fn last(&self) -> &WholeLayer {
        self.layers.last().expect("at least one decoder layer")
    }
}

/// Heads shared by all decoder layers.
#[derive(Clone, Debug)]
pub struct WholeHeads {
    pub norm: LayerNorm,
    pub mask_mlp: Mlp,
    pub class_mlp: Mlp,
}

impl WholeHeads {
    /// `(ε, ε·K0ᵀ, σ(ε·K0ᵀ))`.
    pub fn emit_masks(&self, s: &mut Session, e: Var, k0: Var) -> Result<(Var, Var, Var)> {
        let n = self.norm.forward(s, e)?;
        let embed = self.mask_mlp.forward(s, n)?;
        emit_masks_from(s, embed, k0)
    }

    /// `(logits, P_h)`.
    pub fn classify(&self, s: &mut Session, e: Var) -> Result<(Var, Var)> {
        let n = self.norm.forward(s, e)?;
        let logits = self.class_mlp.forward(s, n)?;
        let probs = s.g.softmax(logits, 1)?;
        Ok((logits, probs))
    }
}

/// `M = σ(ε·K0ᵀ)` for given mask embeddings.
pub fn emit_masks_from(s: &mut Session, embed: Var, k0: Var) -> Result<(Var, Var, Var)> {
    let logits = s.g.matmul_nt(embed, k0)?;
    let masks = s.g.sigmoid(logits);
    Ok((embed, logits, masks))
}

#[derive(Clone, Debug)]
pub struct WholeGrouper {
    queries: ParamId,
    layers: Vec<DecoderLayer>,
    pub heads: WholeHeads,
}

impl WholeGrouper {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let queries = store.add_uniform("whole.queries", &[cfg.queries, cfg.d], 1.0, rng);
        let layers = (0..cfg.iterations)
            .map(|l| DecoderLayer::new(store, &format!("whole.layer{l}"), cfg, rng))
            .collect();
        let heads = WholeHeads {
            norm: LayerNorm::new(store, "whole.head_norm", cfg.d),
            mask_mlp: Mlp::new(store, "whole.mask_mlp", cfg.d, cfg.d, cfg.d, rng),
            class_mlp: Mlp::new(store, "whole.class_mlp", cfg.d, cfg.d, cfg.classes + 1, rng),
        };
        Self {
            queries,
            layers,
            heads,
        }
    }

    pub fn layer(&self, i: usize) -> &DecoderLayer {
        &self.layers[i]
    }

    pub fn query_param(&self) -> ParamId {
        self.queries
    }

    /// Decodes `tokens` (part tokens, or pixel features in flat mode) and
    /// projects every layer's queries onto `k0`.
    pub fn run(&self, s: &mut Session, tokens: Var, k0: Var) -> Result<WholeOutput> {
        let mut e = s.p(self.queries);
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            e = layer.forward(s, e, tokens)?;
            let (embed, mask_logits, masks) = self.heads.emit_masks(s, e, k0)?;
            let (class_logits, probs) = self.heads.classify(s, e)?;
            layers.push(WholeLayer {
                queries: e,
                embed,
                mask_logits,
                masks,
                class_logits,
                probs,
            });
        }
        Ok(WholeOutput { layers })
    }
}

/// Rows of `P_h` without the no-object column, `N_o×K`.
pub fn drop_no_object(probs: &Tensor) -> Tensor {
    let (n, c) = probs.dims2().expect("P_h is 2-D");
    let k = c - 1;
    let mut out = Vec::with_capacity(n * k);
    for q in 0..n {
        out.extend_from_slice(&probs.row(q)[..k]);
    }
    Tensor::new([n, k], out).expect("shape matches")
}
