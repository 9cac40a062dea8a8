//! Encoder blocks and the multi-level feature stack they produce.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    multi_head_self_attention, static_expansion, AttentionMask, AttentionWeights, ExpansionMatrix,
    MemorySlots,
};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{FeedForward, LayerNorm};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionKind {
    Traditional,
    MemoryAugmented,
    StaticExpansion,
}

#[derive(Clone, Debug)]
pub enum EncoderAttention {
    Traditional(AttentionWeights),
    MemoryAugmented(AttentionWeights, MemorySlots),
    StaticExpansion(ExpansionMatrix),
}

impl EncoderAttention {
    pub fn kind(&self) -> AttentionKind {
        match self {
            EncoderAttention::Traditional(_) => AttentionKind::Traditional,
            EncoderAttention::MemoryAugmented(..) => AttentionKind::MemoryAugmented,
            EncoderAttention::StaticExpansion(_) => AttentionKind::StaticExpansion,
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        match self {
            EncoderAttention::Traditional(w) => {
                multi_head_self_attention(g, store, x, w, AttentionMask::None, None)
            }
            EncoderAttention::MemoryAugmented(w, mem) => {
                multi_head_self_attention(g, store, x, w, AttentionMask::None, Some(mem))
            }
            EncoderAttention::StaticExpansion(p) => static_expansion(g, store, x, p),
        }
    }
}

/// Hyperparameters needed to build one encoder block.
#[derive(Clone, Copy, Debug)]
pub struct EncoderSpec {
    pub kind: AttentionKind,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub n_mem: usize,
    pub expansion_len: usize,
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attention: EncoderAttention,
    pub ffn: FeedForward,
    pub norm_attn: LayerNorm,
    pub norm_ffn: LayerNorm,
    pub d_model: usize,
}

impl EncoderBlock {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        spec: &EncoderSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let attn_prefix = format!("{prefix}.attn");
        let attention = match spec.kind {
            AttentionKind::Traditional => EncoderAttention::Traditional(AttentionWeights::register(
                store,
                &attn_prefix,
                spec.d_model,
                spec.heads,
                rng,
            )?),
            AttentionKind::MemoryAugmented => {
                let w = AttentionWeights::register(store, &attn_prefix, spec.d_model, spec.heads, rng)?;
                let mem = MemorySlots::register(store, &attn_prefix, spec.n_mem, spec.d_model, rng)?;
                EncoderAttention::MemoryAugmented(w, mem)
            }
            AttentionKind::StaticExpansion => EncoderAttention::StaticExpansion(
                ExpansionMatrix::register(store, &attn_prefix, spec.d_model, spec.expansion_len, rng)?,
            ),
        };
        Ok(EncoderBlock {
            attention,
            ffn: FeedForward::register(store, prefix, spec.d_model, spec.d_ff, rng)?,
            norm_attn: LayerNorm::register(store, &format!("{prefix}.norm_attn"), spec.d_model)?,
            norm_ffn: LayerNorm::register(store, &format!("{prefix}.norm_ffn"), spec.d_model)?,
            d_model: spec.d_model,
        })
    }

    /// Pre-norm residual block: `h = x + Attn(LN(x))`, `out = h + FFN(LN(h))`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let (_, width) = g.value(x).dims2()?;
        if width != self.d_model {
            return Err(Error::Shape {
                op: "encoder_block",
                left: g.shape(x).to_vec(),
                right: vec![self.d_model],
            });
        }
        let n = self.norm_attn.forward(g, store, x)?;
        let a = self.attention.forward(g, store, n)?;
        let h = g.add(x, a)?;
        let n = self.norm_ffn.forward(g, store, h)?;
        let f = self.ffn.forward(g, store, n)?;
        g.add(h, f)
    }
}

/// Backbone output followed by every encoder block output.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureLevels {
    levels: Vec<Var>,
}

impl FeatureLevels {
    pub fn new(levels: Vec<Var>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Input("feature levels must not be empty".into()));
        }
        Ok(FeatureLevels { levels })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn as_slice(&self) -> &[Var] {
        &self.levels
    }

    pub fn last(&self) -> Var {
        *self.levels.last().expect("nonempty")
    }
}

/// Runs the stack and keeps every intermediate level.
pub fn encoder_forward(
    g: &mut Graph,
    store: &ParamStore,
    e1: Var,
    blocks: &[EncoderBlock],
) -> Result<FeatureLevels> {
    let mut levels = Vec::with_capacity(blocks.len() + 1);
    levels.push(e1);
    for block in blocks {
        let prev = *levels.last().expect("nonempty");
        levels.push(block.forward(g, store, prev)?);
    }
    FeatureLevels::new(levels)
}
