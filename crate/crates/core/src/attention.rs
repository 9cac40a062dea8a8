//! Traditional, memory-augmented and static-expansion attention.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Additive bias applied to disallowed attention logits.
pub const MASK_BIAS: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMask {
    None,
    /// Query `i` may only attend to keys `j <= i`.
    Causal,
}

impl AttentionMask {
    fn bias(self, m: usize, n: usize) -> Result<Option<Tensor>> {
        match self {
            AttentionMask::None => Ok(None),
            AttentionMask::Causal => {
                if m != n {
                    return Err(Error::Shape {
                        op: "causal mask",
                        left: vec![m],
                        right: vec![n],
                    });
                }
                let mut t = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    for j in i + 1..n {
                        t.data_mut()[i * n + j] = MASK_BIAS;
                    }
                }
                Ok(Some(t))
            }
        }
    }
}

/// Query/key/value/output projections of one multi-head attention layer.
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub d_model: usize,
}

impl AttentionWeights {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::config(
                "heads",
                format!("{heads} heads do not divide d_model {d_model}"),
            ));
        }
        let std = 1.0 / (d_model as f64).sqrt();
        let mut mat = |name: &str| {
            store.register(
                format!("{prefix}.{name}"),
                Tensor::randn(&[d_model, d_model], std, rng),
            )
        };
        Ok(AttentionWeights {
            wq: mat("w_q")?,
            wk: mat("w_k")?,
            wv: mat("w_v")?,
            wo: mat("w_o")?,
            heads,
            d_model,
        })
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Learnable key/value rows appended after the projected keys and values.
#[derive(Clone, Debug)]
pub struct MemorySlots {
    /// `(M_k, M_v)`, absent when `n_mem == 0`.
    pub slots: Option<(ParamId, ParamId)>,
    pub n_mem: usize,
}

impl MemorySlots {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        n_mem: usize,
        d_model: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let slots = if n_mem == 0 {
            None
        } else {
            let std = 1.0 / (d_model as f64).sqrt();
            let mk = store.register(
                format!("{prefix}.memory_k"),
                Tensor::randn(&[n_mem, d_model], std, rng),
            )?;
            let mv = store.register(
                format!("{prefix}.memory_v"),
                Tensor::randn(&[n_mem, d_model], std, rng),
            )?;
            Some((mk, mv))
        };
        Ok(MemorySlots { slots, n_mem })
    }
}

/// Learned expansion directions `P: [d_model × expansion_len]`.
#[derive(Clone, Debug)]
pub struct ExpansionMatrix {
    pub p: ParamId,
    pub expansion_len: usize,
}

impl ExpansionMatrix {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        expansion_len: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if expansion_len == 0 {
            return Err(Error::config("expansion_len", "must be at least 1"));
        }
        let std = 1.0 / (d_model as f64).sqrt();
        let p = store.register(
            format!("{prefix}.expansion"),
            Tensor::randn(&[d_model, expansion_len], std, rng),
        )?;
        Ok(ExpansionMatrix { p, expansion_len })
    }
}

/// `softmax(q·kᵀ/√d_k + mask)`; rows index queries.
pub fn attention_probs(g: &mut Graph, q: Var, k: Var, mask: AttentionMask) -> Result<Var> {
    let (m, dq) = g.value(q).dims2()?;
    let (n, dk) = g.value(k).dims2()?;
    if dq != dk {
        return Err(Error::Shape {
            op: "scaled_dot_attention",
            left: vec![m, dq],
            right: vec![n, dk],
        });
    }
    let scores = g.matmul_nt(q, k)?;
    let mut scaled = g.scale(scores, 1.0 / (dk as f64).sqrt())?;
    if let Some(bias) = mask.bias(m, n)? {
        scaled = g.add_const(scaled, &bias)?;
    }
    g.softmax_rows(scaled)
}

pub fn scaled_dot_attention(
    g: &mut Graph,
    q: Var,
    k: Var,
    v: Var,
    mask: AttentionMask,
) -> Result<Var> {
    let (n, _) = g.value(k).dims2()?;
    let (nv, _) = g.value(v).dims2()?;
    if n != nv {
        return Err(Error::Shape {
            op: "scaled_dot_attention",
            left: g.shape(k).to_vec(),
            right: g.shape(v).to_vec(),
        });
    }
    let p = attention_probs(g, q, k, mask)?;
    g.matmul(p, v)
}

pub struct MultiHeadOutput {
    pub output: Var,
    /// Per-head attention weights, `[queries × keys]`.
    pub probs: Vec<Var>,
}

/// Multi-head attention with queries from `query` and keys/values from
/// `source`. Memory slots, when given, are appended to the projected keys
/// and values before the head split.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    w: &AttentionWeights,
    query: Var,
    source: Var,
    mask: AttentionMask,
    mem: Option<&MemorySlots>,
) -> Result<MultiHeadOutput> {
    for x in [query, source] {
        let (_, width) = g.value(x).dims2()?;
        if width != w.d_model {
            return Err(Error::Shape {
                op: "multi_head_attention",
                left: g.shape(x).to_vec(),
                right: vec![w.d_model],
            });
        }
    }
    let slots = mem.and_then(|m| m.slots);
    if slots.is_some() && mask == AttentionMask::Causal {
        return Err(Error::Input(
            "memory slots cannot be combined with a causal mask".into(),
        ));
    }
    let wq = g.param(store, w.wq);
    let wk = g.param(store, w.wk);
    let wv = g.param(store, w.wv);
    let wo = g.param(store, w.wo);
    let q = g.matmul(query, wq)?;
    let mut k = g.matmul(source, wk)?;
    let mut v = g.matmul(source, wv)?;
    if let Some((mk, mv)) = slots {
        let mk = g.param(store, mk);
        let mv = g.param(store, mv);
        k = g.concat_rows(&[k, mk])?;
        v = g.concat_rows(&[v, mv])?;
    }
    let dk = w.d_k();
    let mut heads = Vec::with_capacity(w.heads);
    let mut probs = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let (qh, kh, vh) = if w.heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, h * dk, dk)?,
                g.slice_cols(k, h * dk, dk)?,
                g.slice_cols(v, h * dk, dk)?,
            )
        };
        let p = attention_probs(g, qh, kh, mask)?;
        heads.push(g.matmul(p, vh)?);
        probs.push(p);
    }
    let joined = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let output = g.matmul(joined, wo)?;
    Ok(MultiHeadOutput { output, probs })
}

pub fn multi_head_self_attention(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    w: &AttentionWeights,
    mask: AttentionMask,
    mem: Option<&MemorySlots>,
) -> Result<Var> {
    Ok(multi_head_attention(g, store, w, x, x, mask, mem)?.output)
}

/// Projects the sequence onto `expansion_len` learned directions and back.
///
/// `M = l2_normalize_rows(relu(x·P))` is `[F × L_exp]`; the expanded
/// sequence is `Mᵀ·x` and the output `M·(Mᵀ·x)` has the input's shape.
pub fn static_expansion(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    p: &ExpansionMatrix,
) -> Result<Var> {
    let (_, width) = g.value(x).dims2()?;
    let (rows, _) = store.tensor(p.p).dims2()?;
    if width != rows {
        return Err(Error::Shape {
            op: "static_expansion",
            left: g.shape(x).to_vec(),
            right: store.tensor(p.p).shape().to_vec(),
        });
    }
    let pv = g.param(store, p.p);
    let proj = g.matmul(x, pv)?;
    let act = g.relu(proj)?;
    let m = g.l2_normalize_rows(act)?;
    let expanded = g.matmul_tn(m, x)?;
    g.matmul(m, expanded)
}
