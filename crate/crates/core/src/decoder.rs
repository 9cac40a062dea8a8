//! Mesh decoder: causal self-attention, cross-attention against every
//! feature level, sigmoid gating and gated summation.

use rand::Rng;

use crate::attention::{multi_head_attention, AttentionMask, AttentionWeights};
use crate::autograd::{Graph, Var};
use crate::encoder::FeatureLevels;
use crate::error::{Error, Result};
use crate::layers::{FeedForward, LayerNorm};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// `sigmoid(concat(T_i, D_a)·W + b)` with `W: [2·d_model × d_model]`.
#[derive(Clone, Debug)]
pub struct Gate {
    pub w: ParamId,
    pub b: ParamId,
}

impl Gate {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let std = 1.0 / ((2 * d_model) as f64).sqrt();
        let w = store.register(
            format!("{prefix}.gate.weight"),
            Tensor::randn(&[2 * d_model, d_model], std, rng),
        )?;
        let b = store.register(format!("{prefix}.gate.bias"), Tensor::zeros(&[d_model]))?;
        Ok(Gate { w, b })
    }
}

/// How cross-attention outputs over the feature levels are combined.
#[derive(Clone, Debug)]
pub enum LevelFusion {
    /// Gated sum over every level.
    Mesh(Gate),
    /// Attend to the last level only, no gate.
    LastLevel,
}

#[derive(Clone, Debug)]
pub struct MeshLayer {
    pub self_attn: AttentionWeights,
    /// One projection set shared by every level.
    pub cross_attn: AttentionWeights,
    pub fusion: LevelFusion,
    pub d_model: usize,
}

impl MeshLayer {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        mesh: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let self_attn = AttentionWeights::register(store, &format!("{prefix}.self_attn"), d_model, heads, rng)?;
        let cross_attn =
            AttentionWeights::register(store, &format!("{prefix}.cross_attn"), d_model, heads, rng)?;
        let fusion = if mesh {
            LevelFusion::Mesh(Gate::register(store, prefix, d_model, rng)?)
        } else {
            LevelFusion::LastLevel
        };
        Ok(MeshLayer {
            self_attn,
            cross_attn,
            fusion,
            d_model,
        })
    }
}

/// Replaces the gate activations; used to compare against a plain decoder
/// layer and to isolate the aggregation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateOverride {
    Sigmoid,
    Constant(f64),
}

/// Every intermediate of one mesh layer evaluation.
#[derive(Clone, Debug)]
pub struct MeshTrace {
    pub output: Var,
    pub self_attended: Var,
    pub cross: Vec<Var>,
    pub gates: Vec<Var>,
}

pub fn mesh_layer_forward(
    g: &mut Graph,
    store: &ParamStore,
    d_prev: Var,
    levels: &FeatureLevels,
    layer: &MeshLayer,
) -> Result<Var> {
    Ok(mesh_layer_trace(g, store, d_prev, levels, layer, GateOverride::Sigmoid)?.output)
}

pub fn mesh_layer_trace(
    g: &mut Graph,
    store: &ParamStore,
    d_prev: Var,
    levels: &FeatureLevels,
    layer: &MeshLayer,
    gate_override: GateOverride,
) -> Result<MeshTrace> {
    if levels.is_empty() {
        return Err(Error::Input("mesh layer needs at least one feature level".into()));
    }
    for &v in levels.as_slice().iter().chain([&d_prev]) {
        let (_, width) = g.value(v).dims2()?;
        if width != layer.d_model {
            return Err(Error::Shape {
                op: "mesh_layer",
                left: g.shape(v).to_vec(),
                right: vec![layer.d_model],
            });
        }
    }
    let d_a = multi_head_attention(g, store, &layer.self_attn, d_prev, d_prev, AttentionMask::Causal, None)?
        .output;
    let attend = |g: &mut Graph, level: Var| {
        multi_head_attention(g, store, &layer.cross_attn, d_a, level, AttentionMask::None, None)
            .map(|o| o.output)
    };
    match &layer.fusion {
        LevelFusion::LastLevel => {
            let t = attend(g, levels.last())?;
            Ok(MeshTrace {
                output: t,
                self_attended: d_a,
                cross: vec![t],
                gates: Vec::new(),
            })
        }
        LevelFusion::Mesh(gate) => {
            let mut cross = Vec::with_capacity(levels.len());
            let mut gates = Vec::with_capacity(levels.len());
            let mut output: Option<Var> = None;
            for &level in levels.as_slice() {
                let t = attend(g, level)?;
                let r = match gate_override {
                    GateOverride::Sigmoid => {
                        let w = g.param(store, gate.w);
                        let b = g.param(store, gate.b);
                        let cat = g.concat_cols(&[t, d_a])?;
                        let pre = g.matmul(cat, w)?;
                        let pre = g.add_row(pre, b)?;
                        g.sigmoid(pre)?
                    }
                    GateOverride::Constant(c) => g.constant(Tensor::full(g.shape(t), c)),
                };
                let contrib = g.mul(r, t)?;
                output = Some(match output {
                    None => contrib,
                    Some(acc) => g.add(acc, contrib)?,
                });
                cross.push(t);
                gates.push(r);
            }
            Ok(MeshTrace {
                output: output.expect("at least one level"),
                self_attended: d_a,
                cross,
                gates,
            })
        }
    }
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub mesh: MeshLayer,
    pub ffn: FeedForward,
    pub norm_mesh: LayerNorm,
    pub norm_ffn: LayerNorm,
}

impl DecoderBlock {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        d_ff: usize,
        mesh: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(DecoderBlock {
            mesh: MeshLayer::register(store, &format!("{prefix}.mesh"), d_model, heads, mesh, rng)?,
            ffn: FeedForward::register(store, prefix, d_model, d_ff, rng)?,
            norm_mesh: LayerNorm::register(store, &format!("{prefix}.norm_mesh"), d_model)?,
            norm_ffn: LayerNorm::register(store, &format!("{prefix}.norm_ffn"), d_model)?,
        })
    }

    /// `h = d + Mesh(LN(d))`, `out = h + FFN(LN(h))`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        d_prev: Var,
        levels: &FeatureLevels,
    ) -> Result<Var> {
        let n = self.norm_mesh.forward(g, store, d_prev)?;
        let m = mesh_layer_forward(g, store, n, levels, &self.mesh)?;
        let h = g.add(d_prev, m)?;
        let n = self.norm_ffn.forward(g, store, h)?;
        let f = self.ffn.forward(g, store, n)?;
        g.add(h, f)
    }
}

pub fn decoder_forward(
    g: &mut Graph,
    store: &ParamStore,
    d1: Var,
    levels: &FeatureLevels,
    blocks: &[DecoderBlock],
) -> Result<Var> {
    decoder_forward_inspect(g, store, d1, levels, blocks, |_, _| {})
}

/// [`decoder_forward`] with a callback seeing the levels each block consumes.
pub fn decoder_forward_inspect<F>(
    g: &mut Graph,
    store: &ParamStore,
    d1: Var,
    levels: &FeatureLevels,
    blocks: &[DecoderBlock],
    mut inspect: F,
) -> Result<Var>
where
    F: FnMut(usize, &FeatureLevels),
{
    let mut d = d1;
    for (i, block) in blocks.iter().enumerate() {
        inspect(i, levels);
        d = block.forward(g, store, d, levels)?;
    }
    Ok(d)
}
