//! Small building blocks shared by the encoder, decoder and model heads.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// `x·W + b` with `W: [d_in × d_out]`.
#[derive(Clone, Debug)]
pub struct Affine {
    pub w: ParamId,
    pub b: ParamId,
}

impl Affine {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Self::register_with_std(store, prefix, d_in, d_out, 1.0 / (d_in as f64).sqrt(), rng)
    }

    pub fn register_with_std<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.register(format!("{prefix}.weight"), Tensor::randn(&[d_in, d_out], std, rng))?;
        let b = store.register(format!("{prefix}.bias"), Tensor::zeros(&[d_out]))?;
        Ok(Affine { w, b })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn register(store: &mut ParamStore, prefix: &str, width: usize) -> Result<Self> {
        let gamma = store.register(format!("{prefix}.gamma"), Tensor::full(&[width], 1.0))?;
        let beta = store.register(format!("{prefix}.beta"), Tensor::zeros(&[width]))?;
        Ok(LayerNorm { gamma, beta })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.layer_norm(x, gamma, beta)
    }
}

/// Two affine layers with a ReLU between.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Affine,
    pub outer: Affine,
}

impl FeedForward {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        d_ff: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(FeedForward {
            inner: Affine::register(store, &format!("{prefix}.ffn_in"), d_model, d_ff, rng)?,
            outer: Affine::register(store, &format!("{prefix}.ffn_out"), d_ff, d_model, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.inner.forward(g, store, x)?;
        let h = g.relu(h)?;
        self.outer.forward(g, store, h)
    }
}
