//! Central finite-difference gradient checking.

use rand::Rng;
use serde::Serialize;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BackwardFault, Graph, Var};
use crate::data::{TokenSequence, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::{Captioner, ModelConfig, Variant};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a - n| / max(1, |a|, |n|)`
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

#[derive(Clone, Debug, Serialize)]
pub struct GroupError {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub groups: Vec<GroupError>,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }

    fn push(&mut self, group: GroupError) {
        self.max_rel_error = self.max_rel_error.max(group.max_rel_error);
        self.groups.push(group);
    }
}

fn eval_scalar(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::GradCheck(format!(
            "objective must be scalar, got shape {:?}",
            t.shape()
        )));
    }
    let x = t.item();
    if !x.is_finite() {
        return Err(Error::GradCheck("objective is not finite".into()));
    }
    Ok(x)
}

/// Checks every coordinate of every parameter in `store`.
///
/// `objective` builds a fresh graph from the store and returns the scalar
/// node to differentiate.
pub fn check_params<F>(store: &mut ParamStore, mut objective: F, h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = objective(store, &mut g)?;
    eval_scalar(&g, out)?;
    g.backward(out)?;
    let analytic = g.param_grads(store.len());
    drop(g);

    let mut report = GradCheckReport { max_rel_error: 0.0, groups: Vec::new() };
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let n = store.tensor(id).numel();
        let zeros = vec![0.0; n];
        let grad = analytic[id.index()].as_deref().unwrap_or(&zeros).to_vec();
        let mut group = GroupError {
            name: store.get(id).name.clone(),
            coords: n,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for i in 0..n {
            let orig = store.tensor(id).data()[i];
            store.tensor_mut(id).data_mut()[i] = orig + h;
            let plus = {
                let mut g = Graph::inference();
                let v = objective(store, &mut g)?;
                eval_scalar(&g, v)?
            };
            store.tensor_mut(id).data_mut()[i] = orig - h;
            let minus = {
                let mut g = Graph::inference();
                let v = objective(store, &mut g)?;
                eval_scalar(&g, v)?
            };
            store.tensor_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            group.max_rel_error = group.max_rel_error.max(rel_error(grad[i], numeric));
            group.max_abs_error = group.max_abs_error.max((grad[i] - numeric).abs());
        }
        report.push(group);
    }
    Ok(report)
}

/// Checks gradients with respect to free input tensors.
///
/// Non-scalar outputs of `build` are reduced with a random weighted sum so
/// every output coordinate contributes.
pub fn check_inputs<B, R>(inputs: &[Tensor], build: B, rng: &mut R, h: f64) -> Result<GradCheckReport>
where
    B: Fn(&mut Graph, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    let mut readout: Option<Tensor> = None;
    let mut run = |inputs: &[Tensor], rng: &mut R, track: bool| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| if track { g.input(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        let y = build(&mut g, &vars)?;
        let out = if g.value(y).numel() == 1 {
            y
        } else {
            let w = readout
                .get_or_insert_with(|| Tensor::randn(g.value(y).shape(), 1.0, rng))
                .clone();
            g.weighted_sum(y, &w)?
        };
        Ok((g, vars, out))
    };

    let (mut g, vars, out) = run(inputs, rng, true)?;
    eval_scalar(&g, out)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
        .collect();

    let mut report = GradCheckReport { max_rel_error: 0.0, groups: Vec::new() };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, grad) in analytic.iter().enumerate() {
        let mut group = GroupError {
            name: format!("input{k}"),
            coords: grad.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
        };
        for i in 0..grad.len() {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + h;
            let (g, _, o) = run(&work, rng, false)?;
            let plus = eval_scalar(&g, o)?;
            work[k].data_mut()[i] = orig - h;
            let (g, _, o) = run(&work, rng, false)?;
            let minus = eval_scalar(&g, o)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            group.max_rel_error = group.max_rel_error.max(rel_error(grad[i], numeric));
            group.max_abs_error = group.max_abs_error.max((grad[i] - numeric).abs());
        }
        report.push(group);
    }
    Ok(report)
}

/// Checks every parameter of the micro model for `variant` against the
/// teacher-forced loss of one random image and caption. `fault` corrupts
/// the analytic backward pass.
pub fn check_variant(variant: Variant, seed: u64, fault: Option<BackwardFault>) -> Result<GradCheckReport> {
    let config = ModelConfig { seed, ..ModelConfig::micro(variant) };
    let shell = Captioner::new(config.clone())?;
    let mut store = shell.store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut image = Tensor::randn(&[config.image_size, config.image_size, config.channels], 1.0, &mut rng);
    image.data_mut().iter_mut().for_each(|v| *v = 0.5 + 0.25 * v.tanh());
    let words: Vec<usize> = (0..config.max_len - 2).map(|i| EOS + 1 + (i * 3 + seed as usize) % (config.vocab_size - EOS - 1)).collect();
    let mut ids = vec![BOS];
    ids.extend(words);
    ids.push(EOS);
    let seq = TokenSequence { len: ids.len(), ids };
    check_params(
        &mut store,
        |s, g| {
            g.set_backward_fault(fault.clone());
            let mut m = shell.clone();
            m.store = s.clone();
            m.loss(g, &image, &seq)
        },
        DEFAULT_STEP,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::full(&[1, 1], 3.0)).unwrap();
        let report = check_params(
            &mut store,
            |s, g| {
                let v = g.param(s, w);
                let sq = g.mul(v, v)?;
                g.sum(sq)
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.groups[0].name, "w");
    }

    #[test]
    fn constant_objective_has_zero_gradients() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::full(&[2, 1], 1.0)).unwrap();
        let report = check_params(
            &mut store,
            |s, g| {
                let v = g.param(s, w);
                let z = g.scale(v, 0.0)?;
                let c = g.constant(Tensor::full(&[2, 1], 7.0));
                let y = g.add(z, c)?;
                g.sum(y)
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert_eq!(report.groups[0].max_abs_error, 0.0);
    }

    #[test]
    fn two_token_cross_entropy_model() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let emb = store.register("emb", Tensor::randn(&[3, 4], 1.0, &mut rng)).unwrap();
        let head = store.register("head", Tensor::randn(&[4, 3], 1.0, &mut rng)).unwrap();
        let report = check_params(
            &mut store,
            |s, g| {
                let e = g.param(s, emb);
                let x = g.gather_rows(e, &[1, 2])?;
                let w = g.param(s, head);
                let logits = g.matmul(x, w)?;
                g.cross_entropy(logits, &[2, 1], 0)
            },
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::full(&[1, 1], 1.0)).unwrap();
        let res = check_params(
            &mut store,
            |s, g| {
                let v = g.param(s, w);
                let huge = g.scale(v, 1e300)?;
                let sq = g.mul(huge, huge)?;
                g.sum(sq)
            },
            DEFAULT_STEP,
        );
        assert!(res.is_err());
    }

    #[test]
    fn micro_models_pass() {
        for v in Variant::ALL {
            let r = check_variant(v, 0, None).unwrap();
            assert!(r.passed(1e-4), "{v}: {r:?}");
        }
    }

    #[test]
    fn corrupted_backward_fails() {
        let fault = BackwardFault { op: "softmax_rows", factor: 1.5 };
        let r = check_variant(Variant::M1, 0, Some(fault)).unwrap();
        assert!(!r.passed(1e-4));
    }
}
