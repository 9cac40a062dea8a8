//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node in creation order, which is
//! already a topological order, so [`Graph::backward`] walks the tape in
//! reverse. Parameters are bound from a [`ParamStore`] as leaves; after the
//! backward pass their gradients are copied out with
//! [`Graph::accumulate_param_grads`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow { x: Var, bias: Var },
    AddConst(Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    L2NormRows { x: Var, norms: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Gather { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<usize>, pad: usize, count: usize, probs: Vec<f64> },
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::AddRow { .. } => "add_row",
            Op::AddConst(_) => "add_const",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::L2NormRows { .. } => "l2_normalize_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::Gather { .. } => "gather_rows",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(_) => "sum",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Names accepted by [`BackwardFault::op`].
pub const OP_NAMES: &[&str] = &[
    "matmul",
    "add",
    "add_row",
    "add_const",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "softmax_rows",
    "l2_normalize_rows",
    "layer_norm",
    "concat_cols",
    "concat_rows",
    "slice_cols",
    "gather_rows",
    "cross_entropy",
    "sum",
];

/// Scales the input gradients an op of the named kind hands back, so tests
/// can prove the gradient checker notices a broken backward rule.
#[derive(Clone, Debug)]
pub struct BackwardFault {
    pub op: &'static str,
    pub factor: f64,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    frozen: bool,
    fault: Option<BackwardFault>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose parameter leaves do not track gradients.
    pub fn inference() -> Self {
        Graph {
            frozen: true,
            ..Self::default()
        }
    }

    pub fn set_backward_fault(&mut self, fault: Option<BackwardFault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Overwrites a node's stored value. Only meaningful for leaves built
    /// before any dependent op.
    pub fn value_mut(&mut self, v: Var) -> &mut Tensor {
        &mut self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on a leaf by [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, t: Tensor, needs_grad: bool) -> Var {
        let t = t.with_requires_grad(needs_grad);
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter as a leaf. Binding the same parameter twice returns
    /// the same node, so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let mut t = store.tensor(id).clone();
        t.zero_grad();
        let v = self.leaf(t, !self.frozen);
        self.nodes[v.0].param = Some(id);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, true)
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, true, false)
    }

    fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let err = || Error::Shape {
            op: "matmul",
            left: av.shape().to_vec(),
            right: bv.shape().to_vec(),
        };
        let (ar, ac) = av.dims2().map_err(|_| err())?;
        let (br, bc) = bv.dims2().map_err(|_| err())?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (kb, n) = if tb { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(err());
        }
        let mut out = vec![0.0; m * n];
        gemm(av.data(), bv.data(), &mut out, m, k, n, ta, tb);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, ta, tb }, ng)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn map2(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(av.shape().to_vec(), data).expect("same shape")
    }

    fn map1(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let av = self.value(a);
        Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.map2(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    /// Adds a bias vector (`[cols]` or `[1, cols]`) to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(bias).numel() != c {
            return Err(Error::Shape {
                op: "add_row",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for i in 0..r {
            out[i * c..(i + 1) * c]
                .iter_mut()
                .zip(b)
                .for_each(|(o, &bv)| *o += bv);
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push(Tensor::new(vec![r, c], out)?, Op::AddRow { x, bias }, ng)
    }

    /// Adds a constant tensor (e.g. an attention mask or positional table).
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::Shape {
                op: "add_const",
                left: self.shape(x).to_vec(),
                right: c.shape().to_vec(),
            });
        }
        let xv = self.value(x);
        let data = xv.data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let ng = self.ng(x);
        self.push(out, Op::AddConst(x), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.map2(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.map1(a, |x| x * s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.map1(a, |x| if x > 0.0 { x } else { 0.0 });
        let ng = self.ng(a);
        self.push(out, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.map1(a, sigmoid);
        let ng = self.ng(a);
        self.push(out, Op::Sigmoid(a), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2()?;
        let mut out = av.data().to_vec();
        for i in 0..r {
            softmax_in_place(&mut out[i * c..(i + 1) * c]);
        }
        let ng = self.ng(a);
        self.push(Tensor::new(vec![r, c], out)?, Op::SoftmaxRows(a), ng)
    }

    /// Scales each row to unit L2 norm. A zero row stays zero and passes no
    /// gradient.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        let mut out = xv.data().to_vec();
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = &mut out[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
            norms.push(n);
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![r, c], out)?, Op::L2NormRows { x, norms }, ng)
    }

    /// Normalizes the last axis, then applies `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        for p in [gamma, beta] {
            if self.value(p).numel() != c {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: xv.shape().to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = xv.data().to_vec();
        let mut out = vec![0.0; r * c];
        let mut rstd = Vec::with_capacity(r);
        for i in 0..r {
            let row = &mut xhat[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rs;
                out[i * c + j] = *v * g[j] + b[j];
            }
            rstd.push(rs);
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            Tensor::new(vec![r, c], out)?,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            ng,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidTensor("concat of nothing".into()))?;
        let (r, _) = self.value(first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(vec![r, total], out)?, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidTensor("concat of nothing".into()))?;
        let (_, c) = self.value(first).dims2()?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pc != c {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: self.shape(first).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            rows += pr;
            out.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(vec![rows, c], out)?, Op::ConcatRows(parts.to_vec()), ng)
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if len == 0 || start + len > c {
            return Err(Error::Shape {
                op: "slice_cols",
                left: vec![r, c],
                right: vec![start, len],
            });
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let ng = self.ng(x);
        self.push(Tensor::new(vec![r, len], out)?, Op::SliceCols { x, start }, ng)
    }

    /// Rows of `table` selected by `ids` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.value(table).dims2()?;
        if ids.is_empty() {
            return Err(Error::Input("gather of zero rows".into()));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Input(format!("row id {id} out of range for {v} rows")));
            }
            out.extend_from_slice(tv.row(id));
        }
        let ng = self.ng(table);
        self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Gather { table, ids: ids.to_vec() },
            ng,
        )
    }

    /// Mean token negative log-likelihood over positions whose target is not
    /// `pad`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], pad: usize) -> Result<Var> {
        let (l, v) = self.value(logits).dims2()?;
        if targets.len() != l {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: vec![l, v],
                right: vec![targets.len()],
            });
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Input(format!("target id {t} out of range for {v} classes")));
        }
        let count = targets.iter().filter(|&&t| t != pad).count();
        if count == 0 {
            return Err(Error::EmptyLossSupport);
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &mut probs[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            if t != pad {
                total += lse - row[t];
            }
            softmax_in_place(row);
        }
        let loss = total / count as f64;
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), pad, count, probs },
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// `Σ x ⊙ w` for a constant weight tensor; a convenient random scalar
    /// readout for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, w: &Tensor) -> Result<Var> {
        let wv = self.constant(w.clone());
        let p = self.mul(x, wv)?;
        self.sum(p)
    }

    /// Runs the backward pass from a scalar node, adding into the gradient
    /// slot of every leaf that tracks gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidTensor(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            let mut contribs = self.backward_op(i, &g);
            if let Some(f) = &self.fault {
                if f.op == self.nodes[i].op.name() {
                    for (_, cg) in contribs.iter_mut() {
                        cg.iter_mut().for_each(|x| *x *= f.factor);
                    }
                }
            }
            for (v, cg) in contribs {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&cg).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(cg),
                }
            }
        }
        Ok(())
    }

    /// Input-gradient contributions of node `i` given its output gradient.
    fn backward_op(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => Vec::new(),
            &Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = self.value(a).dims2().expect("matrix");
                let (br, bc) = self.value(b).dims2().expect("matrix");
                let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
                let n = if tb { br } else { bc };
                let mut res = Vec::with_capacity(2);
                if self.ng(a) {
                    let bv = self.value(b).data();
                    let mut da = vec![0.0; m * k];
                    if ta {
                        gemm(bv, g, &mut da, k, n, m, tb, true);
                    } else {
                        gemm(g, bv, &mut da, m, n, k, false, !tb);
                    }
                    res.push((a, da));
                }
                if self.ng(b) {
                    let av = self.value(a).data();
                    let mut db = vec![0.0; k * n];
                    if tb {
                        gemm(g, av, &mut db, n, m, k, true, ta);
                    } else {
                        gemm(av, g, &mut db, k, m, n, !ta, false);
                    }
                    res.push((b, db));
                }
                res
            }
            &Op::Add(a, b) => vec![(a, g.to_vec()), (b, g.to_vec())],
            &Op::AddRow { x, bias } => {
                let c = self.value(bias).numel();
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                }
                vec![(x, g.to_vec()), (bias, db)]
            }
            &Op::AddConst(x) => vec![(x, g.to_vec())],
            &Op::Mul(a, b) => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                let da = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                let db = g.iter().zip(av).map(|(g, a)| g * a).collect();
                vec![(a, da), (b, db)]
            }
            &Op::Scale(a, s) => vec![(a, g.iter().map(|v| v * s).collect())],
            &Op::Relu(a) => {
                let av = self.value(a).data();
                let da = g
                    .iter()
                    .zip(av)
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                vec![(a, da)]
            }
            &Op::Sigmoid(a) => {
                let da = g
                    .iter()
                    .zip(out.data())
                    .map(|(&g, &y)| g * y * (1.0 - y))
                    .collect();
                vec![(a, da)]
            }
            &Op::SoftmaxRows(a) => {
                let (r, c) = out.dims2().expect("matrix");
                let y = out.data();
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        da[i * c + j] = yr[j] * (gr[j] - s);
                    }
                }
                vec![(a, da)]
            }
            Op::L2NormRows { x, norms } => {
                let (r, c) = out.dims2().expect("matrix");
                let y = out.data();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    if norms[i] == 0.0 {
                        continue;
                    }
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dx[i * c + j] = (gr[j] - yr[j] * s) / norms[i];
                    }
                }
                vec![(*x, dx)]
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (r, c) = out.dims2().expect("matrix");
                let gm = self.value(*gamma).data();
                let mut dx = vec![0.0; r * c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..r {
                    let gr = &g[i * c..(i + 1) * c];
                    let xh = &xhat[i * c..(i + 1) * c];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        let d = gr[j] * gm[j];
                        mean_d += d;
                        mean_dx += d * xh[j];
                        dgamma[j] += gr[j] * xh[j];
                        dbeta[j] += gr[j];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for j in 0..c {
                        let d = gr[j] * gm[j];
                        dx[i * c + j] = rstd[i] * (d - mean_d - xh[j] * mean_dx);
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::ConcatCols(parts) => {
                let (r, total) = out.dims2().expect("matrix");
                let mut res = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    let mut dp = Vec::with_capacity(r * w);
                    for i in 0..r {
                        dp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    offset += w;
                    res.push((p, dp));
                }
                res
            }
            Op::ConcatRows(parts) => {
                let mut res = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    res.push((p, g[offset..offset + n].to_vec()));
                    offset += n;
                }
                res
            }
            &Op::SliceCols { x, start } => {
                let (r, c) = self.value(x).dims2().expect("matrix");
                let len = out.shape()[1];
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                vec![(x, dx)]
            }
            Op::Gather { table, ids } => {
                let (v, d) = self.value(*table).dims2().expect("matrix");
                let mut dt = vec![0.0; v * d];
                for (row, &id) in ids.iter().enumerate() {
                    dt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g[row * d..(row + 1) * d])
                        .for_each(|(a, &b)| *a += b);
                }
                vec![(*table, dt)]
            }
            Op::CrossEntropy { logits, targets, pad, count, probs } => {
                let v = self.value(*logits).shape()[1];
                let scale = g[0] / *count as f64;
                let mut dl = vec![0.0; probs.len()];
                for (i, &t) in targets.iter().enumerate() {
                    if t == *pad {
                        continue;
                    }
                    for j in 0..v {
                        dl[i * v + j] = probs[i * v + j] * scale;
                    }
                    dl[i * v + t] -= scale;
                }
                vec![(*logits, dl)]
            }
            &Op::Sum(x) => vec![(x, vec![g[0]; self.value(x).numel()])],
        }
    }

    /// Gradients of every bound parameter, indexed by [`ParamId`].
    pub fn param_grads(&self, n_params: usize) -> Vec<Option<Vec<f64>>> {
        let mut out = vec![None; n_params];
        for (&id, &v) in &self.bound {
            if let Some(g) = self.nodes[v.0].value.grad() {
                out[id.0] = Some(g.to_vec());
            }
        }
        out
    }

    pub fn accumulate_param_grads(&self, store: &mut ParamStore) {
        let grads = self.param_grads(store.len());
        store.accumulate_grads(&grads);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax of one row.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}
