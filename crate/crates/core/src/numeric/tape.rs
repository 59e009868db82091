//! The computation record: every op appends a node holding its output and
//! enough context to push adjoints back to its inputs.

use std::borrow::Cow;
use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::Tensor;
use super::{gelu_grad_scalar, NumericError, Result, Scalar};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<S>,
        rstd: Vec<S>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Tensor<S>,
    },
}

struct Node<'p, S: Clone> {
    value: Cow<'p, Tensor<S>>,
    op: Op<S>,
    needs_grad: bool,
}

/// Records ops in execution order; [`Tape::backward`] replays them in reverse.
///
/// Parameter leaves borrow their values from a [`ParamStore`] for the
/// lifetime `'p`, so recording a forward pass copies no weights.
pub struct Tape<'p, S: Scalar> {
    nodes: Vec<Node<'p, S>>,
    params: HashMap<ParamId, Var>,
}

impl<S: Scalar> Default for Tape<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, S: Scalar> Tape<'p, S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf bound to a stored parameter. Registering the
    /// same parameter twice returns the same node.
    pub fn param(&mut self, store: &'p ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(store.value(id)),
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a . b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(out, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Result<Var> {
        let out = self.value(a).scale(s)?;
        Ok(self.push(out, Op::Scale(a, s), &[a]))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).gelu()?;
        Ok(self.push(out, Op::Gelu(a), &[a]))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).softmax_rows()?;
        Ok(self.push(out, Op::SoftmaxRows(a), &[a]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (out, xhat, rstd) = self
            .value(x)
            .layer_norm_with_stats(self.value(gamma), self.value(beta))?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<S>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_rows(&values)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor<S>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_cols(&values)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, end)?;
        Ok(self.push(out, Op::SliceRows(a, start), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let out = self.value(a).slice_cols(start, end)?;
        Ok(self.push(out, Op::SliceCols(a, start), &[a]))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = self.value(table).gather_rows(ids)?;
        Ok(self.push(out, Op::GatherRows(table, ids.to_vec()), &[table]))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mean_rows()?;
        Ok(self.push(out, Op::MeanRows(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        if !s.is_finite() {
            return Err(NumericError::NonFinite { op: "sum" });
        }
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), &[a]))
    }

    /// `-log softmax(logits)[target]` for a single row of logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let l = self.value(logits);
        if l.rows() != 1 || target >= l.cols() {
            return Err(NumericError::Contract {
                op: "cross_entropy",
                msg: format!("target {target} invalid for logits {:?}", l.shape()),
            });
        }
        let probs = l.softmax_rows()?;
        let row = l.row(0);
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<S>().ln();
        let loss = lse - row[target];
        if !loss.is_finite() {
            return Err(NumericError::NonFinite {
                op: "cross_entropy",
            });
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            &[logits],
        ))
    }

    /// Replays adjoints from a scalar `loss` back to every parameter leaf.
    /// Parameters registered on the tape but off the loss path get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NumericError::Contract {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", lv.shape()),
            });
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), S::one()));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    match out.by_param.get_mut(id) {
                        Some(acc) => acc.add_assign(&g),
                        None => {
                            out.by_param.insert(*id, g);
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        let da = g.matmul_nt(self.value(*b))?;
                        self.accumulate(&mut grads, *a, da)?;
                    }
                    if self.nodes[b.0].needs_grad {
                        let db = self.value(*a).matmul_tn(&g)?;
                        self.accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.nodes[a.0].needs_grad {
                        let da = g.matmul(self.value(*b))?;
                        self.accumulate(&mut grads, *a, da)?;
                    }
                    if self.nodes[b.0].needs_grad {
                        let db = g.matmul_tn(self.value(*a))?;
                        self.accumulate(&mut grads, *b, db)?;
                    }
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone())?;
                    self.accumulate(&mut grads, *b, g)?;
                }
                Op::Mul(a, b) => {
                    let da = g.mul(self.value(*b))?;
                    let db = g.mul(self.value(*a))?;
                    self.accumulate(&mut grads, *a, da)?;
                    self.accumulate(&mut grads, *b, db)?;
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    self.accumulate(&mut grads, *a, g.map(|x| x * s))?;
                }
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gi, &xi)| gi * gelu_grad_scalar(xi))
                        .collect();
                    self.accumulate(&mut grads, *a, Tensor::new(x.shape().to_vec(), data)?)?;
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let (r, c) = y.dims2();
                    let mut dx = vec![S::zero(); r * c];
                    for row in 0..r {
                        let yr = y.row(row);
                        let gr = g.row(row);
                        let dot: S = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for j in 0..c {
                            dx[row * c + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.accumulate(&mut grads, *a, Tensor::new(y.shape().to_vec(), dx)?)?;
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let (r, c) = xhat.dims2();
                    let gam = self.value(*gamma).data();
                    let mut dgamma = vec![S::zero(); c];
                    let mut dbeta = vec![S::zero(); c];
                    let mut dx = vec![S::zero(); r * c];
                    let n = S::from_usize(c).unwrap();
                    for i in 0..r {
                        let gr = g.row(i);
                        let hr = xhat.row(i);
                        let mut sum_dh = S::zero();
                        let mut sum_dh_h = S::zero();
                        for j in 0..c {
                            dgamma[j] += gr[j] * hr[j];
                            dbeta[j] += gr[j];
                            let dh = gr[j] * gam[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        for j in 0..c {
                            let dh = gr[j] * gam[j];
                            dx[i * c + j] = rstd[i] / n * (n * dh - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    let gshape = self.value(*gamma).shape().to_vec();
                    let bshape = self.value(*beta).shape().to_vec();
                    self.accumulate(&mut grads, *gamma, Tensor::new(gshape, dgamma)?)?;
                    self.accumulate(&mut grads, *beta, Tensor::new(bshape, dbeta)?)?;
                    let xshape = self.value(*x).shape().to_vec();
                    self.accumulate(&mut grads, *x, Tensor::new(xshape, dx)?)?;
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        let piece = g.slice_rows(start, start + rows)?;
                        start += rows;
                        self.accumulate(&mut grads, p, piece)?;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        let piece = g.slice_cols(start, start + cols)?;
                        start += cols;
                        self.accumulate(&mut grads, p, piece)?;
                    }
                }
                Op::SliceRows(a, start) => {
                    let src = self.value(*a);
                    let c = src.cols();
                    let mut full = Tensor::zeros(src.shape());
                    full.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                    self.accumulate(&mut grads, *a, full)?;
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let (r, c) = src.dims2();
                    let w = g.cols();
                    let mut full = Tensor::zeros(src.shape());
                    let data = full.data_mut();
                    for i in 0..r {
                        data[i * c + start..i * c + start + w].copy_from_slice(g.row(i));
                    }
                    self.accumulate(&mut grads, *a, full)?;
                }
                Op::GatherRows(table, ids) => {
                    let src = self.value(*table);
                    let c = src.cols();
                    let mut full = Tensor::zeros(src.shape());
                    let data = full.data_mut();
                    for (k, &id) in ids.iter().enumerate() {
                        for (d, &x) in data[id * c..(id + 1) * c].iter_mut().zip(g.row(k)) {
                            *d += x;
                        }
                    }
                    self.accumulate(&mut grads, *table, full)?;
                }
                Op::MeanRows(a) => {
                    let src = self.value(*a);
                    let (r, c) = src.dims2();
                    let inv = S::one() / S::from_usize(r).unwrap();
                    let mut data = Vec::with_capacity(r * c);
                    for _ in 0..r {
                        data.extend(g.data().iter().map(|&x| x * inv));
                    }
                    self.accumulate(&mut grads, *a, Tensor::new(src.shape().to_vec(), data)?)?;
                }
                Op::Sum(a) => {
                    let gs = g.data()[0];
                    let src = self.value(*a);
                    self.accumulate(&mut grads, *a, Tensor::full(src.shape(), gs))?;
                }
                Op::CrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    let gs = g.data()[0];
                    let mut d = probs.clone();
                    d.data_mut()[*target] -= S::one();
                    let shape = self.value(*logits).shape().to_vec();
                    let d = Tensor::new(shape, d.into_data())?.scale(gs)?;
                    self.accumulate(&mut grads, *logits, d)?;
                }
            }
        }

        // parameters on the tape but not reached by the loss
        for (&id, &v) in &self.params {
            out.by_param
                .entry(id)
                .or_insert_with(|| Tensor::zeros(self.value(v).shape()));
        }
        for g in out.by_param.values() {
            g.ensure_finite("backward")?;
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        let shape = self.value(v).shape();
        let g = if g.shape() == shape {
            g
        } else {
            g.reshape(shape)?
        };
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{gelu_scalar, seeded_rng, ParamStore};

    fn store_with(shapes: &[(&str, Tensor<f64>)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (n, t) in shapes {
            s.insert(*n, t.clone()).unwrap();
        }
        s
    }

    #[test]
    fn linear_sum_gradient_is_outer_product() {
        let mut rng = seeded_rng(1);
        let w = Tensor::<f64>::randn(&[3, 2], 1.0, &mut rng);
        let x = Tensor::<f64>::randn(&[2, 4], 1.0, &mut rng);
        let store = store_with(&[("w", w), ("unused", Tensor::full(&[2], 1.0))]);
        let mut tape = Tape::new();
        let wv = tape.param(&store, store.id("w").unwrap());
        let _ = tape.param(&store, store.id("unused").unwrap());
        let xv = tape.constant(x.clone());
        let y = tape.matmul(wv, xv).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gw = grads.get(store.id("w").unwrap()).unwrap();
        // d/dW sum(W x) = 1 . x^T: every row equals the row sums of x
        for i in 0..3 {
            for j in 0..2 {
                let expected: f64 = x.row(j).iter().sum();
                assert!((gw.get(i, j) - expected).abs() < 1e-12);
            }
        }
        let gu = grads.get(store.id("unused").unwrap()).unwrap();
        assert!(gu.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gelu_at_zero_kills_the_value_slot() {
        let store = store_with(&[
            ("w", Tensor::zeros(&[1, 3])),
            ("v", Tensor::from_rows(&[[0.3, -1.2, 2.0]]).unwrap()),
        ]);
        let mut tape = Tape::new();
        let w = tape.param(&store, store.id("w").unwrap());
        let v = tape.param(&store, store.id("v").unwrap());
        let a = tape.gelu(w).unwrap();
        let p = tape.mul(a, v).unwrap();
        let loss = tape.sum(p).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gv = grads.get(store.id("v").unwrap()).unwrap();
        assert!(gv.data().iter().all(|&x| x == gelu_scalar(0.0)));
        let gw = grads.get(store.id("w").unwrap()).unwrap();
        // gelu'(0) = 0.5
        for (g, v) in gw.data().iter().zip([0.3, -1.2, 2.0]) {
            assert!((g - 0.5 * v).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            tape.backward(a),
            Err(NumericError::Contract { op: "backward", .. })
        ));
    }

    #[test]
    fn shared_param_registered_once() {
        let store = store_with(&[("w", Tensor::full(&[1, 1], 3.0))]);
        let mut tape = Tape::new();
        let id = store.id("w").unwrap();
        let a = tape.param(&store, id);
        let b = tape.param(&store, id);
        assert_eq!(a, b);
        let p = tape.mul(a, b).unwrap();
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(id).unwrap().data(), &[6.0]);
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_onehot() {
        let store = store_with(&[("z", Tensor::from_rows(&[[1.0, 2.0, 0.5]]).unwrap())]);
        let id = store.id("z").unwrap();
        let mut tape = Tape::new();
        let z = tape.param(&store, id);
        let loss = tape.cross_entropy(z, 1).unwrap();
        let p = store.value(id).softmax_rows().unwrap();
        assert!((tape.value(loss).item().unwrap() + p.get(0, 1).ln()).abs() < 1e-14);
        let g = tape.backward(loss).unwrap();
        let g = g.get(id).unwrap();
        assert!((g.get(0, 0) - p.get(0, 0)).abs() < 1e-15);
        assert!((g.get(0, 1) - (p.get(0, 1) - 1.0)).abs() < 1e-15);
    }
}
