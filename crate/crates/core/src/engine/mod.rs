//! Minimal reverse-mode autodiff over row-major 2-D `f32` tensors.
//!
//! A [`Tape`] borrows a [`ParamStore`] and records coarse operations (matrix
//! products, gathers, fused GRU passes, fused losses). Sequences are stored
//! time-major: row `t * batch + b` is step `t` of batch item `b`.
//! [`Tape::backward`] returns gradients for the store's parameters only;
//! frozen parameters and constants never receive gradient, and subgraphs that
//! only depend on them are skipped.

pub mod kernels;
pub mod params;

use crate::contrastive::losses;
use crate::error::{Error, Result};
use kernels::{gemm, GruCache, GruDims};
pub use params::{Adam, Param, ParamGrads, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor data does not match {rows}x{cols}");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(v: f32) -> Self {
        Self::new(1, 1, vec![v])
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f32 {
        assert_eq!(self.data.len(), 1, "not a scalar");
        self.data[0]
    }

    /// Index of the largest entry of each row (first one on ties).
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows)
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Candidates and pairings for a batched contrastive loss.
#[derive(Debug, Clone)]
pub struct ContrastiveTargets {
    /// One candidate vector per row.
    pub bank: Tensor,
    /// Per anchor, rows of `bank` that are positives.
    pub positives: Vec<Vec<usize>>,
    /// Per anchor, rows of `bank` that are negatives.
    pub negatives: Vec<Vec<usize>>,
    pub tau: f32,
}

enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    AddRepeated(Var, Var),
    Repeat(Var),
    Gather(Var, Vec<usize>),
    Concat(Vec<Var>),
    Cols(Var, usize),
    Rows(Var, usize),
    Tanh(Var),
    Softmax(Var),
    Gru {
        x: Var,
        h0: Var,
        w: Var,
        b: Var,
        dims: GruDims,
        cache: GruCache,
    },
    Reparam {
        mu: Var,
        logvar: Var,
        eps: Vec<f32>,
    },
    NormalizeRows(Var),
    /// A scalar loss whose gradient was computed with the value.
    Loss(Vec<(Var, Vec<f32>)>),
    WeightedSum(Vec<(Var, f32)>),
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.store.value(id),
            _ => node.value.as_ref().expect("non-parameter nodes hold a value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const, &[])
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: !self.store.is_frozen(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let (a, b) = (self.value(x), self.value(w));
        assert_eq!(a.cols, b.rows, "matmul {:?} x {:?}", a.shape(), b.shape());
        let mut out = vec![0f32; a.rows * b.cols];
        gemm(a.rows, a.cols, b.cols, &a.data, false, &b.data, false, &mut out, false);
        let t = Tensor::new(a.rows, b.cols, out);
        self.push(t, Op::MatMul(x, w), &[x, w])
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (a, bias) = (self.value(x), self.value(b));
        assert_eq!((bias.rows, bias.cols), (1, a.cols), "bias shape");
        let mut out = a.data.clone();
        for row in out.chunks_exact_mut(a.cols) {
            for (o, bv) in row.iter_mut().zip(&bias.data) {
                *o += bv;
            }
        }
        let t = Tensor::new(a.rows, a.cols, out);
        self.push(t, Op::AddBias(x, b), &[x, b])
    }

    /// `x · W + b` for parameter ids.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = self.param(w);
        let b = self.param(b);
        let y = self.matmul(x, w);
        self.add_bias(y, b)
    }

    pub fn add(&mut self, x: Var, y: Var) -> Var {
        let (a, b) = (self.value(x), self.value(y));
        assert_eq!(a.shape(), b.shape(), "add shapes");
        let data = a.data.iter().zip(&b.data).map(|(p, q)| p + q).collect();
        let t = Tensor::new(a.rows, a.cols, data);
        self.push(t, Op::Add(x, y), &[x, y])
    }

    /// Adds `r` (`batch × cols`) to every time block of `x` (`steps·batch × cols`).
    pub fn add_repeated(&mut self, x: Var, r: Var) -> Var {
        let (a, b) = (self.value(x), self.value(r));
        assert!(a.cols == b.cols && b.rows > 0 && a.rows % b.rows == 0, "add_repeated shapes");
        let mut out = a.data.clone();
        for block in out.chunks_exact_mut(b.data.len()) {
            for (o, v) in block.iter_mut().zip(&b.data) {
                *o += v;
            }
        }
        let t = Tensor::new(a.rows, a.cols, out);
        self.push(t, Op::AddRepeated(x, r), &[x, r])
    }

    /// Stacks `times` copies of `x` along rows.
    pub fn repeat(&mut self, x: Var, times: usize) -> Var {
        let a = self.value(x);
        let data = a.data.repeat(times);
        let t = Tensor::new(a.rows * times, a.cols, data);
        self.push(t, Op::Repeat(x), &[x])
    }

    /// Row `i` of the result is row `idx[i]` of `table`.
    pub fn gather(&mut self, table: Var, idx: Vec<usize>) -> Var {
        let tab = self.value(table);
        let mut data = Vec::with_capacity(idx.len() * tab.cols);
        for &i in &idx {
            data.extend_from_slice(tab.row(i));
        }
        let t = Tensor::new(idx.len(), tab.cols, data);
        self.push(t, Op::Gather(table, idx), &[table])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut data = vec![0f32; rows * cols];
        let mut off = 0;
        for p in parts {
            let v = self.value(*p);
            assert_eq!(v.rows, rows, "concat rows");
            for r in 0..rows {
                data[r * cols + off..r * cols + off + v.cols].copy_from_slice(v.row(r));
            }
            off += v.cols;
        }
        let t = Tensor::new(rows, cols, data);
        self.push(t, Op::Concat(parts.to_vec()), parts)
    }

    pub fn cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let a = self.value(x);
        assert!(start + len <= a.cols, "column slice out of range");
        let mut data = Vec::with_capacity(a.rows * len);
        for r in 0..a.rows {
            data.extend_from_slice(&a.row(r)[start..start + len]);
        }
        let t = Tensor::new(a.rows, len, data);
        self.push(t, Op::Cols(x, start), &[x])
    }

    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let a = self.value(x);
        assert!(start + len <= a.rows, "row slice out of range");
        let data = a.data[start * a.cols..(start + len) * a.cols].to_vec();
        let t = Tensor::new(len, a.cols, data);
        self.push(t, Op::Rows(x, start), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let a = self.value(x);
        let t = Tensor::new(a.rows, a.cols, a.data.iter().map(|v| v.tanh()).collect());
        self.push(t, Op::Tanh(x), &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let a = self.value(x);
        let mut data = a.data.clone();
        for row in data.chunks_exact_mut(a.cols) {
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let t = Tensor::new(a.rows, a.cols, data);
        self.push(t, Op::Softmax(x), &[x])
    }

    /// Runs a GRU over `x` (`steps·batch × 3H` input projections) from `h0`.
    pub fn gru(&mut self, x: Var, h0: Var, w: ParamId, b: ParamId, reverse: bool) -> Var {
        let w = self.param(w);
        let b = self.param(b);
        let (xv, hv, wv, bv) = (self.value(x), self.value(h0), self.value(w), self.value(b));
        let hidden = wv.rows;
        let batch = hv.rows;
        assert_eq!(wv.cols, 3 * hidden, "gru weight shape");
        assert_eq!(xv.cols, 3 * hidden, "gru input width");
        assert_eq!(hv.cols, hidden, "gru state width");
        assert_eq!(xv.rows % batch, 0, "gru rows");
        let dims = GruDims {
            steps: xv.rows / batch,
            batch,
            hidden,
            reverse,
        };
        let (out, cache) = kernels::gru_forward(dims, &xv.data, &hv.data, &wv.data, &bv.data);
        let t = Tensor::new(dims.steps * batch, hidden, out);
        self.push(
            t,
            Op::Gru {
                x,
                h0,
                w,
                b,
                dims,
                cache,
            },
            &[x, h0, w, b],
        )
    }

    /// `mu + exp(logvar / 2) ⊙ eps`.
    pub fn reparam(&mut self, mu: Var, logvar: Var, eps: Vec<f32>) -> Var {
        let (m, lv) = (self.value(mu), self.value(logvar));
        assert_eq!(m.shape(), lv.shape(), "reparam shapes");
        assert_eq!(eps.len(), m.data.len(), "reparam noise length");
        let data = m
            .data
            .iter()
            .zip(&lv.data)
            .zip(&eps)
            .map(|((&m, &l), &e)| m + (0.5 * l).exp() * e)
            .collect();
        let t = Tensor::new(m.rows, m.cols, data);
        self.push(t, Op::Reparam { mu, logvar, eps }, &[mu, logvar])
    }

    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let a = self.value(x);
        let mut data = Vec::with_capacity(a.data.len());
        for r in 0..a.rows {
            data.extend(losses::normalize(a.row(r))?);
        }
        let t = Tensor::new(a.rows, a.cols, data);
        Ok(self.push(t, Op::NormalizeRows(x), &[x]))
    }

    /// Mean cross-entropy of the rows of `logits` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let l = self.value(logits);
        let (loss, grad) = losses::cross_entropy(&l.data, targets, l.cols)?;
        Ok(self.push(Tensor::scalar(loss), Op::Loss(vec![(logits, grad)]), &[logits]))
    }

    /// KL to the standard normal, summed over columns and averaged over rows.
    pub fn kl_normal(&mut self, mu: Var, logvar: Var) -> Result<Var> {
        let (m, lv) = (self.value(mu), self.value(logvar));
        if m.shape() != lv.shape() {
            return Err(Error::Shape("KL mean/logvar shapes differ".into()));
        }
        let (kl, mut dm, mut dl) = losses::kl_normal(&m.data, &lv.data)?;
        let inv = 1.0 / m.rows as f32;
        dm.iter_mut().chain(dl.iter_mut()).for_each(|g| *g *= inv);
        Ok(self.push(
            Tensor::scalar(kl * inv),
            Op::Loss(vec![(mu, dm), (logvar, dl)]),
            &[mu, logvar],
        ))
    }

    /// Mean over anchors of the multi-positive InfoNCE with a bilinear head.
    pub fn infonce(&mut self, anchors: Var, w: ParamId, targets: &ContrastiveTargets) -> Result<Var> {
        let w = self.param(w);
        let (a, wv) = (self.value(anchors), self.value(w));
        if targets.positives.len() != a.rows || targets.negatives.len() != a.rows {
            return Err(Error::Shape(format!(
                "{} anchors but {} positive and {} negative lists",
                a.rows,
                targets.positives.len(),
                targets.negatives.len()
            )));
        }
        let d = a.cols;
        let inv = 1.0 / a.rows as f32;
        let mut da = vec![0f32; a.data.len()];
        let mut dw = vec![0f32; wv.data.len()];
        let mut total = 0.0f32;
        for r in 0..a.rows {
            let pos: Vec<&[f32]> = targets.positives[r].iter().map(|&i| targets.bank.row(i)).collect();
            let neg: Vec<&[f32]> = targets.negatives[r].iter().map(|&i| targets.bank.row(i)).collect();
            let (loss, g) = losses::structured_infonce(a.row(r), &wv.data, &pos, &neg, targets.tau)?;
            total += loss * inv;
            for (o, v) in da[r * d..(r + 1) * d].iter_mut().zip(&g.anchor) {
                *o = v * inv;
            }
            for (o, v) in dw.iter_mut().zip(&g.w) {
                *o += v * inv;
            }
        }
        Ok(self.push(
            Tensor::scalar(total),
            Op::Loss(vec![(anchors, da), (w, dw)]),
            &[anchors, w],
        ))
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Var {
        let total = terms.iter().map(|&(v, w)| self.value(v).item() * w).sum();
        let parents: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), &parents)
    }

    /// Gradients of the scalar `loss` with respect to every trainable parameter.
    pub fn backward(&self, loss: Var) -> Result<ParamGrads> {
        if self.value(loss).data.len() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut pg = ParamGrads::new(self.store.len());
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            let mut acc = Accumulator {
                tape: self,
                grads: &mut grads,
            };
            match &node.op {
                Op::Const => {}
                Op::Param(id) => pg.accumulate(*id, &g),
                Op::MatMul(x, w) => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (n, k, m) = (xv.rows, xv.cols, wv.cols);
                    acc.with(*x, |dx| gemm(n, m, k, &g, false, &wv.data, true, dx, true));
                    acc.with(*w, |dw| gemm(k, n, m, &xv.data, true, &g, false, dw, true));
                }
                Op::AddBias(x, b) => {
                    let cols = self.value(*b).cols;
                    acc.add(*x, &g);
                    acc.with(*b, |db| {
                        for row in g.chunks_exact(cols) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    });
                }
                Op::Add(x, y) => {
                    acc.add(*x, &g);
                    acc.add(*y, &g);
                }
                Op::AddRepeated(x, r) => {
                    let block = self.value(*r).data.len();
                    acc.add(*x, &g);
                    acc.with(*r, |dr| {
                        for chunk in g.chunks_exact(block) {
                            for (d, v) in dr.iter_mut().zip(chunk) {
                                *d += v;
                            }
                        }
                    });
                }
                Op::Repeat(x) => {
                    let block = self.value(*x).data.len();
                    acc.with(*x, |dx| {
                        for chunk in g.chunks_exact(block) {
                            for (d, v) in dx.iter_mut().zip(chunk) {
                                *d += v;
                            }
                        }
                    });
                }
                Op::Gather(table, idx) => {
                    let cols = self.value(*table).cols;
                    acc.with(*table, |dt| {
                        for (r, &i) in idx.iter().enumerate() {
                            for (d, v) in dt[i * cols..(i + 1) * cols].iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                                *d += v;
                            }
                        }
                    });
                }
                Op::Concat(parts) => {
                    let total = node.value.as_ref().unwrap().cols;
                    let mut off = 0;
                    for p in parts {
                        let pc = self.value(*p).cols;
                        acc.with(*p, |dp| {
                            for (r, row) in dp.chunks_exact_mut(pc).enumerate() {
                                for (d, v) in row.iter_mut().zip(&g[r * total + off..r * total + off + pc]) {
                                    *d += v;
                                }
                            }
                        });
                        off += pc;
                    }
                }
                Op::Cols(x, start) => {
                    let width = node.value.as_ref().unwrap().cols;
                    let xc = self.value(*x).cols;
                    acc.with(*x, |dx| {
                        for (r, row) in g.chunks_exact(width).enumerate() {
                            for (d, v) in dx[r * xc + start..r * xc + start + width].iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    });
                }
                Op::Rows(x, start) => {
                    let cols = self.value(*x).cols;
                    acc.with(*x, |dx| {
                        for (d, v) in dx[start * cols..start * cols + g.len()].iter_mut().zip(&g) {
                            *d += v;
                        }
                    });
                }
                Op::Tanh(x) => {
                    let y = node.value.as_ref().unwrap();
                    acc.with(*x, |dx| {
                        for ((d, gv), yv) in dx.iter_mut().zip(&g).zip(&y.data) {
                            *d += gv * (1.0 - yv * yv);
                        }
                    });
                }
                Op::Softmax(x) => {
                    let y = node.value.as_ref().unwrap();
                    acc.with(*x, |dx| {
                        for ((drow, grow), yrow) in dx
                            .chunks_exact_mut(y.cols)
                            .zip(g.chunks_exact(y.cols))
                            .zip(y.data.chunks_exact(y.cols))
                        {
                            let dot: f32 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for ((d, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                                *d += yv * (gv - dot);
                            }
                        }
                    });
                }
                Op::Gru {
                    x,
                    h0,
                    w,
                    b,
                    dims,
                    cache,
                } => {
                    let out = node.value.as_ref().unwrap();
                    let gg = kernels::gru_backward(
                        *dims,
                        &self.value(*h0).data,
                        &self.value(*w).data,
                        &out.data,
                        cache,
                        &g,
                    );
                    acc.add(*x, &gg.dx);
                    acc.add(*h0, &gg.dh0);
                    acc.add(*w, &gg.dw);
                    acc.add(*b, &gg.dbias);
                }
                Op::Reparam { mu, logvar, eps } => {
                    let lv = self.value(*logvar);
                    acc.add(*mu, &g);
                    acc.with(*logvar, |dl| {
                        for (((d, gv), l), e) in dl.iter_mut().zip(&g).zip(&lv.data).zip(eps) {
                            *d += gv * e * 0.5 * (0.5 * l).exp();
                        }
                    });
                }
                Op::NormalizeRows(x) => {
                    let xv = self.value(*x);
                    acc.with(*x, |dx| {
                        for r in 0..xv.rows {
                            let c = xv.cols;
                            let back = losses::normalize_backward(xv.row(r), &g[r * c..(r + 1) * c]);
                            for (d, v) in dx[r * c..(r + 1) * c].iter_mut().zip(back) {
                                *d += v;
                            }
                        }
                    });
                }
                Op::Loss(parts) => {
                    let s = g[0];
                    for (v, local) in parts {
                        acc.with(*v, |dv| {
                            for (d, l) in dv.iter_mut().zip(local) {
                                *d += s * l;
                            }
                        });
                    }
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        acc.add(v, &[g[0] * w]);
                    }
                }
            }
        }
        Ok(pg)
    }
}

struct Accumulator<'a, 's> {
    tape: &'a Tape<'s>,
    grads: &'a mut Vec<Option<Vec<f32>>>,
}

impl Accumulator<'_, '_> {
    fn with(&mut self, v: Var, f: impl FnOnce(&mut [f32])) {
        if !self.tape.nodes[v.0].needs_grad {
            return;
        }
        let len = self.tape.value(v).data.len();
        let slot = self.grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn add(&mut self, v: Var, g: &[f32]) {
        self.with(v, |d| {
            for (a, b) in d.iter_mut().zip(g) {
                *a += b;
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Checks tape gradients of every parameter against central differences
    /// of the recorded loss.
    fn check_params(store: &mut ParamStore, build: &dyn Fn(&mut Tape) -> Var, tol: f64) {
        let grads = {
            let mut tape = Tape::new(store);
            let loss = build(&mut tape);
            tape.backward(loss).unwrap()
        };
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let n = store.value(id).data.len();
            for k in 0..n {
                let eps = 1e-2f32;
                let orig = store.value(id).data[k];
                let mut eval = |v: f32| {
                    store.value_mut(id).data[k] = v;
                    let mut tape = Tape::new(store);
                    let l = build(&mut tape);
                    tape.value(l).item() as f64
                };
                let fd = (eval(orig + eps) - eval(orig - eps)) / (2.0 * eps as f64);
                store.value_mut(id).data[k] = orig;
                let an = grads.get(id).map_or(0.0, |g| g[k] as f64);
                let err = (fd - an).abs() / (1e-2 + fd.abs().max(an.abs()));
                assert!(err < tol, "{} [{k}]: fd {fd} vs tape {an}", store.get(id).name);
            }
        }
    }

    #[test]
    fn composite_graph_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let (steps, batch, hidden, d) = (3usize, 2usize, 3usize, 2usize);
        let emb = store.add_uniform(&mut rng, "emb", "enc", 5, 3 * hidden, 2);
        let wz = store.add_uniform(&mut rng, "wz", "enc", d, 3 * hidden, 2);
        let bz = store.add_uniform(&mut rng, "bz", "enc", 1, 3 * hidden, 2);
        let wh = store.add_uniform(&mut rng, "wh", "enc", hidden, 3 * hidden, 2);
        let bh = store.add_uniform(&mut rng, "bh", "enc", 1, 3 * hidden, 2);
        let wo = store.add_uniform(&mut rng, "wo", "dec", hidden, 4, 2);
        let bo = store.add_uniform(&mut rng, "bo", "dec", 1, 4, 2);
        let wi = store.add_uniform(&mut rng, "wi", "dec", 2, 2 * d, 2);
        let bi = store.add_uniform(&mut rng, "bi", "dec", 1, 2 * d, 2);
        let head = store.add_uniform(&mut rng, "head", "heads", d, d, 2);
        let tokens = vec![1usize, 4, 0, 2, 3, 3];
        let targets = vec![0usize, 3, 1, 2, 2, 0];
        let zin = Tensor::new(batch, 2, vec![0.3, -0.7, 1.1, 0.4]);
        let eps: Vec<f32> = vec![0.5, -1.0, 0.2, 0.9];
        let bank = Tensor::new(3, d, vec![0.6, 0.8, -1.0, 0.0, 0.0, 1.0]);
        let targets_c = ContrastiveTargets {
            bank,
            positives: vec![vec![0], vec![1, 2]],
            negatives: vec![vec![1, 2], vec![0]],
            tau: 0.5,
        };
        let build = |t: &mut Tape| -> Var {
            let zi = t.constant(zin.clone());
            let stats = t.linear(zi, wi, bi);
            let mu = t.cols(stats, 0, d);
            let lv = t.cols(stats, d, d);
            let z = t.reparam(mu, lv, eps.clone());
            let table = t.param(emb);
            let x = t.gather(table, tokens.clone());
            let zp = t.linear(z, wz, bz);
            let x = t.add_repeated(x, zp);
            let h0 = t.tanh(zp);
            let h0 = t.cols(h0, 0, hidden);
            let h = t.gru(x, h0, wh, bh, false);
            let hr = t.gru(x, h0, wh, bh, true);
            let h = t.add(h, hr);
            let logits = t.linear(h, wo, bo);
            let sm = t.softmax_rows(logits);
            let both = t.concat_cols(&[logits, sm]);
            let last = t.rows(both, (steps - 1) * batch, batch);
            let rep = t.repeat(last, steps);
            let logits2 = t.cols(rep, 0, 4);
            let ce1 = t.cross_entropy(logits, &targets).unwrap();
            let ce2 = t.cross_entropy(logits2, &targets).unwrap();
            let kl = t.kl_normal(mu, lv).unwrap();
            let zn = t.normalize_rows(z).unwrap();
            let nce = t.infonce(zn, head, &targets_c).unwrap();
            t.weighted_sum(&[(ce1, 1.0), (ce2, 0.5), (kl, 0.3), (nce, 0.7)])
        };
        check_params(&mut store, &build, 2e-2);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let w = store.add_uniform(&mut rng, "w", "enc", 2, 2, 2);
        let b = store.add_uniform(&mut rng, "b", "enc", 1, 2, 2);
        let w2 = store.add_uniform(&mut rng, "w2", "dec", 2, 3, 2);
        let b2 = store.add_uniform(&mut rng, "b2", "dec", 1, 3, 2);
        store.freeze(&["enc"]).unwrap();
        let mut t = Tape::new(&store);
        let x = t.constant(Tensor::new(1, 2, vec![1.0, 2.0]));
        let h = t.linear(x, w, b);
        let y = t.linear(h, w2, b2);
        let l = t.cross_entropy(y, &[1]).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.get(w).is_none() && g.get(b).is_none());
        assert!(g.get(w2).is_some());
    }
}
