//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Node ids are
//! assigned in creation order, which is already a topological order, so
//! [`Graph::backward`] walks the tape once from the loss back to the leaves.
//! Gradient accumulation order is therefore fixed and results are
//! bit-reproducible.
//!
//! All operands are matrices; a vector is a `1 x n` matrix and a scalar is
//! `1 x 1`. Shape mismatches are programming errors and panic with a message
//! naming the op and both shapes.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::{RngState, Stream};
use crate::tensor::{ParamId, ParamStore, Real, Tensor};

/// Additive surrogate for `-inf` in masked softmax.
pub const MASK_NEG: f64 = -1e9;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddConst(Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    GatherRows {
        table: Var,
        idx: Vec<usize>,
    },
    GatherCols {
        x: Var,
        idx: Vec<Option<usize>>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Transpose(Var),
    Reshape(Var),
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    Mse {
        pred: Var,
        target: Vec<F>,
    },
    Sum(Var),
    Mean(Var),
    StraightThrough(Var),
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

pub struct Graph<'s, F: Real> {
    store: Option<&'s ParamStore<F>>,
    nodes: Vec<Node<F>>,
    param_vars: HashMap<ParamId, Var>,
    train: bool,
    grad_enabled: bool,
    dropout_rng: Option<Stream>,
}

#[track_caller]
fn mismatch(op: &str, a: &[usize], b: &[usize]) -> ! {
    panic!("shape mismatch in {op}: {a:?} vs {b:?}")
}

impl<'s, F: Real> Default for Graph<'s, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s, F: Real> Graph<'s, F> {
    /// Eval-mode graph without a parameter store.
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            train: false,
            grad_enabled: true,
            dropout_rng: None,
        }
    }

    pub fn with_params(store: &'s ParamStore<F>) -> Self {
        Self {
            store: Some(store),
            ..Self::new()
        }
    }

    /// Switch to train mode; dropout masks are drawn from `rng`.
    pub fn train(mut self, rng: RngState) -> Self {
        self.train = true;
        self.dropout_rng = Some(rng.rng());
        self
    }

    /// Disable gradient recording: every node is created with
    /// `requires_grad = false`.
    pub fn no_grad(mut self) -> Self {
        self.grad_enabled = false;
        self
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, parents: &[Var]) -> Var {
        let rg = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push_rg(value, op, rg)
    }

    fn push_rg(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        let id = Var(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        id
    }

    // ----- leaves ---------------------------------------------------------

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push_rg(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked when `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<F>, requires_grad: bool) -> Var {
        let rg = requires_grad && self.grad_enabled;
        self.push_rg(t, Op::Leaf, rg)
    }

    /// The leaf for a stored parameter, registered on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self
            .store
            .expect("graph was built without a parameter store");
        let entry = store.get(id);
        let rg = entry.requires_grad && self.grad_enabled;
        let v = self.push_rg(entry.tensor.clone(), Op::Leaf, rg);
        self.param_vars.insert(id, v);
        v
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            mismatch("matmul", &[m, k], &[k2, n]);
        }
        let mut out = vec![F::zero(); m * n];
        mm(&self.value(a).data, &self.value(b).data, &mut out, m, k, n);
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let src = &self.value(a).data;
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor::matrix(c, r, out), Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let (r, c) = self.shape(a);
        if r * c != rows * cols {
            mismatch("reshape", &[r, c], &[rows, cols]);
        }
        let data = self.value(a).data.clone();
        self.push(Tensor::matrix(rows, cols, data), Op::Reshape(a), &[a])
    }

    // ----- elementwise ----------------------------------------------------

    fn zip_same(&mut self, name: &str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Tensor<F> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dims2() != vb.dims2() {
            let (ra, ca) = va.dims2();
            let (rb, cb) = vb.dims2();
            mismatch(name, &[ra, ca], &[rb, cb]);
        }
        let (r, c) = va.dims2();
        let data = va
            .data
            .iter()
            .zip(&vb.data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::matrix(r, c, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same("add", a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same("sub", a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same("mul", a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    /// `a + b` where `b` is a `1 x cols` row broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if rb != 1 || cb != c {
            mismatch("add_row", &[r, c], &[rb, cb]);
        }
        let va = &self.value(a).data;
        let vb = &self.value(b).data;
        let mut out = va.clone();
        for row in out.chunks_exact_mut(c) {
            for (o, &bv) in row.iter_mut().zip(vb) {
                *o += bv;
            }
        }
        self.push(Tensor::matrix(r, c, out), Op::AddRow(a, b), &[a, b])
    }

    /// `a + t` for a constant tensor `t` (same shape, or one row broadcast).
    pub fn add_const(&mut self, a: Var, t: &Tensor<F>) -> Var {
        let (r, c) = self.shape(a);
        let (rt, ct) = t.dims2();
        if ct != c || (rt != r && rt != 1) {
            mismatch("add_const", &[r, c], &[rt, ct]);
        }
        let mut out = self.value(a).data.clone();
        for (i, row) in out.chunks_exact_mut(c).enumerate() {
            let src = if rt == 1 {
                &t.data[..]
            } else {
                &t.data[i * c..(i + 1) * c]
            };
            for (o, &x) in row.iter_mut().zip(src) {
                *o += x;
            }
        }
        self.push(Tensor::matrix(r, c, out), Op::AddConst(a), &[a])
    }

    /// `mul * a + add`, elementwise.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let (m, s) = (F::lit(mul), F::lit(add));
        let (r, c) = self.shape(a);
        let data = self.value(a).data.iter().map(|&x| m * x + s).collect();
        self.push(Tensor::matrix(r, c, data), Op::Affine(a, mul), &[a])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let kk = F::lit(k);
        let (r, c) = self.shape(a);
        let data = self.value(a).data.iter().map(|&x| kk * x).collect();
        self.push(Tensor::matrix(r, c, data), Op::Affine(a, k), &[a])
    }

    fn map(&self, a: Var, f: impl Fn(F) -> F) -> Tensor<F> {
        let v = self.value(a);
        let (r, c) = v.dims2();
        Tensor::matrix(r, c, v.data.iter().map(|&x| f(x)).collect())
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.tanh());
        self.push(t, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| if x > F::zero() { x } else { F::zero() });
        self.push(t, Op::Relu(a), &[a])
    }

    // ----- normalization --------------------------------------------------

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let mut out = self.value(a).data.clone();
        for row in out.chunks_exact_mut(c) {
            softmax_in_place(row);
        }
        self.push(Tensor::matrix(r, c, out), Op::Softmax(a), &[a])
    }

    /// Row-wise softmax of `a + mask`, where `mask` holds 0 for kept entries
    /// and [`MASK_NEG`] for masked ones.
    pub fn masked_softmax(&mut self, a: Var, mask: &Tensor<F>) -> Var {
        let z = self.add_const(a, mask);
        self.softmax(z)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 x cols`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (r, c) = self.shape(x);
        for p in [gamma, beta] {
            let (pr, pc) = self.shape(p);
            if pr != 1 || pc != c {
                mismatch("layer_norm", &[r, c], &[pr, pc]);
            }
        }
        let xv = &self.value(x).data;
        let g = &self.value(gamma).data;
        let b = &self.value(beta).data;
        let n = F::lit(c as f64);
        let mut xhat = vec![F::zero(); r * c];
        let mut inv_std = vec![F::zero(); r];
        let mut out = vec![F::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<F>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
            let is = F::one() / (var + F::lit(LN_EPS)).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        self.push(
            Tensor::matrix(r, c, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    // ----- indexing -------------------------------------------------------

    /// Rows of `table` at `idx` (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Var {
        let (r, c) = self.shape(table);
        let src = &self.value(table).data;
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                panic!("gather_rows: index {i} out of range for {r} rows");
            }
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.push(
            Tensor::matrix(idx.len(), c, out),
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        )
    }

    /// Columns of `x` at `idx`; `None` yields a zero column.
    pub fn gather_cols(&mut self, x: Var, idx: &[Option<usize>]) -> Var {
        let (r, c) = self.shape(x);
        let src = &self.value(x).data;
        let n = idx.len();
        let mut out = vec![F::zero(); r * n];
        for i in 0..r {
            for (j, k) in idx.iter().enumerate() {
                if let Some(k) = *k {
                    if k >= c {
                        panic!("gather_cols: index {k} out of range for {c} columns");
                    }
                    out[i * n + j] = src[i * c + k];
                }
            }
        }
        self.push(
            Tensor::matrix(r, n, out),
            Op::GatherCols {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let r = self.shape(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pr, pc) = self.shape(p);
                if pr != r {
                    mismatch("concat_cols", &[r], &[pr, pc]);
                }
                pc
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data[i * w..(i + 1) * w]);
            }
        }
        self.push(
            Tensor::matrix(r, total, out),
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let c = self.shape(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.shape(p);
            if pc != c {
                mismatch("concat_rows", &[rows, c], &[pr, pc]);
            }
            out.extend_from_slice(&self.value(p).data);
            rows += pr;
        }
        self.push(
            Tensor::matrix(rows, c, out),
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(x);
        if start + len > c {
            mismatch("slice_cols", &[r, c], &[start, len]);
        }
        let src = &self.value(x).data;
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        self.push(
            Tensor::matrix(r, len, out),
            Op::SliceCols { x, start },
            &[x],
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(x);
        if start + len > r {
            mismatch("slice_rows", &[r, c], &[start, len]);
        }
        let out = self.value(x).data[start * c..(start + len) * c].to_vec();
        self.push(
            Tensor::matrix(len, c, out),
            Op::SliceRows { x, start },
            &[x],
        )
    }

    pub fn row(&mut self, x: Var, i: usize) -> Var {
        self.slice_rows(x, i, 1)
    }

    // ----- stochastic -----------------------------------------------------

    /// Inverted dropout; the identity (same `Var`) in eval mode or at `p = 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return x;
        }
        assert!(p < 1.0, "dropout probability must be < 1, got {p}");
        let keep = F::lit(1.0 / (1.0 - p));
        let (r, c) = self.shape(x);
        let rng = self
            .dropout_rng
            .as_mut()
            .expect("train-mode graph has a dropout stream");
        let mask: Vec<F> = (0..r * c)
            .map(|_| if rng.uniform() < p { F::zero() } else { keep })
            .collect();
        let data = self
            .value(x)
            .data
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        self.push(Tensor::matrix(r, c, data), Op::Dropout { x, mask }, &[x])
    }

    /// Forward value `hard`, gradient passed straight to `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor<F>) -> Var {
        let (r, c) = self.shape(soft);
        if hard.dims2() != (r, c) {
            let (hr, hc) = hard.dims2();
            mismatch("straight_through", &[r, c], &[hr, hc]);
        }
        self.push(hard, Op::StraightThrough(soft), &[soft])
    }

    // ----- reductions and losses ------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data.iter().copied().sum::<F>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data.iter().copied().sum::<F>() / F::lit(v.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let (r, c) = self.shape(logits);
        if targets.len() != r {
            mismatch("cross_entropy", &[r, c], &[targets.len()]);
        }
        let mut probs = self.value(logits).data.clone();
        let mut total = F::zero();
        for (i, row) in probs.chunks_exact_mut(c).enumerate() {
            let t = targets[i];
            assert!(
                t < c,
                "cross_entropy: target {t} out of range for {c} classes"
            );
            let lse = log_sum_exp(row);
            total += lse - row[t];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let loss = total / F::lit(r as f64);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<F>) -> Var {
        let v = self.value(pred);
        if v.dims2() != target.dims2() {
            let (r, c) = v.dims2();
            let (tr, tc) = target.dims2();
            mismatch("mse", &[r, c], &[tr, tc]);
        }
        let n = F::lit(v.numel() as f64);
        let s = v
            .data
            .iter()
            .zip(&target.data)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<F>()
            / n;
        self.push(
            Tensor::scalar(s),
            Op::Mse {
                pred,
                target: target.data.clone(),
            },
            &[pred],
        )
    }

    // ----- backward -------------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires one. The graph itself is not modified, so repeated calls
    /// return bit-identical results.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let shape = &self.nodes[loss.0].value.shape;
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::NonScalarLoss(shape.clone()));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![F::one()]);
        }
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (lo, hi) = grads.split_at_mut(i);
            let Some(g) = hi[0].as_ref() else {
                continue;
            };
            self.backward_node(node, g, lo);
        }
        let mut params: Vec<(ParamId, usize)> = self
            .param_vars
            .iter()
            .filter(|(_, v)| v.0 < n)
            .map(|(p, v)| (*p, v.0))
            .collect();
        params.sort();
        Ok(Gradients {
            grads,
            shapes: self.nodes[..n]
                .iter()
                .map(|nd| nd.value.shape.clone())
                .collect(),
            params,
        })
    }

    fn backward_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let (out_r, out_c) = node.value.dims2();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).dims2().1;
                if rg(*a) {
                    let ga = acc_buf(grads, *a, m * k);
                    mm_nt_acc(g, &val(*b).data, ga, m, n, k);
                }
                if rg(*b) {
                    let gb = acc_buf(grads, *b, k * n);
                    mm_tn_acc(&val(*a).data, g, gb, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if rg(v) {
                        add_into(acc_buf(grads, v, g.len()), g);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if rg(*a) {
                    add_into(acc_buf(grads, *a, g.len()), g);
                }
                if rg(*b) {
                    let gb = acc_buf(grads, *b, out_c);
                    for row in g.chunks_exact(out_c) {
                        add_into(gb, row);
                    }
                }
            }
            Op::AddConst(a) | Op::Reshape(a) | Op::StraightThrough(a) => {
                add_into(acc_buf(grads, *a, g.len()), g);
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    add_into(acc_buf(grads, *a, g.len()), g);
                }
                if rg(*b) {
                    let gb = acc_buf(grads, *b, g.len());
                    for (o, &x) in gb.iter_mut().zip(g) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    let vb = &val(*b).data;
                    let ga = acc_buf(grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if rg(*b) {
                    let va = &val(*a).data;
                    let gb = acc_buf(grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::Affine(a, k) => {
                let k = F::lit(*k);
                let ga = acc_buf(grads, *a, g.len());
                for (o, &x) in ga.iter_mut().zip(g) {
                    *o += k * x;
                }
            }
            Op::Tanh(a) => {
                let y = &node.value.data;
                let ga = acc_buf(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * (F::one() - y[i] * y[i]);
                }
            }
            Op::Sigmoid(a) => {
                let y = &node.value.data;
                let ga = acc_buf(grads, *a, g.len());
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (F::one() - y[i]);
                }
            }
            Op::Relu(a) => {
                let x = &val(*a).data;
                let ga = acc_buf(grads, *a, g.len());
                for i in 0..g.len() {
                    if x[i] > F::zero() {
                        ga[i] += g[i];
                    }
                }
            }
            Op::Softmax(a) => {
                let y = &node.value.data;
                let ga = acc_buf(grads, *a, g.len());
                for i in 0..out_r {
                    let (yr, gr) = (
                        &y[i * out_c..(i + 1) * out_c],
                        &g[i * out_c..(i + 1) * out_c],
                    );
                    let dot: F = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for j in 0..out_c {
                        ga[i * out_c + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = out_c;
                if rg(*gamma) {
                    let gg = acc_buf(grads, *gamma, c);
                    for i in 0..out_r {
                        for j in 0..c {
                            gg[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                }
                if rg(*beta) {
                    let gb = acc_buf(grads, *beta, c);
                    for row in g.chunks_exact(c) {
                        add_into(gb, row);
                    }
                }
                if rg(*x) {
                    let gam = &val(*gamma).data;
                    let n = F::lit(c as f64);
                    let gx = acc_buf(grads, *x, g.len());
                    let mut dxhat = vec![F::zero(); c];
                    for i in 0..out_r {
                        let xh = &xhat[i * c..(i + 1) * c];
                        for j in 0..c {
                            dxhat[j] = g[i * c + j] * gam[j];
                        }
                        let s1: F = dxhat.iter().copied().sum();
                        let s2: F = dxhat.iter().zip(xh).map(|(&d, &h)| d * h).sum();
                        let k = inv_std[i] / n;
                        for j in 0..c {
                            gx[i * c + j] += k * (n * dxhat[j] - s1 - xh[j] * s2);
                        }
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                let (r, c) = val(*table).dims2();
                let gt = acc_buf(grads, *table, r * c);
                for (row, &i) in g.chunks_exact(c).zip(idx) {
                    add_into(&mut gt[i * c..(i + 1) * c], row);
                }
            }
            Op::GatherCols { x, idx } => {
                let (r, c) = val(*x).dims2();
                let n = idx.len();
                let gx = acc_buf(grads, *x, r * c);
                for i in 0..r {
                    for (j, k) in idx.iter().enumerate() {
                        if let Some(k) = *k {
                            gx[i * c + k] += g[i * n + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).dims2().1;
                    if rg(p) {
                        let gp = acc_buf(grads, p, out_r * w);
                        for i in 0..out_r {
                            add_into(
                                &mut gp[i * w..(i + 1) * w],
                                &g[i * out_c + off..i * out_c + off + w],
                            );
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).numel();
                    if rg(p) {
                        add_into(acc_buf(grads, p, n), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                let (r, c) = val(*x).dims2();
                let gx = acc_buf(grads, *x, r * c);
                for i in 0..r {
                    add_into(
                        &mut gx[i * c + start..i * c + start + out_c],
                        &g[i * out_c..(i + 1) * out_c],
                    );
                }
            }
            Op::SliceRows { x, start } => {
                let (r, c) = val(*x).dims2();
                let gx = acc_buf(grads, *x, r * c);
                add_into(&mut gx[start * c..(start + out_r) * c], g);
            }
            Op::Transpose(a) => {
                // out is (c x r) for input (r x c)
                let (r, c) = val(*a).dims2();
                let ga = acc_buf(grads, *a, r * c);
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Dropout { x, mask } => {
                let gx = acc_buf(grads, *x, g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * mask[i];
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (r, c) = val(*logits).dims2();
                let k = g[0] / F::lit(r as f64);
                let gl = acc_buf(grads, *logits, r * c);
                for i in 0..r {
                    for j in 0..c {
                        let onehot = if j == targets[i] { F::one() } else { F::zero() };
                        gl[i * c + j] += k * (probs[i * c + j] - onehot);
                    }
                }
            }
            Op::Mse { pred, target } => {
                let p = &val(*pred).data;
                let k = g[0] * F::lit(2.0 / p.len() as f64);
                let gp = acc_buf(grads, *pred, p.len());
                for i in 0..p.len() {
                    gp[i] += k * (p[i] - target[i]);
                }
            }
            Op::Sum(a) => {
                let ga = acc_buf(grads, *a, val(*a).numel());
                for o in ga.iter_mut() {
                    *o += g[0];
                }
            }
            Op::Mean(a) => {
                let n = val(*a).numel();
                let k = g[0] / F::lit(n as f64);
                let ga = acc_buf(grads, *a, n);
                for o in ga.iter_mut() {
                    *o += k;
                }
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(ParamId, usize)>,
}

impl<F: Real> Gradients<F> {
    /// Gradient with respect to `v`, or `None` if `v` is unreachable from the
    /// loss or does not require a gradient.
    pub fn wrt(&self, v: Var) -> Option<Tensor<F>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.clone()))
    }

    pub fn wrt_slice(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0)?.as_deref()
    }

    /// Parameter gradients in ascending `ParamId` order. Parameters that were
    /// registered but received no gradient are skipped.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[F])> + '_ {
        self.params
            .iter()
            .filter_map(|&(p, i)| self.grads[i].as_deref().map(|g| (p, g)))
    }
}

fn acc_buf<F: Real>(grads: &mut [Option<Vec<F>>], v: Var, n: usize) -> &mut Vec<F> {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); n])
}

#[inline]
fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn log_sum_exp<F: Real>(row: &[F]) -> F {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let s: F = row.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

pub(crate) fn softmax_in_place<F: Real>(row: &mut [F]) {
    let m = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut s = F::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

/// out (m x n) = a (m x k) * b (k x n)
fn mm<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// ga (m x k) += g (m x n) * b^T, with b (k x n)
fn mm_nt_acc<F: Real>(g: &[F], b: &[F], ga: &mut [F], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = F::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                s += x * y;
            }
            ga[i * k + p] += s;
        }
    }
}

/// gb (k x n) += a^T * g, with a (m x k), g (m x n)
fn mm_tn_acc<F: Real>(a: &[F], g: &[F], gb: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &mut gb[p * n..(p + 1) * n];
            for (o, &gv) in brow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
}

/// Additive mask row: 0 where `valid`, [`MASK_NEG`] elsewhere.
pub fn mask_row<F: Real>(valid: &[bool]) -> Tensor<F> {
    Tensor::row(
        valid
            .iter()
            .map(|&v| if v { F::zero() } else { F::lit(MASK_NEG) })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(r: usize, c: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[r, c], v)
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(1, 3, &[0.0, 0.0, 0.0]));
        let y = g.softmax(x);
        for &p in &g.value(y).data {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_uniform_two_class_is_ln2() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(1, 2, &[0.0, 0.0]));
        let l = g.cross_entropy(x, &[0]);
        assert!((g.value(l).data[0] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(1, 3, &[1.0, 2.0, 3.0]), true);
        let sq = g.mul(x, x);
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data, vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn frozen_leaves_get_no_gradient_buffer() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(t(2, 2, &[1.0, 2.0, 3.0, 4.0]), false);
        let x = g.leaf(t(1, 2, &[1.0, -1.0]), true);
        let y = g.matmul(x, w);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(w).is_none());
        assert!(grads.wrt(x).is_some());
    }

    #[test]
    fn fully_frozen_graph_records_nothing() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(t(2, 2, &[1.0, 2.0, 3.0, 4.0]), false);
        let x = g.constant(t(1, 2, &[1.0, -1.0]));
        let y = g.matmul(x, w);
        let l = g.sum(y);
        assert!(!g.requires_grad(l));
        let grads = g.backward(l).unwrap();
        assert!(grads.wrt(w).is_none() && grads.wrt(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(1, 2, &[1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    #[should_panic(expected = "shape mismatch in matmul: [2, 3] vs [2, 4]")]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 4]));
        g.matmul(a, b);
    }

    #[test]
    fn masked_softmax_drives_masked_entries_to_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::row(vec![3.0, -2.0, 1.0, 50.0]));
        let m = mask_row::<f32>(&[true, true, true, false]);
        let y = g.masked_softmax(x, &m);
        let v = &g.value(y).data;
        assert!(v[3] < 1e-30);
        let s: f32 = v[..3].iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dropout_is_identity_in_eval() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::row(vec![1.5, -2.0, 0.25]));
        let y = g.dropout(x, 0.5);
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_train_scales_kept_units() {
        let mut g = Graph::<f64>::new().train(RngState::new(1, 2));
        let x = g.constant(Tensor::full(&[1, 1000], 1.0));
        let y = g.dropout(x, 0.25);
        let v = &g.value(y).data;
        assert!(v
            .iter()
            .all(|&e| e == 0.0 || (e - 1.0 / 0.75).abs() < 1e-12));
        let kept = v.iter().filter(|&&e| e > 0.0).count();
        assert!((650..850).contains(&kept));
    }

    #[test]
    fn straight_through_forward_hard_backward_soft() {
        let mut g = Graph::<f64>::new();
        let s = g.leaf(t(1, 3, &[0.2, 0.5, 0.3]), true);
        let h = g.straight_through(s, t(1, 3, &[0.0, 1.0, 0.0]));
        assert_eq!(g.value(h).data, vec![0.0, 1.0, 0.0]);
        let w = g.constant(t(1, 3, &[1.0, 2.0, 3.0]));
        let p = g.mul(h, w);
        let l = g.sum(p);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(s).unwrap().data, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn backward_twice_is_bit_identical() {
        let mut g = Graph::<f32>::new();
        let a = g.leaf(Tensor::randn(&[5, 7], 1.0, RngState::new(1, 0)), true);
        let b = g.leaf(Tensor::randn(&[7, 3], 1.0, RngState::new(1, 1)), true);
        let c = g.matmul(a, b);
        let d = g.tanh(c);
        let l = g.mean(d);
        let g1 = g.backward(l).unwrap();
        let g2 = g.backward(l).unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(
            bits(g1.wrt_slice(a).unwrap()),
            bits(g2.wrt_slice(a).unwrap())
        );
        assert_eq!(
            bits(g1.wrt_slice(b).unwrap()),
            bits(g2.wrt_slice(b).unwrap())
        );
    }
}
