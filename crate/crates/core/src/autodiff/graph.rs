use std::collections::HashMap;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Sigmoid,
}

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Affine { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ScaleShift { x: Var, scale: f64 },
    Activate(Activation, Var),
    Softmax(Var),
    ConcatCols(Var, Var),
    WeightedSum { states: Vec<Var>, weights: Vec<Var> },
    Sum(Var),
    BceWithLogits { logits: Var, targets: Vec<f64>, weights: Vec<f64> },
    SoftmaxXent { logits: Var, groups: usize, targets: Vec<usize>, weights: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode differentiation tape, recorded afresh for every forward pass.
///
/// Row-major matrices double as batches: an `[rows, cols]` operand holds one
/// sample per row. Nodes are appended in evaluation order so reverse creation
/// order is a valid topological order for backward.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<String, Var>,
}

/// Gradients of one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `var`; `None` when the loss does not depend on it
    /// through differentiable paths.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn values(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Records a leaf that does carry a gradient (useful for checking ops in
    /// isolation); it is not tied to any [`ParamStore`] entry.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a named parameter from `store`. Binding the same name twice
    /// returns the same node so repeated use accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let mut value = store.get(name)?.clone();
        value.clear_grad();
        let trainable = store.is_trainable(name);
        let v = self.push(value, Op::Leaf, trainable);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// `x·Wᵀ + b` for every row of `x`. `x` is `[n]` or `[rows, n]`, `W` is
    /// `[m, n]` and `b` is `[m]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (rows, n) = xv.dims2();
        let (m, wn) = match wv.shape() {
            [m, n] => (*m, *n),
            s => return Err(Error::dim("affine", format!("weight must be a matrix, got {s:?}"))),
        };
        if wn != n {
            return Err(Error::dim(
                "affine",
                format!("input width {n} vs weight {:?}", wv.shape()),
            ));
        }
        let mut out = vec![0.0; rows * m];
        gemm(rows, n, m, xv.values(), false, wv.values(), true, &mut out, 0.0);
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != m {
                return Err(Error::dim("affine", format!("bias length {} vs {m}", bv.len())));
            }
            for row in out.chunks_exact_mut(m) {
                for (o, bi) in row.iter_mut().zip(bv.values()) {
                    *o += bi;
                }
            }
        }
        let shape = if xv.shape().len() == 1 { vec![m] } else { vec![rows, m] };
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Affine { x, w, b }, ng))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.dims2() != bv.dims2() {
            return Err(Error::dim(name, format!("{:?} vs {:?}", av.shape(), bv.shape())));
        }
        let out = av.values().iter().zip(bv.values()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(av.shape().to_vec(), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// `scale·x + shift`, elementwise.
    pub fn scale_shift(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let xv = self.value(x);
        let out = xv.values().iter().map(|v| scale * v + shift).collect();
        let t = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::ScaleShift { x, scale }, ng)
    }

    pub fn activate(&mut self, kind: Activation, x: Var) -> Var {
        let xv = self.value(x);
        let f: fn(f64) -> f64 = match kind {
            Activation::Tanh => f64::tanh,
            Activation::Sigmoid => sigmoid,
        };
        let out = xv.values().iter().map(|v| f(*v)).collect();
        let t = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(x);
        self.push(t, Op::Activate(kind, x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activate(Activation::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activate(Activation::Sigmoid, x)
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (_, k) = xv.dims2();
        if k == 0 {
            return Err(Error::dim("softmax", "empty rows"));
        }
        let mut out = xv.values().to_vec();
        for row in out.chunks_exact_mut(k) {
            softmax_in_place(row);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Softmax(x), ng))
    }

    /// Joins two operands side by side: `[r, n] ++ [r, m] -> [r, n + m]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (ra, ca) = av.dims2();
        let (rb, cb) = bv.dims2();
        if ra != rb || av.shape().len() != bv.shape().len() {
            return Err(Error::dim(
                "concat_cols",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let shape = if av.shape().len() == 1 { vec![ca + cb] } else { vec![ra, ca + cb] };
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::ConcatCols(a, b), ng))
    }

    /// `Σᵢ weightsᵢ · statesᵢ`, differentiable in both states and weights.
    ///
    /// Each weight is either a single value applied to the whole state or one
    /// value per row (per sample).
    pub fn weighted_sum(&mut self, states: &[Var], weights: &[Var]) -> Result<Var> {
        if states.len() != weights.len() {
            return Err(Error::dim(
                "weighted_sum",
                format!("{} states vs {} weights", states.len(), weights.len()),
            ));
        }
        let first = *states
            .first()
            .ok_or_else(|| Error::dim("weighted_sum", "no states"))?;
        let shape = self.value(first).shape().to_vec();
        let (rows, cols) = self.value(first).dims2();
        let mut out = vec![0.0; rows * cols];
        for (&s, &w) in states.iter().zip(weights) {
            let sv = self.value(s);
            if sv.shape() != shape.as_slice() {
                return Err(Error::dim(
                    "weighted_sum",
                    format!("state {:?} vs {shape:?}", sv.shape()),
                ));
            }
            let wv = self.value(w).values();
            if wv.len() != 1 && wv.len() != rows {
                return Err(Error::dim(
                    "weighted_sum",
                    format!("weight of length {} for {rows} rows", wv.len()),
                ));
            }
            for r in 0..rows {
                let wr = if wv.len() == 1 { wv[0] } else { wv[r] };
                let src = &sv.values()[r * cols..(r + 1) * cols];
                for (o, x) in out[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                    *o += wr * x;
                }
            }
        }
        let ng = states.iter().chain(weights).any(|&v| self.ng(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::WeightedSum {
                states: states.to_vec(),
                weights: weights.to_vec(),
            },
            ng,
        ))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).values().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// `Σᵣ weightᵣ · BCE(sigmoid(logitᵣ), targetᵣ)` over single-logit rows,
    /// computed from logits for stability.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, cols) = lv.dims2();
        let rows = if lv.shape().len() == 1 { cols } else { rows };
        if lv.len() != rows || targets.len() != rows || weights.len() != rows {
            return Err(Error::dim(
                "bce_with_logits",
                format!(
                    "logits {:?}, {} targets, {} weights",
                    lv.shape(),
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        let loss = lv
            .values()
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((&z, &t), &w)| w * bce_logit(z, t))
            .sum();
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            ng,
        ))
    }

    /// Softmax cross-entropy over `groups` independent classification heads
    /// laid out side by side in each row of `logits`.
    ///
    /// `targets` holds `rows · groups` class indices (row-major) and the loss
    /// is `Σᵣ weightᵣ Σ_g −log softmax(head_g)[target]`.
    pub fn softmax_xent(
        &mut self,
        logits: Var,
        groups: usize,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, cols) = lv.dims2();
        if groups == 0 || cols % groups != 0 {
            return Err(Error::dim("softmax_xent", format!("{cols} logits in {groups} groups")));
        }
        let k = cols / groups;
        if targets.len() != rows * groups || weights.len() != rows {
            return Err(Error::dim(
                "softmax_xent",
                format!("{} targets, {} weights for {rows} rows", targets.len(), weights.len()),
            ));
        }
        if let Some(t) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::dim("softmax_xent", format!("class {t} out of {k}")));
        }
        let mut loss = 0.0;
        for r in 0..rows {
            if weights[r] == 0.0 {
                continue;
            }
            let row = lv.row(r);
            let mut row_loss = 0.0;
            for g in 0..groups {
                let head = &row[g * k..(g + 1) * k];
                row_loss += log_sum_exp(head) - head[targets[r * groups + g]];
            }
            loss += weights[r] * row_loss;
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                groups,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    /// Runs backward from `loss` and writes the gradient of every trainable
    /// parameter into `store`. Previous gradients are discarded, so calling
    /// this twice on the same graph gives identical results.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        store.zero_grads();
        for (name, &v) in &self.bound {
            if !store.is_trainable(name) {
                continue;
            }
            if let Some(g) = grads.wrt(v) {
                store.get_mut(name)?.set_grad(g.to_vec())?;
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.values();
        match &node.op {
            Op::Constant | Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (rows, n) = xv.dims2();
                let m = wv.shape()[0];
                if self.ng(*x) {
                    let gx = slot(grads, *x, rows * n);
                    gemm(rows, m, n, dy, false, wv.values(), false, gx, 1.0);
                }
                if self.ng(*w) {
                    let gw = slot(grads, *w, m * n);
                    gemm(m, rows, n, dy, true, xv.values(), false, gw, 1.0);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let gb = slot(grads, *b, m);
                        for row in dy.chunks_exact(m) {
                            for (g, d) in gb.iter_mut().zip(row) {
                                *g += d;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if self.ng(v) {
                        axpy(slot(grads, v, dy.len()), sign, dy);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if self.ng(v) {
                        axpy(slot(grads, v, dy.len()), sign, dy);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let bv = self.values(*b);
                    let ga = slot(grads, *a, dy.len());
                    for ((g, d), o) in ga.iter_mut().zip(dy).zip(bv) {
                        *g += d * o;
                    }
                }
                if self.ng(*b) {
                    let av = self.values(*a);
                    let gb = slot(grads, *b, dy.len());
                    for ((g, d), o) in gb.iter_mut().zip(dy).zip(av) {
                        *g += d * o;
                    }
                }
            }
            Op::ScaleShift { x, scale } => {
                axpy(slot(grads, *x, dy.len()), *scale, dy);
            }
            Op::Activate(kind, x) => {
                let gx = slot(grads, *x, dy.len());
                match kind {
                    Activation::Tanh => {
                        for ((g, d), o) in gx.iter_mut().zip(dy).zip(y) {
                            *g += d * (1.0 - o * o);
                        }
                    }
                    Activation::Sigmoid => {
                        for ((g, d), o) in gx.iter_mut().zip(dy).zip(y) {
                            *g += d * o * (1.0 - o);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let (_, k) = node.value.dims2();
                let gx = slot(grads, *x, dy.len());
                for ((g, d), o) in gx.chunks_exact_mut(k).zip(dy.chunks_exact(k)).zip(y.chunks_exact(k)) {
                    let dot: f64 = d.iter().zip(o).map(|(a, b)| a * b).sum();
                    for ((gi, di), oi) in g.iter_mut().zip(d).zip(o) {
                        *gi += oi * (di - dot);
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (rows, ca) = self.value(*a).dims2();
                let (_, cb) = self.value(*b).dims2();
                let width = ca + cb;
                if self.ng(*a) {
                    let ga = slot(grads, *a, rows * ca);
                    for r in 0..rows {
                        axpy(&mut ga[r * ca..(r + 1) * ca], 1.0, &dy[r * width..r * width + ca]);
                    }
                }
                if self.ng(*b) {
                    let gb = slot(grads, *b, rows * cb);
                    for r in 0..rows {
                        axpy(&mut gb[r * cb..(r + 1) * cb], 1.0, &dy[r * width + ca..(r + 1) * width]);
                    }
                }
            }
            Op::WeightedSum { states, weights } => {
                let (rows, cols) = node.value.dims2();
                for (&s, &w) in states.iter().zip(weights) {
                    let wv = self.values(w);
                    let per_row = wv.len() != 1;
                    if self.ng(s) {
                        let gs = slot(grads, s, rows * cols);
                        for r in 0..rows {
                            let wr = if per_row { wv[r] } else { wv[0] };
                            axpy(&mut gs[r * cols..(r + 1) * cols], wr, &dy[r * cols..(r + 1) * cols]);
                        }
                    }
                    if self.ng(w) {
                        let sv = self.values(s);
                        let mut partial = vec![0.0; wv.len()];
                        for r in 0..rows {
                            let dot: f64 = dy[r * cols..(r + 1) * cols]
                                .iter()
                                .zip(&sv[r * cols..(r + 1) * cols])
                                .map(|(a, b)| a * b)
                                .sum();
                            partial[if per_row { r } else { 0 }] += dot;
                        }
                        axpy(slot(grads, w, partial.len()), 1.0, &partial);
                    }
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                for g in slot(grads, *x, n).iter_mut() {
                    *g += dy[0];
                }
            }
            Op::BceWithLogits {
                logits,
                targets,
                weights,
            } => {
                let z = self.values(*logits);
                let gz = slot(grads, *logits, z.len());
                for (((g, &zi), &t), &w) in gz.iter_mut().zip(z).zip(targets).zip(weights) {
                    *g += dy[0] * w * (sigmoid(zi) - t);
                }
            }
            Op::SoftmaxXent {
                logits,
                groups,
                targets,
                weights,
            } => {
                let lv = self.value(*logits);
                let (rows, cols) = lv.dims2();
                let k = cols / groups;
                let gz = slot(grads, *logits, rows * cols);
                let mut probs = vec![0.0; k];
                for r in 0..rows {
                    let scale = dy[0] * weights[r];
                    if scale == 0.0 {
                        continue;
                    }
                    let row = lv.row(r);
                    for g in 0..*groups {
                        probs.copy_from_slice(&row[g * k..(g + 1) * k]);
                        softmax_in_place(&mut probs);
                        probs[targets[r * groups + g]] -= 1.0;
                        axpy(&mut gz[r * cols + g * k..r * cols + (g + 1) * k], scale, &probs);
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
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

/// Binary cross-entropy of `sigmoid(z)` against target `t`.
pub(crate) fn bce_logit(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(xs: &mut [f64]) {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

/// `c = op(a)·op(b) + beta·c` for row-major buffers, where `op(a)` is `m×k`
/// and `op(b)` is `k×n`. A transposed operand is stored in its untransposed
/// layout (`k×m` for `a`, `n×k` for `b`).
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above pin every buffer to the extent implied by
    // (m, k, n) and the strides address exactly those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
