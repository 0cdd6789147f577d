//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node that refers only to
//! earlier nodes, so the tape is topologically ordered by construction and
//! backward is a single reverse sweep. Parameters are bound by reference
//! (no copies); constants are owned by the graph.

use std::collections::HashMap;

use super::tensor::{dot, matmul_into, matmul_nt_into, matmul_tn_into};
use super::{NumericsError, ParamId, ParameterSet, Tensor};

/// Logit added to disallowed attention pairs.
pub const MASK_LOGIT: f64 = -1e9;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a parameter set bound into a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SetId(usize);

enum Source {
    Owned(Tensor),
    Param { set: usize, id: usize },
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Gelu { x: Var, t: Vec<f64> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Attention { qkv: Var, group: usize, heads: usize, probs: Vec<f64> },
    SoftmaxRows(Var),
    GroupMeanPool { x: Var, groups: Vec<usize>, counts: Vec<usize> },
    ConcatCols(Var, Var),
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Transpose(Var),
    GatherRows { table: Var, idx: Vec<usize> },
    Clamp { x: Var, lo: f64, hi: f64 },
    Minimum(Var, Var),
    Sum(Var),
    Mean(Var),
    Mse { pred: Var, target: Vec<f64> },
    RowL1Bound { x: Var, scale: f64, row: Option<usize> },
}

struct Node {
    value: Source,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation. One graph per forward pass; not shared between
/// threads.
pub struct Graph<'p> {
    sets: Vec<(&'p ParameterSet, bool)>,
    nodes: Vec<Node>,
    param_leaves: HashMap<(usize, usize), Var>,
    backward_done: bool,
    input_grads: Option<HashMap<Var, Vec<f64>>>,
}

/// Parameter gradients produced by [`Graph::backward`].
pub struct Gradients {
    per_set: Vec<Vec<Tensor>>,
}

impl Gradients {
    /// Gradients aligned with the parameter order of the bound set;
    /// parameters the loss does not reach get zeros.
    pub fn for_set(&self, set: SetId) -> &[Tensor] {
        &self.per_set[set.0]
    }

    pub fn into_set(mut self, set: SetId) -> Vec<Tensor> {
        std::mem::take(&mut self.per_set[set.0])
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self {
            sets: Vec::new(),
            nodes: Vec::with_capacity(128),
            param_leaves: HashMap::new(),
            backward_done: false,
            input_grads: None,
        }
    }

    /// Binds a parameter set whose gradients will be reported.
    pub fn bind(&mut self, params: &'p ParameterSet) -> SetId {
        self.sets.push((params, true));
        SetId(self.sets.len() - 1)
    }

    /// Binds a parameter set that is read but never differentiated.
    pub fn bind_frozen(&mut self, params: &'p ParameterSet) -> SetId {
        self.sets.push((params, false));
        SetId(self.sets.len() - 1)
    }

    pub fn param(&mut self, set: SetId, id: ParamId) -> Var {
        if let Some(v) = self.param_leaves.get(&(set.0, id.0)) {
            return *v;
        }
        let needs_grad = self.sets[set.0].1;
        let v = self.push(Source::Param { set: set.0, id: id.0 }, Op::Leaf, needs_grad);
        self.param_leaves.insert((set.0, id.0), v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Source::Owned(t), Op::Leaf, false)
    }

    /// An owned leaf that gradients flow into; used for input-gradient checks.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Source::Owned(t), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Source::Owned(t) => t,
            Source::Param { set, id } => self.sets[*set].0.get(ParamId(*id)),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Source, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn emit(&mut self, out: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(Source::Owned(out), op, needs)
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(mismatch("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.emit(Tensor::from_vec(m, n, out), Op::MatMul(a, b), &[a, b]))
    }

    /// `x·w + b` with `b` a `1×out` row broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NumericsError> {
        let (n, i) = self.dims(x);
        let (i2, o) = self.dims(w);
        if i != i2 {
            return Err(mismatch("linear", format!("input {n}x{i}, weight {i2}x{o}")));
        }
        let mut out = vec![0.0; n * o];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.len() != o {
                return Err(mismatch("linear", format!("bias len {} for width {o}", bias.len())));
            }
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bias.data());
            }
        }
        matmul_into(self.value(x).data(), self.value(w).data(), &mut out, n, i, o);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.emit(Tensor::from_vec(n, o, out), Op::Linear { x, w, b }, &inputs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.emit(out, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.emit(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = map(self.value(a), |x| c * x);
        self.emit(out, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| x.max(0.0));
        self.emit(out, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::tanh);
        self.emit(out, Op::Tanh(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let xt = self.value(a);
        let t: Vec<f64> = xt.data().iter().map(|&x| fast_tanh(GELU_C * (x + 0.044715 * x * x * x))).collect();
        let data = xt.data().iter().zip(&t).map(|(&x, &t)| 0.5 * x * (1.0 + t)).collect();
        let out = Tensor::new(xt.shape().to_vec(), data).expect("same shape");
        self.emit(out, Op::Gelu { x: a, t }, &[a])
    }

    /// Row-wise layer normalization with learned `1×d` gain and offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, NumericsError> {
        let (n, d) = self.dims(x);
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(mismatch("layer_norm", format!("width {d} vs affine params")));
        }
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; n * d];
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        for r in 0..n {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        Ok(self.emit(Tensor::from_vec(n, d, out), Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Scaled dot-product attention on packed `[Q | K | V]` rows.
    ///
    /// `qkv` is `[n × 3d]` with `n` a multiple of `group`; each consecutive
    /// block of `group` rows is one independent sequence. `mask` is a
    /// row-major `group × group` table of allowed pairs and must have a true
    /// diagonal. Heads split `d` evenly. Output is `[n × d]`.
    pub fn attention(&mut self, qkv: Var, group: usize, mask: &[bool], heads: usize) -> Result<Var, NumericsError> {
        let (n, w) = self.dims(qkv);
        if group == 0 || n % group != 0 || w % 3 != 0 {
            return Err(mismatch("attention", format!("qkv {n}x{w} with group {group}")));
        }
        let d = w / 3;
        if heads == 0 || d % heads != 0 {
            return Err(mismatch("attention", format!("width {d} not divisible by {heads} heads")));
        }
        if mask.len() != group * group {
            return Err(mismatch("attention", format!("mask len {} for group {group}", mask.len())));
        }
        if (0..group).any(|i| !mask[i * group + i]) {
            return Err(NumericsError::AllMaskedRow);
        }
        let dh = d / heads;
        let inv_sqrt = 1.0 / (dh as f64).sqrt();
        let src = self.value(qkv).data();
        let batches = n / group;
        let mut out = vec![0.0; n * d];
        let mut probs = vec![0.0; batches * heads * group * group];
        let mut logits = vec![0.0; group];
        for b in 0..batches {
            let base = b * group;
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                for i in 0..group {
                    let qi = &src[(base + i) * w + qo..(base + i) * w + qo + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..group {
                        let kj = &src[(base + j) * w + ko..(base + j) * w + ko + dh];
                        let mut s = dot(qi, kj) * inv_sqrt;
                        if !mask[i * group + j] {
                            s += MASK_LOGIT;
                        }
                        logits[j] = s;
                        max = max.max(s);
                    }
                    let mut z = 0.0;
                    for l in logits.iter_mut() {
                        *l = (*l - max).exp();
                        z += *l;
                    }
                    let p = &mut probs[((b * heads + h) * group + i) * group..][..group];
                    for j in 0..group {
                        p[j] = logits[j] / z;
                    }
                    let o = &mut out[(base + i) * d + h * dh..(base + i) * d + (h + 1) * dh];
                    for j in 0..group {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let vj = &src[(base + j) * w + vo..(base + j) * w + vo + dh];
                        for (oc, &vc) in o.iter_mut().zip(vj) {
                            *oc += p[j] * vc;
                        }
                    }
                }
            }
        }
        Ok(self.emit(Tensor::from_vec(n, d, out), Op::Attention { qkv, group, heads, probs }, &[qkv]))
    }

    /// Row-wise softmax; `mask` (same shape, optional) removes entries with
    /// the large negative logit used by attention.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var, NumericsError> {
        let (n, d) = self.dims(x);
        if let Some(m) = mask {
            if m.len() != n * d {
                return Err(mismatch("softmax_rows", "mask shape".into()));
            }
        }
        let xs = self.value(x).data();
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &mut out[r * d..(r + 1) * d];
            for c in 0..d {
                row[c] = xs[r * d + c];
                if let Some(m) = mask {
                    if !m[r * d + c] {
                        row[c] += MASK_LOGIT;
                    }
                }
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        Ok(self.emit(Tensor::from_vec(n, d, out), Op::SoftmaxRows(x), &[x]))
    }

    /// Averages rows sharing a group label. `groups[r]` is the output row
    /// of input row `r`; every output row must receive at least one input.
    pub fn group_mean_pool(&mut self, x: Var, groups: &[usize], num_groups: usize) -> Result<Var, NumericsError> {
        let (n, d) = self.dims(x);
        if groups.len() != n {
            return Err(mismatch("group_mean_pool", format!("{} labels for {n} rows", groups.len())));
        }
        let mut counts = vec![0usize; num_groups];
        for &g in groups {
            if g >= num_groups {
                return Err(mismatch("group_mean_pool", format!("label {g} ≥ {num_groups}")));
            }
            counts[g] += 1;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0) {
            return Err(NumericsError::EmptyGroup(empty));
        }
        let xs = self.value(x).data();
        let mut out = vec![0.0; num_groups * d];
        for (r, &g) in groups.iter().enumerate() {
            let inv = 1.0 / counts[g] as f64;
            for c in 0..d {
                out[g * d + c] += xs[r * d + c] * inv;
            }
        }
        Ok(self.emit(
            Tensor::from_vec(num_groups, d, out),
            Op::GroupMeanPool { x, groups: groups.to_vec(), counts },
            &[x],
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (n, ca) = self.dims(a);
        let (n2, cb) = self.dims(b);
        if n != n2 {
            return Err(mismatch("concat_cols", format!("{n} vs {n2} rows")));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let w = ca + cb;
        let mut out = vec![0.0; n * w];
        for r in 0..n {
            out[r * w..r * w + ca].copy_from_slice(&av[r * ca..(r + 1) * ca]);
            out[r * w + ca..(r + 1) * w].copy_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        Ok(self.emit(Tensor::from_vec(n, w, out), Op::ConcatCols(a, b), &[a, b]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let (n, c) = self.dims(x);
        if start + len > c {
            return Err(mismatch("slice_cols", format!("[{start}, {}) of {c}", start + len)));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&xs[r * c + start..r * c + start + len]);
        }
        Ok(self.emit(Tensor::from_vec(n, len, out), Op::SliceCols { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if rows * cols != t.len() {
            return Err(mismatch("reshape", format!("{:?} to {rows}x{cols}", t.shape())));
        }
        let out = t.clone().reshaped(rows, cols);
        Ok(self.emit(out, Op::Reshape(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transpose();
        self.emit(out, Op::Transpose(x), &[x])
    }

    /// Row lookup into an embedding table.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let (p, s) = self.dims(table);
        if let Some(&bad) = idx.iter().find(|&&i| i >= p) {
            return Err(mismatch("gather_rows", format!("index {bad} ≥ table rows {p}")));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * s);
        for &i in idx {
            out.extend_from_slice(&tv[i * s..(i + 1) * s]);
        }
        Ok(self.emit(Tensor::from_vec(idx.len(), s, out), Op::GatherRows { table, idx: idx.to_vec() }, &[table]))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = map(self.value(x), |v| v.clamp(lo, hi));
        self.emit(out, Op::Clamp { x, lo, hi }, &[x])
    }

    /// Elementwise minimum; ties send the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("minimum", a, b)?;
        let out = zip_map(self.value(a), self.value(b), f64::min);
        Ok(self.emit(out, Op::Minimum(a, b), &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.emit(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.emit(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var, NumericsError> {
        let p = self.value(pred);
        if p.len() != target.len() {
            return Err(mismatch("mse", format!("{} predictions, {} targets", p.len(), target.len())));
        }
        let loss = p.data().iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / target.len() as f64;
        Ok(self.emit(Tensor::scalar(loss), Op::Mse { pred, target: target.to_vec() }, &[pred]))
    }

    /// Divides `x` by `max(1, max_r Σ_c |x[r][c]|)`.
    ///
    /// For any `v` with `|v_c| ≤ 1`, every entry of `bound(x)·v` then lies
    /// in `[-1, 1]` while the column space of `x` is unchanged.
    pub fn row_l1_bound(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (n, c) = (t.rows(), t.cols());
        let mut best = (0.0, 0usize);
        for r in 0..n {
            let s: f64 = t.data()[r * c..(r + 1) * c].iter().map(|v| v.abs()).sum();
            if s > best.0 {
                best = (s, r);
            }
        }
        let (scale, row) = if best.0 > 1.0 { (best.0, Some(best.1)) } else { (1.0, None) };
        let out = map(t, |v| v / scale);
        self.emit(out, Op::RowL1Bound { x, scale, row }, &[x])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(mismatch(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a `1×1` loss.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, NumericsError> {
        if self.backward_done {
            return Err(NumericsError::DoubleBackward);
        }
        if self.value(loss).len() != 1 {
            return Err(mismatch("backward", "loss must be a scalar".into()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backprop_node(idx, &gout, &mut grads);
            // Leaves keep their gradient for collection below.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(gout);
            }
        }

        let mut per_set: Vec<Vec<Tensor>> =
            self.sets.iter().map(|(p, _)| p.tensors().iter().map(zeros_like).collect()).collect();
        for (&(set, id), &v) in &self.param_leaves {
            if let Some(g) = grads[v.0].take() {
                let dst = per_set[set][id].data_mut();
                for (d, s) in dst.iter_mut().zip(&g) {
                    *d += s;
                }
            }
        }
        self.input_grads = None;
        let inputs: Vec<(Var, Vec<f64>)> = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf) && matches!(n.value, Source::Owned(_)) && n.needs_grad)
            .filter_map(|(i, _)| grads[i].take().map(|g| (Var(i), g)))
            .collect();
        self.input_grads = Some(inputs.into_iter().collect());
        Ok(Gradients { per_set })
    }

    /// Gradient reaching an [`Graph::input`] leaf during the last backward.
    pub fn input_grad(&self, v: Var) -> Option<Tensor> {
        let t = self.value(v);
        let g = self.input_grads.as_ref()?.get(&v)?;
        Some(Tensor::from_vec(t.rows(), t.cols(), g.clone()))
    }

    fn backprop_node(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.value(Var(idx));
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = out.cols();
                if self.needs(*a) {
                    let ga = acc(grads, *a, m * k);
                    matmul_nt_into(gout, self.value(*b).data(), ga, m, n, k);
                }
                if self.needs(*b) {
                    let gb = acc(grads, *b, k * n);
                    matmul_tn_into(self.value(*a).data(), gout, gb, m, k, n);
                }
            }
            Op::Linear { x, w, b } => {
                let (n, i) = self.dims(*x);
                let o = out.cols();
                if self.needs(*x) {
                    let gx = acc(grads, *x, n * i);
                    matmul_nt_into(gout, self.value(*w).data(), gx, n, o, i);
                }
                if self.needs(*w) {
                    let gw = acc(grads, *w, i * o);
                    matmul_tn_into(self.value(*x).data(), gout, gw, n, i, o);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let gb = acc(grads, *b, o);
                        for row in gout.chunks(o) {
                            for (g, r) in gb.iter_mut().zip(row) {
                                *g += r;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        add_into(acc(grads, *v, gout.len()), gout);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    let ga = acc(grads, *a, gout.len());
                    for ((g, o), y) in ga.iter_mut().zip(gout).zip(bv) {
                        *g += o * y;
                    }
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    let gb = acc(grads, *b, gout.len());
                    for ((g, o), x) in gb.iter_mut().zip(gout).zip(av) {
                        *g += o * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                let ga = acc(grads, *a, gout.len());
                for (g, o) in ga.iter_mut().zip(gout) {
                    *g += c * o;
                }
            }
            Op::Relu(a) => {
                let ov = out.data();
                let ga = acc(grads, *a, gout.len());
                for ((g, o), y) in ga.iter_mut().zip(gout).zip(ov) {
                    if *y > 0.0 {
                        *g += o;
                    }
                }
            }
            Op::Tanh(a) => {
                let ov = out.data();
                let ga = acc(grads, *a, gout.len());
                for ((g, o), y) in ga.iter_mut().zip(gout).zip(ov) {
                    *g += o * (1.0 - y * y);
                }
            }
            Op::Gelu { x: a, t: tv } => {
                let xv = self.value(*a).data();
                let ga = acc(grads, *a, gout.len());
                for (((g, o), &x), &t) in ga.iter_mut().zip(gout).zip(xv).zip(tv) {
                    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                    *g += o * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = out.cols();
                let n = out.rows();
                let gv = self.value(*gamma).data();
                if self.needs(*gamma) {
                    let gg = acc(grads, *gamma, d);
                    for r in 0..n {
                        for c in 0..d {
                            gg[c] += gout[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if self.needs(*beta) {
                    let gb = acc(grads, *beta, d);
                    for r in 0..n {
                        for c in 0..d {
                            gb[c] += gout[r * d + c];
                        }
                    }
                }
                if self.needs(*x) {
                    let gx = acc(grads, *x, n * d);
                    let inv_d = 1.0 / d as f64;
                    for r in 0..n {
                        let mut sum_dh = 0.0;
                        let mut sum_dh_h = 0.0;
                        for c in 0..d {
                            let dh = gout[r * d + c] * gv[c];
                            sum_dh += dh;
                            sum_dh_h += dh * xhat[r * d + c];
                        }
                        for c in 0..d {
                            let dh = gout[r * d + c] * gv[c];
                            gx[r * d + c] += rstd[r] * (dh - inv_d * sum_dh - xhat[r * d + c] * inv_d * sum_dh_h);
                        }
                    }
                }
            }
            Op::Attention { qkv, group, heads, probs } => {
                let (n, w) = self.dims(*qkv);
                let d = w / 3;
                let (group, heads) = (*group, *heads);
                let dh = d / heads;
                let inv_sqrt = 1.0 / (dh as f64).sqrt();
                let src = self.value(*qkv).data();
                let gq = acc(grads, *qkv, n * w);
                let mut dp = vec![0.0; group];
                for b in 0..n / group {
                    let base = b * group;
                    for h in 0..heads {
                        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                        for i in 0..group {
                            let p = &probs[((b * heads + h) * group + i) * group..][..group];
                            let go = &gout[(base + i) * d + h * dh..(base + i) * d + (h + 1) * dh];
                            let mut weighted = 0.0;
                            for j in 0..group {
                                let vj = &src[(base + j) * w + vo..(base + j) * w + vo + dh];
                                dp[j] = dot(go, vj);
                                weighted += p[j] * dp[j];
                            }
                            for j in 0..group {
                                if p[j] == 0.0 {
                                    continue;
                                }
                                // dV_j += p_ij · dOut_i
                                let gv = &mut gq[(base + j) * w + vo..(base + j) * w + vo + dh];
                                for (g, o) in gv.iter_mut().zip(go) {
                                    *g += p[j] * o;
                                }
                                let ds = p[j] * (dp[j] - weighted) * inv_sqrt;
                                if ds == 0.0 {
                                    continue;
                                }
                                for c in 0..dh {
                                    let qc = src[(base + i) * w + qo + c];
                                    let kc = src[(base + j) * w + ko + c];
                                    gq[(base + i) * w + qo + c] += ds * kc;
                                    gq[(base + j) * w + ko + c] += ds * qc;
                                }
                            }
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let (n, d) = (out.rows(), out.cols());
                let ov = out.data();
                let gx = acc(grads, *x, n * d);
                for r in 0..n {
                    let y = &ov[r * d..(r + 1) * d];
                    let go = &gout[r * d..(r + 1) * d];
                    let s = dot(y, go);
                    for c in 0..d {
                        gx[r * d + c] += y[c] * (go[c] - s);
                    }
                }
            }
            Op::GroupMeanPool { x, groups, counts } => {
                let d = out.cols();
                let gx = acc(grads, *x, groups.len() * d);
                for (r, &g) in groups.iter().enumerate() {
                    let inv = 1.0 / counts[g] as f64;
                    for c in 0..d {
                        gx[r * d + c] += gout[g * d + c] * inv;
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let n = out.rows();
                let w = out.cols();
                let ca = self.dims(*a).1;
                let cb = w - ca;
                if self.needs(*a) {
                    let ga = acc(grads, *a, n * ca);
                    for r in 0..n {
                        add_into(&mut ga[r * ca..(r + 1) * ca], &gout[r * w..r * w + ca]);
                    }
                }
                if self.needs(*b) {
                    let gb = acc(grads, *b, n * cb);
                    for r in 0..n {
                        add_into(&mut gb[r * cb..(r + 1) * cb], &gout[r * w + ca..(r + 1) * w]);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let (n, c) = self.dims(*x);
                let len = out.cols();
                let gx = acc(grads, *x, n * c);
                for r in 0..n {
                    add_into(&mut gx[r * c + start..r * c + start + len], &gout[r * len..(r + 1) * len]);
                }
            }
            Op::Reshape(x) => {
                add_into(acc(grads, *x, gout.len()), gout);
            }
            Op::Transpose(x) => {
                let (r, c) = self.dims(*x);
                let gx = acc(grads, *x, r * c);
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += gout[j * r + i];
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                let (p, s) = self.dims(*table);
                let gt = acc(grads, *table, p * s);
                for (r, &i) in idx.iter().enumerate() {
                    add_into(&mut gt[i * s..(i + 1) * s], &gout[r * s..(r + 1) * s]);
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                let gx = acc(grads, *x, gout.len());
                for ((g, o), v) in gx.iter_mut().zip(gout).zip(xv) {
                    if *v > *lo && *v < *hi {
                        *g += o;
                    }
                }
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let ga = acc(grads, *a, gout.len());
                    for i in 0..gout.len() {
                        if av[i] <= bv[i] {
                            ga[i] += gout[i];
                        }
                    }
                }
                if self.needs(*b) {
                    let gb = acc(grads, *b, gout.len());
                    for i in 0..gout.len() {
                        if av[i] > bv[i] {
                            gb[i] += gout[i];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                for g in acc(grads, *x, n).iter_mut() {
                    *g += gout[0];
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let v = gout[0] / n as f64;
                for g in acc(grads, *x, n).iter_mut() {
                    *g += v;
                }
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred).data();
                let c = 2.0 * gout[0] / target.len() as f64;
                let gp = acc(grads, *pred, target.len());
                for ((g, p), t) in gp.iter_mut().zip(pv).zip(target) {
                    *g += c * (p - t);
                }
            }
            Op::RowL1Bound { x, scale, row } => {
                let xt = self.value(*x);
                let cols = xt.cols();
                let gx = acc(grads, *x, gout.len());
                for (g, o) in gx.iter_mut().zip(gout) {
                    *g += o / scale;
                }
                if let Some(r) = row {
                    // d(x/s)/ds contribution through the winning row's L1 norm.
                    let coupling = dot(gout, xt.data()) / (scale * scale);
                    for c in 0..cols {
                        let v = xt.data()[r * cols + c];
                        gx[r * cols + c] -= coupling * v.signum();
                    }
                }
            }
        }
    }
}

/// `tanh` through a single `exp`; the libm `tanh` is several times slower.
#[inline]
fn fast_tanh(u: f64) -> f64 {
    if u > 20.0 {
        1.0
    } else if u < -20.0 {
        -1.0
    } else {
        1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
    }
}

fn mismatch(op: &'static str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch { op, detail }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn zeros_like(t: &Tensor) -> Tensor {
    Tensor::new(t.shape().to_vec(), vec![0.0; t.len()]).expect("same shape")
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}
