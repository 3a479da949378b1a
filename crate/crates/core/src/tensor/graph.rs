//! Dynamic tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value. `backward`
//! walks the nodes in exact reverse order, accumulating adjoints. The tape
//! is single-use: it is rebuilt for every forward pass.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::kernels;
use super::DenseValue;
use crate::error::{AdsError, Result};
use crate::params::{ParamId, ParameterStore};

/// Logit written into masked positions before the softmax.
pub const MASK_SENTINEL: f64 = -1e9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    /// Every op output is rounded through `f32`.
    F32,
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    Gather { param: ParamId, ids: Vec<usize> },
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    BatchMatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Reshape(Var),
    RepeatRows { x: Var, times: usize },
    Concat(Vec<Var>),
    Sum(Var),
    Softmax { x: Var, mask: Option<Vec<bool>> },
    DiagLogits { q: Var, k: Var, heads: usize, scale: f64 },
    AttnPool { w: Var, v: Var, heads: usize },
    Bce { p: Var, labels: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: DenseValue,
    requires_grad: bool,
}

/// Gradient of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamGrad {
    Dense(Vec<f64>),
    /// Row index to row gradient, for embedding tables.
    Rows(BTreeMap<usize, Vec<f64>>),
}

impl ParamGrad {
    /// Dense view with `numel` entries; absent rows are zero.
    pub fn to_dense(&self, numel: usize, row_len: usize) -> Vec<f64> {
        match self {
            ParamGrad::Dense(g) => g.clone(),
            ParamGrad::Rows(rows) => {
                let mut out = vec![0.0; numel];
                for (&r, g) in rows {
                    out[r * row_len..(r + 1) * row_len].copy_from_slice(g);
                }
                out
            }
        }
    }
}

/// Parameter gradients collected by [`Graph::backward`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<ParamId, ParamGrad>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&ParamGrad> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamGrad)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn insert(&mut self, id: ParamId, grad: ParamGrad) {
        self.grads.insert(id, grad);
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut ParamGrad> {
        self.grads.get_mut(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Dense gradient for a parameter, zeros if it never entered the graph.
    pub fn dense(&self, store: &ParameterStore, id: ParamId) -> Vec<f64> {
        let value = &store.get(id).value;
        match self.grads.get(&id) {
            Some(g) => g.to_dense(value.len(), value.last_dim()),
            None => vec![0.0; value.len()],
        }
    }
}

pub struct Graph<'s> {
    store: Option<&'s ParameterStore>,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bound: HashMap<ParamId, Var>,
    precision: Precision,
    backward_done: bool,
    #[cfg(test)]
    pub(crate) flip_relu_backward: bool,
}

impl<'s> Graph<'s> {
    /// Graph without a parameter store; only constants and leaves.
    pub fn new() -> Self {
        Self::build(None, Precision::F64)
    }

    pub fn with_store(store: &'s ParameterStore, precision: Precision) -> Self {
        Self::build(Some(store), precision)
    }

    fn build(store: Option<&'s ParameterStore>, precision: Precision) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            grads: Vec::new(),
            bound: HashMap::new(),
            precision,
            backward_done: false,
            #[cfg(test)]
            flip_relu_backward: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseValue {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Adjoint of `v` after `backward`, if it received any.
    pub fn grad(&self, v: Var) -> Option<DenseValue> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| DenseValue::new(self.shape(v), g.clone()).expect("grad shape"))
    }

    fn store(&self) -> Result<&'s ParameterStore> {
        self.store
            .ok_or_else(|| AdsError::Graph("graph has no parameter store".into()))
    }

    fn push(&mut self, op: Op, mut value: DenseValue) -> Var {
        if self.backward_done {
            // A finished tape cannot grow; callers build a fresh graph per pass.
            panic!("graph already differentiated; build a new graph for the next forward pass");
        }
        if self.precision == Precision::F32 {
            for x in value.data_mut() {
                *x = *x as f32 as f64;
            }
        }
        let requires_grad = match &op {
            Op::Constant => false,
            Op::Leaf | Op::Param(_) | Op::Gather { .. } => true,
            other => inputs_of(other).iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: DenseValue) -> Var {
        self.push(Op::Constant, value)
    }

    /// Free differentiable input not tied to the store.
    pub fn leaf(&mut self, value: DenseValue) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Binds a dense parameter; repeated binds return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let store = self.store()?;
        let id = store.id(name)?;
        if let Some(&v) = self.bound.get(&id) {
            return Ok(v);
        }
        let value = store.get(id).value.clone();
        let v = self.push(Op::Param(id), value);
        self.bound.insert(id, v);
        Ok(v)
    }

    /// Current value of a stored parameter, outside the tape.
    pub fn stored(&self, name: &str) -> Result<&'s DenseValue> {
        let store = self.store()?;
        Ok(&store.get(store.id(name)?).value)
    }

    /// Gathers rows of an embedding table; ids must already be in range.
    pub fn gather(&mut self, table: &str, ids: &[usize]) -> Result<Var> {
        let store = self.store()?;
        let id = store.id(table)?;
        let t = &store.get(id).value;
        if t.rank() != 2 {
            return Err(AdsError::dim("gather", t.shape(), &[ids.len()]));
        }
        let (vocab, dim) = (t.shape()[0], t.shape()[1]);
        if ids.is_empty() {
            return Err(AdsError::Validation("gather with no ids".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            if i >= vocab {
                return Err(AdsError::Validation(format!(
                    "row {i} out of range for table {table} with {vocab} rows"
                )));
            }
            out.extend_from_slice(t.row(i));
        }
        let value = DenseValue::new(&[ids.len(), dim], out)?;
        Ok(self.push(
            Op::Gather {
                param: id,
                ids: ids.to_vec(),
            },
            value,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AdsError::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let value = DenseValue::new(&[m, n], out)?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(AdsError::dim("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let value = DenseValue::new(&[m, n], out)?;
        Ok(self.push(Op::MatMulNT(a, b), value))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa.len() != 2 {
            return Err(AdsError::dim("transpose", sa, &[]));
        }
        let (m, n) = (sa[0], sa[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let value = DenseValue::new(&[n, m], out)?;
        Ok(self.push(Op::Transpose(a), value))
    }

    /// Per-batch `a[b] · w[b]ᵀ` for `a: [B×m×k]`, `w: [B×n×k]`.
    pub fn batch_matmul_nt(&mut self, a: Var, w: Var) -> Result<Var> {
        let (sa, sw) = (self.shape(a), self.shape(w));
        if sa.len() != 3 || sw.len() != 3 || sa[0] != sw[0] || sa[2] != sw[2] {
            return Err(AdsError::dim("batch_matmul_nt", sa, sw));
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sw[1]);
        let (ad, wd) = (self.value(a).data(), self.value(w).data());
        let mut out = vec![0.0; bsz * m * n];
        for b in 0..bsz {
            kernels::matmul_nt(
                &ad[b * m * k..(b + 1) * m * k],
                &wd[b * n * k..(b + 1) * n * k],
                m,
                k,
                n,
                &mut out[b * m * n..(b + 1) * m * n],
            );
        }
        let value = DenseValue::new(&[bsz, m, n], out)?;
        Ok(self.push(Op::BatchMatMulNT(a, w), value))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(AdsError::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> DenseValue {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        DenseValue::new(self.shape(a), data).expect("same shape")
    }

    /// Row broadcast check: `b` must be 1-D matching the trailing axis of `a`.
    fn row_compatible(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() != 1 || sb[0] != *sa.last().unwrap_or(&0) {
            return Err(AdsError::dim(op, sa, sb));
        }
        Ok(())
    }

    fn row_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> DenseValue {
        let n = self.value(b).len();
        let bd = self.value(b).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % n]))
            .collect();
        DenseValue::new(self.shape(a), data).expect("same shape")
    }

    /// Elementwise sum. A 1-D `b` matching the last axis of `a` is added to every row.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) == self.shape(b) {
            let value = self.zip_with(a, b, |x, y| x + y);
            return Ok(self.push(Op::Add(a, b), value));
        }
        self.row_compatible("add", a, b)?;
        let value = self.row_with(a, b, |x, y| x + y);
        Ok(self.push(Op::AddRow(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), value))
    }

    /// Elementwise product, with the same row broadcast as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) == self.shape(b) {
            let value = self.zip_with(a, b, |x, y| x * y);
            return Ok(self.push(Op::Mul(a, b), value));
        }
        self.row_compatible("mul", a, b)?;
        let value = self.row_with(a, b, |x, y| x * y);
        Ok(self.push(Op::MulRow(a, b), value))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a);
        let value = DenseValue::new(v.shape(), v.data().iter().map(|x| x * factor).collect())
            .expect("same shape");
        self.push(Op::Scale(a, factor), value)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = DenseValue::new(v.shape(), v.data().iter().map(|&x| x.max(0.0)).collect())
            .expect("same shape");
        self.push(Op::Relu(a), value)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = DenseValue::new(v.shape(), v.data().iter().map(|&x| sigmoid(x)).collect())
            .expect("same shape");
        self.push(Op::Sigmoid(a), value)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a);
        let numel: usize = shape.iter().product();
        if numel != v.len() {
            return Err(AdsError::dim("reshape", v.shape(), shape));
        }
        let value = v.reshaped(shape)?;
        Ok(self.push(Op::Reshape(a), value))
    }

    /// Repeats every row of `x: [..., R, C]` `times` times in place,
    /// giving `[..., R·times, C]`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if times == 0 || s.len() < 2 {
            return Err(AdsError::dim("repeat_rows", &s, &[times]));
        }
        let c = s[s.len() - 1];
        let rows = self.value(x).len() / c;
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(src.len() * times);
        for r in 0..rows {
            for _ in 0..times {
                out.extend_from_slice(&src[r * c..(r + 1) * c]);
            }
        }
        let mut shape = s.clone();
        let n = shape.len();
        shape[n - 2] *= times;
        let value = DenseValue::new(&shape, out)?;
        Ok(self.push(Op::RepeatRows { x, times }, value))
    }

    /// Stacks `x: [n]` into `[times × n]`.
    pub fn tile(&mut self, x: Var, times: usize) -> Result<Var> {
        let n = self.value(x).len();
        let row = self.reshape(x, &[1, n])?;
        self.repeat_rows(row, times)
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| AdsError::Validation("concat of nothing".into()))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(AdsError::dim("concat", self.shape(first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = DenseValue::new(&shape, out)?;
        Ok(self.push(Op::Concat(parts.to_vec()), value))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), DenseValue::scalar(s))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, None)
    }

    /// Softmax over the last axis with positions where `mask` is false
    /// forced to [`MASK_SENTINEL`]. The mask covers `[G, T]` and is shared
    /// by consecutive groups of rows of `x` (e.g. heads of one sample).
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        self.softmax_impl(x, Some(mask.to_vec()))
    }

    fn softmax_impl(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var> {
        let v = self.value(x);
        let t = v.last_dim();
        let rows = v.len() / t;
        let per_mask_row = match &mask {
            Some(m) => {
                if m.len() % t != 0 || m.is_empty() || !rows.is_multiple_of(m.len() / t) {
                    return Err(AdsError::dim("masked_softmax", v.shape(), &[m.len()]));
                }
                rows / (m.len() / t)
            }
            None => rows,
        };
        let mut out = vec![0.0; v.len()];
        let mut logits = vec![0.0; t];
        for r in 0..rows {
            let src = &v.data()[r * t..(r + 1) * t];
            logits.copy_from_slice(src);
            if let Some(m) = &mask {
                let mrow = &m[(r / per_mask_row) * t..(r / per_mask_row + 1) * t];
                for (l, &keep) in logits.iter_mut().zip(mrow) {
                    if !keep {
                        *l = MASK_SENTINEL;
                    }
                }
            }
            if logits.iter().all(|&l| l <= MASK_SENTINEL) {
                return Err(AdsError::Degenerate(format!(
                    "softmax row {r} has every position masked"
                )));
            }
            kernels::softmax_row(&logits, &mut out[r * t..(r + 1) * t]);
        }
        let value = DenseValue::new(v.shape(), out)?;
        Ok(self.push(Op::Softmax { x, mask }, value))
    }

    /// Position-wise attention logits: for `q, k: [B, T, H·d]`,
    /// returns `[B, H, T]` with entry `scale · ⟨q[b,t,h], k[b,t,h]⟩`.
    pub fn diag_logits(&mut self, q: Var, k: Var, heads: usize, scale: f64) -> Result<Var> {
        self.same_shape("diag_logits", q, k)?;
        let s = self.shape(q).to_vec();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return Err(AdsError::dim("diag_logits", &s, &[heads]));
        }
        let (bsz, t, w) = (s[0], s[1], s[2]);
        let d = w / heads;
        let (qd, kd) = (self.value(q).data(), self.value(k).data());
        let mut out = vec![0.0; bsz * heads * t];
        for b in 0..bsz {
            for h in 0..heads {
                for p in 0..t {
                    let off = (b * t + p) * w + h * d;
                    let dot: f64 = (0..d).map(|a| qd[off + a] * kd[off + a]).sum();
                    out[(b * heads + h) * t + p] = scale * dot;
                }
            }
        }
        let value = DenseValue::new(&[bsz, heads, t], out)?;
        Ok(self.push(Op::DiagLogits { q, k, heads, scale }, value))
    }

    /// Attention-weighted sum: `w: [B, H, T]`, `v: [B, T, H·d]` → `[B, H·d]`
    /// with heads concatenated in order.
    pub fn attn_pool(&mut self, w: Var, v: Var) -> Result<Var> {
        let (sw, sv) = (self.shape(w).to_vec(), self.shape(v).to_vec());
        if sw.len() != 3 || sv.len() != 3 || sw[0] != sv[0] || sw[2] != sv[1] || sv[2] % sw[1] != 0
        {
            return Err(AdsError::dim("attn_pool", &sw, &sv));
        }
        let (bsz, heads, t, width) = (sw[0], sw[1], sw[2], sv[2]);
        let d = width / heads;
        let (wd, vd) = (self.value(w).data(), self.value(v).data());
        let mut out = vec![0.0; bsz * width];
        for b in 0..bsz {
            for h in 0..heads {
                for p in 0..t {
                    let z = wd[(b * heads + h) * t + p];
                    let off = (b * t + p) * width + h * d;
                    for a in 0..d {
                        out[b * width + h * d + a] += z * vd[off + a];
                    }
                }
            }
        }
        let value = DenseValue::new(&[bsz, width], out)?;
        Ok(self.push(Op::AttnPool { w, v, heads }, value))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 labels.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != labels.len() {
            return Err(AdsError::dim("bce", pv.shape(), &[labels.len()]));
        }
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(AdsError::Validation(format!(
                "label {bad} is not 0 or 1"
            )));
        }
        let loss = kernels::bce(pv.data(), labels);
        Ok(self.push(
            Op::Bce {
                p,
                labels: labels.to_vec(),
            },
            DenseValue::scalar(loss),
        ))
    }

    /// Reverse accumulation from a scalar; allowed once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(AdsError::Graph(
                "backward already ran on this graph; run a new forward pass first".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(AdsError::dim("backward", self.shape(loss), &[1]));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![1.0]);

        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut out);
            }
            self.grads[i] = Some(g);
        }
        if self.precision == Precision::F32 {
            for g in out.grads.values_mut() {
                match g {
                    ParamGrad::Dense(d) => d.iter_mut().for_each(|x| *x = *x as f32 as f64),
                    ParamGrad::Rows(rows) => rows
                        .values_mut()
                        .flatten()
                        .for_each(|x| *x = *x as f32 as f64),
                }
            }
        }
        Ok(out)
    }

    fn propagate(&mut self, i: usize, g: &[f64], out: &mut Gradients) {
        #[cfg(test)]
        let relu_sign = if self.flip_relu_backward { -1.0 } else { 1.0 };
        #[cfg(not(test))]
        let relu_sign = 1.0;
        // Inputs always precede node i; only their adjoints are written.
        propagate(&self.nodes, &mut self.grads, i, g, out, relu_sign);
    }
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn propagate(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    i: usize,
    g: &[f64],
    out: &mut Gradients,
    relu_sign: f64,
) {
    let shape = |v: Var| nodes[v.0].value.shape();
    let data = |v: Var| nodes[v.0].value.data();
        match nodes[i].op {
            Op::Constant | Op::Leaf => {}
            Op::Param(id) => match out.grads.get_mut(&id) {
                Some(ParamGrad::Dense(acc)) => add_into(acc, g),
                _ => {
                    out.grads.insert(id, ParamGrad::Dense(g.to_vec()));
                }
            },
            Op::Gather { param, ref ids } => {
                let dim = nodes[i].value.last_dim();
                let entry = out
                    .grads
                    .entry(param)
                    .or_insert_with(|| ParamGrad::Rows(BTreeMap::new()));
                if let ParamGrad::Rows(rows) = entry {
                    for (k, &id) in ids.iter().enumerate() {
                        let row = rows.entry(id).or_insert_with(|| vec![0.0; dim]);
                        add_into(row, &g[k * dim..(k + 1) * dim]);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (shape(a)[0], shape(a)[1]);
                let n = shape(b)[1];
                let av = data(a);
                let bv = data(b);
                if let Some(ga) = acc(nodes, grads, a) {
                    kernels::matmul_nt_acc(g, bv, m, n, k, ga);
                }
                if let Some(gb) = acc(nodes, grads, b) {
                    kernels::matmul_tn_acc(av, g, m, k, n, gb);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = (shape(a)[0], shape(a)[1]);
                let n = shape(b)[0];
                let av = data(a);
                let bv = data(b);
                if let Some(ga) = acc(nodes, grads, a) {
                    // dA = dC · B
                    kernels::matmul_acc(g, bv, m, n, k, ga);
                }
                if let Some(gb) = acc(nodes, grads, b) {
                    // dB = dCᵀ · A
                    kernels::matmul_tn_acc(g, av, m, n, k, gb);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (shape(a)[0], shape(a)[1]);
                if let Some(ga) = acc(nodes, grads, a) {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::BatchMatMulNT(a, w) => {
                let sa = shape(a).to_vec();
                let (bsz, m, k) = (sa[0], sa[1], sa[2]);
                let n = shape(w)[1];
                let av = data(a);
                let wv = data(w);
                if let Some(ga) = acc(nodes, grads, a) {
                    for b in 0..bsz {
                        kernels::matmul_acc(
                            &g[b * m * n..(b + 1) * m * n],
                            &wv[b * n * k..(b + 1) * n * k],
                            m,
                            n,
                            k,
                            &mut ga[b * m * k..(b + 1) * m * k],
                        );
                    }
                }
                if let Some(gw) = acc(nodes, grads, w) {
                    for b in 0..bsz {
                        kernels::matmul_tn_acc(
                            &g[b * m * n..(b + 1) * m * n],
                            &av[b * m * k..(b + 1) * m * k],
                            m,
                            n,
                            k,
                            &mut gw[b * n * k..(b + 1) * n * k],
                        );
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = acc(nodes, grads, a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc(nodes, grads, b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = acc(nodes, grads, a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc(nodes, grads, b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::AddRow(a, b) => {
                if let Some(ga) = acc(nodes, grads, a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc(nodes, grads, b) {
                    let n = gb.len();
                    for (j, &y) in g.iter().enumerate() {
                        gb[j % n] += y;
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = data(a);
                let bv = data(b);
                if let Some(ga) = acc(nodes, grads, a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                }
                if let Some(gb) = acc(nodes, grads, b) {
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                }
            }
            Op::MulRow(a, b) => {
                let av = data(a);
                let bv = data(b);
                let n = bv.len();
                if let Some(ga) = acc(nodes, grads, a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j % n];
                    }
                }
                if let Some(gb) = acc(nodes, grads, b) {
                    for j in 0..g.len() {
                        gb[j % n] += g[j] * av[j];
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(ga) = acc(nodes, grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += f * y);
                }
            }
            Op::Relu(a) => {
                let xv = data(a);
                let sign = relu_sign;
                if let Some(ga) = acc(nodes, grads, a) {
                    for j in 0..g.len() {
                        if xv[j] > 0.0 {
                            ga[j] += sign * g[j];
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                let yv = nodes[i].value.data();
                if let Some(ga) = acc(nodes, grads, a) {
                    for j in 0..g.len() {
                        ga[j] += g[j] * yv[j] * (1.0 - yv[j]);
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = acc(nodes, grads, a) {
                    add_into(ga, g);
                }
            }
            Op::RepeatRows { x, times } => {
                let c = nodes[x.0].value.last_dim();
                if let Some(gx) = acc(nodes, grads, x) {
                    let rows = gx.len() / c;
                    for r in 0..rows {
                        for rep in 0..times {
                            let src = (r * times + rep) * c;
                            for j in 0..c {
                                gx[r * c + j] += g[src + j];
                            }
                        }
                    }
                }
            }
            Op::Concat(ref parts) => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|p| nodes[p.0].value.last_dim())
                    .collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if let Some(gp) = acc(nodes, grads, p) {
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = acc(nodes, grads, a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Softmax { x, ref mask } => {
                let yv = nodes[i].value.data();
                let t = nodes[i].value.last_dim();
                let rows = yv.len() / t;
                let per_mask_row = mask.as_ref().map_or(rows, |m| rows / (m.len() / t));
                if let Some(gx) = acc(nodes, grads, x) {
                    for r in 0..rows {
                        let y = &yv[r * t..(r + 1) * t];
                        let gy = &g[r * t..(r + 1) * t];
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for p in 0..t {
                            let masked = mask
                                .as_ref()
                                .is_some_and(|m| !m[(r / per_mask_row) * t + p]);
                            if !masked {
                                gx[r * t + p] += y[p] * (gy[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::DiagLogits {
                q,
                k,
                heads,
                scale,
            } => {
                let s = shape(q).to_vec();
                let (bsz, t, w) = (s[0], s[1], s[2]);
                let d = w / heads;
                let qv = data(q);
                let kv = data(k);
                for (target, other) in [(q, &kv), (k, &qv)] {
                    if let Some(gt) = acc(nodes, grads, target) {
                        for b in 0..bsz {
                            for h in 0..heads {
                                for p in 0..t {
                                    let gl = scale * g[(b * heads + h) * t + p];
                                    let off = (b * t + p) * w + h * d;
                                    for a in 0..d {
                                        gt[off + a] += gl * other[off + a];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::AttnPool { w, v, heads } => {
                let sw = shape(w).to_vec();
                let (bsz, t) = (sw[0], sw[2]);
                let width = shape(v)[2];
                let d = width / heads;
                let wv = data(w);
                let vv = data(v);
                if let Some(gw) = acc(nodes, grads, w) {
                    for b in 0..bsz {
                        for h in 0..heads {
                            for p in 0..t {
                                let off = (b * t + p) * width + h * d;
                                let go = b * width + h * d;
                                let dot: f64 = (0..d).map(|a| g[go + a] * vv[off + a]).sum();
                                gw[(b * heads + h) * t + p] += dot;
                            }
                        }
                    }
                }
                if let Some(gv) = acc(nodes, grads, v) {
                    for b in 0..bsz {
                        for h in 0..heads {
                            for p in 0..t {
                                let z = wv[(b * heads + h) * t + p];
                                let off = (b * t + p) * width + h * d;
                                let go = b * width + h * d;
                                for a in 0..d {
                                    gv[off + a] += z * g[go + a];
                                }
                            }
                        }
                    }
                }
            }
            Op::Bce { p, ref labels } => {
                let pv = data(p);
                if let Some(gp) = acc(nodes, grads, p) {
                    kernels::bce_grad_acc(pv, labels, g[0], gp);
                }
            }
        }
}


impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn inputs_of(op: &Op) -> Vec<Var> {
    match *op {
        Op::Constant | Op::Leaf | Op::Param(_) | Op::Gather { .. } => vec![],
        Op::MatMul(a, b)
        | Op::MatMulNT(a, b)
        | Op::BatchMatMulNT(a, b)
        | Op::Add(a, b)
        | Op::AddRow(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::MulRow(a, b) => vec![a, b],
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Reshape(a)
        | Op::Sum(a) => vec![a],
        Op::RepeatRows { x, .. } | Op::Softmax { x, .. } => vec![x],
        Op::Concat(ref parts) => parts.clone(),
        Op::DiagLogits { q, k, .. } => vec![q, k],
        Op::AttnPool { w, v, .. } => vec![w, v],
        Op::Bce { p, .. } => vec![p],
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
