//! Wengert tape: forward ops recorded in order, gradients by reverse replay.
//!
//! A tape lives for one training step. Leaves are inputs or named
//! parameters; every op pushes a node whose inputs precede it, so the tape
//! order is already topological. Gradients accumulate by summation when a
//! value fans out, and recorded tensors are never mutated in place.

use std::collections::BTreeMap;
use std::sync::Arc;

use super::{Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Operation identifier for the generic [`Tape::apply`] surface.
///
/// Attributed ops carry their attributes; everything else is input-only.
#[derive(Debug, Clone)]
pub enum OpId {
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    MatMul,
    Transpose,
    Reshape(Vec<usize>),
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Sum,
    Mean,
    Softmax,
    LayerNorm,
    Gelu,
    Embed(Arc<Vec<usize>>),
    Mse,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScalarMul(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize, len: usize },
    Sum(usize),
    Mean(usize),
    Softmax(usize),
    /// Saves the per-row reciprocal standard deviation.
    LayerNorm { input: usize, rstd: Vec<f64> },
    Gelu(usize),
    Embed { table: usize, indices: Arc<Vec<usize>> },
    Mse(usize, usize),
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op,
    param: Option<String>,
}

/// Result of a backward pass.
pub struct Gradients<T: Scalar> {
    by_node: Vec<Option<Tensor<T>>>,
    params: Vec<(String, usize)>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to any node; `None` if no gradient flowed.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient map for all registered parameters. Parameters the loss does
    /// not reach get zero gradients; a name bound as several leaf nodes is
    /// one parameter, so its per-node gradients sum.
    pub fn into_param_map(mut self) -> BTreeMap<String, Tensor<T>> {
        let mut out: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for (name, idx) in std::mem::take(&mut self.params) {
            let g = self.by_node[idx]
                .take()
                .unwrap_or_else(|| Tensor::zeros(&self.shapes[idx]));
            match out.get_mut(&name) {
                Some(acc) => {
                    *acc = acc.zip(&g, |a, b| a + b).expect("same-name shapes agree");
                }
                None => {
                    out.insert(name, g);
                }
            }
        }
        out
    }
}

const GELU_S: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn detach(&self, v: Var) -> Tensor<T> {
        self.nodes[v.0].value.clone()
    }

    /// Record a constant/input leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, None)
    }

    /// Record a named parameter leaf; its gradient appears in the param map.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, Some(name.into()))
    }

    fn push(&mut self, value: Tensor<T>, op: Op, param: Option<String>) -> Var {
        self.nodes.push(Node { value, op, param });
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    // ── Elementwise binary ops (equal shapes, scalar, or suffix broadcast) ──

    fn binary_shapes(
        op: &'static str,
        lhs: &[usize],
        rhs: &[usize],
    ) -> Result<Vec<usize>> {
        let ln: usize = lhs.iter().product();
        let rn: usize = rhs.iter().product();
        if lhs == rhs {
            return Ok(lhs.to_vec());
        }
        if rn == 1 {
            return Ok(lhs.to_vec());
        }
        if ln == 1 {
            return Ok(rhs.to_vec());
        }
        // Suffix broadcast: the smaller operand's shape must equal the
        // trailing extents of the larger one.
        if rhs.len() < lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs {
            return Ok(lhs.to_vec());
        }
        if lhs.len() < rhs.len() && rhs[rhs.len() - lhs.len()..] == *lhs {
            return Ok(rhs.to_vec());
        }
        Err(Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        })
    }

    fn binary(
        &mut self,
        opname: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        make: impl Fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let out_shape = Self::binary_shapes(opname, self.val(a).shape(), self.val(b).shape())?;
        let (av, bv) = (self.val(a), self.val(b));
        let (an, bn) = (av.numel(), bv.numel());
        let n: usize = out_shape.iter().product();
        let (ad, bd) = (av.data(), bv.data());
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            data.push(f(ad[i % an], bd[i % bn]));
        }
        let out = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push(out, make(a.0, b.0), None))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scalar_mul(&mut self, x: Var, c: f64) -> Result<Var> {
        let s = T::from_f64(c);
        let out = self.val(x).scale(s);
        Ok(self.push(out, Op::ScalarMul(x.0, c), None))
    }

    // ── Linear algebra ──

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.val(a).shape().to_vec(), self.val(b).shape().to_vec());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ash,
                rhs: bsh,
            });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let mut out = vec![T::ZERO; m * n];
        T::gemm(m, k, n, self.val(a).data(), self.val(b).data(), &mut out, T::ZERO);
        let out = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(out, Op::MatMul(a.0, b.0), None))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let sh = self.val(x).shape().to_vec();
        if sh.len() != 2 {
            return Err(Error::invalid(
                "transpose",
                format!("expected rank 2, got shape {:?}", sh),
            ));
        }
        let out = transpose2(self.val(x));
        Ok(self.push(out, Op::Transpose(x.0), None))
    }

    // ── Shape ops ──

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(x).reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x.0), None))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::invalid("concat", "no inputs"));
        }
        let first = self.val(inputs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {} out of range for shape {:?}", axis, first),
            ));
        }
        let mut axis_total = 0;
        for &v in inputs {
            let sh = self.val(v).shape();
            if sh.len() != first.len()
                || sh.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: sh.to_vec(),
                });
            }
            axis_total += sh[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![T::ZERO; out_shape.iter().product()];
        let row = axis_total * inner;
        let mut offset = 0;
        for &v in inputs {
            let sh = self.val(v).shape();
            let a = sh[axis];
            let src = self.val(v).data();
            for o in 0..outer {
                let dst_base = o * row + offset * inner;
                let src_base = o * a * inner;
                data[dst_base..dst_base + a * inner]
                    .copy_from_slice(&src[src_base..src_base + a * inner]);
            }
            offset += a;
        }
        let out = Tensor::from_vec(&out_shape, data)?;
        let ids = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(out, Op::Concat { inputs: ids, axis }, None))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sh = self.val(x).shape().to_vec();
        if axis >= sh.len() || start + len > sh[axis] || len == 0 {
            return Err(Error::invalid(
                "slice",
                format!(
                    "range {}..{} on axis {} invalid for shape {:?}",
                    start,
                    start + len,
                    axis,
                    sh
                ),
            ));
        }
        let outer: usize = sh[..axis].iter().product();
        let inner: usize = sh[axis + 1..].iter().product();
        let mut out_shape = sh.clone();
        out_shape[axis] = len;
        let src = self.val(x).data();
        let mut data = vec![T::ZERO; outer * len * inner];
        for o in 0..outer {
            let src_base = (o * sh[axis] + start) * inner;
            let dst_base = o * len * inner;
            data[dst_base..dst_base + len * inner]
                .copy_from_slice(&src[src_base..src_base + len * inner]);
        }
        let out = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push(out, Op::Slice { input: x.0, axis, start, len }, None))
    }

    // ── Reductions ──

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self
            .val(x)
            .data()
            .iter()
            .fold(T::ZERO, |acc, &v| acc + v);
        Ok(self.push(Tensor::scalar(total), Op::Sum(x.0), None))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.val(x).numel();
        let total = self
            .val(x)
            .data()
            .iter()
            .fold(T::ZERO, |acc, &v| acc + v);
        let m = total * T::from_f64(1.0 / n as f64);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x.0), None))
    }

    // ── Normalizations and activations ──

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x);
        if !xv.all_finite() {
            return Err(Error::NonFinite { op: "softmax" });
        }
        let sh = xv.shape().to_vec();
        let cols = *sh.last().ok_or_else(|| Error::invalid("softmax", "rank 0"))?;
        let rows = xv.numel() / cols;
        let mut data = vec![T::ZERO; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * cols..(r + 1) * cols];
            let mx = row.iter().fold(row[0], |a, &b| a.max(b));
            let mut denom = T::ZERO;
            for (i, &v) in row.iter().enumerate() {
                let e = (v - mx).exp();
                data[r * cols + i] = e;
                denom = denom + e;
            }
            let inv = T::ONE / denom;
            for d in &mut data[r * cols..(r + 1) * cols] {
                *d = *d * inv;
            }
        }
        let out = Tensor::from_vec(&sh, data)?;
        Ok(self.push(out, Op::Softmax(x.0), None))
    }

    /// Parameter-free layer norm over the last axis; scale and shift are
    /// applied by the caller with `mul`/`add`.
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let xv = self.val(x);
        if !xv.all_finite() {
            return Err(Error::NonFinite { op: "layer_norm" });
        }
        let sh = xv.shape().to_vec();
        let cols = *sh
            .last()
            .ok_or_else(|| Error::invalid("layer_norm", "rank 0"))?;
        let rows = xv.numel() / cols;
        let mut data = vec![T::ZERO; xv.numel()];
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv.data()[r * cols..(r + 1) * cols];
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / cols as f64;
            let var = row
                .iter()
                .map(|v| {
                    let d = v.to_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / cols as f64;
            let r_inv = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(r_inv);
            for (i, &v) in row.iter().enumerate() {
                data[r * cols + i] = T::from_f64((v.to_f64() - mean) * r_inv);
            }
        }
        let out = Tensor::from_vec(&sh, data)?;
        Ok(self.push(out, Op::LayerNorm { input: x.0, rstd }, None))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.val(x).map(|v| {
            let x = v.to_f64();
            let u = GELU_S * (x + GELU_C * x * x * x);
            T::from_f64(0.5 * x * (1.0 + u.tanh()))
        });
        Ok(self.push(out, Op::Gelu(x.0), None))
    }

    /// Gather rows of `table` at `indices`. The table may be any tape node;
    /// the backward rule scatter-adds into it, so repeated indices sum.
    pub fn embed(&mut self, table: Var, indices: Arc<Vec<usize>>) -> Result<Var> {
        let tv = self.val(table);
        let sh = tv.shape();
        if sh.len() != 2 {
            return Err(Error::invalid(
                "embed",
                format!("table must be rank 2, got {:?}", sh),
            ));
        }
        let (v, d) = (sh[0], sh[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(
                "embed",
                format!("index {} out of range for table with {} rows", bad, v),
            ));
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices.iter() {
            data.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let out = Tensor::from_vec(&[indices.len(), d], data)?;
        Ok(self.push(out, Op::Embed { table: table.0, indices }, None))
    }

    /// Mean squared error between equal-shaped tensors; scalar output.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.shape() != bv.shape() {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let n = av.numel();
        let mut acc = 0.0_f64;
        for (x, y) in av.data().iter().zip(bv.data()) {
            let d = x.to_f64() - y.to_f64();
            acc += d * d;
        }
        let out = Tensor::scalar(T::from_f64(acc / n as f64));
        Ok(self.push(out, Op::Mse(a.0, b.0), None))
    }

    /// Generic dispatch over the op set; the typed methods above are the
    /// primary surface, this one exists for uniform op-level testing.
    pub fn apply(&mut self, op: OpId, inputs: &[Var]) -> Result<Var> {
        let need = |n: usize| -> Result<()> {
            if inputs.len() != n {
                Err(Error::invalid("apply", format!("expected {} inputs", n)))
            } else {
                Ok(())
            }
        };
        match op {
            OpId::Add => {
                need(2)?;
                self.add(inputs[0], inputs[1])
            }
            OpId::Sub => {
                need(2)?;
                self.sub(inputs[0], inputs[1])
            }
            OpId::Mul => {
                need(2)?;
                self.mul(inputs[0], inputs[1])
            }
            OpId::ScalarMul(c) => {
                need(1)?;
                self.scalar_mul(inputs[0], c)
            }
            OpId::MatMul => {
                need(2)?;
                self.matmul(inputs[0], inputs[1])
            }
            OpId::Transpose => {
                need(1)?;
                self.transpose(inputs[0])
            }
            OpId::Reshape(sh) => {
                need(1)?;
                self.reshape(inputs[0], &sh)
            }
            OpId::Concat { axis } => self.concat(inputs, axis),
            OpId::Slice { axis, start, len } => {
                need(1)?;
                self.slice(inputs[0], axis, start, len)
            }
            OpId::Sum => {
                need(1)?;
                self.sum(inputs[0])
            }
            OpId::Mean => {
                need(1)?;
                self.mean(inputs[0])
            }
            OpId::Softmax => {
                need(1)?;
                self.softmax(inputs[0])
            }
            OpId::LayerNorm => {
                need(1)?;
                self.layer_norm(inputs[0])
            }
            OpId::Gelu => {
                need(1)?;
                self.gelu(inputs[0])
            }
            OpId::Embed(indices) => {
                need(1)?;
                self.embed(inputs[0], indices)
            }
            OpId::Mse => {
                need(2)?;
                self.mse(inputs[0], inputs[1])
            }
        }
    }

    // ── Backward ──

    /// Reverse-mode gradients of a scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::invalid("backward", "loss is not on this tape"));
        }
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), T::ONE));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.as_ref().map(|p| (p.clone(), i)))
            .collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            by_node: grads,
            params,
            shapes,
        })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor<T>>],
        node: usize,
        delta: Tensor<T>,
    ) -> Result<()> {
        match &mut grads[node] {
            Some(g) => {
                *g = g.zip(&delta, |a, b| a + b)?;
            }
            None => grads[node] = Some(delta),
        }
        Ok(())
    }

    /// Reduce an output-shaped gradient back to an operand's shape under the
    /// broadcast rules of the binary ops.
    fn reduce_to(&self, g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
        if g.shape() == shape {
            return g.clone();
        }
        let n: usize = shape.iter().product();
        let mut data = vec![T::ZERO; n];
        for (i, &v) in g.data().iter().enumerate() {
            data[i % n] += v;
        }
        Tensor::from_vec(shape, data).expect("reduce_to shape")
    }

    fn backward_node(
        &self,
        idx: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => Ok(()),
            Op::Add(a, b) => {
                let da = self.reduce_to(g, self.nodes[*a].value.shape());
                self.accumulate(grads, *a, da)?;
                let db = self.reduce_to(g, self.nodes[*b].value.shape());
                self.accumulate(grads, *b, db)
            }
            Op::Sub(a, b) => {
                let da = self.reduce_to(g, self.nodes[*a].value.shape());
                self.accumulate(grads, *a, da)?;
                let db = self.reduce_to(g, self.nodes[*b].value.shape()).scale(-T::ONE);
                self.accumulate(grads, *b, db)
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (an, bn) = (av.numel(), bv.numel());
                let gd = g.data();
                let mut da = vec![T::ZERO; an];
                let mut db = vec![T::ZERO; bn];
                for (i, &gv) in gd.iter().enumerate() {
                    da[i % an] += gv * bv.data()[i % bn];
                    db[i % bn] += gv * av.data()[i % an];
                }
                self.accumulate(grads, *a, Tensor::from_vec(av.shape(), da)?)?;
                self.accumulate(grads, *b, Tensor::from_vec(bv.shape(), db)?)
            }
            Op::ScalarMul(x, c) => {
                self.accumulate(grads, *x, g.scale(T::from_f64(*c)))
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                // dA = g · Bᵀ
                let bt = transpose2(bv);
                let mut da = vec![T::ZERO; m * k];
                T::gemm(m, n, k, g.data(), bt.data(), &mut da, T::ZERO);
                self.accumulate(grads, *a, Tensor::from_vec(&[m, k], da)?)?;
                // dB = Aᵀ · g
                let at = transpose2(av);
                let mut db = vec![T::ZERO; k * n];
                T::gemm(k, m, n, at.data(), g.data(), &mut db, T::ZERO);
                self.accumulate(grads, *b, Tensor::from_vec(&[k, n], db)?)
            }
            Op::Transpose(x) => self.accumulate(grads, *x, transpose2(g)),
            Op::Reshape(x) => {
                let sh = self.nodes[*x].value.shape().to_vec();
                self.accumulate(grads, *x, g.reshaped(&sh)?)
            }
            Op::Concat { inputs, axis } => {
                let axis = *axis;
                let gsh = g.shape();
                let outer: usize = gsh[..axis].iter().product();
                let inner: usize = gsh[axis + 1..].iter().product();
                let total = gsh[axis];
                let mut offset = 0;
                for &inp in inputs {
                    let ish = self.nodes[inp].value.shape().to_vec();
                    let a = ish[axis];
                    let mut data = vec![T::ZERO; outer * a * inner];
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * a * inner;
                        data[dst..dst + a * inner]
                            .copy_from_slice(&g.data()[src..src + a * inner]);
                    }
                    offset += a;
                    self.accumulate(grads, inp, Tensor::from_vec(&ish, data)?)?;
                }
                Ok(())
            }
            Op::Slice { input, axis, start, len } => {
                let ish = self.nodes[*input].value.shape().to_vec();
                let outer: usize = ish[..*axis].iter().product();
                let inner: usize = ish[*axis + 1..].iter().product();
                let mut data = vec![T::ZERO; self.nodes[*input].value.numel()];
                for o in 0..outer {
                    let dst = (o * ish[*axis] + start) * inner;
                    let src = o * len * inner;
                    data[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *input, Tensor::from_vec(&ish, data)?)
            }
            Op::Sum(x) => {
                let sh = self.nodes[*x].value.shape().to_vec();
                self.accumulate(grads, *x, Tensor::filled(&sh, g.scalar_value()))
            }
            Op::Mean(x) => {
                let n = self.nodes[*x].value.numel();
                let sh = self.nodes[*x].value.shape().to_vec();
                let v = g.scalar_value() * T::from_f64(1.0 / n as f64);
                self.accumulate(grads, *x, Tensor::filled(&sh, v))
            }
            Op::Softmax(x) => {
                // dx = y ⊙ (g − ⟨g, y⟩) per row, where y is the output.
                let y = &self.nodes[idx].value;
                let cols = *y.shape().last().unwrap();
                let rows = y.numel() / cols;
                let mut data = vec![T::ZERO; y.numel()];
                for r in 0..rows {
                    let ys = &y.data()[r * cols..(r + 1) * cols];
                    let gs = &g.data()[r * cols..(r + 1) * cols];
                    let dot = ys
                        .iter()
                        .zip(gs)
                        .map(|(&a, &b)| a.to_f64() * b.to_f64())
                        .sum::<f64>();
                    for i in 0..cols {
                        data[r * cols + i] =
                            T::from_f64(ys[i].to_f64() * (gs[i].to_f64() - dot));
                    }
                }
                let sh = y.shape().to_vec();
                self.accumulate(grads, *x, Tensor::from_vec(&sh, data)?)
            }
            Op::LayerNorm { input, rstd } => {
                // dx = r·(g − mean(g) − y·mean(g ⊙ y)) per row.
                let y = &self.nodes[idx].value;
                let cols = *y.shape().last().unwrap();
                let rows = y.numel() / cols;
                let mut data = vec![T::ZERO; y.numel()];
                for r in 0..rows {
                    let ys = &y.data()[r * cols..(r + 1) * cols];
                    let gs = &g.data()[r * cols..(r + 1) * cols];
                    let gmean = gs.iter().map(|v| v.to_f64()).sum::<f64>() / cols as f64;
                    let gymean = ys
                        .iter()
                        .zip(gs)
                        .map(|(&a, &b)| a.to_f64() * b.to_f64())
                        .sum::<f64>()
                        / cols as f64;
                    for i in 0..cols {
                        let v = rstd[r]
                            * (gs[i].to_f64() - gmean - ys[i].to_f64() * gymean);
                        data[r * cols + i] = T::from_f64(v);
                    }
                }
                let sh = y.shape().to_vec();
                self.accumulate(grads, *input, Tensor::from_vec(&sh, data)?)
            }
            Op::Gelu(x) => {
                let xv = &self.nodes[*x].value;
                let mut data = vec![T::ZERO; xv.numel()];
                for (i, &v) in xv.data().iter().enumerate() {
                    let x = v.to_f64();
                    let u = GELU_S * (x + GELU_C * x * x * x);
                    let t = u.tanh();
                    let du = GELU_S * (1.0 + 3.0 * GELU_C * x * x);
                    let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                    data[i] = T::from_f64(g.data()[i].to_f64() * d);
                }
                let sh = xv.shape().to_vec();
                self.accumulate(grads, *x, Tensor::from_vec(&sh, data)?)
            }
            Op::Embed { table, indices } => {
                let tsh = self.nodes[*table].value.shape().to_vec();
                let d = tsh[1];
                let mut data = vec![T::ZERO; tsh[0] * d];
                for (row, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        data[i * d + j] += g.data()[row * d + j];
                    }
                }
                self.accumulate(grads, *table, Tensor::from_vec(&tsh, data)?)
            }
            Op::Mse(a, b) => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let n = av.numel();
                let scale = 2.0 / n as f64 * g.scalar_value().to_f64();
                let mut da = vec![T::ZERO; n];
                let mut db = vec![T::ZERO; n];
                for i in 0..n {
                    let d = (av.data()[i].to_f64() - bv.data()[i].to_f64()) * scale;
                    da[i] = T::from_f64(d);
                    db[i] = T::from_f64(-d);
                }
                self.accumulate(grads, *a, Tensor::from_vec(av.shape(), da)?)?;
                self.accumulate(grads, *b, Tensor::from_vec(bv.shape(), db)?)
            }
        }
    }
}

fn transpose2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (x.shape()[0], x.shape()[1]);
    let mut data = vec![T::ZERO; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = x.data()[i * c + j];
        }
    }
    Tensor::from_vec(&[c, r], data).expect("transpose shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], vals: &[f64]) -> Tensor<f64> {
        Tensor::from_f64_slice(shape, vals).unwrap()
    }

    #[test]
    fn add_componentwise() {
        let mut tape = Tape::new();
        let a = tape.leaf(t64(&[2], &[1.0, 2.0]));
        let b = tape.leaf(t64(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2, 3], &[0.3, -1.0, 2.0, 5.0, 5.0, 5.0]));
        let y = tape.softmax(x).unwrap();
        for r in 0..2 {
            let s: f64 = tape.value(y).data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row sum {}", s);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2], &[f64::NAN, 0.0]));
        assert!(matches!(
            tape.softmax(x),
            Err(crate::Error::NonFinite { .. })
        ));
    }

    #[test]
    fn matmul_matches_triple_loop_reference() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let a = Tensor::<f64>::randn(&[2, 3], &mut rng);
        let b = Tensor::<f64>::randn(&[3, 2], &mut rng);
        // Independent oracle: hand-expanded dot products.
        let mut expect = [0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..3 {
                    expect[i * 2 + j] += a.data()[i * 3 + k] * b.data()[k * 2 + j];
                }
            }
        }
        let mut tape = Tape::new();
        let av = tape.leaf(a);
        let bv = tape.leaf(b);
        let c = tape.matmul(av, bv).unwrap();
        for (got, want) in tape.value(c).data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_rejects_mismatched_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(crate::Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected shape mismatch, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::new();
        let x = tape.param("x", t64(&[1], &[3.0]));
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn mse_gradient_mean_convention() {
        let mut tape = Tape::new();
        let x = tape.param("x", t64(&[2], &[1.0, 1.0]));
        let zero = tape.leaf(Tensor::zeros(&[2]));
        let loss = tape.mse(x, zero).unwrap();
        let grads = tape.backward(loss).unwrap();
        // d mean((x-0)^2) / dx = 2x/N = [1, 1]
        assert_eq!(grads.wrt(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.param("x", t64(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn unreachable_params_get_zero_grads() {
        let mut tape = Tape::new();
        let x = tape.param("x", t64(&[1], &[2.0]));
        let _unused = tape.param("unused", t64(&[3], &[1.0, 1.0, 1.0]));
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let map = tape.backward(loss).unwrap().into_param_map();
        assert_eq!(map["unused"].data(), &[0.0, 0.0, 0.0]);
        assert_eq!(map["x"].data(), &[4.0]);
    }

    #[test]
    fn fanout_accumulates_by_summation() {
        let mut tape = Tape::new();
        let x = tape.param("x", t64(&[1], &[5.0]));
        let a = tape.add(x, x).unwrap(); // 2x
        let loss = tape.sum(a).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).unwrap().data(), &[2.0]);
    }

    #[test]
    fn suffix_broadcast_add_reduces_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2, 3], &[0.0; 6]));
        let b = tape.param("b", t64(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.add(x, b).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 3]);
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_slice_round_trip_gradient() {
        let mut tape = Tape::new();
        let a = tape.param("a", t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.param("b", t64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 4]);
        let s = tape.slice(c, 1, 2, 2).unwrap();
        assert_eq!(tape.value(s).data(), &[5.0, 6.0, 7.0, 8.0]);
        let loss = tape.sum(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.wrt(a).unwrap().data(), &[0.0; 4]);
        assert_eq!(grads.wrt(b).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn embed_scatter_adds_repeated_indices() {
        let mut tape = Tape::new();
        let table = tape.param("t", t64(&[3, 2], &[0.0; 6]));
        let idx = Arc::new(vec![1usize, 1, 2]);
        let y = tape.embed(table, idx).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(
            grads.wrt(table).unwrap().data(),
            &[0.0, 0.0, 2.0, 2.0, 1.0, 1.0]
        );
    }

    #[test]
    fn determinism_bit_identical_repeat() {
        use rand::SeedableRng;
        let run = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
            let mut tape = Tape::<f32>::new();
            let x = tape.param("x", Tensor::randn(&[4, 4], &mut rng));
            let w = tape.param("w", Tensor::randn(&[4, 4], &mut rng));
            let h = tape.matmul(x, w).unwrap();
            let h = tape.gelu(h).unwrap();
            let n = tape.layer_norm(h).unwrap();
            let loss = tape.mean(n).unwrap();
            let grads = tape.backward(loss).unwrap();
            (
                tape.value(loss).data().to_vec(),
                grads.wrt(w).unwrap().data().to_vec(),
            )
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }
}
