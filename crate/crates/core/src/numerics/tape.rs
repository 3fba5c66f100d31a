//! Reverse-mode differentiation over a linear tape of array ops.
//!
//! Every op records its inputs and whatever forward state its backward
//! rule needs. [`Tape::backward`] walks the tape once in reverse and
//! returns a [`Gradients`] value; parameter gradients are folded into a
//! [`ParamStore`] with [`ParamStore::accumulate`].

use std::borrow::Cow;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::array::{gemm, gemm_strided, Array, MatRef};
use super::kernels::{self, AttnLayout};
use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    /// Every recorded value is rounded to the nearest `f32`.
    F32,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Constant,
    Variable,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    ScaleRows(Var, Vec<f64>),
    Silu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv: Vec<f64>,
    },
    Rope {
        x: Var,
        positions: Vec<usize>,
        head_dim: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: Vec<f64>,
    },
    Gather {
        sources: Vec<Var>,
        index: Vec<(usize, usize)>,
    },
    Sum(Var),
    Mean(Var),
    Mse {
        pred: Var,
        target: Array,
        weights: Vec<f64>,
        denom: f64,
    },
    BceLogits {
        logits: Var,
        labels: Vec<f64>,
        weights: Vec<f64>,
        denom: f64,
    },
}

struct Node<'p> {
    value: Cow<'p, Array>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node<'p>>,
    param_nodes: HashMap<ParamId, Var>,
    precision: Precision,
    matmul_flops: u64,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self::with_precision(store, Precision::F64)
    }

    pub fn with_precision(store: &'p ParamStore, precision: Precision) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            precision,
            matmul_flops: 0,
        }
    }

    /// Multiply-add FLOPs (2 per MAC) of every matrix product recorded so
    /// far, including the two products inside attention.
    pub fn matmul_flops(&self) -> u64 {
        self.matmul_flops
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array, op: Op, name: &'static str) -> Result<Var> {
        let mut value = value;
        if self.precision == Precision::F32 {
            value
                .data_mut()
                .iter_mut()
                .for_each(|x| *x = *x as f32 as f64);
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = match &op {
            Op::Constant => false,
            Op::Variable | Op::Param => true,
            _ => self.inputs_require_grad(&op),
        };
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn inputs_require_grad(&self, op: &Op) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Constant | Op::Variable | Op::Param => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddRow(a, b) => {
                rg(a) || rg(b)
            }
            Op::Scale(x, _) | Op::ScaleRows(x, _) | Op::Silu(x) | Op::Sum(x) | Op::Mean(x) => rg(x),
            Op::RmsNorm { x, gain, .. } => rg(x) || rg(gain),
            Op::Rope { x, .. } => rg(x),
            Op::Attention { q, k, v, .. } => rg(q) || rg(k) || rg(v),
            Op::Gather { sources, .. } => sources.iter().any(rg),
            Op::Mse { pred, .. } => rg(pred),
            Op::BceLogits { logits, .. } => rg(logits),
        }
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Array) -> Result<Var> {
        self.push(value, Op::Constant, "constant")
    }

    /// A free input whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, value: Array) -> Result<Var> {
        self.push(value, Op::Variable, "variable")
    }

    /// Borrows a stored parameter; repeated calls return the same handle.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(self.store.value(id)),
            op: Op::Param,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out = va.matmul(vb)?;
        self.matmul_flops += 2 * (va.rows() * va.cols() * vb.cols()) as u64;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Result<Var> {
        let out = self.value(x).scale(k);
        self.push(out, Op::Scale(x, k), "scale")
    }

    /// Adds the vector `row` (`C` elements) to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (self.value(x), self.value(row));
        if vr.len() != vx.cols() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", vx.shape(), vr.shape()),
            ));
        }
        let mut out = vx.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(vr.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(x, row), "add_row")
    }

    /// Multiplies row `r` of `x` by the constant `factors[r]`.
    pub fn scale_rows(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        let vx = self.value(x);
        if factors.len() != vx.rows() {
            return Err(Error::shape("scale_rows", "one factor per row required"));
        }
        let mut out = vx.clone();
        for (r, f) in factors.iter().enumerate() {
            out.row_mut(r).iter_mut().for_each(|v| *v *= f);
        }
        self.push(out, Op::ScaleRows(x, factors), "scale_rows")
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(kernels::silu);
        self.push(out, Op::Silu(x), "silu")
    }

    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (out, inv) = kernels::rmsnorm(self.value(x), self.value(gain))?;
        self.push(out, Op::RmsNorm { x, gain, inv }, "rmsnorm")
    }

    pub fn rope(&mut self, x: Var, positions: Vec<usize>, head_dim: usize) -> Result<Var> {
        let out = kernels::rope(self.value(x), &positions, head_dim, 1.0)?;
        self.push(
            out,
            Op::Rope {
                x,
                positions,
                head_dim,
            },
            "rope",
        )
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Result<Var> {
        let (out, probs) = kernels::attention(self.value(q), self.value(k), self.value(v), &layout)?;
        let t = layout.mask.length as u64;
        let rows = out.rows() as u64;
        let c = out.cols() as u64;
        // QK^T and PV, each 2·T²·C per segment.
        self.matmul_flops += 2 * 2 * rows * t * c;
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            "attention",
        )
    }

    /// Builds a `[index.len() × C]` array whose row `i` is row
    /// `index[i].1` of `sources[index[i].0]`.
    pub fn gather_rows(&mut self, sources: &[Var], index: Vec<(usize, usize)>) -> Result<Var> {
        let cols = match sources.first() {
            Some(&s) => self.value(s).cols(),
            None => return Err(Error::shape("gather_rows", "no sources")),
        };
        if sources.iter().any(|&s| self.value(s).cols() != cols) {
            return Err(Error::shape("gather_rows", "sources differ in width"));
        }
        let mut data = Vec::with_capacity(index.len() * cols);
        for &(s, r) in &index {
            let src = self
                .value(*sources.get(s).ok_or_else(|| Error::shape("gather_rows", "bad source"))?);
            if r >= src.rows() {
                return Err(Error::shape("gather_rows", format!("row {r} out of range")));
            }
            data.extend_from_slice(src.row(r));
        }
        let out = Array::new(&[index.len(), cols], data)?;
        self.push(
            out,
            Op::Gather {
                sources: sources.to_vec(),
                index,
            },
            "gather_rows",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Array::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let out = Array::scalar(self.value(x).mean());
        self.push(out, Op::Mean(x), "mean")
    }

    /// Weighted mean squared error against a constant target; each row's
    /// squared residual is weighted by `row_weights[r]` (all ones when
    /// `None`) and the total is divided by `Σw · C`.
    pub fn mse(&mut self, pred: Var, target: Array, row_weights: Option<Vec<f64>>) -> Result<Var> {
        let p = self.value(pred);
        p.expect_same_shape(&target, "mse")?;
        let weights = row_weights.unwrap_or_else(|| vec![1.0; p.rows()]);
        if weights.len() != p.rows() {
            return Err(Error::shape("mse", "one weight per row required"));
        }
        let denom = weights.iter().sum::<f64>() * p.cols() as f64;
        if denom <= 0.0 {
            return Err(Error::invalid("mse: total weight must be positive"));
        }
        let mut acc = 0.0;
        for (r, w) in weights.iter().enumerate() {
            for (a, b) in p.row(r).iter().zip(target.row(r)) {
                acc += w * (a - b) * (a - b);
            }
        }
        let out = Array::scalar(acc / denom);
        self.push(
            out,
            Op::Mse {
                pred,
                target,
                weights,
                denom,
            },
            "mse",
        )
    }

    /// Weighted mean binary cross-entropy of sigmoid(logits) vs labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: Vec<f64>, weights: Vec<f64>) -> Result<Var> {
        let l = self.value(logits);
        if labels.len() != l.len() || weights.len() != l.len() {
            return Err(Error::shape("bce_with_logits", "labels/weights length"));
        }
        let denom: f64 = weights.iter().sum();
        if denom <= 0.0 {
            return Err(Error::invalid("bce_with_logits: total weight must be positive"));
        }
        let acc: f64 = l
            .data()
            .iter()
            .zip(&labels)
            .zip(&weights)
            .map(|((&x, &y), &w)| w * (softplus(x) - y * x))
            .sum();
        let out = Array::scalar(acc / denom);
        self.push(
            out,
            Op::BceLogits {
                logits,
                labels,
                weights,
                denom,
            },
            "bce_with_logits",
        )
    }

    /// Runs the reverse sweep from the scalar `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(self.value(loss).shape(), 1.0));
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        let params = self
            .param_nodes
            .iter()
            .map(|(&id, &v)| (id, v.0))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, node: &Node, g: &Array, grads: &mut [Option<Array>]) -> Result<()> {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Constant | Op::Variable | Op::Param => {}
            &Op::MatMul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if needs(a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, MatRef::new(g.data(), n, false), MatRef::new(vb.data(), n, true), &mut da, 0.0);
                    accumulate(grads, a, Array::new(va.shape(), da)?)?;
                }
                if needs(b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, MatRef::new(va.data(), k, true), MatRef::new(g.data(), n, false), &mut db, 0.0);
                    accumulate(grads, b, Array::new(vb.shape(), db)?)?;
                }
            }
            &Op::Add(a, b) => {
                if needs(a) {
                    accumulate(grads, a, g.clone())?;
                }
                if needs(b) {
                    accumulate(grads, b, g.clone())?;
                }
            }
            &Op::Sub(a, b) => {
                if needs(a) {
                    accumulate(grads, a, g.clone())?;
                }
                if needs(b) {
                    accumulate(grads, b, g.scale(-1.0))?;
                }
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    accumulate(grads, a, g.zip_map(self.value(b), "mul", |x, y| x * y)?)?;
                }
                if needs(b) {
                    accumulate(grads, b, g.zip_map(self.value(a), "mul", |x, y| x * y)?)?;
                }
            }
            &Op::Scale(x, k) => accumulate(grads, x, g.scale(k))?,
            &Op::AddRow(x, row) => {
                if needs(x) {
                    accumulate(grads, x, g.clone())?;
                }
                if needs(row) {
                    let vr = self.value(row);
                    let mut dr = Array::zeros(vr.shape());
                    for r in 0..g.rows() {
                        for (d, v) in dr.data_mut().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    accumulate(grads, row, dr)?;
                }
            }
            Op::ScaleRows(x, factors) => {
                let mut dx = g.clone();
                for (r, f) in factors.iter().enumerate() {
                    dx.row_mut(r).iter_mut().for_each(|v| *v *= f);
                }
                accumulate(grads, *x, dx)?;
            }
            &Op::Silu(x) => {
                let dx = self.value(x).zip_map(g, "silu", |x, gy| {
                    let s = kernels::sigmoid(x);
                    gy * (s + x * s * (1.0 - s))
                })?;
                accumulate(grads, x, dx)?;
            }
            Op::RmsNorm { x, gain, inv } => {
                let (vx, vg) = (self.value(*x), self.value(*gain));
                let c = vx.cols();
                let mut dx = Array::zeros(vx.shape());
                let mut dg = Array::zeros(vg.shape());
                for (r, &s) in inv.iter().enumerate() {
                    let xr = vx.row(r);
                    let gr = g.row(r);
                    let mut dot = 0.0;
                    for j in 0..c {
                        let xh = xr[j] * s;
                        dg.data_mut()[j] += gr[j] * xh;
                        dot += gr[j] * vg.data()[j] * xh;
                    }
                    dot /= c as f64;
                    let dxr = dx.row_mut(r);
                    for j in 0..c {
                        let xh = xr[j] * s;
                        dxr[j] = s * (gr[j] * vg.data()[j] - xh * dot);
                    }
                }
                if needs(*x) {
                    accumulate(grads, *x, dx)?;
                }
                if needs(*gain) {
                    accumulate(grads, *gain, dg)?;
                }
            }
            Op::Rope {
                x,
                positions,
                head_dim,
            } => {
                let dx = kernels::rope(g, positions, *head_dim, -1.0)?;
                accumulate(grads, *x, dx)?;
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => {
                let (dq, dk, dv) = attention_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    layout,
                    probs,
                    g,
                )?;
                if needs(*q) {
                    accumulate(grads, *q, dq)?;
                }
                if needs(*k) {
                    accumulate(grads, *k, dk)?;
                }
                if needs(*v) {
                    accumulate(grads, *v, dv)?;
                }
            }
            Op::Gather { sources, index } => {
                let mut parts: Vec<Option<Array>> = sources
                    .iter()
                    .map(|&s| needs(s).then(|| Array::zeros(self.value(s).shape())))
                    .collect();
                for (i, &(s, r)) in index.iter().enumerate() {
                    if let Some(d) = parts[s].as_mut() {
                        for (a, b) in d.row_mut(r).iter_mut().zip(g.row(i)) {
                            *a += b;
                        }
                    }
                }
                for (s, part) in sources.iter().zip(parts) {
                    if let Some(d) = part {
                        accumulate(grads, *s, d)?;
                    }
                }
            }
            &Op::Sum(x) => {
                let gv = g.data()[0];
                accumulate(grads, x, Array::full(self.value(x).shape(), gv))?;
            }
            &Op::Mean(x) => {
                let vx = self.value(x);
                let gv = g.data()[0] / vx.len() as f64;
                accumulate(grads, x, Array::full(vx.shape(), gv))?;
            }
            Op::Mse {
                pred,
                target,
                weights,
                denom,
            } => {
                let p = self.value(*pred);
                let gv = g.data()[0];
                let mut d = Array::zeros(p.shape());
                for (r, w) in weights.iter().enumerate() {
                    let k = 2.0 * w * gv / denom;
                    for ((o, a), b) in d.row_mut(r).iter_mut().zip(p.row(r)).zip(target.row(r)) {
                        *o = k * (a - b);
                    }
                }
                accumulate(grads, *pred, d)?;
            }
            Op::BceLogits {
                logits,
                labels,
                weights,
                denom,
            } => {
                let l = self.value(*logits);
                let gv = g.data()[0];
                let data = l
                    .data()
                    .iter()
                    .zip(labels)
                    .zip(weights)
                    .map(|((&x, &y), &w)| gv * w * (kernels::sigmoid(x) - y) / denom)
                    .collect();
                accumulate(grads, *logits, Array::new(l.shape(), data)?)?;
            }
        }
        Ok(())
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn accumulate(grads: &mut [Option<Array>], v: Var, g: Array) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.axpy(1.0, &g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn attention_backward(
    q: &Array,
    k: &Array,
    v: &Array,
    layout: &AttnLayout,
    probs: &[f64],
    g: &Array,
) -> Result<(Array, Array, Array)> {
    let (rows, c) = (q.rows(), q.cols());
    let t = layout.mask.length;
    let heads = layout.heads;
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array::zeros(q.shape());
    let mut dk = Array::zeros(k.shape());
    let mut dv = Array::zeros(v.shape());
    let mut dp = vec![0.0; t * t];
    for s in 0..rows / t {
        let base = s * t * c;
        for h in 0..heads {
            let p = &probs[(s * heads + h) * t * t..(s * heads + h + 1) * t * t];
            let off = base + h * dh;
            // dV = Pᵀ·dO
            gemm_strided(
                t,
                t,
                dh,
                MatRef::new(p, t, true),
                MatRef::new(&g.data()[off..], c, false),
                &mut dv.data_mut()[off..],
                c,
                0.0,
            );
            // dP = dO·Vᵀ
            gemm_strided(
                t,
                dh,
                t,
                MatRef::new(&g.data()[off..], c, false),
                MatRef::new(&v.data()[off..], c, true),
                &mut dp,
                t,
                0.0,
            );
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the 1/√dh scale.
            for i in 0..t {
                let pr = &p[i * t..(i + 1) * t];
                let dr = &mut dp[i * t..(i + 1) * t];
                let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for (d, &pv) in dr.iter_mut().zip(pr) {
                    *d = pv * (*d - dot) * scale;
                }
            }
            // dQ = dS·K, dK = dSᵀ·Q
            gemm_strided(
                t,
                t,
                dh,
                MatRef::new(&dp, t, false),
                MatRef::new(&k.data()[off..], c, false),
                &mut dq.data_mut()[off..],
                c,
                0.0,
            );
            gemm_strided(
                t,
                t,
                dh,
                MatRef::new(&dp, t, true),
                MatRef::new(&q.data()[off..], c, false),
                &mut dk.data_mut()[off..],
                c,
                0.0,
            );
        }
    }
    Ok((dq, dk, dv))
}

/// Gradients produced by one reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Array>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Array> {
        self.grads[v.0].as_ref()
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Array)> {
        self.params
            .iter()
            .filter_map(|&(id, n)| self.grads[n].as_ref().map(|g| (id, g)))
    }
}

impl ParamStore {
    /// Adds the gradients of `grads` into each parameter's buffer.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (id, g) in grads.param_grads() {
            self.get_mut(id).grad.axpy(1.0, g)?;
        }
        Ok(())
    }
}
