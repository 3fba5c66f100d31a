//! Forward kernels shared by the recorded (differentiable) ops and the
//! cached incremental decoder.

use serde::{Deserialize, Serialize};

use super::array::{gemm_strided, Array, MatRef};
use crate::error::{Error, Result};

/// Floor added to the mean square in RMSNorm.
pub const RMS_EPS: f64 = 1e-6;

/// Base frequency of the rotary embedding.
pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Causal,
    Bidirectional,
}

/// Attention visibility over a segment of `length` tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub kind: MaskKind,
    pub length: usize,
}

impl AttentionMask {
    pub fn causal(length: usize) -> Self {
        Self {
            kind: MaskKind::Causal,
            length,
        }
    }

    pub fn bidirectional(length: usize) -> Self {
        Self {
            kind: MaskKind::Bidirectional,
            length,
        }
    }

    #[inline]
    pub fn allows(&self, query: usize, key: usize) -> bool {
        match self.kind {
            MaskKind::Causal => key <= query,
            MaskKind::Bidirectional => true,
        }
    }
}

/// How a `[rows × C]` array is split into attention segments and heads.
///
/// Rows are `segments × mask.length`; every segment attends only within
/// itself. `key_valid`, when present, has one flag per row and hides
/// invalid rows from being attended to.
#[derive(Clone, Debug)]
pub struct AttnLayout {
    pub mask: AttentionMask,
    pub heads: usize,
    pub key_valid: Option<Vec<bool>>,
}

impl AttnLayout {
    pub fn new(mask: AttentionMask, heads: usize) -> Self {
        Self {
            mask,
            heads,
            key_valid: None,
        }
    }

    pub fn with_key_valid(mut self, key_valid: Vec<bool>) -> Self {
        self.key_valid = Some(key_valid);
        self
    }

    pub(crate) fn check(&self, rows: usize, cols: usize) -> Result<()> {
        let t = self.mask.length;
        if t == 0 || rows % t != 0 {
            return Err(Error::shape(
                "attention",
                format!("{rows} rows not divisible into segments of {t}"),
            ));
        }
        if self.heads == 0 || cols % self.heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("{cols} channels not divisible into {} heads", self.heads),
            ));
        }
        if let Some(kv) = &self.key_valid {
            if kv.len() != rows {
                return Err(Error::shape("attention", "key_valid length != rows"));
            }
        }
        Ok(())
    }
}

/// Per-row RMS normalization; returns the output and each row's `1/rms`.
pub fn rmsnorm(x: &Array, gain: &Array) -> Result<(Array, Vec<f64>)> {
    let c = x.cols();
    if c == 0 || gain.len() != c {
        return Err(Error::shape(
            "rmsnorm",
            format!("input {:?}, gain {:?}", x.shape(), gain.shape()),
        ));
    }
    let mut out = x.clone();
    let mut inv = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
        let s = 1.0 / (ms + RMS_EPS).sqrt();
        for (v, g) in row.iter_mut().zip(gain.data()) {
            *v *= s * g;
        }
        inv.push(s);
    }
    Ok((out, inv))
}

/// Rotates adjacent channel pairs `(2i, 2i+1)` within each head by
/// `pos · base^(-2i/head_dim)`. A negative `direction` applies the inverse
/// rotation (used by the backward pass).
pub fn rope(x: &Array, positions: &[usize], head_dim: usize, direction: f64) -> Result<Array> {
    let c = x.cols();
    if head_dim == 0 || head_dim % 2 != 0 || c % head_dim != 0 {
        return Err(Error::shape(
            "rope",
            format!("{c} channels with head dim {head_dim} (must be even and divide C)"),
        ));
    }
    if positions.len() != x.rows() {
        return Err(Error::shape("rope", "one position per row required"));
    }
    let freqs: Vec<f64> = (0..head_dim / 2)
        .map(|i| ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64))
        .collect();
    let mut out = x.clone();
    for (r, &pos) in positions.iter().enumerate() {
        let row = out.row_mut(r);
        for head in row.chunks_exact_mut(head_dim) {
            for (pair, f) in head.chunks_exact_mut(2).zip(&freqs) {
                let (s, co) = (direction * pos as f64 * f).sin_cos();
                let (a, b) = (pair[0], pair[1]);
                pair[0] = a * co - b * s;
                pair[1] = a * s + b * co;
            }
        }
    }
    Ok(out)
}

/// Scaled dot-product attention over the segments/heads in `layout`.
/// Returns the output and the attention probabilities laid out as
/// `[segment][head][query][key]`.
pub fn attention(q: &Array, k: &Array, v: &Array, layout: &AttnLayout) -> Result<(Array, Vec<f64>)> {
    if q.shape() != k.shape() || q.shape() != v.shape() || q.shape().len() != 2 {
        return Err(Error::shape(
            "attention",
            format!("q {:?} k {:?} v {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let (rows, c) = (q.rows(), q.cols());
    layout.check(rows, c)?;
    let t = layout.mask.length;
    let heads = layout.heads;
    let dh = c / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let segments = rows / t;
    let mut probs = vec![0.0; segments * heads * t * t];
    let mut out = Array::zeros(&[rows, c]);
    for s in 0..segments {
        let base = s * t * c;
        for h in 0..heads {
            let p = &mut probs[(s * heads + h) * t * t..(s * heads + h + 1) * t * t];
            let off = base + h * dh;
            gemm_strided(
                t,
                dh,
                t,
                MatRef::new(&q.data()[off..], c, false),
                MatRef::new(&k.data()[off..], c, true),
                p,
                t,
                0.0,
            );
            for i in 0..t {
                let row = &mut p[i * t..(i + 1) * t];
                let mut max = f64::NEG_INFINITY;
                for (j, x) in row.iter_mut().enumerate() {
                    let visible = layout.mask.allows(i, j)
                        && layout.key_valid.as_ref().is_none_or(|kv| kv[s * t + j]);
                    if visible {
                        *x *= scale;
                        max = max.max(*x);
                    } else {
                        *x = f64::NEG_INFINITY;
                    }
                }
                if max == f64::NEG_INFINITY {
                    row.iter_mut().for_each(|x| *x = 0.0);
                    continue;
                }
                let mut z = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    z += *x;
                }
                row.iter_mut().for_each(|x| *x /= z);
            }
            gemm_strided(
                t,
                t,
                dh,
                MatRef::new(p, t, false),
                MatRef::new(&v.data()[off..], c, false),
                &mut out.data_mut()[off..],
                c,
                0.0,
            );
        }
    }
    Ok((out, probs))
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
