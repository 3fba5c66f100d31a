//! Pre-Norm transformer stack (RMSNorm, RoPE, SiLU FFN) with a recorded
//! forward pass for training and a key/value cached decoder for inference.

use rand::Rng;

use super::array::Array;
use super::kernels::{self, AttentionMask, AttnLayout};
use super::param::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
struct Block {
    attn_norm: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ffn_norm: ParamId,
    w1: ParamId,
    w2: ParamId,
}

#[derive(Clone, Debug)]
pub struct TransformerStack {
    blocks: Vec<Block>,
    final_norm: ParamId,
    width: usize,
    heads: usize,
}

/// Gaussian init with standard deviation `gain / sqrt(fan_in)`.
pub fn init_linear<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize, gain: f64) -> Array {
    Array::randn(&[fan_in, fan_out], rng).scale(gain / (fan_in as f64).sqrt())
}

impl TransformerStack {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        layers: usize,
        width: usize,
        ffn: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 || (width / heads) % 2 != 0 {
            return Err(Error::invalid(format!(
                "{prefix}: width {width} must split into {heads} heads of even size"
            )));
        }
        let out_gain = 1.0 / ((2 * layers.max(1)) as f64).sqrt();
        let mut blocks = Vec::with_capacity(layers);
        for l in 0..layers {
            let p = format!("{prefix}.layers.{l}");
            blocks.push(Block {
                attn_norm: store.add(format!("{p}.attn_norm"), Array::full(&[width], 1.0))?,
                wq: store.add(format!("{p}.wq"), init_linear(rng, width, width, 1.0))?,
                wk: store.add(format!("{p}.wk"), init_linear(rng, width, width, 1.0))?,
                wv: store.add(format!("{p}.wv"), init_linear(rng, width, width, 1.0))?,
                wo: store.add(format!("{p}.wo"), init_linear(rng, width, width, out_gain))?,
                ffn_norm: store.add(format!("{p}.ffn_norm"), Array::full(&[width], 1.0))?,
                w1: store.add(format!("{p}.w1"), init_linear(rng, width, ffn, 1.0))?,
                w2: store.add(format!("{p}.w2"), init_linear(rng, ffn, width, out_gain))?,
            });
        }
        let final_norm = store.add(format!("{prefix}.final_norm"), Array::full(&[width], 1.0))?;
        Ok(Self {
            blocks,
            final_norm,
            width,
            heads,
        })
    }

    /// Re-binds a stack to parameters already present in `store`.
    pub fn bind(store: &ParamStore, prefix: &str, layers: usize, heads: usize) -> Result<Self> {
        let get = |name: String| {
            store
                .id(&name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))
        };
        let mut blocks = Vec::with_capacity(layers);
        for l in 0..layers {
            let p = format!("{prefix}.layers.{l}");
            blocks.push(Block {
                attn_norm: get(format!("{p}.attn_norm"))?,
                wq: get(format!("{p}.wq"))?,
                wk: get(format!("{p}.wk"))?,
                wv: get(format!("{p}.wv"))?,
                wo: get(format!("{p}.wo"))?,
                ffn_norm: get(format!("{p}.ffn_norm"))?,
                w1: get(format!("{p}.w1"))?,
                w2: get(format!("{p}.w2"))?,
            });
        }
        let final_norm = get(format!("{prefix}.final_norm"))?;
        let width = store.value(final_norm).len();
        Ok(Self {
            blocks,
            final_norm,
            width,
            heads,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Recorded forward over `x` (`[segments·T × C]`). Row `r` sits at
    /// position `r mod T` of its segment.
    pub fn forward(&self, tape: &mut Tape, x: Var, mask: AttentionMask, key_valid: Option<Vec<bool>>) -> Result<Var> {
        let rows = tape.value(x).rows();
        if tape.value(x).cols() != self.width {
            return Err(Error::shape(
                "transformer",
                format!("input width {} != {}", tape.value(x).cols(), self.width),
            ));
        }
        let t = mask.length;
        let positions: Vec<usize> = (0..rows).map(|r| r % t).collect();
        let mut layout = AttnLayout::new(mask, self.heads);
        layout.key_valid = key_valid;
        let dh = self.head_dim();
        let mut x = x;
        for b in &self.blocks {
            let g = tape.param(b.attn_norm);
            let h = tape.rmsnorm(x, g)?;
            let (wq, wk, wv, wo) = (tape.param(b.wq), tape.param(b.wk), tape.param(b.wv), tape.param(b.wo));
            let q = tape.matmul(h, wq)?;
            let k = tape.matmul(h, wk)?;
            let v = tape.matmul(h, wv)?;
            let q = tape.rope(q, positions.clone(), dh)?;
            let k = tape.rope(k, positions.clone(), dh)?;
            let a = tape.attention(q, k, v, layout.clone())?;
            let a = tape.matmul(a, wo)?;
            x = tape.add(x, a)?;

            let g = tape.param(b.ffn_norm);
            let h = tape.rmsnorm(x, g)?;
            let (w1, w2) = (tape.param(b.w1), tape.param(b.w2));
            let f = tape.matmul(h, w1)?;
            let f = tape.silu(f)?;
            let f = tape.matmul(f, w2)?;
            x = tape.add(x, f)?;
        }
        let g = tape.param(self.final_norm);
        tape.rmsnorm(x, g)
    }

    pub fn new_cache(&self) -> DecodeCache {
        DecodeCache {
            keys: vec![Vec::new(); self.blocks.len()],
            values: vec![Vec::new(); self.blocks.len()],
            len: 0,
            matmul_flops: 0,
        }
    }

    /// Causal forward over a whole prefix `[T × C]`, filling `cache`.
    /// Attention is evaluated as a full `T×T` product per layer.
    pub fn prefill(&self, store: &ParamStore, cache: &mut DecodeCache, x: &Array) -> Result<Array> {
        if cache.len != 0 {
            return Err(Error::invalid("prefill requires an empty cache"));
        }
        let t = x.rows();
        if t == 0 {
            return Ok(Array::zeros(&[0, self.width]));
        }
        let positions: Vec<usize> = (0..t).collect();
        let layout = AttnLayout::new(AttentionMask::causal(t), self.heads);
        let dh = self.head_dim();
        let mut x = x.clone();
        for (l, b) in self.blocks.iter().enumerate() {
            let (h, _) = kernels::rmsnorm(&x, store.value(b.attn_norm))?;
            let q = cache.linear(&h, store.value(b.wq))?;
            let k = cache.linear(&h, store.value(b.wk))?;
            let v = cache.linear(&h, store.value(b.wv))?;
            let q = kernels::rope(&q, &positions, dh, 1.0)?;
            let k = kernels::rope(&k, &positions, dh, 1.0)?;
            let (a, _) = kernels::attention(&q, &k, &v, &layout)?;
            cache.matmul_flops += 4 * (t * t * self.width) as u64;
            cache.keys[l] = k.into_data();
            cache.values[l] = v.into_data();
            x = x.add(&cache.linear(&a, store.value(b.wo))?)?;
            x = self.ffn(store, cache, b, x)?;
        }
        cache.len = t;
        Ok(kernels::rmsnorm(&x, store.value(self.final_norm))?.0)
    }

    /// Appends one token `[1 × C]` and returns its output row.
    pub fn decode_step(&self, store: &ParamStore, cache: &mut DecodeCache, x: &Array) -> Result<Array> {
        if x.rows() != 1 || x.cols() != self.width {
            return Err(Error::shape("decode_step", format!("{:?}", x.shape())));
        }
        let pos = cache.len;
        let c = self.width;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let tlen = pos + 1;
        let mut x = x.clone();
        for (l, b) in self.blocks.iter().enumerate() {
            let (h, _) = kernels::rmsnorm(&x, store.value(b.attn_norm))?;
            let q = cache.linear(&h, store.value(b.wq))?;
            let k = cache.linear(&h, store.value(b.wk))?;
            let v = cache.linear(&h, store.value(b.wv))?;
            let q = kernels::rope(&q, &[pos], dh, 1.0)?;
            let k = kernels::rope(&k, &[pos], dh, 1.0)?;
            cache.keys[l].extend_from_slice(k.data());
            cache.values[l].extend_from_slice(v.data());
            let (keys, values) = (&cache.keys[l], &cache.values[l]);
            let mut a = vec![0.0; c];
            for h in 0..self.heads {
                let qh = &q.data()[h * dh..(h + 1) * dh];
                let mut w: Vec<f64> = (0..tlen)
                    .map(|j| {
                        let kj = &keys[j * c + h * dh..j * c + (h + 1) * dh];
                        qh.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                    })
                    .collect();
                let m = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for x in w.iter_mut() {
                    *x = (*x - m).exp();
                    z += *x;
                }
                for (j, wj) in w.iter().enumerate() {
                    let vj = &values[j * c + h * dh..j * c + (h + 1) * dh];
                    for (o, vv) in a[h * dh..(h + 1) * dh].iter_mut().zip(vj) {
                        *o += wj / z * vv;
                    }
                }
            }
            // q·Kᵀ over the t cached keys and p·V, 2·t·C each.
            cache.matmul_flops += 4 * (tlen * c) as u64;
            let a = Array::new(&[1, c], a)?;
            x = x.add(&cache.linear(&a, store.value(b.wo))?)?;
            x = self.ffn(store, cache, b, x)?;
        }
        cache.len += 1;
        Ok(kernels::rmsnorm(&x, store.value(self.final_norm))?.0)
    }

    fn ffn(&self, store: &ParamStore, cache: &mut DecodeCache, b: &Block, x: Array) -> Result<Array> {
        let (h, _) = kernels::rmsnorm(&x, store.value(b.ffn_norm))?;
        let f = cache.linear(&h, store.value(b.w1))?.map(kernels::silu);
        x.add(&cache.linear(&f, store.value(b.w2))?)
    }
}

/// Per-layer cached keys (post-rotation) and values for incremental
/// causal decoding.
#[derive(Clone, Debug)]
pub struct DecodeCache {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    matmul_flops: u64,
}

impl DecodeCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn matmul_flops(&self) -> u64 {
        self.matmul_flops
    }

    fn linear(&mut self, x: &Array, w: &Array) -> Result<Array> {
        self.matmul_flops += 2 * (x.rows() * x.cols() * w.cols()) as u64;
        x.matmul(w)
    }
}
