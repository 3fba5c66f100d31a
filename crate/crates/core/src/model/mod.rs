//! The patch-level autoregressive model: aggregation encoder, causal
//! language model, local diffusion decoder (LocDiT) and stop head.
//!
//! A sequence of continuous tokens is cut into patches of `P` tokens. Each
//! patch is condensed by the encoder into one embedding (the output at a
//! learned special token prepended to the patch). The causal LM reads text
//! embeddings followed by patch embeddings; its output at position `i`
//! conditions the decoder that denoises patch `i + 1`. The decoder sees the
//! sequence `[condition + time embedding, history patches, noisy patch]`
//! with bidirectional attention and predicts the velocity of the noisy
//! patch only.

pub mod checkpoint;
mod config;
#[cfg(test)]
pub(crate) use config::tiny;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{ModelConfig, StackConfig};

use crate::error::{Error, Result};
use crate::numerics::transformer::init_linear;
use crate::numerics::{Array, AttentionMask, DecodeCache, ParamId, ParamStore, Tape, TransformerStack, Var};
use crate::sampler::{self, GuidedScore, SamplerConfig, VelocityNet};

/// Continuous tokens `[N × D]`, `N ≥ 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    tokens: Array,
}

impl TokenSequence {
    pub fn new(tokens: Array) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.rows() == 0 || tokens.cols() == 0 {
            return Err(Error::invalid(format!(
                "token sequence must be a non-empty [N x D] array, got {:?}",
                tokens.shape()
            )));
        }
        if !tokens.is_finite() {
            return Err(Error::NonFinite { op: "TokenSequence" });
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &Array {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }
}

/// `P` tokens, of which the first `valid` are real and the rest zero padding.
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    tokens: Array,
    valid: usize,
}

impl Patch {
    pub fn new(tokens: Array) -> Self {
        let valid = tokens.rows();
        Self { tokens, valid }
    }

    pub fn padded(tokens: Array, valid: usize) -> Result<Self> {
        if valid == 0 || valid > tokens.rows() {
            return Err(Error::invalid(format!(
                "patch of {} rows cannot have {valid} valid rows",
                tokens.rows()
            )));
        }
        Ok(Self { tokens, valid })
    }

    pub fn tokens(&self) -> &Array {
        &self.tokens
    }

    pub fn size(&self) -> usize {
        self.tokens.rows()
    }

    pub fn valid(&self) -> usize {
        self.valid
    }

    /// Per-row validity flags.
    pub fn pad_mask(&self) -> Vec<bool> {
        (0..self.size()).map(|r| r < self.valid).collect()
    }
}

/// Splits a sequence into `⌈N/P⌉` patches; the last one is zero padded.
pub fn patchify(seq: &TokenSequence, patch_size: usize) -> Result<Vec<Patch>> {
    if patch_size == 0 {
        return Err(Error::invalid("patch size must be >= 1"));
    }
    let (n, d) = (seq.len(), seq.dim());
    let mut out = Vec::with_capacity(n.div_ceil(patch_size));
    for start in (0..n).step_by(patch_size) {
        let end = (start + patch_size).min(n);
        let mut data = seq.tokens.data()[start * d..end * d].to_vec();
        data.resize(patch_size * d, 0.0);
        out.push(Patch {
            tokens: Array::new(&[patch_size, d], data)?,
            valid: end - start,
        });
    }
    Ok(out)
}

/// Concatenates the unpadded rows of `patches`.
pub fn unpatchify(patches: &[Patch], dim: usize) -> Array {
    let mut data = Vec::new();
    for p in patches {
        data.extend_from_slice(&p.tokens.data()[..p.valid * dim]);
    }
    let rows = data.len() / dim.max(1);
    Array::new(&[rows, dim], data).expect("rows * dim elements")
}

/// LM output used to condition the diffusion decoder; the null condition
/// is the all-zeros vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionVector {
    h: Array,
    is_null: bool,
}

impl ConditionVector {
    pub fn new(h: Array) -> Self {
        let n = h.len();
        let h = h.reshape(&[n]).expect("same element count");
        Self { h, is_null: false }
    }

    pub fn null(width: usize) -> Self {
        Self {
            h: Array::zeros(&[width]),
            is_null: true,
        }
    }

    pub fn h(&self) -> &Array {
        &self.h
    }

    pub fn is_null(&self) -> bool {
        self.is_null
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StopDecision {
    pub probability: f64,
}

/// Disjoint parameter groups; every parameter belongs to exactly one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Encoder,
    Lm,
    LocDit,
    StopHead,
    Embeddings,
}

pub fn param_group(name: &str) -> Option<ParamGroup> {
    let prefix = name.split('.').next()?;
    Some(match prefix {
        "encoder" => ParamGroup::Encoder,
        "lm" => ParamGroup::Lm,
        "locdit" => ParamGroup::LocDit,
        "stop" => ParamGroup::StopHead,
        "embed" => ParamGroup::Embeddings,
        _ => return None,
    })
}

#[derive(Clone, Debug)]
struct Handles {
    enc_in: ParamId,
    enc_out: ParamId,
    special: ParamId,
    text: ParamId,
    time: ParamId,
    begin: ParamId,
    cond_proj: ParamId,
    hist_proj: ParamId,
    noisy_proj: ParamId,
    out_proj: ParamId,
    stop_w: ParamId,
    stop_b: ParamId,
    encoder: TransformerStack,
    lm: TransformerStack,
    locdit: TransformerStack,
}

/// One decoder input: up to `history` previous patches (oldest first;
/// missing ones are filled with the learned begin patch) and the noisy
/// target tokens.
#[derive(Clone, Debug)]
pub struct LocditSegment<'a> {
    pub history: Vec<&'a Patch>,
    pub noisy: &'a Array,
    pub valid: usize,
}

/// One LM input sequence: text ids followed by rows of a patch-embedding
/// array.
#[derive(Clone, Debug)]
pub struct LmSequence<'a> {
    pub text: &'a [usize],
    pub patch_rows: std::ops::Range<usize>,
}

#[derive(Clone, Debug)]
pub struct Ditar {
    config: ModelConfig,
    params: ParamStore,
    h: Handles,
}

impl Ditar {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let c = &config;
        let (d, p) = (c.token_dim, c.patch_size);
        let (ce, cl, cd) = (c.encoder.width, c.lm.width, c.locdit.width);
        let mut s = ParamStore::new();
        let encoder = TransformerStack::init(&mut s, "encoder", c.encoder.layers, ce, c.encoder.ffn, c.encoder.heads, rng)?;
        let enc_in = s.add("encoder.in_proj", init_linear(rng, d, ce, 1.0))?;
        let enc_out = s.add("encoder.out_proj", init_linear(rng, ce, cl, 1.0))?;
        let lm = TransformerStack::init(&mut s, "lm", c.lm.layers, cl, c.lm.ffn, c.lm.heads, rng)?;
        let locdit = TransformerStack::init(&mut s, "locdit", c.locdit.layers, cd, c.locdit.ffn, c.locdit.heads, rng)?;
        let cond_proj = s.add("locdit.cond_proj", init_linear(rng, cl, cd, 1.0))?;
        let hist_proj = s.add("locdit.hist_proj", init_linear(rng, d, cd, 1.0))?;
        let noisy_proj = s.add("locdit.noisy_proj", init_linear(rng, d, cd, 1.0))?;
        let out_proj = s.add("locdit.out_proj", init_linear(rng, cd, d, 0.1))?;
        let stop_w = s.add("stop.weight", init_linear(rng, cl, 1, 1.0))?;
        let stop_b = s.add("stop.bias", Array::zeros(&[1]))?;
        let text = s.add("embed.text", Array::randn(&[c.text_vocab, cl], rng))?;
        let special = s.add("embed.special", Array::randn(&[1, ce], rng))?;
        let time = s.add("embed.time", init_linear(rng, c.time_features, cd, 1.0))?;
        let begin = s.add("embed.begin", Array::randn(&[p, d], rng))?;
        Ok(Self {
            config,
            params: s,
            h: Handles {
                enc_in,
                enc_out,
                special,
                text,
                time,
                begin,
                cond_proj,
                hist_proj,
                noisy_proj,
                out_proj,
                stop_w,
                stop_b,
                encoder,
                lm,
                locdit,
            },
        })
    }

    /// Rebuilds a model around an existing parameter set (e.g. a loaded
    /// checkpoint). Every expected parameter must exist with the shape the
    /// config implies, and no others.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (_, name, p) in reference.params.iter() {
            let found = params
                .id(name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            if params.value(found).shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "parameter {name}: shape {:?}, expected {:?}",
                    params.value(found).shape(),
                    p.value.shape()
                )));
            }
        }
        let get = |n: &str| params.id(n).expect("checked above");
        let c = &config;
        let h = Handles {
            enc_in: get("encoder.in_proj"),
            enc_out: get("encoder.out_proj"),
            special: get("embed.special"),
            text: get("embed.text"),
            time: get("embed.time"),
            begin: get("embed.begin"),
            cond_proj: get("locdit.cond_proj"),
            hist_proj: get("locdit.hist_proj"),
            noisy_proj: get("locdit.noisy_proj"),
            out_proj: get("locdit.out_proj"),
            stop_w: get("stop.weight"),
            stop_b: get("stop.bias"),
            encoder: TransformerStack::bind(&params, "encoder", c.encoder.layers, c.encoder.heads)?,
            lm: TransformerStack::bind(&params, "lm", c.lm.layers, c.lm.heads)?,
            locdit: TransformerStack::bind(&params, "locdit", c.locdit.layers, c.locdit.heads)?,
        };
        Ok(Self { config, params, h })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn tape(&self) -> Tape<'_> {
        Tape::with_precision(&self.params, self.config.precision)
    }

    fn check_patch(&self, p: &Patch) -> Result<()> {
        let (rows, cols) = (p.tokens.rows(), p.tokens.cols());
        if rows != self.config.patch_size || cols != self.config.token_dim {
            return Err(Error::shape(
                "patch",
                format!(
                    "[{rows} x {cols}], model expects [{} x {}]",
                    self.config.patch_size, self.config.token_dim
                ),
            ));
        }
        Ok(())
    }

    // ---- recorded building blocks -------------------------------------

    /// Aggregation embeddings `[n × C_lm]` of `patches`.
    pub fn encode_patches_on(&self, tape: &mut Tape, patches: &[&Patch]) -> Result<Var> {
        let p = self.config.patch_size;
        let d = self.config.token_dim;
        let mut data = Vec::with_capacity(patches.len() * p * d);
        let mut index = Vec::with_capacity(patches.len() * (p + 1));
        let mut valid = Vec::with_capacity(patches.len() * (p + 1));
        for (i, patch) in patches.iter().enumerate() {
            self.check_patch(patch)?;
            data.extend_from_slice(patch.tokens.data());
            index.push((0, 0));
            valid.push(true);
            for r in 0..p {
                index.push((1, i * p + r));
                valid.push(r < patch.valid);
            }
        }
        let tokens = tape.constant(Array::new(&[patches.len() * p, d], data)?)?;
        let w_in = tape.param(self.h.enc_in);
        let x = tape.matmul(tokens, w_in)?;
        let special = tape.param(self.h.special);
        let seq = tape.gather_rows(&[special, x], index)?;
        let out = self
            .h
            .encoder
            .forward(tape, seq, AttentionMask::bidirectional(p + 1), Some(valid))?;
        let heads = (0..patches.len()).map(|i| (0, i * (p + 1))).collect();
        let agg = tape.gather_rows(&[out], heads)?;
        let w_out = tape.param(self.h.enc_out);
        tape.matmul(agg, w_out)
    }

    /// Runs the causal LM over a padded batch. Returns the output
    /// `[B·L × C_lm]` and the padded length `L`; sequence `b` occupies rows
    /// `b·L .. b·L + text.len() + patch_rows.len()`.
    pub fn lm_batch_on(&self, tape: &mut Tape, patch_emb: Var, seqs: &[LmSequence]) -> Result<(Var, usize)> {
        let len = seqs
            .iter()
            .map(|s| s.text.len() + s.patch_rows.len())
            .max()
            .ok_or_else(|| Error::invalid("empty LM batch"))?;
        if len == 0 {
            return Err(Error::invalid("LM sequences must be non-empty"));
        }
        let vocab = self.config.text_vocab;
        let mut index = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            for &id in s.text {
                if id >= vocab {
                    return Err(Error::invalid(format!("text id {id} outside vocabulary of {vocab}")));
                }
                index.push((0, id));
            }
            index.extend(s.patch_rows.clone().map(|r| (1, r)));
            index.extend((s.text.len() + s.patch_rows.len()..len).map(|_| (2, 0)));
        }
        let text = tape.param(self.h.text);
        let pad = tape.constant(Array::zeros(&[1, self.config.lm.width]))?;
        let x = tape.gather_rows(&[text, patch_emb, pad], index)?;
        let out = self.h.lm.forward(tape, x, AttentionMask::causal(len), None)?;
        Ok((out, len))
    }

    /// Stop logits `[n × 1]` for LM outputs `h` (`[n × C_lm]`).
    pub fn stop_logits_on(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let w = tape.param(self.h.stop_w);
        let b = tape.param(self.h.stop_b);
        let z = tape.matmul(h, w)?;
        tape.add_row(z, b)
    }

    /// Predicted velocities `[m·P × D]` for `m` decoder segments.
    /// `cond` is `[m × C_lm]` (rows already zeroed where the condition is
    /// dropped) and `times[j]` is the diffusion time of segment `j`.
    pub fn locdit_on(&self, tape: &mut Tape, cond: Var, times: &[f64], segments: &[LocditSegment]) -> Result<Var> {
        let c = &self.config;
        let (p, d, hist) = (c.patch_size, c.token_dim, c.history);
        let m = segments.len();
        if times.len() != m || tape.value(cond).rows() != m || tape.value(cond).cols() != c.lm.width {
            return Err(Error::shape(
                "locdit",
                format!(
                    "{m} segments, {} times, condition {:?}",
                    times.len(),
                    tape.value(cond).shape()
                ),
            ));
        }
        let seg_len = c.locdit_len();
        let hp = hist * p;

        let mut noisy = Vec::with_capacity(m * p * d);
        let mut hist_data = Vec::new();
        let mut hist_index = Vec::with_capacity(m * hp);
        let mut valid = Vec::with_capacity(m * seg_len);
        let mut feats = Vec::with_capacity(m * c.time_features);
        for (seg, &t) in segments.iter().zip(times) {
            if seg.noisy.rows() != p || seg.noisy.cols() != d || seg.valid == 0 || seg.valid > p {
                return Err(Error::shape("locdit", format!("noisy patch {:?}", seg.noisy.shape())));
            }
            noisy.extend_from_slice(seg.noisy.data());
            feats.extend(time_features(t, c.time_features));
            valid.push(true);
            let shown = &seg.history[seg.history.len().saturating_sub(hist)..];
            for _ in shown.len()..hist {
                hist_index.extend((0..p).map(|r| (1, r)));
                valid.extend(std::iter::repeat_n(true, p));
            }
            for patch in shown {
                self.check_patch(patch)?;
                let base = hist_data.len() / d;
                hist_data.extend_from_slice(patch.tokens.data());
                hist_index.extend((0..p).map(|r| (0, base + r)));
                valid.extend(patch.pad_mask());
            }
            valid.extend((0..p).map(|r| r < seg.valid));
        }

        let w_cond = tape.param(self.h.cond_proj);
        let cond_tok = tape.matmul(cond, w_cond)?;
        let feats = tape.constant(Array::new(&[m, c.time_features], feats)?)?;
        let w_time = tape.param(self.h.time);
        let temb = tape.matmul(feats, w_time)?;
        let cond_tok = tape.add(cond_tok, temb)?;

        let noisy = tape.constant(Array::new(&[m * p, d], noisy)?)?;
        let w_noisy = tape.param(self.h.noisy_proj);
        let noisy = tape.matmul(noisy, w_noisy)?;

        let mut sources = vec![cond_tok, noisy];
        if hist > 0 {
            let rows = hist_data.len() / d;
            let real = tape.constant(Array::new(&[rows, d], hist_data)?)?;
            let begin = tape.param(self.h.begin);
            let tokens = tape.gather_rows(&[real, begin], hist_index)?;
            let w_hist = tape.param(self.h.hist_proj);
            sources.push(tape.matmul(tokens, w_hist)?);
        }
        let mut index = Vec::with_capacity(m * seg_len);
        for j in 0..m {
            index.push((0, j));
            index.extend((0..hp).map(|r| (2, j * hp + r)));
            index.extend((0..p).map(|r| (1, j * p + r)));
        }
        let seq = tape.gather_rows(&sources, index)?;
        let out = self
            .h
            .locdit
            .forward(tape, seq, AttentionMask::bidirectional(seg_len), Some(valid))?;
        let picks = (0..m)
            .flat_map(|j| (0..p).map(move |r| (0, j * seg_len + 1 + hp + r)))
            .collect();
        let target = tape.gather_rows(&[out], picks)?;
        let w_out = tape.param(self.h.out_proj);
        tape.matmul(target, w_out)
    }

    // ---- inference ----------------------------------------------------

    pub fn aggregate_encode(&self, patch: &Patch) -> Result<Array> {
        let mut tape = self.tape();
        let v = self.encode_patches_on(&mut tape, &[patch])?;
        let out = tape.value(v).clone();
        out.reshape(&[self.config.lm.width])
    }

    pub fn text_embedding(&self, id: usize) -> Result<Array> {
        let table = self.params.value(self.h.text);
        if id >= table.rows() {
            return Err(Error::invalid(format!("text id {id} outside vocabulary")));
        }
        Array::new(&[1, table.cols()], table.row(id).to_vec())
    }

    /// Full causal forward over a prefix of embeddings `[L × C_lm]`.
    pub fn lm_forward(&self, prefix: &Array) -> Result<Vec<ConditionVector>> {
        if prefix.rows() == 0 || prefix.cols() != self.config.lm.width {
            return Err(Error::shape("lm_forward", format!("{:?}", prefix.shape())));
        }
        let mut tape = self.tape();
        let x = tape.constant(prefix.clone())?;
        let out = self
            .h
            .lm
            .forward(&mut tape, x, AttentionMask::causal(prefix.rows()), None)?;
        let out = tape.value(out);
        Ok((0..out.rows())
            .map(|r| ConditionVector::new(Array::new(&[out.cols()], out.row(r).to_vec()).expect("row")))
            .collect())
    }

    pub fn lm_cache(&self) -> DecodeCache {
        self.h.lm.new_cache()
    }

    /// Feeds a prefix into an empty cache; returns one condition per row.
    pub fn lm_prefill(&self, cache: &mut DecodeCache, prefix: &Array) -> Result<Vec<ConditionVector>> {
        let out = self.h.lm.prefill(&self.params, cache, prefix)?;
        Ok((0..out.rows())
            .map(|r| ConditionVector::new(Array::new(&[out.cols()], out.row(r).to_vec()).expect("row")))
            .collect())
    }

    pub fn lm_step(&self, cache: &mut DecodeCache, embedding: &Array) -> Result<ConditionVector> {
        let x = embedding.clone().reshape(&[1, embedding.len()])?;
        let out = self.h.lm.decode_step(&self.params, cache, &x)?;
        Ok(ConditionVector::new(out))
    }

    /// Velocity of the noisy patch at time `t` under condition `h`.
    pub fn locdit_denoise(&self, h: &ConditionVector, t: f64, history: &[Patch], noisy: &Patch) -> Result<Array> {
        self.check_patch(noisy)?;
        if history.len() != self.config.history {
            return Err(Error::invalid(format!(
                "decoder expects {} history patches, got {}",
                self.config.history,
                history.len()
            )));
        }
        let hist: Vec<&Patch> = history.iter().collect();
        self.locdit_batch(&[h], t, &hist, noisy.tokens(), noisy.valid())
            .map(|mut v| v.remove(0))
    }

    fn locdit_batch(
        &self,
        conds: &[&ConditionVector],
        t: f64,
        history: &[&Patch],
        noisy: &Array,
        valid: usize,
    ) -> Result<Vec<Array>> {
        let cl = self.config.lm.width;
        let mut rows = Vec::with_capacity(conds.len() * cl);
        for h in conds {
            if h.h.len() != cl {
                return Err(Error::shape("locdit", format!("condition width {} != {cl}", h.h.len())));
            }
            rows.extend_from_slice(h.h.data());
        }
        let mut tape = self.tape();
        let cond = tape.constant(Array::new(&[conds.len(), cl], rows)?)?;
        let seg = LocditSegment {
            history: history.to_vec(),
            noisy,
            valid,
        };
        let segs = vec![seg; conds.len()];
        let times = vec![t; conds.len()];
        let out = self.locdit_on(&mut tape, cond, &times, &segs)?;
        let out = tape.value(out);
        let p = self.config.patch_size;
        Ok((0..conds.len()).map(|j| out.slice_rows(j * p, (j + 1) * p)).collect())
    }

    pub fn stop_probability(&self, h: &ConditionVector) -> Result<StopDecision> {
        if h.is_null {
            return Err(Error::invalid("stop probability is undefined for the null condition"));
        }
        let w = self.params.value(self.h.stop_w);
        if h.h.len() != w.rows() {
            return Err(Error::shape("stop_probability", "condition width"));
        }
        let logit = h.h.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
            + self.params.value(self.h.stop_b).data()[0];
        Ok(StopDecision {
            probability: crate::numerics::kernels::sigmoid(logit),
        })
    }

    /// Embeds text ids and prompt patches into LM input rows.
    pub fn embed_prefix(&self, text: &[usize], prompt: &[Patch]) -> Result<Array> {
        let mut rows = Vec::new();
        for &id in text {
            rows.push(self.text_embedding(id)?);
        }
        if !prompt.is_empty() {
            let mut tape = self.tape();
            let refs: Vec<&Patch> = prompt.iter().collect();
            let v = self.encode_patches_on(&mut tape, &refs)?;
            rows.push(tape.value(v).clone());
        }
        let parts: Vec<&Array> = rows.iter().collect();
        Array::vstack(&parts)
    }

    /// Autoregressive continuation of a text/audio prompt.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        text: &[usize],
        audio_prompt: Option<&TokenSequence>,
        sampler_cfg: &SamplerConfig,
        max_patches: usize,
        rng: &mut R,
    ) -> Result<Generation> {
        sampler_cfg.validate()?;
        let prompt = match audio_prompt {
            Some(seq) => {
                if seq.dim() != self.config.token_dim {
                    return Err(Error::shape("generate", "prompt token dimension"));
                }
                patchify(seq, self.config.patch_size)?
            }
            None => Vec::new(),
        };
        if text.is_empty() && prompt.is_empty() {
            return Err(Error::invalid("generation needs a text or audio prompt"));
        }
        let mut generated: Vec<Patch> = Vec::new();
        if max_patches == 0 {
            return Ok(Generation::new(generated, self.config.token_dim, false));
        }
        let prefix = self.embed_prefix(text, &prompt)?;
        let mut cache = self.lm_cache();
        let mut h = self
            .lm_prefill(&mut cache, &prefix)?
            .pop()
            .expect("non-empty prefix");
        let mut history: Vec<Patch> = prompt.clone();
        let shape = [self.config.patch_size, self.config.token_dim];
        for _ in 0..max_patches {
            let keep = history.len().saturating_sub(self.config.history);
            let context: Vec<&Patch> = history[keep..].iter().collect();
            let mut net = PatchVelocity {
                model: self,
                condition: &h,
                history: context,
            };
            let tokens = sampler::temperature_sample(&mut net, sampler_cfg, &shape, rng)?;
            let patch = Patch::new(tokens);
            let emb = self.aggregate_encode(&patch)?;
            h = self.lm_step(&mut cache, &emb)?;
            history.push(patch.clone());
            generated.push(patch);
            if self.stop_probability(&h)?.probability > self.config.stop_threshold {
                return Ok(Generation::new(generated, self.config.token_dim, true));
            }
        }
        Ok(Generation::new(generated, self.config.token_dim, false))
    }
}

/// Output of [`Ditar::generate`].
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub patches: Vec<Patch>,
    pub tokens: Array,
    /// `false` when `max_patches` was reached before the stop head fired.
    pub stopped: bool,
}

impl Generation {
    fn new(patches: Vec<Patch>, dim: usize, stopped: bool) -> Self {
        let tokens = unpatchify(&patches, dim);
        Self {
            patches,
            tokens,
            stopped,
        }
    }

    pub fn is_runaway(&self) -> bool {
        !self.stopped
    }
}

/// The decoder as a velocity field over one noisy patch, with the
/// unconditional branch evaluated in the same batched pass.
pub struct PatchVelocity<'a> {
    pub model: &'a Ditar,
    pub condition: &'a ConditionVector,
    pub history: Vec<&'a Patch>,
}

impl VelocityNet for PatchVelocity<'_> {
    fn velocity(&mut self, z: &Array, t: f64, guided: bool) -> Result<GuidedScore> {
        let p = self.model.config.patch_size;
        if guided {
            let null = ConditionVector::null(self.model.config.lm.width);
            let mut out = self
                .model
                .locdit_batch(&[self.condition, &null], t, &self.history, z, p)?;
            let unconditional = out.pop();
            Ok(GuidedScore {
                conditional: out.pop().expect("two segments"),
                unconditional,
            })
        } else {
            let mut out = self.model.locdit_batch(&[self.condition], t, &self.history, z, p)?;
            Ok(GuidedScore {
                conditional: out.pop().expect("one segment"),
                unconditional: None,
            })
        }
    }
}

/// Sinusoidal features of `t` (scaled to `[0, 1000]`), sines then cosines.
pub fn time_features(t: f64, n: usize) -> Vec<f64> {
    let half = n / 2;
    let mut out = vec![0.0; n];
    for k in 0..half {
        let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        let a = 1000.0 * t * freq;
        out[k] = a.sin();
        out[half + k] = a.cos();
    }
    out
}
