//! Toy data, the joint diffusion + stop objective, AdamW training and
//! evaluation.

mod data;
mod eval;
mod optim;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use data::{
    classify_frequency, dominant_frequency, load_dataset, make_dataset, make_example, read_dataset, rms, save_dataset,
    waveform, write_dataset, DataConfig, DatasetFile, ToyExample, DATASET_FORMAT_VERSION,
};
pub use eval::{boundary_discontinuity, diversity_table, evaluate, DiversityRow, EvalConfig, Metrics};
pub use optim::{AdamW, AdamWConfig};

use crate::diffusion::{self, DiffusionPoint, Schedule};
use crate::error::{Error, Result};
use crate::model::{patchify, Ditar, LmSequence, LocditSegment, Patch};
use crate::numerics::{Array, Gradients};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    /// Probability of replacing each patch's condition with the null one.
    pub cond_dropout: f64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            batch_size: 16,
            cond_dropout: 0.1,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::invalid("cond_dropout must lie in [0, 1]"));
        }
        self.optimizer.validate()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLosses {
    pub l_diff: f64,
    pub l_stop: f64,
    pub total: f64,
    /// Target patches whose condition was replaced by the null vector.
    pub dropped: usize,
    pub patches: usize,
}

/// Everything drawn at random for one batch, in draw order per patch:
/// dropout coin, diffusion time, noise.
struct PatchDraw {
    dropped: bool,
    t: f64,
    eps: Array,
}

/// Builds the training graph for `batch`, returning losses and gradients.
pub fn loss_and_grads<R: Rng + ?Sized>(
    model: &Ditar,
    batch: &[&ToyExample],
    cond_dropout: f64,
    rng: &mut R,
) -> Result<(TrainingLosses, Gradients)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let cfg = model.config();
    let (p, d) = (cfg.patch_size, cfg.token_dim);
    let patched: Vec<Vec<Patch>> = batch
        .iter()
        .map(|e| {
            if e.tokens.dim() != d {
                return Err(Error::shape("train", "example token dimension differs from the model"));
            }
            patchify(&e.tokens, p)
        })
        .collect::<Result<_>>()?;

    let mut tape = model.tape();
    let all: Vec<&Patch> = patched.iter().flatten().collect();
    let emb = model.encode_patches_on(&mut tape, &all)?;
    let mut seqs = Vec::with_capacity(batch.len());
    let mut start = 0;
    for (e, ps) in batch.iter().zip(&patched) {
        seqs.push(LmSequence {
            text: &e.text_ids,
            patch_rows: start..start + ps.len(),
        });
        start += ps.len();
    }
    let (lm_out, len) = model.lm_batch_on(&mut tape, emb, &seqs)?;

    let mut draws = Vec::with_capacity(all.len());
    for _ in 0..all.len() {
        let dropped = cond_dropout > 0.0 && rng.random::<f64>() < cond_dropout;
        let t = rng.random::<f64>();
        let eps = Array::new(&[p, d], (0..p * d).map(|_| rng.sample(StandardNormal)).collect())?;
        draws.push(PatchDraw { dropped, t, eps });
    }

    let mut cond_rows = Vec::with_capacity(all.len());
    let mut stop_rows = Vec::with_capacity(all.len());
    let mut stop_labels = Vec::with_capacity(all.len());
    let mut noisy = Vec::with_capacity(all.len());
    let mut targets = Vec::with_capacity(all.len() * p * d);
    let mut weights = Vec::with_capacity(all.len() * p);
    let mut k = 0;
    for (b, (e, ps)) in batch.iter().zip(&patched).enumerate() {
        if e.text_ids.is_empty() {
            return Err(Error::invalid("training examples need a text prompt"));
        }
        let base = b * len + e.text_ids.len();
        for (i, patch) in ps.iter().enumerate() {
            let draw = &draws[k];
            cond_rows.push((0, base + i - 1));
            stop_rows.push((0, base + i));
            stop_labels.push(if i + 1 == ps.len() { 1.0 } else { 0.0 });
            let point = diffusion::forward_diffuse(patch.tokens(), draw.t, &draw.eps)?;
            noisy.push(point.z);
            let v = diffusion::velocity_target(patch.tokens(), &draw.eps, draw.t)?;
            targets.extend_from_slice(v.data());
            weights.extend(patch.pad_mask().into_iter().map(|m| if m { 1.0 } else { 0.0 }));
            k += 1;
        }
    }

    let mut segments = Vec::with_capacity(all.len());
    let mut k = 0;
    for ps in &patched {
        for (i, patch) in ps.iter().enumerate() {
            segments.push(LocditSegment {
                history: ps[i.saturating_sub(cfg.history)..i].iter().collect(),
                noisy: &noisy[k],
                valid: patch.valid(),
            });
            k += 1;
        }
    }
    let times: Vec<f64> = draws.iter().map(|dr| dr.t).collect();
    let keep: Vec<f64> = draws.iter().map(|dr| if dr.dropped { 0.0 } else { 1.0 }).collect();
    let dropped = draws.iter().filter(|dr| dr.dropped).count();

    let cond = tape.gather_rows(&[lm_out], cond_rows)?;
    let cond = tape.scale_rows(cond, keep)?;
    let v_pred = model.locdit_on(&mut tape, cond, &times, &segments)?;
    let target = Array::new(&[all.len() * p, d], targets)?;
    let l_diff = tape.mse(v_pred, target, Some(weights))?;

    let h_stop = tape.gather_rows(&[lm_out], stop_rows)?;
    let logits = model.stop_logits_on(&mut tape, h_stop)?;
    let n = stop_labels.len();
    let l_stop = tape.bce_with_logits(logits, stop_labels, vec![1.0; n])?;
    let total = tape.add(l_diff, l_stop)?;

    let losses = TrainingLosses {
        l_diff: tape.value(l_diff).data()[0],
        l_stop: tape.value(l_stop).data()[0],
        total: tape.value(total).data()[0],
        dropped,
        patches: all.len(),
    };
    let grads = tape.backward(total)?;
    Ok((losses, grads))
}

/// One optimizer update. On a non-finite loss or gradient the parameters
/// are left untouched and an error describing the step is returned.
pub fn train_step<R: Rng + ?Sized>(
    model: &mut Ditar,
    opt: &mut AdamW,
    batch: &[&ToyExample],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<TrainingLosses> {
    let (losses, grads) = loss_and_grads(model, batch, cfg.cond_dropout, rng)?;
    if !losses.total.is_finite() {
        return Err(Error::NonFinite { op: "training loss" });
    }
    if grads.param_grads().any(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite { op: "training gradient" });
    }
    let store = model.params_mut();
    store.zero_grads();
    store.accumulate(&grads)?;
    opt.step(store)?;
    Ok(losses)
}

/// Per-step generator: a fixed seed with the step as the stream id, so a
/// resumed run draws exactly what an uninterrupted one would.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub l_diff: f64,
    pub l_stop: f64,
    pub total: f64,
}

/// Runs optimizer steps `opt.step_count() .. cfg.steps`, calling `on_step`
/// after each.
pub fn train(
    model: &mut Ditar,
    opt: &mut AdamW,
    data: &[ToyExample],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord, &Ditar, &AdamW) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training data is empty"));
    }
    let mut curve = Vec::new();
    while (opt.step_count() as usize) < cfg.steps {
        let step = opt.step_count();
        let mut rng = step_rng(cfg.seed, step);
        let batch: Vec<&ToyExample> = (0..cfg.batch_size)
            .map(|_| &data[rng.random_range(0..data.len())])
            .collect();
        let l = train_step(model, opt, &batch, cfg, &mut rng)?;
        let rec = StepRecord {
            step,
            l_diff: l.l_diff,
            l_stop: l.l_stop,
            total: l.total,
        };
        on_step(&rec, model, opt)?;
        curve.push(rec);
    }
    Ok(curve)
}

/// Mean of the first and last `window` totals of a loss curve.
pub fn loss_drop(curve: &[StepRecord], window: usize) -> Option<(f64, f64)> {
    if curve.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(curve.len());
    let mean = |s: &[StepRecord]| s.iter().map(|r| r.total).sum::<f64>() / s.len() as f64;
    Some((mean(&curve[..w]), mean(&curve[curve.len() - w..])))
}

/// Exact velocity of the probability-flow ODE when the data are
/// `N(μ, s²)` per coordinate.
pub fn gaussian_oracle_velocity(point: &DiffusionPoint, mu: f64, s: f64) -> Result<Array> {
    if !(s >= 0.0 && s.is_finite() && mu.is_finite()) {
        return Err(Error::invalid(format!("oracle needs finite mu and s >= 0, got ({mu}, {s})")));
    }
    let sv = Schedule.eval(point.t)?;
    if sv.sigma == 0.0 {
        return Ok(point.z.scale(sv.d_alpha / sv.alpha));
    }
    let s2 = s * s;
    let denom = sv.alpha * sv.alpha * s2 + sv.sigma * sv.sigma;
    Ok(point.z.map(|z| {
        let x0 = (sv.alpha * s2 * z + sv.sigma * sv.sigma * mu) / denom;
        sv.d_alpha * x0 + sv.d_sigma * (z - sv.alpha * x0) / sv.sigma
    }))
}

/// Posterior mean of `x0` under the same Gaussian data model.
pub fn gaussian_oracle_x0(point: &DiffusionPoint, mu: f64, s: f64) -> Result<Array> {
    let sv = Schedule.eval(point.t)?;
    let s2 = s * s;
    let denom = sv.alpha * sv.alpha * s2 + sv.sigma * sv.sigma;
    Ok(point.z.map(|z| (sv.alpha * s2 * z + sv.sigma * sv.sigma * mu) / denom))
}

#[cfg(test)]
mod tests;
