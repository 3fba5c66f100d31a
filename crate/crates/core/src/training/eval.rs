use serde::{Deserialize, Serialize};

use super::data::{classify_frequency, DataConfig, ToyExample};
use super::step_rng;
use crate::error::{Error, Result};
use crate::model::{patchify, Ditar};
use crate::sampler::{dispersion, SamplerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seed: u64,
    /// Held-out examples to continue (at most the number available).
    pub examples: usize,
    pub prompt_patches: usize,
    /// Generation budget beyond the true continuation length.
    pub extra_patches: usize,
    pub sampler: SamplerConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            examples: 100,
            prompt_patches: 2,
            extra_patches: 2,
            sampler: SamplerConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub examples: usize,
    /// Fraction of continuations whose FFT peak falls on the prompt's class.
    pub frequency_accuracy: f64,
    /// Mean RMS gap between the first generated token and the true one.
    pub boundary_discontinuity: f64,
    /// RMS error of the continuation against the truth (missing tokens
    /// count as zeros).
    pub continuation_rmse: f64,
    /// Fraction of free-running generations that stop exactly at the true
    /// length.
    pub stop_accuracy: f64,
    /// Fraction of teacher-forced sequences whose stop probability first
    /// exceeds the threshold on the final patch.
    pub teacher_forced_stop_accuracy: f64,
    pub runaway_rate: f64,
    pub mean_generated_patches: f64,
}

/// RMS difference between two tokens.
pub fn boundary_discontinuity(generated: &[f64], truth: &[f64]) -> f64 {
    let n = truth.len().max(1);
    let sum: f64 = truth
        .iter()
        .enumerate()
        .map(|(i, t)| (generated.get(i).copied().unwrap_or(0.0) - t).powi(2))
        .sum();
    (sum / n as f64).sqrt()
}

struct Outcome {
    freq_ok: bool,
    boundary: f64,
    sq_err: f64,
    samples: usize,
    stop_ok: bool,
    tf_stop_ok: bool,
    runaway: bool,
    patches: usize,
}

fn evaluate_one(model: &Ditar, e: &ToyExample, data: &DataConfig, cfg: &EvalConfig, index: usize) -> Result<Outcome> {
    let mc = model.config();
    let (p, d) = (mc.patch_size, mc.token_dim);
    let total = e.tokens.len().div_ceil(p);
    if total <= cfg.prompt_patches {
        return Err(Error::invalid("held-out example is not longer than the prompt"));
    }
    let prompt = e.prompt(cfg.prompt_patches, p)?;
    let cont_patches = total - cfg.prompt_patches;
    let mut rng = step_rng(cfg.seed, index as u64);
    let gen = model.generate(
        &e.text_ids,
        Some(&prompt),
        &cfg.sampler,
        cont_patches + cfg.extra_patches,
        &mut rng,
    )?;
    let truth = &e.samples()[prompt.len() * d..];
    let generated = gen.tokens.data();
    let n = truth.len().min(generated.len());
    let freq_ok = n > 0 && classify_frequency(&generated[..n], &data.frequencies) == e.freq_class;
    let boundary = boundary_discontinuity(&generated[..generated.len().min(d)], &truth[..d]);
    let sq_err = truth
        .iter()
        .enumerate()
        .map(|(i, t)| (generated.get(i).copied().unwrap_or(0.0) - t).powi(2))
        .sum();

    let patches = patchify(&e.tokens, p)?;
    let prefix = model.embed_prefix(&e.text_ids, &patches)?;
    let conds = model.lm_forward(&prefix)?;
    let first_stop = (0..patches.len()).find(|&i| {
        model
            .stop_probability(&conds[e.text_ids.len() + i])
            .map(|s| s.probability > mc.stop_threshold)
            .unwrap_or(false)
    });
    Ok(Outcome {
        freq_ok,
        boundary,
        sq_err,
        samples: truth.len(),
        stop_ok: gen.stopped && gen.patches.len() == cont_patches,
        tf_stop_ok: first_stop == Some(patches.len() - 1),
        runaway: gen.is_runaway(),
        patches: gen.patches.len(),
    })
}

/// Continues the first `cfg.examples` held-out prompts and aggregates
/// metrics. Each example uses its own generator stream, so results do not
/// depend on evaluation order.
pub fn evaluate(model: &Ditar, heldout: &[ToyExample], data: &DataConfig, cfg: &EvalConfig) -> Result<Metrics> {
    let n = cfg.examples.min(heldout.len());
    if n == 0 {
        return Err(Error::invalid("no held-out examples to evaluate"));
    }
    let outcomes = heldout[..n]
        .iter()
        .enumerate()
        .map(|(i, e)| evaluate_one(model, e, data, cfg, i))
        .collect::<Result<Vec<_>>>()?;
    let frac = |f: &dyn Fn(&Outcome) -> bool| outcomes.iter().filter(|o| f(o)).count() as f64 / n as f64;
    let samples: usize = outcomes.iter().map(|o| o.samples).sum();
    Ok(Metrics {
        examples: n,
        frequency_accuracy: frac(&|o| o.freq_ok),
        boundary_discontinuity: outcomes.iter().map(|o| o.boundary).sum::<f64>() / n as f64,
        continuation_rmse: (outcomes.iter().map(|o| o.sq_err).sum::<f64>() / samples as f64).sqrt(),
        stop_accuracy: frac(&|o| o.stop_ok),
        teacher_forced_stop_accuracy: frac(&|o| o.tf_stop_ok),
        runaway_rate: frac(&|o| o.runaway),
        mean_generated_patches: outcomes.iter().map(|o| o.patches as f64).sum::<f64>() / n as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityRow {
    pub temperature: f64,
    pub dispersion: f64,
    pub repeats: usize,
}

/// Dispersion of the first generated patch over `repeats` draws for each
/// temperature, on one fixed prompt. Draw `r` uses the same generator
/// stream at every temperature.
pub fn diversity_table(
    model: &Ditar,
    example: &ToyExample,
    prompt_patches: usize,
    base: &SamplerConfig,
    temperatures: &[f64],
    repeats: usize,
    seed: u64,
) -> Result<Vec<DiversityRow>> {
    let prompt = example.prompt(prompt_patches, model.config().patch_size)?;
    temperatures
        .iter()
        .map(|&tau| {
            let cfg = SamplerConfig {
                temperature: tau,
                ..base.clone()
            };
            let samples = (0..repeats)
                .map(|r| {
                    let mut rng = step_rng(seed, r as u64);
                    let g = model.generate(&example.text_ids, Some(&prompt), &cfg, 1, &mut rng)?;
                    Ok(g.tokens)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(DiversityRow {
                temperature: tau,
                dispersion: dispersion(&samples),
                repeats,
            })
        })
        .collect()
}
