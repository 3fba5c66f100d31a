//! Python bindings: diffusion helpers, the sampler with an analytic
//! oracle, FLOPs formulas, the model, and the CLI commands.

use std::collections::HashMap;
use std::path::Path;

use ditar_cli::{cmd_ablate, cmd_flops, cmd_gen_data, cmd_sample, cmd_train, RunConfig};
use ditar_core::diffusion::{self, DiffusionPoint, Prediction, PredictionMode, Schedule};
use ditar_core::flops::{self, ArchSpec, DecodeAttention};
use ditar_core::model::{checkpoint, Ditar, TokenSequence};
use ditar_core::numerics::Array;
use ditar_core::sampler::{self, GuidedScore, SamplerConfig, Solver, VelocityNet};
use ditar_core::training::{gaussian_oracle_velocity, make_dataset, step_rng, DataConfig};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Rows = Vec<Vec<f64>>;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn array(rows: &Rows) -> PyResult<Array> {
    Array::from_rows(rows).map_err(err)
}

fn rows(a: &Array) -> Rows {
    if a.shape().len() == 1 {
        return vec![a.data().to_vec()];
    }
    (0..a.rows()).map(|i| a.row(i).to_vec()).collect()
}

fn mode(name: &str) -> PyResult<PredictionMode> {
    match name {
        "epsilon" => Ok(PredictionMode::Epsilon),
        "x0" => Ok(PredictionMode::X0),
        "velocity" | "v" => Ok(PredictionMode::Velocity),
        _ => Err(PyValueError::new_err(format!("unknown prediction mode `{name}`"))),
    }
}

/// `(alpha, sigma, d_alpha, d_sigma)` of the cosine schedule at `t`.
#[pyfunction]
fn schedule(t: f64) -> PyResult<(f64, f64, f64, f64)> {
    let s = Schedule.eval(t).map_err(err)?;
    Ok((s.alpha, s.sigma, s.d_alpha, s.d_sigma))
}

#[pyfunction]
fn forward_diffuse(x0: Rows, t: f64, eps: Rows) -> PyResult<Rows> {
    let p = diffusion::forward_diffuse(&array(&x0)?, t, &array(&eps)?).map_err(err)?;
    Ok(rows(&p.z))
}

#[pyfunction]
fn velocity_target(x0: Rows, eps: Rows, t: f64) -> PyResult<Rows> {
    Ok(rows(&diffusion::velocity_target(&array(&x0)?, &array(&eps)?, t).map_err(err)?))
}

/// Recovers `x0` from a prediction in mode `epsilon`, `x0` or `velocity`.
#[pyfunction]
fn to_x0(prediction_mode: &str, value: Rows, z: Rows, t: f64) -> PyResult<Rows> {
    let point = DiffusionPoint::new(array(&z)?, t).map_err(err)?;
    let pred = Prediction {
        mode: mode(prediction_mode)?,
        value: array(&value)?,
    };
    Ok(rows(&diffusion::to_x0(&pred, &point).map_err(err)?))
}

#[pyfunction]
fn guidance_mix(cond: Rows, uncond: Rows, w: f64) -> PyResult<Rows> {
    Ok(rows(&sampler::guidance_mix(&array(&cond)?, &array(&uncond)?, w).map_err(err)?))
}

struct Oracle {
    mu: f64,
    s: f64,
}

impl VelocityNet for Oracle {
    fn velocity(&mut self, z: &Array, t: f64, _guided: bool) -> ditar_core::Result<GuidedScore> {
        let p = DiffusionPoint::new(z.clone(), t)?;
        Ok(GuidedScore {
            conditional: gaussian_oracle_velocity(&p, self.mu, self.s)?,
            unconditional: None,
        })
    }
}

/// Draws `n` samples of length `dim` from `N(mu, s²)` data with the exact
/// velocity field and the temperature sampler.
#[pyfunction]
#[pyo3(signature = (mu, s, n, dim, nfe=10, temperature=1.0, solver="ddim", seed=0))]
#[allow(clippy::too_many_arguments)]
fn sample_gaussian_oracle(
    mu: f64,
    s: f64,
    n: usize,
    dim: usize,
    nfe: usize,
    temperature: f64,
    solver: &str,
    seed: u64,
) -> PyResult<Rows> {
    let solver = match solver {
        "ddim" => Solver::Ddim,
        "euler" => Solver::Euler,
        _ => return Err(PyValueError::new_err(format!("unknown solver `{solver}`"))),
    };
    let cfg = SamplerConfig::new(temperature, nfe, 0.0, solver).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Oracle { mu, s };
    (0..n)
        .map(|_| {
            sampler::temperature_sample(&mut net, &cfg, &[dim], &mut rng)
                .map(|a| a.into_data())
                .map_err(err)
        })
        .collect()
}

#[pyfunction]
fn dispersion(samples: Rows) -> PyResult<f64> {
    let arrays: Vec<Array> = samples
        .into_iter()
        .map(|r| Array::new(&[r.len()], r).map_err(err))
        .collect::<PyResult<_>>()?;
    Ok(sampler::dispersion(&arrays))
}

#[pyfunction]
fn conv_flops(layers: u64, width: u64, kernel: u64, length: u64) -> PyResult<u64> {
    flops::conv_flops(&ArchSpec::conv1d(layers, width, kernel, length)).map_err(err)
}

#[pyfunction]
fn transformer_flops(layers: u64, width: u64, ffn: u64, length: u64) -> PyResult<u64> {
    flops::transformer_flops(&ArchSpec::transformer(layers, width, ffn, length)).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (layers, width, ffn, prefix, length, quadratic=false))]
fn causal_transformer_flops(layers: u64, width: u64, ffn: u64, prefix: u64, length: u64, quadratic: bool) -> PyResult<u64> {
    let att = if quadratic {
        DecodeAttention::Quadratic
    } else {
        DecodeAttention::Linear
    };
    flops::causal_transformer_flops(&ArchSpec::causal(layers, width, ffn, prefix, length), att).map_err(err)
}

/// Cost breakdown of the configured report (paper scale by default).
#[pyfunction]
#[pyo3(signature = (config_toml=""))]
fn cost_report(config_toml: &str) -> PyResult<HashMap<String, u64>> {
    let cfg = RunConfig::from_toml(config_toml, &[]).map_err(err)?;
    let r = flops::ditar_report(&cfg.report_config()).map_err(err)?;
    Ok(HashMap::from([
        ("encoder".into(), r.encoder),
        ("lm".into(), r.lm),
        ("locdit_pass".into(), r.locdit_pass),
        ("patches".into(), r.patches),
        ("nfe_multiplier".into(), r.nfe_multiplier),
        ("guidance_multiplier".into(), r.guidance_multiplier),
        ("locdit".into(), r.locdit),
        ("total".into(), r.total),
    ]))
}

/// Toy sinusoid examples as `(text_ids, tokens, frequency_class)`.
#[pyfunction]
#[pyo3(signature = (count=8, seed=0))]
fn toy_dataset(count: usize, seed: u64) -> PyResult<Vec<(Vec<usize>, Rows, usize)>> {
    let cfg = DataConfig {
        count,
        seed,
        ..DataConfig::default()
    };
    Ok(make_dataset(&cfg)
        .map_err(err)?
        .into_iter()
        .map(|e| (e.text_ids.clone(), rows(e.tokens.tokens()), e.freq_class))
        .collect())
}

/// The autoregressive patch model.
#[pyclass(name = "Model")]
struct PyModel {
    inner: Ditar,
}

#[pymethods]
impl PyModel {
    /// A freshly initialized model; `config_toml` uses the run-config format.
    #[new]
    #[pyo3(signature = (seed=0, config_toml=""))]
    fn new(seed: u64, config_toml: &str) -> PyResult<Self> {
        let cfg = RunConfig::from_toml(config_toml, &[]).map_err(err)?;
        Ok(Self {
            inner: Ditar::new(cfg.model, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ck = checkpoint::load(Path::new(path)).map_err(err)?;
        Ok(Self { inner: ck.model })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::save(Path::new(path), &self.inner, None, &serde_json::Value::Null).map_err(err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params().num_scalars()
    }

    #[getter]
    fn patch_size(&self) -> usize {
        self.inner.config().patch_size
    }

    #[getter]
    fn token_dim(&self) -> usize {
        self.inner.config().token_dim
    }

    /// Continues `prompt` (rows of tokens) for at most `max_patches`
    /// patches. Returns the generated tokens and whether the stop head fired.
    #[pyo3(signature = (text_ids, prompt, max_patches, temperature=0.0, nfe=10, guidance_scale=1.0, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        &self,
        text_ids: Vec<usize>,
        prompt: Rows,
        max_patches: usize,
        temperature: f64,
        nfe: usize,
        guidance_scale: f64,
        seed: u64,
    ) -> PyResult<(Rows, bool)> {
        let prompt = if prompt.is_empty() {
            None
        } else {
            Some(TokenSequence::new(array(&prompt)?).map_err(err)?)
        };
        let cfg = SamplerConfig::new(temperature, nfe, guidance_scale, Solver::Ddim).map_err(err)?;
        let mut rng = step_rng(seed, 0);
        let g = self
            .inner
            .generate(&text_ids, prompt.as_ref(), &cfg, max_patches, &mut rng)
            .map_err(err)?;
        let d = self.inner.config().token_dim;
        Ok((g.tokens.data().chunks(d).map(<[f64]>::to_vec).collect(), g.stopped))
    }
}

/// Runs a CLI command (`gen-data`, `train`, `sample`, `ablate`, `flops`)
/// and returns its record as JSON.
#[pyfunction]
#[pyo3(signature = (command, out, config_toml="", overrides=Vec::new()))]
fn run(command: &str, out: &str, config_toml: &str, overrides: Vec<String>) -> PyResult<String> {
    let cfg = RunConfig::from_toml(config_toml, &overrides).map_err(err)?;
    let out = Path::new(out);
    let fail = |e: ditar_cli::CliError| PyRuntimeError::new_err(format!("{e} (exit code {})", e.exit_code()));
    let json = match command {
        "gen-data" => {
            let g = cmd_gen_data(&cfg, out).map_err(fail)?;
            serde_json::json!({ "train": g.train, "heldout": g.heldout })
        }
        "train" => serde_json::to_value(cmd_train(&cfg, out).map_err(fail)?).map_err(err)?,
        "sample" => serde_json::to_value(cmd_sample(&cfg, out, None).map_err(fail)?.record).map_err(err)?,
        "ablate" => serde_json::to_value(
            cmd_ablate(&cfg, out, None)
                .map_err(fail)?
                .into_iter()
                .map(|o| o.record)
                .collect::<Vec<_>>(),
        )
        .map_err(err)?,
        "flops" => serde_json::to_value(cmd_flops(&cfg, out).map_err(fail)?).map_err(err)?,
        _ => return Err(PyValueError::new_err(format!("unknown command `{command}`"))),
    };
    Ok(json.to_string())
}

#[pymodule]
fn ditar(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(schedule, m)?)?;
    m.add_function(wrap_pyfunction!(forward_diffuse, m)?)?;
    m.add_function(wrap_pyfunction!(velocity_target, m)?)?;
    m.add_function(wrap_pyfunction!(to_x0, m)?)?;
    m.add_function(wrap_pyfunction!(guidance_mix, m)?)?;
    m.add_function(wrap_pyfunction!(sample_gaussian_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(dispersion, m)?)?;
    m.add_function(wrap_pyfunction!(conv_flops, m)?)?;
    m.add_function(wrap_pyfunction!(transformer_flops, m)?)?;
    m.add_function(wrap_pyfunction!(causal_transformer_flops, m)?)?;
    m.add_function(wrap_pyfunction!(cost_report, m)?)?;
    m.add_function(wrap_pyfunction!(toy_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let r = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert_eq!(rows(&array(&r).unwrap()), r);
        assert_eq!(rows(&Array::new(&[2], vec![5.0, 6.0]).unwrap()), vec![vec![5.0, 6.0]]);
    }
}
