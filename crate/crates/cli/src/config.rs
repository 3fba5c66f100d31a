use std::path::Path;

use ditar_core::flops::{DecodeAttention, ReportConfig};
use ditar_core::model::ModelConfig;
use ditar_core::sampler::SamplerConfig;
use ditar_core::training::{AdamWConfig, DataConfig, EvalConfig, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Version stamped into every file the CLI writes.
pub const FORMAT_VERSION: u32 = 1;

/// Everything a command needs. Section seeds are offsets added to the
/// top-level `seed`, so `--seed` moves every stream at once while the
/// streams stay distinct.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub format_version: u32,
    pub seed: u64,
    pub data: DataConfig,
    pub heldout: HeldoutConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub eval: EvalConfig,
    pub sample: SampleConfig,
    pub ablate: AblateConfig,
    pub flops: FlopsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            seed: 0,
            data: DataConfig::default(),
            heldout: HeldoutConfig::default(),
            model: ModelConfig::default(),
            train: TrainSection::default(),
            eval: EvalConfig::default(),
            sample: SampleConfig::default(),
            ablate: AblateConfig::default(),
            flops: FlopsConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeldoutConfig {
    pub seed: u64,
    pub count: usize,
}

impl Default for HeldoutConfig {
    fn default() -> Self {
        Self { seed: 1, count: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub seed: u64,
    /// Seed of the weight initialization.
    pub init_seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    pub cond_dropout: f64,
    pub optimizer: AdamWConfig,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Continue from an existing checkpoint in the output directory.
    pub resume: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            seed: t.seed,
            init_seed: 0,
            steps: t.steps,
            batch_size: t.batch_size,
            cond_dropout: t.cond_dropout,
            optimizer: t.optimizer,
            checkpoint_every: 500,
            resume: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub seed: u64,
    /// Held-out prompts to continue.
    pub prompts: usize,
    pub repeats: usize,
    pub temperatures: Vec<f64>,
    /// Generation budget beyond the longest length class.
    pub extra_patches: usize,
    /// Audio prompt length in patches; defaults to `data.prompt_patches`.
    /// Zero samples from text alone.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_patches: Option<usize>,
    /// `temperature` here is ignored in favour of the sweep.
    pub sampler: SamplerConfig,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            prompts: 4,
            repeats: 16,
            temperatures: vec![0.0, 0.5, 1.0],
            extra_patches: 2,
            prompt_patches: None,
            sampler: SamplerConfig::default(),
        }
    }
}

/// One sweep arm: a name and the settings it changes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arm {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub history: Option<usize>,
    /// Changes the patch size at a fixed sequence length in tokens.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guidance_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nfe: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cond_dropout: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub arms: Vec<Arm>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopsSource {
    /// The ~0.6B configuration.
    #[default]
    PaperScale,
    /// The `[model]` section with the lengths below.
    Model,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlopsConfig {
    pub source: FlopsSource,
    pub text_tokens: u64,
    pub prompt_patches: u64,
    pub target_patches: u64,
    pub nfe: u64,
    pub guidance: bool,
    pub decode_attention: DecodeAttention,
}

impl Default for FlopsConfig {
    fn default() -> Self {
        Self {
            source: FlopsSource::PaperScale,
            text_tokens: 3,
            prompt_patches: 2,
            target_patches: 4,
            nfe: 10,
            guidance: true,
            decode_attention: DecodeAttention::Linear,
        }
    }
}

impl RunConfig {
    /// Parses a TOML document, applies `key.path=value` overrides and
    /// validates the result.
    pub fn from_toml(text: &str, overrides: &[String]) -> CliResult<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| CliError::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |e: ditar_core::Error| CliError::Config(e.to_string());
        if self.format_version != FORMAT_VERSION {
            return Err(CliError::Config(format!(
                "format_version {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.data.validate().map_err(bad)?;
        self.model.validate().map_err(bad)?;
        self.train_config().validate().map_err(bad)?;
        self.eval.sampler.validate().map_err(bad)?;
        self.sample.sampler.validate().map_err(bad)?;
        if self.model.token_dim != self.data.token_dim || self.model.patch_size != self.data.patch_size {
            return Err(CliError::Config("model token_dim and patch_size must match the data".into()));
        }
        if self.model.text_vocab != self.data.vocab() {
            return Err(CliError::Config(format!(
                "model.text_vocab is {} but the data uses {} text ids",
                self.model.text_vocab,
                self.data.vocab()
            )));
        }
        if self.eval.prompt_patches != self.data.prompt_patches {
            return Err(CliError::Config("eval.prompt_patches must equal data.prompt_patches".into()));
        }
        if self.heldout.count == 0 {
            return Err(CliError::Config("heldout.count must be positive".into()));
        }
        if self.sample.temperatures.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(CliError::Config("sample temperatures must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn train_data(&self) -> DataConfig {
        DataConfig {
            seed: self.data.seed.wrapping_add(self.seed),
            ..self.data.clone()
        }
    }

    pub fn heldout_data(&self) -> DataConfig {
        DataConfig {
            seed: self.heldout.seed.wrapping_add(self.seed),
            count: self.heldout.count,
            ..self.data.clone()
        }
    }

    pub fn init_seed(&self) -> u64 {
        self.train.init_seed.wrapping_add(self.seed)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.train.seed.wrapping_add(self.seed),
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            cond_dropout: self.train.cond_dropout,
            optimizer: self.train.optimizer.clone(),
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            seed: self.eval.seed.wrapping_add(self.seed),
            ..self.eval.clone()
        }
    }

    pub fn sample_seed(&self) -> u64 {
        self.sample.seed.wrapping_add(self.seed)
    }

    pub fn report_config(&self) -> ReportConfig {
        let f = &self.flops;
        let mut r = match f.source {
            FlopsSource::PaperScale => ReportConfig::paper_scale(),
            FlopsSource::Model => ReportConfig::from_model(
                &self.model,
                f.text_tokens,
                f.prompt_patches,
                f.target_patches,
                f.nfe,
                f.guidance,
            ),
        };
        r.decode_attention = f.decode_attention;
        r
    }

    /// Hash of the sections that determine the trained weights.
    pub fn training_hash(&self) -> String {
        let key = serde_json::json!({
            "seed": self.seed,
            "data": self.data,
            "model": self.model,
            "train": {
                "seed": self.train.seed,
                "init_seed": self.train.init_seed,
                "steps": self.train.steps,
                "batch_size": self.train.batch_size,
                "cond_dropout": self.train.cond_dropout,
                "optimizer": self.train.optimizer,
            },
        });
        hex::encode(Sha256::digest(serde_json::to_vec(&key).expect("json")))
    }

    /// The configuration of one sweep arm.
    pub fn with_arm(&self, arm: &Arm) -> CliResult<Self> {
        let mut c = self.clone();
        c.ablate = AblateConfig::default();
        if let Some(h) = arm.history {
            c.model.history = h;
        }
        if let Some(p) = arm.patch_size {
            rescale_patch(&mut c, p)?;
        }
        if let Some(w) = arm.guidance_scale {
            c.eval.sampler.guidance_scale = w;
            c.sample.sampler.guidance_scale = w;
        }
        if let Some(t) = arm.temperature {
            c.eval.sampler.temperature = t;
        }
        if let Some(n) = arm.nfe {
            c.eval.sampler.nfe = n;
            c.sample.sampler.nfe = n;
        }
        if let Some(d) = arm.cond_dropout {
            c.train.cond_dropout = d;
        }
        c.validate()
            .map_err(|e| CliError::Config(format!("arm {}: {e}", arm.name)))?;
        Ok(c)
    }
}

/// Moves to patch size `p` while keeping every length, in tokens, fixed.
fn rescale_patch(c: &mut RunConfig, p: usize) -> CliResult<()> {
    let old = c.data.patch_size;
    let conv = |n: usize| {
        let tokens = n * old;
        if p == 0 || tokens % p != 0 {
            Err(CliError::Config(format!(
                "patch size {p} does not divide a length of {tokens} tokens"
            )))
        } else {
            Ok(tokens / p)
        }
    };
    c.data.lengths = c.data.lengths.iter().map(|&n| conv(n)).collect::<CliResult<_>>()?;
    c.data.prompt_patches = conv(c.data.prompt_patches)?;
    c.eval.prompt_patches = c.data.prompt_patches;
    c.data.patch_size = p;
    c.model.patch_size = p;
    Ok(())
}

fn apply_override(table: &mut toml::Table, spec: &str) -> CliResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not key=value")))?;
    // Bare words that do not parse as TOML are taken as strings.
    let value = match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.trim().split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("`{key}`: `{part}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(RunConfig::from_toml("", &[]).unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.ablate.arms.push(Arm {
            name: "h0".into(),
            history: Some(0),
            ..Arm::default()
        });
        let back = RunConfig::from_toml(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for doc in ["bogus = 1", "[train]\nstep = 3", "[eval.sampler]\nnfe = 2\nwidth = 3", "[[ablate.arms]]\nname = \"a\"\nlr = 1"] {
            assert!(matches!(RunConfig::from_toml(doc, &[]), Err(CliError::Config(_))), "{doc}");
        }
    }

    #[test]
    fn overrides_set_nested_keys() {
        let c = RunConfig::from_toml("", &["train.steps=7".into(), "eval.sampler.solver=euler".into(), "seed=3".into()]).unwrap();
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.eval.sampler.solver, ditar_core::sampler::Solver::Euler);
        assert_eq!(c.train_config().seed, 3);
        assert_eq!(c.heldout_data().seed, 4);
        assert!(RunConfig::from_toml("", &["train.nope=1".into()]).is_err());
        assert!(RunConfig::from_toml("", &["train".into()]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn inconsistent_sections_are_config_errors() {
        assert!(RunConfig::from_toml("[model]\ntoken_dim = 4", &[]).is_err());
        assert!(RunConfig::from_toml("format_version = 9", &[]).is_err());
        assert!(RunConfig::from_toml("[data]\ncount = 0", &[]).is_err());
    }

    #[test]
    fn patch_arm_keeps_token_lengths() {
        let c = RunConfig::default();
        let arm = Arm {
            name: "p2".into(),
            patch_size: Some(2),
            ..Arm::default()
        };
        let a = c.with_arm(&arm).unwrap();
        assert_eq!(a.data.lengths, vec![8, 10, 12]);
        assert_eq!(a.data.prompt_patches, 4);
        assert_eq!(a.model.patch_size, 2);
        let bad = Arm {
            patch_size: Some(3),
            ..arm
        };
        assert!(c.with_arm(&bad).is_err());
    }

    #[test]
    fn training_hash_ignores_sampling() {
        let c = RunConfig::default();
        let w0 = c
            .with_arm(&Arm {
                name: "w0".into(),
                guidance_scale: Some(0.0),
                ..Arm::default()
            })
            .unwrap();
        assert_eq!(c.training_hash(), w0.training_hash());
        assert_ne!(c.hash(), w0.hash());
    }
}
