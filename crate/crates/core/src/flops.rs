//! Analytic inference FLOPs. Every matrix product `[M×K]·[K×N]` costs
//! `2·M·K·N`; biases, normalization and embedding lookups are ignored.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, StackConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    Conv1d,
    Transformer,
    CausalTransformer,
}

/// Layer count `N`, width `C`, FFN width `C_mid`, kernel `K`, length `T`
/// and (causal only) prefix length `T_pre`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub kind: ArchKind,
    pub layers: u64,
    pub width: u64,
    #[serde(default)]
    pub ffn: u64,
    #[serde(default)]
    pub kernel: u64,
    pub length: u64,
    #[serde(default)]
    pub prefix: u64,
}

impl ArchSpec {
    pub fn conv1d(layers: u64, width: u64, kernel: u64, length: u64) -> Self {
        Self {
            kind: ArchKind::Conv1d,
            layers,
            width,
            ffn: 0,
            kernel,
            length,
            prefix: 0,
        }
    }

    pub fn transformer(layers: u64, width: u64, ffn: u64, length: u64) -> Self {
        Self {
            kind: ArchKind::Transformer,
            layers,
            width,
            ffn,
            kernel: 0,
            length,
            prefix: 0,
        }
    }

    pub fn causal(layers: u64, width: u64, ffn: u64, prefix: u64, length: u64) -> Self {
        Self {
            kind: ArchKind::CausalTransformer,
            layers,
            width,
            ffn,
            kernel: 0,
            length,
            prefix,
        }
    }

    fn expect(&self, kind: ArchKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::invalid(format!("expected a {kind:?} spec, got {:?}", self.kind)));
        }
        if self.layers == 0 || self.width == 0 {
            return Err(Error::invalid("layers and width must be positive"));
        }
        match kind {
            ArchKind::Conv1d if self.kernel == 0 => Err(Error::invalid("conv1d needs a positive kernel")),
            ArchKind::Transformer | ArchKind::CausalTransformer if self.ffn == 0 => {
                Err(Error::invalid("transformers need a positive ffn width"))
            }
            _ => Ok(()),
        }
    }
}

/// Per-token attention cost while decoding with a KV cache.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeAttention {
    /// `2·t·C` each for `q·Kᵀ` and `p·V` over `t` cached positions.
    #[default]
    Linear,
    /// The printed `2·t²·C` form.
    Quadratic,
}

/// `2·C²·K·T·N`.
pub fn conv_flops(spec: &ArchSpec) -> Result<u64> {
    spec.expect(ArchKind::Conv1d)?;
    let s = spec;
    Ok(2 * s.width * s.width * s.kernel * s.length * s.layers)
}

fn dense_layer(t: u64, c: u64, c_mid: u64) -> u64 {
    6 * t * c * c + 2 * t * t * c + 2 * t * t * c + 2 * t * c * c + 2 * t * c * c_mid + 2 * t * c * c_mid
}

/// `(6TC² + 2T²C + 2T²C + 2TC² + 2TC·C_mid + 2TC·C_mid)·N`.
pub fn transformer_flops(spec: &ArchSpec) -> Result<u64> {
    spec.expect(ArchKind::Transformer)?;
    Ok(dense_layer(spec.length, spec.width, spec.ffn) * spec.layers)
}

/// Prefix pass over `T_pre` tokens plus `T` cached decoding steps, the
/// step at position `t` attending over `t` keys.
pub fn causal_transformer_flops(spec: &ArchSpec, attention: DecodeAttention) -> Result<u64> {
    spec.expect(ArchKind::CausalTransformer)?;
    let (c, c_mid, n) = (spec.width, spec.ffn, spec.layers);
    let prefix = dense_layer(spec.prefix, c, c_mid) * n;
    let mut decode = 0;
    for t in spec.prefix + 1..=spec.prefix + spec.length {
        let attended = match attention {
            DecodeAttention::Linear => t,
            DecodeAttention::Quadratic => t * t,
        };
        decode += 6 * c * c + 2 * attended * c + 2 * attended * c + 2 * c * c + 4 * c * c_mid;
    }
    Ok(prefix + decode * n)
}

pub fn arch_flops(spec: &ArchSpec, attention: DecodeAttention) -> Result<u64> {
    match spec.kind {
        ArchKind::Conv1d => conv_flops(spec),
        ArchKind::Transformer => transformer_flops(spec),
        ArchKind::CausalTransformer => causal_transformer_flops(spec, attention),
    }
}

/// Inputs of a full inference cost estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    pub encoder: StackConfig,
    pub lm: StackConfig,
    pub locdit: StackConfig,
    pub patch_size: u64,
    pub history: u64,
    pub text_tokens: u64,
    pub prompt_patches: u64,
    pub target_patches: u64,
    pub nfe: u64,
    pub guidance: bool,
    #[serde(default)]
    pub decode_attention: DecodeAttention,
}

impl ReportConfig {
    pub fn from_model(cfg: &ModelConfig, text_tokens: u64, prompt_patches: u64, target_patches: u64, nfe: u64, guidance: bool) -> Self {
        Self {
            encoder: cfg.encoder,
            lm: cfg.lm,
            locdit: cfg.locdit,
            patch_size: cfg.patch_size as u64,
            history: cfg.history as u64,
            text_tokens,
            prompt_patches,
            target_patches,
            nfe,
            guidance,
            decode_attention: DecodeAttention::Linear,
        }
    }

    /// The ~0.6B configuration: 6/36/6 layers of width 1024 with FFN 4096,
    /// 40 Hz tokens in patches of 4, a 3 s prompt and a 10 s target, NFE 10
    /// with guidance. Text is taken as 91 tokens (prompt plus target
    /// transcript at about 7 tokens per second).
    pub fn paper_scale() -> Self {
        let stack = |layers| StackConfig {
            layers,
            width: 1024,
            ffn: 4096,
            heads: 16,
        };
        Self {
            encoder: stack(6),
            lm: stack(36),
            locdit: stack(6),
            patch_size: 4,
            history: 1,
            text_tokens: 91,
            prompt_patches: 30,
            target_patches: 100,
            nfe: 10,
            guidance: true,
            decode_attention: DecodeAttention::Linear,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    /// Aggregation encoder over every prompt and generated patch.
    pub encoder: u64,
    /// Causal LM: prefix of text and prompt patches, then one step per
    /// generated patch.
    pub lm: u64,
    /// One LocDiT pass over one patch.
    pub locdit_pass: u64,
    pub patches: u64,
    pub nfe_multiplier: u64,
    pub guidance_multiplier: u64,
    /// `locdit_pass · patches · nfe · guidance`.
    pub locdit: u64,
    pub total: u64,
}

impl CostReport {
    pub fn tflops(&self) -> f64 {
        self.total as f64 / 1e12
    }

    pub fn to_table(&self) -> String {
        let rows = [
            ("encoder", self.encoder),
            ("lm", self.lm),
            ("locdit_pass", self.locdit_pass),
            ("patches", self.patches),
            ("nfe_multiplier", self.nfe_multiplier),
            ("guidance_multiplier", self.guidance_multiplier),
            ("locdit", self.locdit),
            ("total", self.total),
        ];
        let mut out = String::from("component\tvalue\n");
        for (k, v) in rows {
            out.push_str(&format!("{k}\t{v}\n"));
        }
        out.push_str(&format!("total_tflops\t{:.4}\n", self.tflops()));
        out
    }
}

pub fn ditar_report(cfg: &ReportConfig) -> Result<CostReport> {
    if cfg.patch_size == 0 || cfg.nfe == 0 {
        return Err(Error::invalid("patch_size and nfe must be positive"));
    }
    let stack = |s: &StackConfig, t| ArchSpec::transformer(s.layers as u64, s.width as u64, s.ffn as u64, t);
    let encoder_patch = transformer_flops(&stack(&cfg.encoder, 1 + cfg.patch_size))?;
    let encoder = encoder_patch * (cfg.prompt_patches + cfg.target_patches);
    let lm = causal_transformer_flops(
        &ArchSpec::causal(
            cfg.lm.layers as u64,
            cfg.lm.width as u64,
            cfg.lm.ffn as u64,
            cfg.text_tokens + cfg.prompt_patches,
            cfg.target_patches,
        ),
        cfg.decode_attention,
    )?;
    let locdit_pass = transformer_flops(&stack(&cfg.locdit, 1 + cfg.history * cfg.patch_size + cfg.patch_size))?;
    let guidance_multiplier = if cfg.guidance { 2 } else { 1 };
    let locdit = locdit_pass * cfg.target_patches * cfg.nfe * guidance_multiplier;
    Ok(CostReport {
        encoder,
        lm,
        locdit_pass,
        patches: cfg.target_patches,
        nfe_multiplier: cfg.nfe,
        guidance_multiplier,
        locdit,
        total: encoder + lm + locdit,
    })
}
