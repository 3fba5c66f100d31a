//! Synthetic sinusoid sequences standing in for speech latents.
//!
//! Each example is `x(n) = √2·r·sin(2πf·n + φ)` with frequency class `f`,
//! RMS class `r`, a length class (in patches) and a uniform random phase.
//! Consecutive samples are folded into tokens of `D` channels. The text
//! prompt is three ids naming the three classes.

use std::f64::consts::{PI, SQRT_2};
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenSequence;
use crate::numerics::Array;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub count: usize,
    /// Samples per token.
    pub token_dim: usize,
    pub patch_size: usize,
    /// Cycles per sample.
    pub frequencies: Vec<f64>,
    pub rms: Vec<f64>,
    /// Sequence lengths in patches.
    pub lengths: Vec<usize>,
    /// Patches given as the audio prompt at evaluation time.
    pub prompt_patches: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 512,
            token_dim: 8,
            patch_size: 4,
            frequencies: vec![1.0 / 32.0, 2.0 / 32.0, 3.0 / 32.0, 4.0 / 32.0],
            rms: vec![0.5, 1.0, 1.5],
            lengths: vec![4, 5, 6],
            prompt_patches: 2,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::invalid("dataset count must be positive"));
        }
        if self.token_dim == 0 || self.patch_size == 0 {
            return Err(Error::invalid("token_dim and patch_size must be positive"));
        }
        if self.frequencies.is_empty() || self.rms.is_empty() || self.lengths.is_empty() {
            return Err(Error::invalid("every class list must be non-empty"));
        }
        if self.frequencies.iter().any(|&f| !(f > 0.0 && f < 0.5)) {
            return Err(Error::invalid("frequencies must lie in (0, 0.5) cycles per sample"));
        }
        if self.rms.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::invalid("rms classes must be positive"));
        }
        if self.lengths.iter().any(|&l| l <= self.prompt_patches) {
            return Err(Error::invalid("every length class must exceed prompt_patches"));
        }
        Ok(())
    }

    /// Text vocabulary: one id per class across the three class lists.
    pub fn vocab(&self) -> usize {
        self.frequencies.len() + self.rms.len() + self.lengths.len()
    }

    pub fn text_ids(&self, freq: usize, amp: usize, len: usize) -> Vec<usize> {
        let nf = self.frequencies.len();
        vec![freq, nf + amp, nf + self.rms.len() + len]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyExample {
    pub text_ids: Vec<usize>,
    pub tokens: TokenSequence,
    pub freq_class: usize,
    pub amp_class: usize,
    pub len_class: usize,
    pub phase: f64,
}

impl ToyExample {
    pub fn samples(&self) -> &[f64] {
        self.tokens.tokens().data()
    }

    /// First `patches·P` tokens.
    pub fn prompt(&self, patches: usize, patch_size: usize) -> Result<TokenSequence> {
        let n = (patches * patch_size).min(self.tokens.len());
        TokenSequence::new(self.tokens.tokens().slice_rows(0, n))
    }
}

pub fn waveform(cfg: &DataConfig, freq: usize, amp: usize, len: usize, phase: f64) -> Vec<f64> {
    let n = cfg.lengths[len] * cfg.patch_size * cfg.token_dim;
    let (f, a) = (cfg.frequencies[freq], SQRT_2 * cfg.rms[amp]);
    (0..n).map(|i| a * (2.0 * PI * f * i as f64 + phase).sin()).collect()
}

pub fn make_example(cfg: &DataConfig, freq: usize, amp: usize, len: usize, phase: f64) -> Result<ToyExample> {
    let samples = waveform(cfg, freq, amp, len, phase);
    let rows = samples.len() / cfg.token_dim;
    Ok(ToyExample {
        text_ids: cfg.text_ids(freq, amp, len),
        tokens: TokenSequence::new(Array::new(&[rows, cfg.token_dim], samples)?)?,
        freq_class: freq,
        amp_class: amp,
        len_class: len,
        phase,
    })
}

pub fn make_dataset(cfg: &DataConfig) -> Result<Vec<ToyExample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.count)
        .map(|_| {
            let freq = rng.random_range(0..cfg.frequencies.len());
            let amp = rng.random_range(0..cfg.rms.len());
            let len = rng.random_range(0..cfg.lengths.len());
            let phase = rng.random_range(0.0..2.0 * PI);
            make_example(cfg, freq, amp, len, phase)
        })
        .collect()
}

/// Frequency (cycles per sample) of the largest non-DC FFT bin.
pub fn dominant_frequency(signal: &[f64]) -> f64 {
    let n = signal.len();
    if n < 2 {
        return 0.0;
    }
    let mut buf: Vec<Complex<f64>> = signal.iter().map(|&x| Complex::new(x, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let best = (1..=n / 2)
        .max_by(|&a, &b| buf[a].norm_sqr().total_cmp(&buf[b].norm_sqr()))
        .unwrap_or(1);
    best as f64 / n as f64
}

/// Index of the class frequency nearest the dominant FFT frequency.
pub fn classify_frequency(signal: &[f64], classes: &[f64]) -> usize {
    let f = dominant_frequency(signal);
    (0..classes.len())
        .min_by(|&a, &b| (classes[a] - f).abs().total_cmp(&(classes[b] - f).abs()))
        .unwrap_or(0)
}

pub fn rms(signal: &[f64]) -> f64 {
    if signal.is_empty() {
        return 0.0;
    }
    (signal.iter().map(|x| x * x).sum::<f64>() / signal.len() as f64).sqrt()
}

// ---- dataset file ------------------------------------------------------

const MAGIC: &[u8; 8] = b"DITARDS1";
pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ExampleHeader {
    text_ids: Vec<usize>,
    freq_class: usize,
    amp_class: usize,
    len_class: usize,
    phase: f64,
    rows: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    format_version: u32,
    config: DataConfig,
    token_dim: usize,
    examples: Vec<ExampleHeader>,
    meta: serde_json::Value,
}

/// A dataset as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub config: DataConfig,
    pub examples: Vec<ToyExample>,
    pub meta: serde_json::Value,
}

pub fn write_dataset<W: Write>(mut w: W, cfg: &DataConfig, examples: &[ToyExample], meta: &serde_json::Value) -> Result<()> {
    let header = DatasetHeader {
        format_version: DATASET_FORMAT_VERSION,
        config: cfg.clone(),
        token_dim: cfg.token_dim,
        examples: examples
            .iter()
            .map(|e| ExampleHeader {
                text_ids: e.text_ids.clone(),
                freq_class: e.freq_class,
                amp_class: e.amp_class,
                len_class: e.len_class,
                phase: e.phase,
                rows: e.tokens.len(),
            })
            .collect(),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::new();
    for e in examples {
        for x in e.samples() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<DatasetFile> {
    let mut head = [0u8; 16];
    r.read_exact(&mut head)
        .map_err(|_| Error::Format("truncated dataset file".into()))?;
    if &head[..8] != MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let len = u64::from_le_bytes(head[8..].try_into().expect("8 bytes")) as usize;
    if len > 1 << 30 {
        return Err(Error::Format("implausible dataset header length".into()));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|_| Error::Format("truncated dataset header".into()))?;
    let header: DatasetHeader = serde_json::from_slice(&json)?;
    if header.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported dataset format version {}",
            header.format_version
        )));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let d = header.token_dim;
    let expected: usize = header.examples.iter().map(|e| e.rows * d * 8).sum();
    if bytes.len() != expected || d == 0 {
        return Err(Error::Format(format!(
            "dataset payload has {} bytes, header describes {expected}",
            bytes.len()
        )));
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut examples = Vec::with_capacity(header.examples.len());
    for e in header.examples {
        let data: Vec<f64> = values.by_ref().take(e.rows * d).collect();
        examples.push(ToyExample {
            text_ids: e.text_ids,
            tokens: TokenSequence::new(Array::new(&[e.rows, d], data)?)?,
            freq_class: e.freq_class,
            amp_class: e.amp_class,
            len_class: e.len_class,
            phase: e.phase,
        });
    }
    Ok(DatasetFile {
        config: header.config,
        examples,
        meta: header.meta,
    })
}

pub fn save_dataset(path: &Path, cfg: &DataConfig, examples: &[ToyExample], meta: &serde_json::Value) -> Result<()> {
    let mut buf = Vec::new();
    write_dataset(&mut buf, cfg, examples, meta)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<DatasetFile> {
    read_dataset(std::io::BufReader::new(std::fs::File::open(path)?))
}
