//! Run records, columnar tables and the embedded config hash.

use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use ditar_core::model::checkpoint;
use ditar_core::training::{load_dataset, Metrics, StepRecord};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, FORMAT_VERSION};
use crate::error::{CliError, CliResult};

pub const RECORD_FILE: &str = "record.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointRef {
    /// Relative to the record's directory.
    pub path: String,
    pub step: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub format_version: u32,
    pub command: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub loss_curve: Vec<StepRecord>,
    pub final_metrics: Option<Metrics>,
    pub checkpoint: Option<CheckpointRef>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

impl RunRecord {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            command: command.to_string(),
            config_hash: cfg.hash(),
            config: cfg.clone(),
            loss_curve: Vec::new(),
            final_metrics: None,
            checkpoint: None,
            extra: serde_json::Value::Null,
        }
    }

    pub fn save(&self, dir: &Path) -> CliResult<PathBuf> {
        let path = dir.join(RECORD_FILE);
        let json = serde_json::to_string_pretty(self).map_err(|e| CliError::Data(e.to_string()))?;
        write_atomic(&path, json.as_bytes())?;
        Ok(path)
    }

    pub fn load(dir: &Path) -> CliResult<Self> {
        let path = dir.join(RECORD_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

/// Metadata stored in binary files.
pub fn file_meta(cfg: &RunConfig, extra: serde_json::Value) -> serde_json::Value {
    serde_json::json!({
        "format_version": FORMAT_VERSION,
        "config_hash": cfg.hash(),
        "config": cfg,
        "extra": extra,
    })
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| CliError::Data(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn table_header(hash: &str) -> String {
    format!("# format_version={FORMAT_VERSION} config_hash={hash}\n")
}

/// Tab-separated table behind a comment line carrying the config hash.
pub fn write_table(path: &Path, hash: &str, columns: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let mut out = table_header(hash);
    out.push_str(&columns.join("\t"));
    out.push('\n');
    for r in rows {
        out.push_str(&r.join("\t"));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Reads a table written by [`write_table`]: (hash, columns, rows).
pub fn read_table(path: &Path) -> CliResult<(String, Vec<String>, Vec<Vec<String>>)> {
    let f = fs::File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut lines = BufReader::new(f).lines();
    let mut next = || -> CliResult<Option<String>> { lines.next().transpose().map_err(CliError::from) };
    let first = next()?.ok_or_else(|| CliError::Data(format!("{}: empty table", path.display())))?;
    let hash = parse_table_header(&first).ok_or_else(|| CliError::Data(format!("{}: missing hash header", path.display())))?;
    let columns = next()?
        .ok_or_else(|| CliError::Data(format!("{}: missing column header", path.display())))?
        .split('\t')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    while let Some(l) = next()? {
        rows.push(l.split('\t').map(str::to_string).collect());
    }
    Ok((hash, columns, rows))
}

fn parse_table_header(line: &str) -> Option<String> {
    let rest = line.strip_prefix("# ")?;
    let mut version = None;
    let mut hash = None;
    for kv in rest.split_whitespace() {
        match kv.split_once('=')? {
            ("format_version", v) => version = v.parse::<u32>().ok(),
            ("config_hash", h) => hash = Some(h.to_string()),
            _ => {}
        }
    }
    (version == Some(FORMAT_VERSION)).then_some(hash?)
}

/// Result of checking one file.
#[derive(Clone, Debug, PartialEq)]
pub struct Verified {
    pub path: PathBuf,
    pub kind: &'static str,
    pub config_hash: String,
}

fn check_meta(path: &Path, meta: &serde_json::Value) -> CliResult<String> {
    let bad = |m: &str| CliError::Data(format!("{}: {m}", path.display()));
    if meta.get("format_version").and_then(|v| v.as_u64()) != Some(FORMAT_VERSION as u64) {
        return Err(bad("unsupported or missing format_version"));
    }
    let hash = meta
        .get("config_hash")
        .and_then(|v| v.as_str())
        .ok_or_else(|| bad("no config hash"))?;
    let cfg: RunConfig = serde_json::from_value(meta.get("config").cloned().unwrap_or_default())
        .map_err(|e| bad(&format!("embedded config does not parse: {e}")))?;
    if cfg.hash() != hash {
        return Err(bad("embedded config does not match its hash"));
    }
    Ok(hash.to_string())
}

/// Re-derives the config hash a file claims and, when `expected` is given,
/// compares it to that config's hash.
pub fn verify_file(path: &Path, expected: Option<&RunConfig>) -> CliResult<Verified> {
    let mut head = [0u8; 8];
    let n = fs::File::open(path)
        .and_then(|mut f| f.read(&mut head))
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let (kind, hash) = match &head[..n] {
        b"DITARCKP" => {
            let ck = checkpoint::load(path).map_err(CliError::from)?;
            ("checkpoint", check_meta(path, &ck.meta)?)
        }
        b"DITARDS1" => {
            let ds = load_dataset(path).map_err(CliError::from)?;
            ("dataset", check_meta(path, &ds.meta)?)
        }
        h if h.first() == Some(&b'{') => {
            let text = fs::read_to_string(path)?;
            let rec: RunRecord =
                serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            let value = serde_json::json!({
                "format_version": rec.format_version,
                "config_hash": rec.config_hash,
                "config": rec.config,
            });
            ("record", check_meta(path, &value)?)
        }
        h if h.first() == Some(&b'#') => {
            let (hash, _, _) = read_table(path)?;
            // Tables carry only the hash; the sibling record holds the config.
            let dir = path.parent().unwrap_or(Path::new("."));
            let rec = verify_file(&dir.join(RECORD_FILE), None)?;
            if rec.config_hash != hash {
                return Err(CliError::Data(format!("{}: hash differs from its record", path.display())));
            }
            ("table", hash)
        }
        _ => return Err(CliError::Data(format!("{}: not a ditar output file", path.display()))),
    };
    if let Some(cfg) = expected {
        if cfg.hash() != hash {
            return Err(CliError::Data(format!(
                "{}: produced by config {hash}, expected {}",
                path.display(),
                cfg.hash()
            )));
        }
    }
    Ok(Verified {
        path: path.to_path_buf(),
        kind,
        config_hash: hash,
    })
}

pub fn fmt_f(x: f64) -> String {
    // Shortest repr that round-trips.
    format!("{x:?}")
}
