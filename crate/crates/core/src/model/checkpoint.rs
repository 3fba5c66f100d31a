//! Single-file checkpoints: magic, little-endian `u64` header length, a
//! JSON header (format version, model config, tensor table, optional
//! optimizer state, free-form metadata), then raw `f64` LE payloads.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Ditar, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{Array, ParamStore};
use crate::training::{AdamW, AdamWConfig};

const MAGIC: &[u8; 8] = b"DITARCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload in `f64` elements.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamWConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
    meta: serde_json::Value,
}

/// Everything a checkpoint holds.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Ditar,
    pub optimizer: Option<AdamW>,
    pub meta: serde_json::Value,
}

fn m_name(name: &str) -> String {
    format!("optim.m/{name}")
}

fn v_name(name: &str) -> String {
    format!("optim.v/{name}")
}

pub fn write_to<W: Write>(
    mut w: W,
    model: &Ditar,
    optimizer: Option<&AdamW>,
    meta: &serde_json::Value,
) -> Result<()> {
    let mut named: Vec<(String, &Array)> = model
        .params()
        .iter()
        .map(|(_, name, p)| (name.to_string(), &p.value))
        .collect();
    if let Some(opt) = optimizer {
        if opt.slots() != model.params().len() {
            return Err(Error::invalid("optimizer state does not match the parameter set"));
        }
        for ((_, name, _), (m, v)) in model.params().iter().zip(opt.moments()) {
            named.push((m_name(name), m));
            named.push((v_name(name), v));
        }
    }
    let mut tensors = Vec::with_capacity(named.len());
    let mut offset = 0;
    for (name, a) in &named {
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: a.shape().to_vec(),
            offset,
        });
        offset += a.len();
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config().clone(),
        tensors,
        optimizer: optimizer.map(|o| OptimizerHeader {
            config: o.config().clone(),
            step: o.step_count(),
        }),
        meta: meta.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(offset * 8);
    for (_, a) in &named {
        for x in a.data() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_from<R: Read>(mut r: R) -> Result<Checkpoint> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated checkpoint".into()))?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)
        .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 30 {
        return Err(Error::Format("implausible checkpoint header length".into()));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)
        .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint format version {}",
            header.format_version
        )));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format("payload is not a whole number of f64 values".into()));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if total != values.len() {
        return Err(Error::Format(format!(
            "payload holds {} values, header describes {total}",
            values.len()
        )));
    }
    let mut params = ParamStore::new();
    let mut m = std::collections::HashMap::new();
    let mut v = std::collections::HashMap::new();
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let end = t.offset.checked_add(n).filter(|&e| e <= values.len());
        let end = end.ok_or_else(|| Error::Format(format!("tensor {} overruns the payload", t.name)))?;
        let a = Array::new(&t.shape, values[t.offset..end].to_vec())?;
        if let Some(name) = t.name.strip_prefix("optim.m/") {
            m.insert(name.to_string(), a);
        } else if let Some(name) = t.name.strip_prefix("optim.v/") {
            v.insert(name.to_string(), a);
        } else {
            params.add(t.name.clone(), a)?;
        }
    }
    let optimizer = match header.optimizer {
        None => None,
        Some(o) => {
            let mut ms = Vec::with_capacity(params.len());
            let mut vs = Vec::with_capacity(params.len());
            for (_, name, _) in params.iter() {
                let missing = || Error::Format(format!("optimizer state missing for {name}"));
                ms.push(m.remove(name).ok_or_else(missing)?);
                vs.push(v.remove(name).ok_or_else(missing)?);
            }
            Some(AdamW::from_state(o.config, o.step, ms, vs)?)
        }
    };
    let model = Ditar::from_params(header.config, params)?;
    Ok(Checkpoint {
        model,
        optimizer,
        meta: header.meta,
    })
}

/// Writes via a temporary sibling file and a rename, so a crash never
/// leaves a half-written checkpoint at `path`.
pub fn save(path: &Path, model: &Ditar, optimizer: Option<&AdamW>, meta: &serde_json::Value) -> Result<()> {
    let mut buf = Vec::new();
    write_to(&mut buf, model, optimizer, meta)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path)?;
    read_from(std::io::BufReader::new(file))
}
