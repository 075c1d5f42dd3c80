//! Binary checkpoint container.
//!
//! Layout: the 8-byte magic `RELCAP1\n`, a little-endian `u64` header length,
//! a JSON header, then the tensor payload as little-endian `f64`s. Manifest
//! offsets are byte offsets into the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::pipeline::{Captioner, RunConfig};
use crate::tensor::{Tensor, TensorMap};
use crate::text::Vocabulary;

pub const MAGIC: &[u8; 8] = b"RELCAP1\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub config: RunConfig,
    pub vocab: Vocabulary,
    pub tensors: Vec<ManifestEntry>,
}

pub fn to_bytes(model: &Captioner) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::with_capacity(model.params.tensors().len());
    for (name, t) in model.params.tensors() {
        tensors.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        version: FORMAT_VERSION,
        config: model.run.clone(),
        vocab: model.vocab.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a relcap checkpoint (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(16))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format(format!("header length {len} exceeds file size")))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes[16..end])
        .map_err(|e| Error::Format(format!("header is not valid JSON: {e}")))?;
    let version = value.get("version").and_then(serde_json::Value::as_u64);
    if version != Some(FORMAT_VERSION as u64) {
        return Err(Error::Format(format!(
            "checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
            version.map_or("missing".to_string(), |v| v.to_string())
        )));
    }
    let header: Header = serde_json::from_value(value)
        .map_err(|e| Error::Format(format!("malformed header: {e}")))?;
    Ok((header, &bytes[end..]))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Captioner> {
    let (header, payload) = read_header(bytes)?;
    let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(header.tensors.len());
    let mut tensors = TensorMap::new();
    for e in &header.tensors {
        let bad = |msg: String| Error::Format(format!("manifest entry {}: {msg}", e.name));
        let n = e
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .filter(|&n| n > 0 && e.shape.iter().all(|&d| d > 0))
            .ok_or_else(|| bad(format!("invalid shape {:?}", e.shape)))?;
        let bytes_len = n.checked_mul(8).ok_or_else(|| bad("size overflow".into()))?;
        let end = e
            .offset
            .checked_add(bytes_len)
            .filter(|&end| end <= payload.len() as u64)
            .ok_or_else(|| {
                bad(format!(
                    "offset {} + {bytes_len} bytes runs past the {}-byte payload",
                    e.offset,
                    payload.len()
                ))
            })?;
        if e.offset % 8 != 0 {
            return Err(bad(format!("offset {} is not 8-byte aligned", e.offset)));
        }
        let data: Vec<f64> = payload[e.offset as usize..end as usize]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(bad("contains non-finite values".into()));
        }
        if tensors
            .insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?)
            .is_some()
        {
            return Err(bad("duplicate name".into()));
        }
        spans.push((e.offset, end, &e.name));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::Format(format!(
                "manifest entry {}: overlaps entry {}",
                w[1].2, w[0].2
            )));
        }
    }
    let config = header.config;
    if config.model.vocab_size != header.vocab.len() {
        return Err(Error::Format(format!(
            "config vocab_size {} does not match the stored vocabulary of {}",
            config.model.vocab_size,
            header.vocab.len()
        )));
    }
    config
        .validate()
        .map_err(|e| Error::Format(format!("stored config is invalid: {e}")))?;
    let params = ModelParams::from_tensors(&config.model, tensors)
        .map_err(|e| Error::Format(format!("manifest does not match the model: {e}")))?;
    Ok(Captioner {
        run: config,
        vocab: header.vocab,
        params,
    })
}

pub fn save(path: impl AsRef<Path>, model: &Captioner) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Captioner> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
