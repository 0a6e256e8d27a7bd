//! Portable tensor container: an 8-byte little-endian header length, a UTF-8
//! JSON header, then the raw little-endian `f32` payload.
//!
//! ```text
//! {"format": "rotulus-tensors/1",
//!  ...metadata fields...,
//!  "tensors": {"0.weight": {"shape": [32, 1, 4, 16], "dtype": "f32", "offset": 0}, ...}}
//! ```
//!
//! Offsets are byte offsets into the payload. Model weights add `spec`,
//! `spec_hash`, `charset` and `charset_hash` to the header.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::model::Model;
use super::spec::ModelSpec;
use super::tensor::Tensor;
use super::NnError;
use crate::corpus::Charset;

pub const WEIGHTS_FORMAT: &str = "rotulus-tensors/1";

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    #[serde(flatten)]
    meta: serde_json::Map<String, serde_json::Value>,
    tensors: BTreeMap<String, Entry>,
}

/// Serializes named tensors with extra header fields.
pub fn write_tensors(
    meta: serde_json::Map<String, serde_json::Value>,
    tensors: &BTreeMap<String, Tensor>,
) -> Vec<u8> {
    let mut entries = BTreeMap::new();
    let mut offset = 0;
    for (name, t) in tensors {
        entries.insert(
            name.clone(),
            Entry {
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
            },
        );
        offset += 4 * t.len();
    }
    let header = serde_json::to_vec(&Header {
        format: WEIGHTS_FORMAT.into(),
        meta,
        tensors: entries,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(8 + header.len() + offset);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for t in tensors.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses a container into its header fields and tensors.
pub fn read_tensors(
    bytes: &[u8],
) -> Result<(serde_json::Map<String, serde_json::Value>, BTreeMap<String, Tensor>), NnError> {
    if bytes.len() < 8 {
        return Err(NnError::Format("shorter than the header length field".into()));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let header_end = 8usize
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| NnError::Format(format!("header length {n} exceeds file size")))?;
    let header: Header = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| NnError::Format(format!("bad header: {e}")))?;
    if header.format != WEIGHTS_FORMAT {
        return Err(NnError::Format(format!("unknown format {:?}", header.format)));
    }
    let payload = &bytes[header_end..];
    let mut by_offset: Vec<(&String, &Entry)> = header.tensors.iter().collect();
    by_offset.sort_by_key(|(_, e)| e.offset);
    let mut tensors = BTreeMap::new();
    for (name, e) in by_offset {
        if e.dtype != "f32" {
            return Err(NnError::Format(format!("tensor {name} has dtype {}", e.dtype)));
        }
        let count: usize = e.shape.iter().product();
        let end = e.offset + 4 * count;
        if end > payload.len() {
            return Err(NnError::MissingTensor(name.clone()));
        }
        let data = payload[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.insert(name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    Ok((header.meta, tensors))
}

/// Named parameter tensors of a model, tied to its spec and charset.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub spec: ModelSpec,
    pub charset: Option<Charset>,
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelWeights {
    pub fn from_model(model: &Model, charset: Option<Charset>) -> Self {
        ModelWeights {
            spec: model.spec().clone(),
            charset,
            tensors: model.tensors(),
        }
    }

    pub fn to_model(&self) -> Result<Model, NnError> {
        Model::from_tensors(&self.spec, &self.tensors)
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Refuse weights trained for a different charset.
    pub expected_charset: Option<Charset>,
    /// Accept a charset mismatch anyway.
    pub allow_foreign_charset: bool,
}

pub fn save_weights(w: &ModelWeights) -> Vec<u8> {
    let mut meta = serde_json::Map::new();
    meta.insert("spec".into(), serde_json::to_value(&w.spec).expect("spec serializes"));
    meta.insert("spec_hash".into(), w.spec.hash().into());
    if let Some(cs) = &w.charset {
        meta.insert("charset".into(), serde_json::to_value(cs).expect("charset serializes"));
        meta.insert("charset_hash".into(), cs.fingerprint().into());
    }
    write_tensors(meta, &w.tensors)
}

pub fn load_weights(bytes: &[u8], opts: &LoadOptions) -> Result<ModelWeights, NnError> {
    let (meta, tensors) = read_tensors(bytes)?;
    let spec: ModelSpec = meta
        .get("spec")
        .cloned()
        .ok_or_else(|| NnError::Format("header has no spec".into()))
        .and_then(|v| serde_json::from_value(v).map_err(|e| NnError::Format(format!("bad spec: {e}"))))?;
    let stored = meta.get("spec_hash").and_then(|v| v.as_str()).unwrap_or_default();
    if stored != spec.hash() {
        return Err(NnError::HashMismatch {
            what: "spec",
            expected: spec.hash(),
            found: stored.to_string(),
        });
    }
    let charset: Option<Charset> = match meta.get("charset") {
        Some(v) => Some(
            serde_json::from_value(v.clone()).map_err(|e| NnError::Format(format!("bad charset: {e}")))?,
        ),
        None => None,
    };
    let stored_cs = meta.get("charset_hash").and_then(|v| v.as_str()).map(str::to_string);
    if let Some(cs) = &charset {
        let found = stored_cs.clone().unwrap_or_default();
        if found != cs.fingerprint() {
            return Err(NnError::HashMismatch {
                what: "charset",
                expected: cs.fingerprint(),
                found,
            });
        }
        if let Some(out) = spec.output_classes() {
            if out != cs.num_classes() {
                return Err(NnError::Format(format!(
                    "model has {out} output classes but the charset needs {}",
                    cs.num_classes()
                )));
            }
        }
    }
    if let Some(expected) = &opts.expected_charset {
        let found = stored_cs.unwrap_or_default();
        if found != expected.fingerprint() && !opts.allow_foreign_charset {
            return Err(NnError::HashMismatch {
                what: "charset",
                expected: expected.fingerprint(),
                found,
            });
        }
    }
    let weights = ModelWeights {
        spec,
        charset,
        tensors,
    };
    // validates presence and shape of every parameter
    weights.to_model()?;
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::{build_recognizer, RecognizerConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> ModelWeights {
        let cs = Charset::from_chars(vec!['a', 'b', 'c']).unwrap();
        let spec = build_recognizer(
            &RecognizerConfig {
                input_height: 16,
                conv_channels: [2, 2, 3, 3],
                lstm_hidden: 4,
                lstm_layers: 1,
                dropout: 0.0,
            },
            cs.len(),
        );
        let model = Model::init(&spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        ModelWeights::from_model(&model, Some(cs))
    }

    #[test]
    fn round_trip_is_identity() {
        let w = sample();
        let bytes = save_weights(&w);
        let back = load_weights(&bytes, &LoadOptions::default()).unwrap();
        assert_eq!(back, w);
        assert_eq!(save_weights(&back), bytes);
    }

    #[test]
    fn truncation_names_tensor() {
        let bytes = save_weights(&sample());
        let err = load_weights(&bytes[..bytes.len() - 3], &LoadOptions::default()).unwrap_err();
        // the last tensor in offset order is the last name in sorted order
        let last = sample().tensors.keys().last().unwrap().clone();
        assert!(matches!(err, NnError::MissingTensor(n) if n == last));
    }

    #[test]
    fn foreign_charset_refused_unless_overridden() {
        let bytes = save_weights(&sample());
        let other = Charset::from_chars(vec!['x', 'y', 'z']).unwrap();
        let mut opts = LoadOptions {
            expected_charset: Some(other),
            allow_foreign_charset: false,
        };
        assert!(matches!(
            load_weights(&bytes, &opts),
            Err(NnError::HashMismatch { what: "charset", .. })
        ));
        opts.allow_foreign_charset = true;
        assert!(load_weights(&bytes, &opts).is_ok());
    }

    #[test]
    fn tampered_spec_hash_refused() {
        let w = sample();
        let mut meta = serde_json::Map::new();
        meta.insert("spec".into(), serde_json::to_value(&w.spec).unwrap());
        meta.insert("spec_hash".into(), "00".into());
        let bytes = write_tensors(meta, &w.tensors);
        assert!(matches!(
            load_weights(&bytes, &LoadOptions::default()),
            Err(NnError::HashMismatch { what: "spec", .. })
        ));
    }

    #[test]
    fn garbage_is_format_error() {
        assert!(matches!(read_tensors(b"abc"), Err(NnError::Format(_))));
        let mut bytes = 1000u64.to_le_bytes().to_vec();
        bytes.extend_from_slice(b"{}");
        assert!(matches!(read_tensors(&bytes), Err(NnError::Format(_))));
    }
}
