//! Checkpoint files: a text manifest followed by a raw little-endian `f64` payload.
//!
//! ```text
//! CDJ-CHECKPOINT
//! version=1
//! numeric=f64
//! endianness=little
//! input_shape=1x12x12
//! num_classes=4
//! bias=true
//! layers=3
//! layer.0=conv:6 k=3x3 s=1 p=1 pool=2/2
//! ...
//! tensor.0.filters=6x1x3x3@0
//! tensor.0.bias=6@54
//! ...
//! meta.<key>=<value>
//! payload_values=1234
//! end
//! <payload_values × 8 bytes>
//! ```
//!
//! Tensor lines carry the shape and the value offset into the payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{LayerParams, LayerSpec, NetworkTopology, ParameterSet};
use crate::fsutil::write_atomic;
use crate::tensor::Tensor;

pub const MAGIC: &str = "CDJ-CHECKPOINT";
pub const VERSION: u32 = 1;
const END_MARKER: &[u8] = b"\nend\n";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (missing `{MAGIC}` header)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads version {VERSION})")]
    VersionMismatch { found: String },
    #[error("truncated checkpoint: {0}")]
    Truncated(String),
    #[error("malformed manifest line {line}: {detail}")]
    Malformed { line: usize, detail: String },
    #[error("inconsistent tensor shapes: {0}")]
    ShapeInconsistency(String),
    #[error("checkpoint topology does not match the expected topology: {0}")]
    TopologyMismatch(String),
}

/// Everything a checkpoint file holds.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub topology: NetworkTopology,
    pub params: ParameterSet,
    /// Free-form provenance entries (config hash, seed, ...).
    pub metadata: BTreeMap<String, String>,
}

fn dims(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

pub fn encode_checkpoint(
    params: &ParameterSet,
    topology: &NetworkTopology,
    metadata: &BTreeMap<String, String>,
) -> Vec<u8> {
    let (c, h, w) = topology.input_shape;
    let mut m = String::new();
    m.push_str(MAGIC);
    m.push('\n');
    m.push_str(&format!("version={VERSION}\nnumeric=f64\nendianness=little\n"));
    m.push_str(&format!("input_shape={c}x{h}x{w}\n"));
    m.push_str(&format!("num_classes={}\n", topology.num_classes));
    m.push_str(&format!("bias={}\n", topology.use_bias));
    m.push_str(&format!("layers={}\n", topology.layers.len()));
    for (i, l) in topology.layers.iter().enumerate() {
        m.push_str(&format!("layer.{i}={l}\n"));
    }
    let mut offset = 0;
    for (i, l) in params.layers.iter().enumerate() {
        m.push_str(&format!("tensor.{i}.filters={}@{offset}\n", dims(l.filters.shape())));
        offset += l.filters.len();
        if let Some(b) = &l.bias {
            m.push_str(&format!("tensor.{i}.bias={}@{offset}\n", dims(b.shape())));
            offset += b.len();
        }
    }
    for (k, v) in metadata {
        m.push_str(&format!("meta.{k}={v}\n"));
    }
    m.push_str(&format!("payload_values={offset}\nend\n"));

    let mut bytes = m.into_bytes();
    bytes.reserve(offset * 8);
    for t in params.tensors() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    bytes
}

pub fn save_checkpoint(
    path: &Path,
    params: &ParameterSet,
    topology: &NetworkTopology,
    metadata: &BTreeMap<String, String>,
) -> Result<(), CheckpointError> {
    params
        .check_against(topology)
        .map_err(|e| CheckpointError::ShapeInconsistency(e.to_string()))?;
    write_atomic(path, &encode_checkpoint(params, topology, metadata)).map_err(|source| {
        CheckpointError::Io {
            path: path.display().to_string(),
            source,
        }
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and rejects it unless its topology equals `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &NetworkTopology) -> Result<Checkpoint, CheckpointError> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.topology.layers.len() != expected.layers.len() {
        return Err(CheckpointError::TopologyMismatch(format!(
            "checkpoint has {} layers, expected {}",
            ckpt.topology.layers.len(),
            expected.layers.len()
        )));
    }
    if ckpt.topology != *expected {
        return Err(CheckpointError::TopologyMismatch(format!(
            "checkpoint {:?} vs expected {:?}",
            ckpt.topology, expected
        )));
    }
    Ok(ckpt)
}

fn parse_dims(s: &str) -> Option<Vec<usize>> {
    s.split('x').map(|d| d.parse().ok().filter(|&v| v > 0)).collect()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if !bytes.starts_with(MAGIC.as_bytes()) {
        return Err(CheckpointError::BadMagic);
    }
    let end = bytes
        .windows(END_MARKER.len())
        .position(|w| w == END_MARKER)
        .ok_or_else(|| CheckpointError::Truncated("manifest has no `end` line".into()))?;
    let manifest = std::str::from_utf8(&bytes[..end]).map_err(|e| CheckpointError::Malformed {
        line: 0,
        detail: format!("manifest is not UTF-8: {e}"),
    })?;
    let payload = &bytes[end + END_MARKER.len()..];

    let mut lines = manifest.lines().enumerate();
    lines.next(); // magic
    let mut entries: Vec<(usize, &str, &str)> = Vec::new();
    for (no, line) in lines {
        let (k, v) = line.split_once('=').ok_or_else(|| CheckpointError::Malformed {
            line: no + 1,
            detail: format!("expected key=value, got `{line}`"),
        })?;
        entries.push((no + 1, k, v));
    }
    let find = |key: &str| entries.iter().find(|(_, k, _)| *k == key).map(|&(l, _, v)| (l, v));
    let required = |key: &str| {
        find(key).ok_or_else(|| CheckpointError::Malformed {
            line: 0,
            detail: format!("missing `{key}`"),
        })
    };
    let malformed = |line: usize, detail: String| CheckpointError::Malformed { line, detail };

    let (_, version) = required("version")?;
    if version != VERSION.to_string() {
        return Err(CheckpointError::VersionMismatch {
            found: version.to_string(),
        });
    }
    let (l, numeric) = required("numeric")?;
    if numeric != "f64" {
        return Err(malformed(l, format!("unsupported numeric type `{numeric}`")));
    }
    let (l, endian) = required("endianness")?;
    if endian != "little" {
        return Err(malformed(l, format!("unsupported endianness `{endian}`")));
    }
    let (l, input) = required("input_shape")?;
    let input_shape = match parse_dims(input).as_deref() {
        Some(&[c, h, w]) => (c, h, w),
        _ => return Err(malformed(l, format!("bad input_shape `{input}`"))),
    };
    let (l, classes) = required("num_classes")?;
    let num_classes = classes
        .parse()
        .map_err(|_| malformed(l, format!("bad num_classes `{classes}`")))?;
    let (l, bias) = required("bias")?;
    let use_bias = bias
        .parse()
        .map_err(|_| malformed(l, format!("bad bias flag `{bias}`")))?;
    let (l, count) = required("layers")?;
    let num_layers: usize = count
        .parse()
        .map_err(|_| malformed(l, format!("bad layer count `{count}`")))?;

    let mut layers = Vec::with_capacity(num_layers);
    for i in 0..num_layers {
        let (l, desc) = required(&format!("layer.{i}"))?;
        layers.push(desc.parse::<LayerSpec>().map_err(|e| malformed(l, e))?);
    }
    let topology = NetworkTopology {
        input_shape,
        layers,
        num_classes,
        use_bias,
    };
    let expected_shapes = topology
        .parameter_shapes()
        .map_err(|e| CheckpointError::ShapeInconsistency(e.to_string()))?;

    let (l, total) = required("payload_values")?;
    let total: usize = total
        .parse()
        .map_err(|_| malformed(l, format!("bad payload_values `{total}`")))?;
    if payload.len() != total * 8 {
        return Err(CheckpointError::Truncated(format!(
            "payload has {} bytes, manifest declares {} values ({} bytes)",
            payload.len(),
            total,
            total * 8
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();

    let read_tensor = |key: String, expected: &[usize]| -> Result<Tensor, CheckpointError> {
        let (l, spec) = required(&key)?;
        let (shape, offset) = spec
            .split_once('@')
            .and_then(|(s, o)| Some((parse_dims(s)?, o.parse::<usize>().ok()?)))
            .ok_or_else(|| malformed(l, format!("bad tensor entry `{spec}`")))?;
        if shape != expected {
            return Err(CheckpointError::ShapeInconsistency(format!(
                "{key} has shape {shape:?}, topology implies {expected:?}"
            )));
        }
        let len: usize = shape.iter().product();
        let data = values
            .get(offset..offset + len)
            .ok_or_else(|| {
                CheckpointError::ShapeInconsistency(format!(
                    "{key} spans values {offset}..{} beyond payload of {total}",
                    offset + len
                ))
            })?
            .to_vec();
        Ok(Tensor::new(shape, data).expect("length checked"))
    };

    let mut param_layers = Vec::with_capacity(num_layers);
    let mut consumed = 0;
    for (i, (filter_shape, bias_len)) in expected_shapes.iter().enumerate() {
        let filters = read_tensor(format!("tensor.{i}.filters"), filter_shape)?;
        consumed += filters.len();
        let bias = if use_bias {
            let b = read_tensor(format!("tensor.{i}.bias"), &[*bias_len])?;
            consumed += b.len();
            Some(b)
        } else {
            None
        };
        param_layers.push(LayerParams { filters, bias });
    }
    if consumed != total {
        return Err(CheckpointError::ShapeInconsistency(format!(
            "tensors cover {consumed} values but payload holds {total}"
        )));
    }

    let metadata = entries
        .iter()
        .filter_map(|(_, k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.to_string())))
        .collect();
    Ok(Checkpoint {
        topology,
        params: ParameterSet { layers: param_layers },
        metadata,
    })
}
