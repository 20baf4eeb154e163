//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0      8 bytes   magic "OVQACKPT"
//! 8      u32       format version (1)
//! 12     u64       header length H
//! 20     H bytes   UTF-8 JSON header (CheckpointHeader)
//! 20+H   f64 * N   tensors in header order, each row-major
//! ```
//!
//! Open-head tensors are `layer{l}.w_src`, `layer{l}.w_dst` for every layer,
//! then `projection`. Closed-head tensors are `projection`, `head.weights`,
//! `head.bias` (a k×1 column).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::Phrase;
use crate::error::{Error, Result};
use crate::head::{BackboneProjection, ClosedHead, ClosedModel, OpenVocabModel};
use crate::linalg::Matrix;
use crate::provenance::Provenance;
use crate::verbalizer::{LayerWeights, VerbalizerModel};

pub const MAGIC: &[u8; 8] = b"OVQACKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub provenance: Provenance,
    pub dim: usize,
    pub feature_dim: usize,
    pub layers: usize,
    pub epsilon: f64,
    pub leaky_slope: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub closed_vocab: Option<Vec<Phrase>>,
    pub tensors: Vec<TensorEntry>,
}

fn encode(header: &CheckpointHeader, tensors: &[&Matrix]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let n: usize = tensors.iter().map(|t| t.as_slice().len()).sum();
    let mut out = Vec::with_capacity(20 + json.len() + 8 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in tensors {
        for v in t.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<Matrix>)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(20..20 + hlen)
        .ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut cursor = 20 + hlen;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n = t.rows * t.cols;
        let raw = bytes
            .get(cursor..cursor + 8 * n)
            .ok_or_else(|| Error::Checkpoint(format!("truncated tensor {}", t.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.push(Matrix::from_vec(t.rows, t.cols, data)?);
        cursor += 8 * n;
    }
    if cursor != bytes.len() {
        return Err(bad("trailing bytes after last tensor"));
    }
    Ok((header, tensors))
}

fn entry(name: impl Into<String>, m: &Matrix) -> TensorEntry {
    TensorEntry {
        name: name.into(),
        rows: m.rows(),
        cols: m.cols(),
    }
}

pub fn encode_open(model: &OpenVocabModel, provenance: &Provenance) -> Result<Vec<u8>> {
    let v = &model.verbalizer;
    let mut entries = Vec::new();
    let mut tensors = Vec::new();
    for (l, w) in v.layers().iter().enumerate() {
        entries.push(entry(format!("layer{l}.w_src"), &w.w_src));
        entries.push(entry(format!("layer{l}.w_dst"), &w.w_dst));
        tensors.push(&w.w_src);
        tensors.push(&w.w_dst);
    }
    entries.push(entry("projection", &model.projection.weights));
    tensors.push(&model.projection.weights);
    let header = CheckpointHeader {
        kind: CheckpointKind::Open,
        provenance: provenance.clone(),
        dim: v.dim(),
        feature_dim: model.projection.feature_dim(),
        layers: v.num_layers(),
        epsilon: v.epsilon(),
        leaky_slope: v.leaky_slope(),
        closed_vocab: None,
        tensors: entries,
    };
    encode(&header, &tensors)
}

pub fn decode_open(bytes: &[u8]) -> Result<(OpenVocabModel, CheckpointHeader)> {
    let (header, mut tensors) = decode(bytes)?;
    if header.kind != CheckpointKind::Open || tensors.len() != 2 * header.layers + 1 {
        return Err(Error::Checkpoint("not an open-head checkpoint".into()));
    }
    let projection = BackboneProjection {
        weights: tensors.pop().expect("length checked"),
    };
    let mut it = tensors.into_iter();
    let layers = (0..header.layers)
        .map(|_| LayerWeights {
            w_src: it.next().expect("length checked"),
            w_dst: it.next().expect("length checked"),
        })
        .collect();
    let verbalizer =
        VerbalizerModel::from_layers(header.dim, layers, header.epsilon, header.leaky_slope)?;
    if projection.dim() != header.dim || projection.feature_dim() != header.feature_dim {
        return Err(Error::Checkpoint(
            "projection shape disagrees with header".into(),
        ));
    }
    Ok((
        OpenVocabModel {
            projection,
            verbalizer,
        },
        header,
    ))
}

pub fn encode_closed(model: &ClosedModel, provenance: &Provenance) -> Result<Vec<u8>> {
    let bias = Matrix::from_vec(model.head.bias.len(), 1, model.head.bias.clone())?;
    let tensors = [&model.projection.weights, &model.head.weights, &bias];
    let header = CheckpointHeader {
        kind: CheckpointKind::Closed,
        provenance: provenance.clone(),
        dim: model.projection.dim(),
        feature_dim: model.projection.feature_dim(),
        layers: 0,
        epsilon: 1.0,
        leaky_slope: 0.0,
        closed_vocab: Some(model.head.vocab.clone()),
        tensors: vec![
            entry("projection", tensors[0]),
            entry("head.weights", tensors[1]),
            entry("head.bias", tensors[2]),
        ],
    };
    encode(&header, &tensors)
}

pub fn decode_closed(bytes: &[u8]) -> Result<(ClosedModel, CheckpointHeader)> {
    let (header, tensors) = decode(bytes)?;
    let vocab = header.closed_vocab.clone().unwrap_or_default();
    if header.kind != CheckpointKind::Closed
        || tensors.len() != 3
        || tensors[1].rows() != vocab.len()
    {
        return Err(Error::Checkpoint("not a closed-head checkpoint".into()));
    }
    let mut it = tensors.into_iter();
    let projection = BackboneProjection {
        weights: it.next().expect("3 tensors"),
    };
    let weights = it.next().expect("3 tensors");
    let bias = it.next().expect("3 tensors").as_slice().to_vec();
    Ok((
        ClosedModel {
            projection,
            head: ClosedHead {
                vocab,
                weights,
                bias,
            },
        },
        header,
    ))
}

pub fn save(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}
