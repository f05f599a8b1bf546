//! Checkpoint container.
//!
//! ```text
//! u64 LE   manifest length in bytes
//! [u8]     manifest, UTF-8 JSON
//! blobs    one per tensor, in manifest order:
//!          "MIRA" | u32 LE rank | u32 LE dim0 | u32 LE dim1 (0 for rank 1)
//!          followed by the elements as LE f64
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, Head};
use crate::continual::GradientSubspace;
use crate::error::{MiraError, Result};
use crate::memory::{MemoryUnit, SeparationKind};
use crate::numerics::Tensor;
use crate::pipeline::{ModelState, RunProgress, TrainConfig};
use crate::retrieval::{QueryKind, QueryModule};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"MIRA";
const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: ModelState,
    pub progress: RunProgress,
}

#[derive(Serialize, Deserialize)]
struct LayerEntry {
    key_dim: usize,
    lora_rank: usize,
    model_dim: usize,
    columns: usize,
    separation: SeparationKind,
}

#[derive(Serialize, Deserialize)]
struct QueryEntry {
    kind: QueryKind,
    input_dim: usize,
    key_dim: usize,
    tensors: usize,
}

#[derive(Serialize, Deserialize)]
struct SubspaceEntry {
    group: String,
    energy: f64,
    dim: usize,
    rank: usize,
    current_count: usize,
    tasks: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: TrainConfig,
    backbone: BackboneConfig,
    layers: Vec<LayerEntry>,
    queries: Vec<QueryEntry>,
    subspaces: Vec<SubspaceEntry>,
    progress: RunProgress,
    tensors: Vec<String>,
}

fn push_blob(out: &mut Vec<u8>, t: &Tensor) -> Result<()> {
    let shape = t.shape();
    let (rank, d0, d1) = match shape {
        [n] => (1u32, *n, 0),
        [r, c] => (2u32, *r, *c),
        _ => {
            return Err(MiraError::Shape(format!(
                "checkpoint blobs hold rank 1 or 2 tensors, got {shape:?}"
            )))
        }
    };
    let dim = |v: usize| {
        u32::try_from(v).map_err(|_| MiraError::Shape(format!("dimension {v} exceeds u32")))
    };
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&rank.to_le_bytes());
    out.extend_from_slice(&dim(d0)?.to_le_bytes());
    out.extend_from_slice(&dim(d1)?.to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let st = &ckpt.state;
    let mut named: Vec<(String, Tensor)> = Vec::new();
    for (i, t) in st.backbone.weights.tensors().into_iter().enumerate() {
        named.push((format!("backbone/{i}"), t.clone()));
    }
    named.push(("head/weight".into(), st.head.weight.clone()));
    named.push(("head/bias".into(), st.head.bias.clone()));
    for (l, m) in st.memories.iter().enumerate() {
        if !m.is_empty() {
            named.push((format!("memory/{l}/keys"), m.key_rows()?));
            named.push((format!("memory/{l}/values"), m.value_rows()?));
        }
    }
    for (l, q) in st.queries.iter().enumerate() {
        for (i, p) in q.params().iter().enumerate() {
            named.push((format!("query/{l}/{i}"), p.clone()));
        }
    }
    for s in &st.subspaces {
        if let Some(u) = s.basis() {
            named.push((format!("subspace/{}/basis", s.group), u));
        }
        named.push((format!("subspace/{}/current", s.group), s.current_sum()));
        named.push((format!("subspace/{}/summed", s.group), s.summed_moment()));
    }

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config: ckpt.config.clone(),
        backbone: st.backbone.config.clone(),
        layers: st
            .memories
            .iter()
            .map(|m| LayerEntry {
                key_dim: m.key_dim(),
                lora_rank: m.lora_rank(),
                model_dim: m.model_dim(),
                columns: m.len(),
                separation: m.separation,
            })
            .collect(),
        queries: st
            .queries
            .iter()
            .map(|q| QueryEntry {
                kind: q.kind,
                input_dim: q.input_dim(),
                key_dim: q.key_dim(),
                tensors: q.params().len(),
            })
            .collect(),
        subspaces: st
            .subspaces
            .iter()
            .map(|s| SubspaceEntry {
                group: s.group.clone(),
                energy: s.energy,
                dim: s.dim(),
                rank: s.rank(),
                current_count: s.current_count(),
                tasks: s.tasks_folded(),
            })
            .collect(),
        progress: ckpt.progress.clone(),
        tensors: named.iter().map(|(n, _)| n.clone()).collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(8 + json.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &named {
        push_blob(&mut out, t)?;
    }
    Ok(out)
}

struct BlobReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    names: std::vec::IntoIter<String>,
}

impl BlobReader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| MiraError::Corrupt(format!("truncated {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn next(&mut self, expected: &str) -> Result<Tensor> {
        let name = self.names.next().ok_or_else(|| {
            MiraError::Corrupt(format!("manifest lists no tensor for {expected}"))
        })?;
        if name != expected {
            return Err(MiraError::Corrupt(format!(
                "expected tensor {expected}, manifest has {name}"
            )));
        }
        let header = self.take(HEADER_LEN, &format!("header of {name}"))?;
        if &header[..4] != MAGIC {
            return Err(MiraError::Corrupt(format!("bad magic in blob {name}")));
        }
        let word =
            |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().expect("4 bytes")) as usize;
        let (rank, d0, d1) = (word(4), word(8), word(12));
        let shape = match rank {
            1 if d1 == 0 => vec![d0],
            2 => vec![d0, d1],
            _ => {
                return Err(MiraError::Corrupt(format!(
                    "blob {name} has rank {rank}, dims {d0}×{d1}"
                )))
            }
        };
        let n = d0
            .checked_mul(d1.max(1))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| MiraError::Corrupt(format!("blob {name} too large")))?;
        let raw = self.take(n, &format!("blob {name}"))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Tensor::new(shape, data).map_err(|e| MiraError::Corrupt(format!("blob {name}: {e}")))
    }

    fn next_shaped(&mut self, expected: &str, shape: &[usize]) -> Result<Tensor> {
        let t = self.next(expected)?;
        if t.shape() != shape {
            return Err(MiraError::Corrupt(format!(
                "blob {expected} has shape {:?}, manifest implies {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 {
        return Err(MiraError::Corrupt("missing manifest length".into()));
    }
    let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let len =
        usize::try_from(len).map_err(|_| MiraError::Corrupt("manifest length overflow".into()))?;
    let end = 8usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| MiraError::Corrupt("truncated manifest".into()))?;
    let raw: serde_json::Value = serde_json::from_slice(&bytes[8..end])
        .map_err(|e| MiraError::Corrupt(format!("manifest: {e}")))?;
    let found = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| MiraError::Corrupt("manifest has no format_version".into()))?;
    if found != u64::from(FORMAT_VERSION) {
        return Err(MiraError::VersionMismatch {
            found: u32::try_from(found).unwrap_or(u32::MAX),
            expected: FORMAT_VERSION,
        });
    }
    let manifest: Manifest =
        serde_json::from_value(raw).map_err(|e| MiraError::Corrupt(format!("manifest: {e}")))?;
    let mut r = BlobReader {
        bytes,
        pos: end,
        names: manifest.tensors.clone().into_iter(),
    };

    let mut backbone = Backbone::init(manifest.backbone.clone(), 0)
        .map_err(|e| MiraError::Corrupt(format!("backbone config: {e}")))?;
    for (i, slot) in backbone.weights.tensors_mut().into_iter().enumerate() {
        let shape = slot.shape().to_vec();
        *slot = r.next_shaped(&format!("backbone/{i}"), &shape)?;
    }
    let bc = &manifest.backbone;
    let head = Head {
        weight: r.next_shaped("head/weight", &[bc.model_dim, bc.num_classes])?,
        bias: r.next_shaped("head/bias", &[bc.num_classes])?,
    };

    let mut memories = Vec::with_capacity(manifest.layers.len());
    for (l, e) in manifest.layers.iter().enumerate() {
        let m = if e.columns == 0 {
            MemoryUnit::new(l, e.key_dim, e.lora_rank, e.model_dim, e.separation)
        } else {
            let dv = 4 * e.lora_rank * e.model_dim;
            let keys = r.next_shaped(&format!("memory/{l}/keys"), &[e.columns, e.key_dim])?;
            let values = r.next_shaped(&format!("memory/{l}/values"), &[e.columns, dv])?;
            MemoryUnit::restore(l, e.lora_rank, e.model_dim, e.separation, &keys, &values)?
        };
        memories.push(m);
    }

    let mut queries = Vec::with_capacity(manifest.queries.len());
    for (l, e) in manifest.queries.iter().enumerate() {
        let params = (0..e.tensors)
            .map(|i| r.next(&format!("query/{l}/{i}")))
            .collect::<Result<Vec<_>>>()?;
        let q = QueryModule::from_params(e.kind, l, e.input_dim, e.key_dim, params)
            .map_err(|err| MiraError::Corrupt(format!("query module {l}: {err}")))?;
        queries.push(q);
    }

    let mut subspaces = Vec::with_capacity(manifest.subspaces.len());
    for e in &manifest.subspaces {
        let basis = (e.rank > 0)
            .then(|| r.next_shaped(&format!("subspace/{}/basis", e.group), &[e.dim, e.rank]))
            .transpose()?;
        let current = r.next_shaped(&format!("subspace/{}/current", e.group), &[e.dim, e.dim])?;
        let summed = r.next_shaped(&format!("subspace/{}/summed", e.group), &[e.dim, e.dim])?;
        subspaces.push(GradientSubspace::restore(
            e.group.clone(),
            e.energy,
            basis.as_ref(),
            &current,
            e.current_count,
            &summed,
            e.tasks,
        )?);
    }

    if r.names.next().is_some() {
        return Err(MiraError::Corrupt("manifest lists unread tensors".into()));
    }
    if r.pos != bytes.len() {
        return Err(MiraError::Corrupt(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        config: manifest.config,
        state: ModelState {
            backbone,
            memories,
            queries,
            head,
            subspaces,
        },
        progress: manifest.progress,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, encode(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path)?)
}
