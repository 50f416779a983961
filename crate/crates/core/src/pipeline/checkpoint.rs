//! Model checkpoints.
//!
//! ```text
//! lccnn-checkpoint 1
//! {"stage":"pruned","seed":1,"layers":[...],"clusters":null}
//! blob <bytes> <sha256 hex>
//! <bytes of little-endian f64: per layer, weight row-major then bias>
//! ```
//!
//! The manifest is one JSON line carrying layer kinds, shapes, retained
//! input indices and tying; the blob checksum covers the raw bytes.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Stage;
use crate::nncore::{Activation, Layer, LayerKind, Model, Tying};
use crate::sharing::ClusterModel;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "lccnn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerManifest {
    kind: LayerKind,
    activation: Activation,
    in_dim: usize,
    weight_shape: (usize, usize),
    bias_len: usize,
    gather: Option<Vec<usize>>,
    tying: Option<Tying>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    stage: Stage,
    seed: u64,
    layers: Vec<LayerManifest>,
    clusters: Option<ClusterModel>,
}

/// A model together with the stage that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub seed: u64,
    pub model: Model,
    pub clusters: Option<ClusterModel>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let layers = self
            .model
            .layers
            .iter()
            .map(|l| LayerManifest {
                kind: l.kind,
                activation: l.activation,
                in_dim: l.in_dim,
                weight_shape: l.weight.dim(),
                bias_len: l.bias.len(),
                gather: l.gather.clone(),
                tying: l.tying.clone(),
            })
            .collect();
        let manifest = Manifest {
            stage: self.stage,
            seed: self.seed,
            layers,
            clusters: self.clusters.clone(),
        };
        let mut blob = Vec::new();
        for l in &self.model.layers {
            for v in l.weight.iter().chain(l.bias.iter()) {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut out = format!(
            "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n{}\nblob {} {}\n",
            serde_json::to_string(&manifest).expect("manifest serializes"),
            blob.len(),
            hex(&Sha256::digest(&blob))
        )
        .into_bytes();
        out.extend_from_slice(&blob);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::format(path, msg);
        let mut rest = bytes;
        let mut line = || -> Result<&str> {
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header"))?;
            let l = std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))?;
            rest = &rest[end + 1..];
            Ok(l)
        };
        let version = line()?
            .strip_prefix(CHECKPOINT_MAGIC)
            .and_then(|v| v.trim().parse::<u32>().ok())
            .ok_or_else(|| bad("not a checkpoint"))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let manifest: Manifest =
            serde_json::from_str(line()?).map_err(|e| Error::format(path, format!("manifest: {e}")))?;
        let blob_line = line()?;
        let mut parts = blob_line.split(' ');
        let (len, sum) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
            (Some("blob"), Some(n), Some(s), None) => (n.parse::<usize>().map_err(|_| bad("blob length"))?, s.to_string()),
            _ => return Err(bad("missing blob line")),
        };
        if rest.len() != len || hex(&Sha256::digest(rest)) != sum {
            return Err(Error::Checksum(path.to_path_buf()));
        }
        let mut values = rest.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut layers = Vec::with_capacity(manifest.layers.len());
        for m in manifest.layers {
            let (r, c) = m.weight_shape;
            let w: Vec<f64> = values.by_ref().take(r * c).collect();
            let b: Vec<f64> = values.by_ref().take(m.bias_len).collect();
            if w.len() != r * c || b.len() != m.bias_len {
                return Err(bad("blob shorter than the manifest shapes"));
            }
            layers.push(Layer {
                kind: m.kind,
                activation: m.activation,
                in_dim: m.in_dim,
                weight: Array2::from_shape_vec((r, c), w).expect("length checked"),
                bias: Array1::from(b),
                gather: m.gather,
                tying: m.tying,
            });
        }
        if values.next().is_some() {
            return Err(bad("blob longer than the manifest shapes"));
        }
        let model = Model { layers };
        model.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(Checkpoint {
            stage: manifest.stage,
            seed: manifest.seed,
            model,
            clusters: manifest.clusters,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?, path)
}
