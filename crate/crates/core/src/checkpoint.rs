//! On-disk checkpoint format.
//!
//! ```text
//! "PPCK" | version: u32 LE | manifest length: u64 LE | manifest (JSON)
//!        | payload: f32 LE tensors in manifest order
//! ```
//!
//! The manifest lists every tensor (name, shape, dtype, byte offset into the
//! payload, provenance) together with the model config and, for training
//! checkpoints, the train config, trainer position and RNG state. Optimizer
//! moments are stored as extra tensors named `optim.m.*` and `optim.v.*`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ParamStore, Provenance};
use crate::tensor::Tensor;
use crate::trainer::{AdamState, TrainState};

const MAGIC: &[u8; 4] = b"PPCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    /// `None` for optimizer state.
    pub provenance: Option<Provenance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub state: Option<TrainState>,
    pub optimizer_step: Option<u64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub train: Option<TrainConfig>,
    pub state: Option<TrainState>,
    pub optimizer: Option<AdamState<f32>>,
}

impl Checkpoint {
    pub fn of_model(model: Model<f32>) -> Self {
        Checkpoint {
            model,
            train: None,
            state: None,
            optimizer: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut payload: Vec<&Tensor<f32>> = Vec::new();
        let mut offset = 0u64;
        let mut add = |name: String, t: &'_ Tensor<f32>, prov: Option<Provenance>, tensors: &mut Vec<TensorEntry>| {
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
                provenance: prov,
            });
            offset += 4 * t.numel() as u64;
        };
        for (name, p) in self.model.params.iter() {
            add(name.to_string(), &p.tensor, Some(p.provenance.clone()), &mut tensors);
            payload.push(&p.tensor);
        }
        if let Some(opt) = &self.optimizer {
            for (prefix, moments) in [("optim.m", &opt.m), ("optim.v", &opt.v)] {
                for ((name, _), t) in self.model.params.iter().zip(moments) {
                    add(format!("{prefix}.{name}"), t, None, &mut tensors);
                    payload.push(t);
                }
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            model: self.model.config.clone(),
            train: self.train.clone(),
            state: self.state.clone(),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            tensors,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in payload {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn read_manifest(b: &[u8]) -> Result<(Manifest, usize)> {
        let bad = |m: String| Error::Checkpoint(m);
        if b.len() < 16 || &b[..4] != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = u32::from_le_bytes(b[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let len = u64::from_le_bytes(b[8..16].try_into().expect("8 bytes")) as usize;
        let end = 16usize
            .checked_add(len)
            .filter(|&e| e <= b.len())
            .ok_or_else(|| bad("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(&b[16..end]).map_err(|e| bad(format!("manifest: {e}")))?;
        Ok((manifest, end))
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        let (manifest, start) = Self::read_manifest(b)?;
        let payload = &b[start..];
        let expected: usize = manifest.tensors.iter().map(|t| 4 * t.shape.iter().product::<usize>()).sum();
        if payload.len() != expected {
            return Err(Error::Checkpoint(format!(
                "payload is {} bytes, manifest describes {expected}",
                payload.len()
            )));
        }
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in &manifest.tensors {
            if e.dtype != "f32" {
                return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let off = e.offset as usize;
            let bytes = payload
                .get(off..off + 4 * n)
                .ok_or_else(|| Error::Checkpoint(format!("{}: offset outside payload", e.name)))?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&e.shape, data).map_err(|err| Error::Checkpoint(format!("{}: {err}", e.name)))?;
            if e.name.starts_with("optim.m.") {
                m.push(t);
            } else if e.name.starts_with("optim.v.") {
                v.push(t);
            } else {
                let prov = e
                    .provenance
                    .clone()
                    .ok_or_else(|| Error::Checkpoint(format!("{}: missing provenance", e.name)))?;
                params.push(e.name.clone(), t, prov)?;
            }
        }
        let optimizer = match manifest.optimizer_step {
            Some(step) => {
                if m.len() != params.len() || v.len() != params.len() {
                    return Err(Error::Checkpoint("optimizer moments do not cover every parameter".into()));
                }
                Some(AdamState { step, m, v })
            }
            None => None,
        };
        let model = Model::from_store(manifest.model, params)?;
        Ok(Checkpoint {
            model,
            train: manifest.train,
            state: manifest.state,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let b = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{presets, ConnectionKind};
    use crate::rng::RngState;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut c = presets::desk_parallel(ConnectionKind::GumbelV1).with_vocab(20);
        c.max_seq_len = 8;
        let m = Model::<f32>::build(&c, &mut RngState::new(2)).unwrap();
        let ck = Checkpoint::of_model(m);
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        for ((_, a), (_, b)) in ck.model.params.iter().zip(back.model.params.iter()) {
            assert!(a.tensor.same_values(&b.tensor));
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = Model::<f32>::build(&presets::desk_path().with_vocab(10), &mut RngState::new(0)).unwrap();
        let bytes = Checkpoint::of_model(m).to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        assert!(Checkpoint::from_bytes(b"PPCX").is_err());
    }
}
