//! Versioned JSON container shared by every trained artifact.
//!
//! Parameters are stored as `f64` lists, which is lossless for both `f32`
//! and `f64` models, so a save/load round trip is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use dscm_autograd::{Adam, ParamStore, Scalar, Tensor};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT: &str = "dscm-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub graph_hash: String,
    pub config: serde_json::Value,
    /// Kind-specific metadata (role, seed, training report, ...).
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
    /// Hashes of the artifacts this one was built from.
    #[serde(default)]
    pub provenance: BTreeMap<String, String>,
    pub params: Vec<ParamRecord>,
    #[serde(default)]
    pub optimizer: Option<OptimizerState>,
}

fn records<T: Scalar>(tensors: &[Tensor<T>]) -> Vec<Vec<f64>> {
    tensors
        .iter()
        .map(|t| t.data().iter().map(|v| v.to_f64_lossy()).collect())
        .collect()
}

/// SHA-256 over parameter names, shapes and values.
pub fn param_hash<T: Scalar>(store: &ParamStore<T>) -> String {
    let mut h = Sha256::new();
    for (name, t) in store.iter() {
        h.update(name.as_bytes());
        h.update([0]);
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_f64_lossy().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

impl Checkpoint {
    pub fn new<T: Scalar, C: Serialize>(
        kind: &str,
        graph_hash: &str,
        config: &C,
        params: &ParamStore<T>,
    ) -> Result<Self> {
        let params = params
            .iter()
            .map(|(name, t)| ParamRecord {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|v| v.to_f64_lossy()).collect(),
            })
            .collect();
        Ok(Self {
            format: FORMAT.into(),
            version: VERSION,
            kind: kind.into(),
            graph_hash: graph_hash.into(),
            config: serde_json::to_value(config)?,
            meta: BTreeMap::new(),
            provenance: BTreeMap::new(),
            params,
            optimizer: None,
        })
    }

    pub fn with_meta<V: Serialize>(mut self, key: &str, value: &V) -> Result<Self> {
        self.meta.insert(key.into(), serde_json::to_value(value)?);
        Ok(self)
    }

    pub fn with_provenance(mut self, key: &str, hash: &str) -> Self {
        self.provenance.insert(key.into(), hash.into());
        self
    }

    pub fn with_optimizer<T: Scalar>(mut self, opt: &Adam<T>) -> Self {
        let (m, v) = opt.moments();
        self.optimizer = Some(OptimizerState {
            step: opt.steps_taken(),
            m: records(m),
            v: records(v),
        });
        self
    }

    pub fn meta<V: DeserializeOwned>(&self, key: &str) -> Result<V> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("{} checkpoint lacks `{key}`", self.kind)))?;
        Ok(serde_json::from_value(v.clone())?)
    }

    pub fn config<C: DeserializeOwned>(&self) -> Result<C> {
        Ok(serde_json::from_value(self.config.clone())?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn check_graph(&self, graph_hash: &str) -> Result<()> {
        if self.graph_hash != graph_hash {
            return Err(Error::GraphHashMismatch {
                expected: graph_hash.into(),
                found: self.graph_hash.clone(),
            });
        }
        Ok(())
    }

    pub fn store<T: Scalar>(&self) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for r in &self.params {
            if r.shape.iter().product::<usize>() != r.data.len() {
                return Err(Error::Checkpoint(format!("parameter {} has a malformed shape", r.name)));
            }
            store.add(r.name.clone(), Tensor::from_f64(&r.shape, &r.data));
        }
        Ok(store)
    }

    /// Restores saved optimiser moments into a fresh optimiser for `store`.
    pub fn restore_optimizer<T: Scalar>(&self, store: &ParamStore<T>, lr: f64) -> Result<Adam<T>> {
        let mut opt = Adam::new(store, lr);
        if let Some(state) = &self.optimizer {
            let shapes: Vec<&[usize]> = store.tensors().iter().map(|t| t.shape()).collect();
            if state.m.len() != shapes.len() || state.v.len() != shapes.len() {
                return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
            }
            let to = |rows: &[Vec<f64>]| -> Vec<Tensor<T>> {
                rows.iter().zip(&shapes).map(|(d, s)| Tensor::from_f64(s, d)).collect()
            };
            opt.restore(state.step, to(&state.m), to(&state.v));
        }
        Ok(opt)
    }

    pub fn param_hash(&self) -> Result<String> {
        Ok(param_hash(&self.store::<f64>()?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let bytes = serde_json::to_vec(self)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format != FORMAT {
            return Err(Error::Checkpoint(format!("{}: not a checkpoint", path.display())));
        }
        if ck.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported version {}",
                path.display(),
                ck.version
            )));
        }
        Ok(ck)
    }
}
