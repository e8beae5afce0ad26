//! Checkpoint files: magic, a JSON manifest with the configuration and a
//! tensor directory, then raw little-endian `f64` payloads.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DanError, Result};
use crate::mdan::{MDan, MDanConfig};
use crate::params::ParamStore;
use crate::rdan::{RDan, RDanConfig};
use crate::tensor::Tensor;

use super::optim::OptimizerConfig;

pub const MAGIC: &[u8; 8] = b"DANCKPT1";
const FAMILY: &[u8] = b"DANCKPT";
pub const FORMAT_VERSION: u32 = 1;
pub const RNG_ALGORITHM: &str = "chacha8";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Rdan,
    Mdan,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Rdan => "rdan",
            ModelKind::Mdan => "mdan",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = DanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rdan" => Ok(ModelKind::Rdan),
            "mdan" => Ok(ModelKind::Mdan),
            other => Err(DanError::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "config", rename_all = "lowercase")]
pub enum ModelConfig {
    Rdan(RDanConfig),
    Mdan(MDanConfig),
}

/// Either network, with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Rdan(RDan),
    Mdan(MDan),
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Ok(match config {
            ModelConfig::Rdan(c) => Model::Rdan(RDan::new(c, seed)?),
            ModelConfig::Mdan(c) => Model::Mdan(MDan::new(c, seed)?),
        })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        Ok(match config {
            ModelConfig::Rdan(c) => Model::Rdan(RDan::from_parts(c, params)?),
            ModelConfig::Mdan(c) => Model::Mdan(MDan::from_parts(c, params)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Rdan(_) => ModelKind::Rdan,
            Model::Mdan(_) => ModelKind::Mdan,
        }
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Model::Rdan(m) => ModelConfig::Rdan(m.config().clone()),
            Model::Mdan(m) => ModelConfig::Mdan(m.config().clone()),
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Model::Rdan(m) => m.params(),
            Model::Mdan(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Rdan(m) => m.params_mut(),
            Model::Mdan(m) => m.params_mut(),
        }
    }

    pub fn as_rdan(&self) -> Result<&RDan> {
        match self {
            Model::Rdan(m) => Ok(m),
            other => Err(DanError::KindMismatch {
                expected: "rdan",
                found: other.kind().name().into(),
            }),
        }
    }

    pub fn as_mdan(&self) -> Result<&MDan> {
        match self {
            Model::Mdan(m) => Ok(m),
            other => Err(DanError::KindMismatch {
                expected: "mdan",
                found: other.kind().name().into(),
            }),
        }
    }
}

/// Complete training state at an epoch boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: OptimizerConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub best_metric: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    algorithm: String,
    seed: u64,
    /// Epoch whose stream is consumed next.
    next_stream: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum TensorRole {
    Param,
    Momentum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    role: TensorRole,
    shape: Vec<usize>,
    /// Byte offset into the payload section.
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    model: ModelConfig,
    optimizer: OptimizerConfig,
    epoch: usize,
    rng: RngState,
    best_metric: Option<f64>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn kind(&self) -> ModelKind {
        self.model.kind()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.model.params();
        let mut tensors = Vec::with_capacity(2 * params.len());
        let mut payload: Vec<u8> = Vec::with_capacity(16 * params.num_elements());
        for (name, p) in params.iter() {
            let m = params.momentum(name).expect("momentum exists for every parameter");
            for (role, t) in [(TensorRole::Param, p), (TensorRole::Momentum, m)] {
                tensors.push(TensorEntry {
                    name: name.to_string(),
                    role,
                    shape: t.shape().to_vec(),
                    offset: payload.len(),
                });
                for v in t.data() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let manifest = Manifest {
            version: FORMAT_VERSION,
            model: self.model.config(),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch,
            rng: RngState {
                algorithm: RNG_ALGORITHM.into(),
                seed: self.optimizer.seed,
                next_stream: self.epoch as u64,
            },
            best_metric: self.best_metric,
            tensors,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let malformed = |reason: String| DanError::MalformedFile {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < 16 {
            return Err(malformed("shorter than the header".into()));
        }
        let magic = &bytes[..8];
        if magic != MAGIC {
            if magic.starts_with(FAMILY) {
                return Err(DanError::VersionMismatch {
                    path: path.to_path_buf(),
                    found: String::from_utf8_lossy(magic).into_owned(),
                    expected: String::from_utf8_lossy(MAGIC).into_owned(),
                });
            }
            return Err(malformed("not a checkpoint (bad magic)".into()));
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().expect("eight bytes")) as usize;
        let json = bytes
            .get(16..16usize.saturating_add(json_len))
            .ok_or_else(|| malformed("truncated manifest".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| malformed(format!("manifest: {e}")))?;
        if manifest.version != FORMAT_VERSION {
            return Err(DanError::VersionMismatch {
                path: path.to_path_buf(),
                found: manifest.version.to_string(),
                expected: FORMAT_VERSION.to_string(),
            });
        }
        if manifest.rng.algorithm != RNG_ALGORITHM
            || manifest.rng.seed != manifest.optimizer.seed
            || manifest.rng.next_stream != manifest.epoch as u64
        {
            return Err(malformed("inconsistent RNG state".into()));
        }
        let payload = &bytes[16 + json_len..];
        let mut params = ParamStore::new();
        let mut momenta = Vec::new();
        let mut consumed = 0usize;
        for entry in &manifest.tensors {
            let count: usize = entry.shape.iter().product();
            let end = entry
                .offset
                .checked_add(count * 8)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| malformed(format!("tensor `{}` runs past the payload", entry.name)))?;
            let data = payload[entry.offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                .collect();
            consumed = consumed.max(end);
            let t = Tensor::new(entry.shape.clone(), data)?;
            match entry.role {
                TensorRole::Param => params.insert(entry.name.clone(), t)?,
                TensorRole::Momentum => momenta.push((entry.name.clone(), t)),
            }
        }
        if consumed != payload.len() {
            return Err(malformed("trailing bytes after the last tensor".into()));
        }
        for (name, m) in momenta {
            params.set_momentum(&name, m)?;
        }
        Ok(Checkpoint {
            model: Model::from_parts(manifest.model, params)?,
            optimizer: manifest.optimizer,
            epoch: manifest.epoch,
            best_metric: manifest.best_metric,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| DanError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| DanError::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}
