//! Checkpoint container.
//!
//! Layout: the 9-byte magic `SADNETv1\n`, a little-endian `u64` header length,
//! that many bytes of UTF-8 JSON ([`CheckpointHeader`]), then the parameters
//! as little-endian `f64` in flatten order. The header carries a SHA-256 of
//! the payload (`checksum`) and a SHA-256 of its own compact JSON encoding
//! with `header_checksum` blanked. Headers must also be in canonical form (the
//! exact bytes this module writes), so any altered byte is caught.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{Architecture, Model};

pub const MAGIC: &[u8; 9] = b"SADNETv1\n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointTag {
    Init,
    Clean,
    Sad,
    Escaped,
}

impl std::fmt::Display for CheckpointTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Init => "init",
            Self::Clean => "clean",
            Self::Sad => "sad",
            Self::Escaped => "escaped",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: Architecture,
    /// Flattened parameters (layer order, weights before biases).
    pub params: Vec<f64>,
    pub seed: u64,
    pub config: Option<TrainConfig>,
    pub tag: CheckpointTag,
    /// For sad points: whether the saturation postcondition held.
    pub saturated: Option<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    arch: Architecture,
    shapes: Vec<Vec<usize>>,
    seed: u64,
    tag: CheckpointTag,
    config: Option<TrainConfig>,
    saturated: Option<bool>,
    param_count: usize,
    checksum: String,
    header_checksum: String,
}

impl CheckpointHeader {
    fn self_hash(&self) -> Result<String> {
        let blank = CheckpointHeader { header_checksum: String::new(), ..self.clone() };
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&blank)?)))
    }
}

pub(crate) fn params_hash(params: &[f64]) -> String {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl Checkpoint {
    pub fn from_model(model: &Model, seed: u64, config: Option<TrainConfig>, tag: CheckpointTag) -> Self {
        Self {
            arch: model.architecture().clone(),
            params: model.flatten_parameters(),
            seed,
            config,
            tag,
            saturated: None,
        }
    }

    /// Rebuilds the model, whatever its architecture.
    pub fn to_model(&self) -> Result<Model> {
        let mut m = Model::new(self.arch.clone())?;
        m.load_flat(&self.params)?;
        Ok(m)
    }

    /// Rebuilds the model, refusing if the stored architecture differs from `expected`.
    pub fn to_model_as(&self, expected: &Architecture) -> Result<Model> {
        if &self.arch != expected {
            return Err(Error::Architecture(format!(
                "checkpoint holds '{}' {:?} but '{}' {:?} was requested",
                self.arch.name, self.arch.input_shape, expected.name, expected.input_shape
            )));
        }
        self.to_model()
    }

    pub fn params_hash(&self) -> String {
        params_hash(&self.params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let model = Model::new(self.arch.clone())?;
        let shapes = model.parameters().map(|p| p.shape().to_vec()).collect();
        let mut header = CheckpointHeader {
            arch: self.arch.clone(),
            shapes,
            seed: self.seed,
            tag: self.tag,
            config: self.config.clone(),
            saturated: self.saturated,
            param_count: self.params.len(),
            checksum: self.params_hash(),
            header_checksum: String::new(),
        };
        header.header_checksum = header.self_hash()?;
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let rest = bytes
            .strip_prefix(MAGIC.as_slice())
            .ok_or_else(|| Error::Format("not a checkpoint: bad magic".into()))?;
        if rest.len() < 8 {
            return Err(Error::Format("truncated checkpoint header".into()));
        }
        let (len, rest) = rest.split_at(8);
        let len = u64::from_le_bytes(len.try_into().expect("8 bytes")) as usize;
        if rest.len() < len {
            return Err(Error::Format("truncated checkpoint header".into()));
        }
        let (json, payload) = rest.split_at(len);
        let header: CheckpointHeader = serde_json::from_slice(json)
            .map_err(|e| Error::Format(format!("corrupt checkpoint header: {e}")))?;
        if header.self_hash()? != header.header_checksum {
            return Err(Error::Format("checkpoint header fails its checksum".into()));
        }
        if serde_json::to_vec(&header)? != json {
            return Err(Error::Format("checkpoint header is not in canonical form".into()));
        }
        if payload.len() != 8 * header.param_count {
            return Err(Error::Format(format!(
                "payload holds {} bytes, header declares {} parameters",
                payload.len(),
                header.param_count
            )));
        }
        let params: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if params_hash(&params) != header.checksum {
            return Err(Error::Format("checkpoint payload fails its checksum".into()));
        }
        let model = Model::new(header.arch.clone())
            .map_err(|e| Error::Format(format!("checkpoint architecture is invalid: {e}")))?;
        let shapes: Vec<Vec<usize>> = model.parameters().map(|p| p.shape().to_vec()).collect();
        if shapes != header.shapes || model.parameter_count() != params.len() {
            return Err(Error::Format("parameter shapes disagree with the architecture".into()));
        }
        Ok(Self {
            arch: header.arch,
            params,
            seed: header.seed,
            config: header.config,
            tag: header.tag,
            saturated: header.saturated,
        })
    }
}

pub fn save_checkpoint(cp: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, cp.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
