//! Checkpoint files: an 8-byte little-endian manifest length, a JSON
//! manifest, then every array as raw little-endian f64. The manifest holds
//! the SHA-256 of the payload.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::OptimizerState;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::tokenizer::Vocab;

pub const CHECKPOINT_VERSION: u32 = 1;

/// One completed stage in a checkpoint's history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub stage: String,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub provenance: Vec<StageRecord>,
}

impl Checkpoint {
    /// Seeded initial weights, zero moments, empty history.
    pub fn init(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        check_vocab(&config, &vocab)?;
        let params = ModelParams::init(&config, seed)?;
        let optimizer = OptimizerState::zeros(&params);
        Ok(Self { config, vocab, params, optimizer, provenance: Vec::new() })
    }

    /// Weights for a model built from `cfg`; errors if they were trained
    /// under a different config.
    pub fn params_for(&self, cfg: &ModelConfig) -> Result<&ModelParams> {
        if *cfg != self.config {
            return Err(Error::Config(format!(
                "checkpoint was trained with {:?}, requested {:?}",
                self.config, cfg
            )));
        }
        self.params.check_config(cfg)?;
        Ok(&self.params)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity(self.params.num_scalars() * 8 * 3);
        let mut arrays = Vec::new();
        let groups: [(Group, Vec<&[f64]>); 3] = [
            (Group::Param, self.params.iter().map(|(_, t)| t.data()).collect()),
            (Group::AdamM, self.optimizer.m.iter().map(Vec::as_slice).collect()),
            (Group::AdamV, self.optimizer.v.iter().map(Vec::as_slice).collect()),
        ];
        for (group, data) in groups {
            for ((name, t), values) in self.params.iter().zip(data) {
                arrays.push(ArrayEntry { group, name: name.clone(), shape: t.shape().to_vec(), offset: payload.len() as u64 });
                for x in values {
                    payload.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        let manifest = Manifest {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            provenance: self.provenance.clone(),
            step: self.optimizer.step,
            arrays,
            payload_len: payload.len() as u64,
            sha256: hex_digest(&payload),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(8 + json.len() + payload.len());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header: [u8; 8] = bytes
            .get(..8)
            .and_then(|h| h.try_into().ok())
            .ok_or_else(|| Error::Checksum("file is shorter than its header".into()))?;
        let manifest_len = usize::try_from(u64::from_le_bytes(header))
            .map_err(|_| Error::Checksum("manifest length overflows".into()))?;
        let manifest_end = 8usize
            .checked_add(manifest_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Checksum("file ends inside the manifest".into()))?;
        let value: serde_json::Value = serde_json::from_slice(&bytes[8..manifest_end])
            .map_err(|e| Error::Checkpoint(format!("unreadable manifest: {e}")))?;
        let found = value.get("version").and_then(serde_json::Value::as_u64).unwrap_or(0);
        if found != u64::from(CHECKPOINT_VERSION) {
            return Err(Error::Version { found: u32::try_from(found).unwrap_or(u32::MAX), expected: CHECKPOINT_VERSION });
        }
        let manifest: Manifest =
            serde_json::from_value(value).map_err(|e| Error::Checkpoint(format!("invalid manifest: {e}")))?;

        let payload = &bytes[manifest_end..];
        if payload.len() as u64 != manifest.payload_len {
            return Err(Error::Checksum(format!(
                "payload is {} bytes, manifest declares {}",
                payload.len(),
                manifest.payload_len
            )));
        }
        if hex_digest(payload) != manifest.sha256 {
            return Err(Error::Checksum("payload digest does not match the manifest".into()));
        }

        let mut named = BTreeMap::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for entry in &manifest.arrays {
            let values = read_array(payload, entry)?;
            match entry.group {
                Group::Param => {
                    named.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), values)?);
                }
                Group::AdamM => m.push((entry.name.clone(), values)),
                Group::AdamV => v.push((entry.name.clone(), values)),
            }
        }
        let params = ModelParams::from_named(&manifest.config, named)?;
        let order: Vec<&String> = params.names().collect();
        for (label, moments) in [("first", &m), ("second", &v)] {
            let names: Vec<&String> = moments.iter().map(|(n, _)| n).collect();
            if names != order {
                return Err(Error::Checkpoint(format!("{label} moments do not match the parameter list")));
            }
        }
        check_vocab(&manifest.config, &manifest.vocab)?;
        Ok(Self {
            config: manifest.config,
            vocab: manifest.vocab,
            params,
            optimizer: OptimizerState {
                m: m.into_iter().map(|(_, a)| a).collect(),
                v: v.into_iter().map(|(_, a)| a).collect(),
                step: manifest.step,
            },
            provenance: manifest.provenance,
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

fn check_vocab(config: &ModelConfig, vocab: &Vocab) -> Result<()> {
    if vocab.len() > config.vocab_size {
        return Err(Error::Config(format!(
            "vocabulary has {} entries but the model embeds only {}",
            vocab.len(),
            config.vocab_size
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Group {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    group: Group,
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    config: ModelConfig,
    vocab: Vocab,
    provenance: Vec<StageRecord>,
    step: u64,
    arrays: Vec<ArrayEntry>,
    payload_len: u64,
    sha256: String,
}

fn read_array(payload: &[u8], entry: &ArrayEntry) -> Result<Vec<f64>> {
    let n: usize = entry.shape.iter().product();
    let start = usize::try_from(entry.offset).ok();
    let span = start.and_then(|s| n.checked_mul(8).and_then(|len| s.checked_add(len)).map(|e| (s, e)));
    let (start, end) = span
        .filter(|&(_, e)| e <= payload.len())
        .ok_or_else(|| Error::Checkpoint(format!("array `{}` lies outside the payload", entry.name)))?;
    Ok(payload[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
