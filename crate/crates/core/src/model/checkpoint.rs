//! Binary checkpoint: an 8-byte magic, a little-endian `u32` header length, a
//! JSON header, then every tensor as little-endian `f32` in header order
//! (parameters, then Adam first moments, then Adam second moments).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::detector::{Detector, DetectorConfig};
use super::nn::AdamState;
use super::train::{TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::salience::SalienceStats;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SBLCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub version: u32,
    pub step: u64,
    pub adam_t: u64,
    pub detector: DetectorConfig,
    pub train: TrainConfig,
    /// Class names, indexed by class id.
    pub classes: Vec<String>,
    /// Salience statistics the run was trained with, if any.
    pub stats: Option<SalienceStats>,
    pub tensors: Vec<TensorEntry>,
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub detector: Detector,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn from_trainer(trainer: &Trainer, classes: &[String], stats: Option<&SalienceStats>) -> Self {
        let detector = trainer.detector().clone();
        let tensors = tensor_table(&detector);
        Checkpoint {
            header: CheckpointHeader {
                version: CHECKPOINT_VERSION,
                step: trainer.step(),
                adam_t: trainer.adam().t,
                detector: detector.config().clone(),
                train: trainer.config().clone(),
                classes: classes.to_vec(),
                stats: stats.cloned(),
                tensors,
            },
            detector,
            adam: trainer.adam().clone(),
        }
    }

    pub fn into_trainer(self) -> Trainer {
        Trainer::from_parts(self.detector, Some(self.adam), self.header.train, self.header.step)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(header.len() + 12 + self.detector.num_parameters() * 12);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        let params = self
            .detector
            .named_convs()
            .into_iter()
            .flat_map(|(_, c)| [c.weight.as_slice(), c.bias.as_slice()]);
        let moments = self.adam.m.iter().chain(&self.adam.v).map(Vec::as_slice);
        for t in params.chain(moments) {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |reason: String| Error::Checkpoint(format!("{origin}: {reason}"));
        if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(12..12 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: CheckpointHeader = serde_json::from_slice(body)?;
        if header.version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported version {}", header.version)));
        }
        let mut detector = Detector::new(header.detector.clone(), 0)?;
        let expected = tensor_table(&detector);
        if expected != header.tensors {
            return Err(bad("tensor table does not match the detector config".into()));
        }
        let total: usize = expected.iter().map(|t| t.len).sum();
        let data = &bytes[12 + hlen..];
        if data.len() != total * 3 * 4 {
            return Err(bad(format!(
                "expected {} tensor bytes, found {}",
                total * 12,
                data.len()
            )));
        }
        let mut floats = data
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")));
        for conv in detector.convs_mut() {
            for slot in conv.weight.iter_mut().chain(conv.bias.iter_mut()) {
                *slot = floats.next().expect("length checked");
            }
        }
        let mut adam = AdamState::new(expected.iter().map(|t| t.len));
        for t in adam.m.iter_mut().chain(adam.v.iter_mut()) {
            for slot in t.iter_mut() {
                *slot = floats.next().expect("length checked");
            }
        }
        adam.t = header.adam_t;
        Ok(Checkpoint { header, detector, adam })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

fn tensor_table(detector: &Detector) -> Vec<TensorEntry> {
    detector
        .named_convs()
        .into_iter()
        .flat_map(|(name, c)| {
            [
                TensorEntry {
                    name: format!("{name}.weight"),
                    len: c.weight.len(),
                },
                TensorEntry {
                    name: format!("{name}.bias"),
                    len: c.bias.len(),
                },
            ]
        })
        .collect()
}
