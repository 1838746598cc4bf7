//! Checkpoint files: one line of JSON header, then the parameters as
//! little-endian f32 in layout order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{ModelConfig, Network, TensorSpec};
use super::train::EpochLog;
use crate::corpus::SampleRef;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "docmem-checkpoint/1";

/// What a checkpoint was trained on.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub manifest_hash: String,
    pub corpus_seed: u64,
    pub train_samples: usize,
    /// Split index when trained as one of K split models.
    pub split: Option<usize>,
    /// Canary ids whose samples were removed from training.
    pub excluded_canaries: Vec<usize>,
    /// Canary ids present in training.
    pub included_canaries: Vec<usize>,
    /// Extra samples removed from training (besides canaries).
    pub excluded_samples: Vec<SampleRef>,
    /// Training-set augmentation applied, if any.
    pub augmentation: Option<String>,
    /// SHA-256 of the checkpoint whose parameters training started from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warm_start: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub config: ModelConfig,
    pub vocab_hash: String,
    pub training: TrainingRecord,
    pub history: Vec<EpochLog>,
    pub best_epoch: usize,
    pub tensors: Vec<TensorSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f32>,
}

impl Checkpoint {
    pub fn new(
        net: &Network,
        params: Vec<f32>,
        training: TrainingRecord,
        history: Vec<EpochLog>,
        best_epoch: usize,
    ) -> Self {
        Self {
            header: CheckpointHeader {
                format: CHECKPOINT_FORMAT.into(),
                config: net.config.clone(),
                vocab_hash: net.vocab.hash(),
                training,
                history,
                best_epoch,
                tensors: net.layout.tensors.clone(),
            },
            params,
        }
    }

    /// Rebuilds the network and checks that it matches the stored layout.
    pub fn network(&self) -> Result<Network> {
        let net = Network::new(self.header.config.clone())?;
        if net.vocab.hash() != self.header.vocab_hash {
            return Err(Error::format("checkpoint", "vocabulary hash differs"));
        }
        if net.layout.tensors != self.header.tensors || net.layout.total != self.params.len() {
            return Err(Error::format("checkpoint", "parameter layout differs"));
        }
        Ok(net)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        out.reserve(self.params.len() * 4);
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format("checkpoint", "missing header terminator"))?;
        let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::format("checkpoint", format!("unsupported format {:?}", header.format)));
        }
        let body = &bytes[nl + 1..];
        if !body.len().is_multiple_of(4) {
            return Err(Error::format("checkpoint", "parameter block is not a whole number of f32"));
        }
        let params = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let ck = Self { header, params };
        ck.network()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let net = Network::new(ModelConfig::tiny()).unwrap();
        let history = vec![EpochLog {
            stage: super::super::train::Stage::Train,
            epoch: 1,
            train_loss: 4.123456789,
            val_loss: 0.1 + 0.2,
            seconds: 0.0,
        }];
        let training =
            TrainingRecord { manifest_hash: "ab".into(), excluded_canaries: vec![3, 1], ..Default::default() };
        Checkpoint::new(&net, net.init(), training, history, 1)
    }

    #[test]
    fn byte_round_trip() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let ck = sample();
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        back.save(&dir.path().join("n.ckpt")).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(dir.path().join("n.ckpt")).unwrap());
    }

    #[test]
    fn truncated_block_is_rejected() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes.pop();
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        bytes.truncate(bytes.len() - 3);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
