//! Corpus-to-checkpoint training runs with their training records.

use std::collections::BTreeSet;

use crate::audit::SplitPlan;
use crate::corpus::{manifest_digest, CanarySet, CorpusManifest, SampleRef, Split};
use crate::data::encode_samples;
use crate::defend::{eb_augment, encode_augmented};
use crate::error::{Error, Result};
use crate::model::{fit, train, Checkpoint, EpochLog, ModelConfig, Network, Stage, TrainingRecord};
use crate::util::{derive_seed, sha256_hex};

pub const EB_AUGMENTATION: &str = "eb";

/// Which training samples a run sees.
#[derive(Debug, Clone, Copy)]
pub enum TrainingSet<'a> {
    /// Every training sample, canaries included.
    All,
    /// Every canary sample removed (the generalization baseline).
    ExcludeCanaries,
    /// Split `k` of a K-split plan.
    Split { plan: &'a SplitPlan, k: usize },
}

pub struct TrainJob<'a> {
    pub manifest: &'a CorpusManifest,
    pub canaries: &'a CanarySet,
    pub config: ModelConfig,
    pub set: TrainingSet<'a>,
    /// Train on the extraction-blocking augmentation of the set.
    pub extraction_blocking: bool,
    /// Start from these parameters instead of a fresh initialization
    /// (no pretraining stage).
    pub warm_start: Option<&'a Checkpoint>,
}

impl TrainJob<'_> {
    /// The selected samples and the record describing them.
    pub fn samples(&self) -> Result<(Vec<SampleRef>, TrainingRecord)> {
        let n = self.canaries.len();
        let (included, excluded, split): (Vec<usize>, Vec<usize>, Option<usize>) = match self.set {
            TrainingSet::All => ((0..n).collect(), vec![], None),
            TrainingSet::ExcludeCanaries => (vec![], (0..n).collect(), None),
            TrainingSet::Split { plan, k } => {
                if plan.membership.len() != n {
                    return Err(Error::ManifestMismatch(format!(
                        "plan covers {} canaries, corpus has {n}",
                        plan.membership.len()
                    )));
                }
                if k >= plan.k {
                    return Err(Error::ManifestMismatch(format!("split {k} outside plan of K = {}", plan.k)));
                }
                (plan.included(k), plan.excluded(k), Some(k))
            }
        };
        let drop: BTreeSet<SampleRef> = excluded.iter().map(|&c| self.canaries.entries[c].sample()).collect();
        let samples: Vec<SampleRef> =
            self.manifest.samples(Split::Train).into_iter().filter(|s| !drop.contains(s)).collect();
        let record = TrainingRecord {
            manifest_hash: manifest_digest(self.manifest)?,
            corpus_seed: self.manifest.seed,
            train_samples: samples.len() * if self.extraction_blocking { 2 } else { 1 },
            split,
            excluded_canaries: excluded,
            included_canaries: included,
            excluded_samples: vec![],
            augmentation: self.extraction_blocking.then(|| EB_AUGMENTATION.to_string()),
            warm_start: self.warm_start.map(|ck| ck.to_bytes().map(|b| sha256_hex(&b))).transpose()?,
        };
        Ok((samples, record))
    }

    pub fn run(&self, on_epoch: &mut dyn FnMut(&EpochLog)) -> Result<Checkpoint> {
        let net = Network::new(self.config.clone())?;
        let (samples, record) = self.samples()?;
        // EB runs validate on the augmented validation split, so early stopping
        // tracks the objective being trained.
        let encode = |refs: &[SampleRef], tag: u64| {
            if self.extraction_blocking {
                let aug = eb_augment(self.manifest, refs, derive_seed(self.config.seed, tag))?;
                encode_augmented(&net, self.manifest, &aug)
            } else {
                encode_samples(&net, self.manifest, refs)
            }
        };
        let train_set = encode(&samples, 0xeb)?;
        let val = encode(&self.manifest.samples(Split::Validation), 0xeb5)?;
        let pool = if self.config.pretrain {
            Some(encode_samples(&net, self.manifest, &self.manifest.samples(Split::PretrainPool))?)
        } else {
            None
        };
        let out = match self.warm_start {
            Some(ck) => {
                if ck.header.training.manifest_hash != record.manifest_hash {
                    return Err(Error::ManifestMismatch(
                        "warm-start checkpoint was trained on a different corpus".into(),
                    ));
                }
                if ck.header.tensors != net.layout.tensors {
                    return Err(Error::ShapeMismatch("warm-start checkpoint has a different parameter layout".into()));
                }
                fit::<f32>(&net, ck.params.clone(), &train_set, &val, Stage::Train, on_epoch)?
            }
            None => train::<f32>(&net, &train_set, &val, pool.as_deref(), on_epoch)?,
        };
        Ok(Checkpoint::new(&net, out.params, record, out.history, out.best_epoch))
    }
}
