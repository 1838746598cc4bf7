//! The audited VQA model.

pub mod autodiff;
mod checkpoint;
mod gradcheck;
mod net;
pub mod tensor;
mod train;
pub mod vocab;

pub use autodiff::{Activation, Tape};
pub use checkpoint::{Checkpoint, CheckpointHeader, TrainingRecord, CHECKPOINT_FORMAT};
pub use gradcheck::{grad_check, GradCheckMode, GradCheckReport, MIN_COORDS};
pub use net::{patchify, unpatchify, Encoded, ModelConfig, Network, ParamLayout, TensorSpec};
pub use train::{dataset_loss, fit, train, Adam, EpochLog, Stage, TrainOutcome};
pub use vocab::{Vocab, ABSTAIN, ABSTAIN_TEXT, BOS, EOS, PAD, SEP};

use rayon::prelude::*;

use crate::error::Result;
use crate::raster::{downsample, PageImage};
use crate::scalar::Scalar;

/// A network with concrete parameters, ready for inference.
#[derive(Debug, Clone)]
pub struct Model<S> {
    pub net: Network,
    pub params: Vec<S>,
}

impl<S: Scalar> Model<S> {
    pub fn new(net: Network, params: Vec<S>) -> Self {
        Self { net, params }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let net = ck.network()?;
        let params = ck.params.iter().map(|&p| S::from_f32(p).unwrap_or_else(S::nan)).collect();
        Ok(Self { net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    /// Downsamples a page to the model's input resolution.
    pub fn input_image(&self, page: &PageImage) -> Result<PageImage> {
        downsample(page, self.net.config.input_res)
    }

    /// Greedy answer for a page at canonical (or input) resolution.
    pub fn predict(&self, page: &PageImage, question: &str) -> Result<String> {
        let img = self.input_image(page)?;
        let ex = self.net.encode_example(&img, question, None)?;
        Ok(self.net.predict(&self.params, &ex))
    }

    /// Greedy answers for pre-encoded inputs, in order.
    pub fn predict_encoded(&self, inputs: &[Encoded]) -> Vec<String> {
        inputs.par_iter().map(|ex| self.net.predict(&self.params, ex)).collect()
    }
}
