//! Adam training loop with validation-based early stopping.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::{Encoded, Network};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::util::derive_seed;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: Stage,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Wall time; not persisted so checkpoints stay reproducible.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Train,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    pub params: Vec<S>,
    pub history: Vec<EpochLog>,
    /// Epoch of the returned (best-validation) parameters in the final stage.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct Adam<S> {
    m: Vec<S>,
    v: Vec<S>,
    t: u32,
}

impl<S: Scalar> Adam<S> {
    pub fn new(n: usize) -> Self {
        Self { m: vec![S::zero(); n], v: vec![S::zero(); n], t: 0 }
    }

    pub fn step(&mut self, params: &mut [S], grad: &[S], lr: f64) {
        self.t += 1;
        let (b1, b2) = (S::from_f64_lossy(BETA1), S::from_f64_lossy(BETA2));
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        let step = S::from_f64_lossy(lr * c2.sqrt() / c1);
        let eps = S::from_f64_lossy(ADAM_EPS * c2.sqrt());
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = b1 * self.m[i] + (S::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (S::one() - b2) * g * g;
            params[i] -= step * self.m[i] / (self.v[i].sqrt() + eps);
        }
    }
}

/// Mean token loss over a dataset, evaluated in chunks.
pub fn dataset_loss<S: Scalar>(net: &Network, params: &[S], data: &[Encoded]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset("evaluation set".into()));
    }
    let mut total = 0.0;
    let mut tokens = 0usize;
    for chunk in data.chunks(EVAL_CHUNK) {
        let refs: Vec<&Encoded> = chunk.iter().collect();
        let n: usize = chunk.iter().map(|e| e.answer.len().saturating_sub(1)).sum();
        total += net.loss(params, &refs)?.as_f64() * n as f64;
        tokens += n;
    }
    Ok(total / tokens as f64)
}

/// Trains from `init` on `train`, early-stopping on `val`.
pub fn fit<S: Scalar>(
    net: &Network,
    init: Vec<S>,
    train: &[Encoded],
    val: &[Encoded],
    stage: Stage,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome<S>> {
    let c = &net.config;
    if train.is_empty() {
        return Err(Error::EmptyDataset("training set".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptyDataset("validation set".into()));
    }
    let mut params = init;
    let mut best = params.clone();
    let mut best_loss = dataset_loss(net, &params, val)?;
    let mut best_epoch = 0;
    let mut adam = Adam::new(params.len());
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut since_best = 0;
    let mut step = 0usize;
    let stage_tag = match stage {
        Stage::Pretrain => 1,
        Stage::Train => 2,
    };

    for epoch in 1..=c.max_epochs {
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(c.seed, (stage_tag << 32) | epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for idx in order.chunks(c.batch_size) {
            let batch: Vec<&Encoded> = idx.iter().map(|&i| &train[i]).collect();
            let (loss, mut grad) = net.loss_and_grad(&params, &batch)?;
            clip(&mut grad, c.grad_clip);
            step += 1;
            let warm = if c.warmup_steps == 0 { 1.0 } else { (step as f64 / c.warmup_steps as f64).min(1.0) };
            adam.step(&mut params, &grad, c.learning_rate * warm);
            if params.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameters after step {step}")));
            }
            loss_sum += loss.as_f64();
            batches += 1;
        }
        let val_loss = dataset_loss(net, &params, val)?;
        let log = EpochLog {
            stage,
            epoch,
            train_loss: loss_sum / batches as f64,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        history.push(log);
        if val_loss < best_loss {
            best_loss = val_loss;
            best.clone_from(&params);
            best_epoch = epoch;
            since_best = 0;
        } else {
            if since_best >= c.patience {
                break;
            }
            since_best += 1;
        }
    }
    Ok(TrainOutcome { params: best, history, best_epoch, best_val_loss: best_loss })
}

/// Full training procedure: optional pretraining stage on a disjoint pool,
/// then training on `train`. Returns the best-validation parameters.
pub fn train<S: Scalar>(
    net: &Network,
    train: &[Encoded],
    val: &[Encoded],
    pretrain: Option<&[Encoded]>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome<S>> {
    let mut init = net.init();
    let mut history = Vec::new();
    if net.config.pretrain {
        let pool = pretrain.filter(|p| !p.is_empty()).ok_or_else(|| Error::EmptyDataset("pretrain pool".into()))?;
        let pre = fit(net, init, pool, val, Stage::Pretrain, on_epoch)?;
        init = pre.params;
        history = pre.history;
    }
    let mut out = fit(net, init, train, val, Stage::Train, on_epoch)?;
    history.append(&mut out.history);
    out.history = history;
    Ok(out)
}

fn clip<S: Scalar>(grad: &mut [S], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grad.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = S::from_f64_lossy(max_norm / norm);
        for g in grad {
            *g *= s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::raster::PageImage;

    fn data(net: &Network, n: usize, offset: usize) -> Vec<Encoded> {
        (0..n)
            .map(|i| {
                let k = i + offset;
                let px = (0..256).map(|j| if (j + k).is_multiple_of(5) { 0.0 } else { 1.0 }).collect();
                let img = PageImage::from_pixels(16, 16, px).unwrap();
                let ans = ["Ann", "Bob", "Cy", "Dee", "Eve"][k % 5];
                net.encode_example(&img, "Who?", Some(ans)).unwrap()
            })
            .collect()
    }

    fn tiny(patience: usize, epochs: usize) -> Network {
        let config =
            ModelConfig { patience, max_epochs: epochs, batch_size: 4, warmup_steps: 0, ..ModelConfig::tiny() };
        Network::new(config).unwrap()
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = vec![1.0f64, -2.0];
        let mut a = Adam::new(2);
        a.step(&mut p, &[0.5, -3.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn empty_sets_are_rejected() {
        let net = tiny(1, 2);
        let d = data(&net, 3, 0);
        assert!(matches!(train::<f32>(&net, &[], &d, None, &mut |_| {}), Err(Error::EmptyDataset(_))));
        assert!(matches!(train::<f32>(&net, &d, &[], None, &mut |_| {}), Err(Error::EmptyDataset(_))));
        let pre = Network::new(ModelConfig { pretrain: true, ..net.config.clone() }).unwrap();
        assert!(matches!(train::<f32>(&pre, &d, &d, None, &mut |_| {}), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn deterministic_and_learns() {
        let net = tiny(3, 6);
        let tr = data(&net, 10, 0);
        let va = data(&net, 5, 0);
        let a = train::<f32>(&net, &tr, &va, None, &mut |_| {}).unwrap();
        let b = train::<f32>(&net, &tr, &va, None, &mut |_| {}).unwrap();
        assert_eq!(a.params, b.params);
        let initial = dataset_loss(&net, &net.init::<f32>(), &va).unwrap();
        assert!(a.best_val_loss < initial);
        assert!(a.history[0].train_loss.is_finite());
    }

    #[test]
    fn patience_zero_stops_after_first_non_improving_epoch() {
        // a zero learning rate never improves
        let mut config =
            ModelConfig { learning_rate: 0.0, patience: 0, max_epochs: 10, batch_size: 4, ..ModelConfig::tiny() };
        config.warmup_steps = 0;
        let net = Network::new(config).unwrap();
        let d = data(&net, 4, 0);
        let out = train::<f32>(&net, &d, &d, None, &mut |_| {}).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.best_epoch, 0);
        assert_eq!(out.params, net.init::<f32>());
    }

    #[test]
    fn pretraining_runs_two_stages() {
        let base = tiny(0, 2);
        let net = Network::new(ModelConfig { pretrain: true, ..base.config.clone() }).unwrap();
        let d = data(&net, 4, 0);
        let pool = data(&net, 4, 2);
        let out = train::<f32>(&net, &d, &d, Some(&pool), &mut |_| {}).unwrap();
        assert!(out.history.iter().any(|h| h.stage == Stage::Pretrain));
        assert!(out.history.iter().any(|h| h.stage == Stage::Train));
    }
}
