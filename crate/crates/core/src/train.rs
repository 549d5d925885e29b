//! Mini-batch training with Adam: mean squared error against teacher scores
//! (distillation), or binary cross-entropy against 0/1 labels (fine-tuning).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Real, Scope, Tensor};
use crate::error::{Error, Result};
use crate::model::{NodeInput, TextGnn};
use crate::pairs::RelevanceExample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Distill,
    Finetune,
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distill" => Ok(Stage::Distill),
            "finetune" => Ok(Stage::Finetune),
            other => Err(Error::InvalidInput(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Linear warmup length in optimizer steps; 0 disables it.
    pub warmup_steps: usize,
    /// Learning rate multiplier applied after each epoch.
    pub lr_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage: Stage::Distill,
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            warmup_steps: 0,
            lr_decay: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::Config("lr_decay must be positive".into()));
        }
        Ok(())
    }
}

pub fn distill_loss(pred: f64, teacher: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&teacher) {
        return Err(Error::Data(format!("teacher score {teacher} outside [0, 1]")));
    }
    Ok((pred - teacher).powi(2))
}

pub fn finetune_loss(pred: f64, label: bool) -> f64 {
    let eps = 1e-7;
    let p = pred.clamp(eps, 1.0 - eps);
    if label {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Per-example targets for `stage`, checked up front.
fn targets(examples: &[RelevanceExample], stage: Stage) -> Result<Vec<Real>> {
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| match stage {
            Stage::Distill => match ex.teacher_score {
                Some(t) if (0.0..=1.0).contains(&t) => Ok(t as Real),
                Some(t) => Err(Error::Data(format!("example {i}: teacher score {t} outside [0, 1]"))),
                None => Err(Error::Data(format!("example {i} has no teacher score"))),
            },
            Stage::Finetune => ex
                .binary_label
                .map(|b| if b { 1.0 } else { 0.0 })
                .ok_or_else(|| Error::Data(format!("example {i} has no binary label"))),
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    /// Mean per-example training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: u64,
}

/// Trains in place. `on_epoch(epoch, model, mean_loss)` runs after every
/// epoch, e.g. to write a checkpoint.
pub fn train_with<F>(model: &mut TextGnn, examples: &[RelevanceExample], cfg: &TrainConfig, mut on_epoch: F) -> Result<TrainReport>
where
    F: FnMut(usize, &TextGnn, f64) -> Result<()>,
{
    cfg.validate()?;
    if examples.is_empty() {
        return Err(Error::Data("no training examples".into()));
    }
    let y = targets(examples, cfg.stage)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut epoch_lr = cfg.learning_rate;
    let mut report = TrainReport {
        epoch_losses: Vec::with_capacity(cfg.epochs),
        steps: 0,
    };

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let qs: Vec<&NodeInput> = batch.iter().map(|&i| &examples[i].query).collect();
            let ks: Vec<&NodeInput> = batch.iter().map(|&i| &examples[i].keyword).collect();
            let labels: Vec<Real> = batch.iter().map(|&i| y[i]).collect();

            let grads = {
                let mut scope = Scope::train(&model.params);
                let pred = model.forward(&mut scope, &qs, &ks)?;
                let loss = match cfg.stage {
                    Stage::Distill => {
                        let t = scope.tape.constant(Tensor::matrix(labels.len(), 1, labels)?);
                        let d = scope.tape.sub(pred, t)?;
                        let sq = scope.tape.mul(d, d)?;
                        scope.tape.mean(sq)
                    }
                    Stage::Finetune => scope.tape.bce_mean(pred, &labels)?,
                };
                let value = scope.tape.value(loss).data()[0] as f64;
                if !value.is_finite() {
                    return Err(Error::Divergence(format!("non-finite loss at epoch {epoch}, batch {b}")));
                }
                total += value * batch.len() as f64;
                scope.param_grads(loss)?
            };

            adam.config.lr = if cfg.warmup_steps > 0 && (adam.step() as usize) < cfg.warmup_steps {
                epoch_lr * (adam.step() + 1) as f64 / cfg.warmup_steps as f64
            } else {
                epoch_lr
            };
            adam_step(&mut model.params, &grads, &mut adam)
                .map_err(|e| Error::Divergence(format!("epoch {epoch}, batch {b}: {e}")))?;
        }
        let mean = total / examples.len() as f64;
        log::info!("epoch {epoch}: loss {mean:.6}");
        report.epoch_losses.push(mean);
        on_epoch(epoch, model, mean)?;
        epoch_lr *= cfg.lr_decay;
    }
    report.steps = adam.step();
    Ok(report)
}

pub fn train(model: &mut TextGnn, examples: &[RelevanceExample], cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, examples, cfg, |_, _, _| Ok(()))
}

/// Model probabilities for each example, in order.
pub fn predict(model: &TextGnn, examples: &[RelevanceExample], batch_size: usize) -> Result<Vec<Real>> {
    let pairs: Vec<(&NodeInput, &NodeInput)> = examples.iter().map(|e| (&e.query, &e.keyword)).collect();
    model.score_pairs(&pairs, batch_size)
}
