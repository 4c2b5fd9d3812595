//! Two-phase classifier training (output layer alone, then everything with
//! a faster head) on original or mixed batches, and accuracy evaluation.

use alloc::format;
use alloc::vec::Vec;

use crate::data::{make_mixed_batch, LabeledImage, MixedBatchSpec};
use crate::error::{Error, Result};
use crate::gantrain::stack;
use crate::nets::{ce_soft, Classifier, ClassifierConfig};
use crate::tensor::{adam_step, AdamState, Parameter, Tape, Tensor};
use crate::{derive_seed, seeded_rng, Rng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClsTrainConfig {
    pub phase1_iters: usize,
    pub phase2_iters: usize,
    pub lr_head_phase1: f64,
    pub lr_features_phase2: f64,
    pub lr_head_phase2: f64,
    pub batch: MixedBatchSpec,
    pub network: ClassifierConfig,
    pub seed: u64,
}

impl ClsTrainConfig {
    /// Iteration counts giving `epochs1` and `epochs2` passes over
    /// `train_len` original samples at the batch's original share, so every
    /// ratio sees the same number of original samples.
    pub fn for_epochs(
        epochs1: usize,
        epochs2: usize,
        train_len: usize,
        batch: MixedBatchSpec,
        network: ClassifierConfig,
        seed: u64,
    ) -> Self {
        let per_batch = batch.composition().0.max(1);
        let iters = |epochs: usize| (epochs * train_len).div_ceil(per_batch);
        Self {
            phase1_iters: iters(epochs1),
            phase2_iters: iters(epochs2),
            lr_head_phase1: 1e-2,
            lr_features_phase2: 1e-3,
            lr_head_phase2: 1e-2,
            batch,
            network,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lrs = [self.lr_head_phase1, self.lr_features_phase2, self.lr_head_phase2];
        if lrs.iter().any(|lr| lr.is_nan() || *lr <= 0.0) {
            return Err(Error::Config(format!(
                "classifier learning rates must be positive: {lrs:?}"
            )));
        }
        if self.phase1_iters + self.phase2_iters == 0 {
            return Err(Error::Config("classifier training needs at least one iteration".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClsLoss {
    pub phase: u8,
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClsRun {
    pub classifier: Classifier,
    pub losses: Vec<ClsLoss>,
    /// Some batch drew augmented samples with replacement because the pool
    /// was smaller than the augmented share.
    pub aug_with_replacement: bool,
}

/// Original samples only; identical to [`train_augmented`] at ratio 1:0.
pub fn train_baseline(train_set: &[LabeledImage], config: &ClsTrainConfig) -> Result<ClsRun> {
    let (_, n_aug) = config.batch.composition();
    if n_aug != 0 {
        return Err(Error::Config(format!(
            "baseline training needs a 1:0 batch, got {}:{}",
            config.batch.ratio_orig, config.batch.ratio_aug
        )));
    }
    train_augmented(train_set, &[], config)
}

pub fn train_augmented(
    train_set: &[LabeledImage],
    aug_pool: &[LabeledImage],
    config: &ClsTrainConfig,
) -> Result<ClsRun> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyPool("original"));
    }
    let k = config.network.num_classes;
    let mut classifier = Classifier::new(config.network, &mut seeded_rng(derive_seed(config.seed, 1)))?;
    let mut rng = seeded_rng(derive_seed(config.seed, 2));
    let mut run = ClsRun {
        classifier: classifier.clone(),
        losses: Vec::with_capacity(config.phase1_iters + config.phase2_iters),
        aug_with_replacement: false,
    };

    set_trainable(classifier.feature_params_mut(), false);
    let mut head = AdamState::new(config.lr_head_phase1)?;
    for iteration in 0..config.phase1_iters {
        let loss = step(
            &mut classifier,
            train_set,
            aug_pool,
            config,
            k,
            &mut rng,
            &mut run,
            |c| adam_step(c.head_params_mut(), &mut head),
        )?;
        run.losses.push(ClsLoss {
            phase: 1,
            iteration,
            loss,
        });
    }

    set_trainable(classifier.feature_params_mut(), true);
    let mut features = AdamState::new(config.lr_features_phase2)?;
    let mut head = AdamState::new(config.lr_head_phase2)?;
    for iteration in 0..config.phase2_iters {
        let loss = step(
            &mut classifier,
            train_set,
            aug_pool,
            config,
            k,
            &mut rng,
            &mut run,
            |c| {
                adam_step(c.feature_params_mut(), &mut features)?;
                adam_step(c.head_params_mut(), &mut head)
            },
        )?;
        run.losses.push(ClsLoss {
            phase: 2,
            iteration,
            loss,
        });
    }
    for p in classifier.params_mut() {
        p.tensor_mut().clear_grad();
    }
    run.classifier = classifier;
    Ok(run)
}

fn set_trainable(params: &mut [Parameter], on: bool) {
    for p in params {
        p.tensor_mut().set_requires_grad(on);
    }
}

#[allow(clippy::too_many_arguments)]
fn step(
    classifier: &mut Classifier,
    train_set: &[LabeledImage],
    aug_pool: &[LabeledImage],
    config: &ClsTrainConfig,
    k: usize,
    rng: &mut Rng,
    run: &mut ClsRun,
    update: impl FnOnce(&mut Classifier) -> Result<()>,
) -> Result<f64> {
    let batch = make_mixed_batch(train_set, aug_pool, &config.batch, k, rng)?;
    run.aug_with_replacement |= batch.aug_with_replacement;
    let (shape, x, targets) = batch.flatten();
    let mut tape = Tape::new();
    let xv = tape.constant_from(&shape, x)?;
    let probs = classifier.forward(&mut tape, xv)?;
    let loss = ce_soft(&mut tape, probs, &targets)?;
    let value = tape.value(loss)[0];
    let grads = tape.backward(loss)?;
    grads.accumulate_into(classifier.feature_params_mut());
    grads.accumulate_into(classifier.head_params_mut());
    update(classifier)?;
    Ok(value)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose arg-max prediction equals the label.
pub fn evaluate(classifier: &Classifier, test_set: &[LabeledImage]) -> Result<f64> {
    if test_set.is_empty() {
        return Err(Error::EmptyPool("test"));
    }
    let k = classifier.config().num_classes;
    let mut correct = 0usize;
    for chunk in test_set.chunks(256) {
        let (x, labels): (Tensor, Vec<usize>) = stack(chunk)?;
        let probs = classifier.predict(&x)?;
        correct += probs
            .chunks_exact(k)
            .zip(&labels)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
    }
    Ok(correct as f64 / test_set.len() as f64)
}
