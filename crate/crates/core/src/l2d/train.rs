use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::model::{DeferralDecision, DeferralModel, HeadConfig, L2dVariant};
use crate::data::Instance;
use crate::error::{Error, Result};
use crate::experts::{sample_context, ContextSet, LabelSource};
use crate::numcore::{argmax, value_and_grad, Bound, Optimizer, OptimizerConfig, Tape};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct L2dConfig {
    pub heads: HeadConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Decay the learning rate linearly to `lr / epochs` in the last epoch.
    pub lr_decay: bool,
    /// Demonstrations per expert embedding during training and evaluation.
    pub context_size: usize,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
}

impl Default for L2dConfig {
    fn default() -> Self {
        Self {
            heads: HeadConfig::default(),
            epochs: 60,
            batch_size: 64,
            lr: 1e-2,
            lr_decay: true,
            context_size: 50,
            finetune_steps: 50,
            finetune_lr: 1e-2,
        }
    }
}

/// Outcome counts for a set of decisions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Tally {
    pub classified: usize,
    pub classified_correct: usize,
    pub deferred: usize,
    pub deferred_correct: usize,
}

impl Tally {
    pub fn record(&mut self, decision: DeferralDecision, truth: usize, expert_label: usize) {
        match decision {
            DeferralDecision::Classify(c) => {
                self.classified += 1;
                self.classified_correct += usize::from(c == truth);
            }
            DeferralDecision::Defer(_) => {
                self.deferred += 1;
                self.deferred_correct += usize::from(expert_label == truth);
            }
        }
    }

    pub fn merge(&mut self, other: &Tally) {
        self.classified += other.classified;
        self.classified_correct += other.classified_correct;
        self.deferred += other.deferred;
        self.deferred_correct += other.deferred_correct;
    }

    pub fn total(&self) -> usize {
        self.classified + self.deferred
    }

    pub fn correct(&self) -> usize {
        self.classified_correct + self.deferred_correct
    }

    fn ratio(a: usize, b: usize) -> f64 {
        if b == 0 {
            0.0
        } else {
            a as f64 / b as f64
        }
    }

    pub fn system_accuracy(&self) -> f64 {
        Self::ratio(self.correct(), self.total())
    }

    pub fn coverage(&self) -> f64 {
        Self::ratio(self.deferred, self.total())
    }

    /// Expert accuracy on the deferred instances; 0 when nothing was deferred.
    pub fn expert_accuracy_on_deferred(&self) -> f64 {
        Self::ratio(self.deferred_correct, self.deferred)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct L2dReport {
    pub batch_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
    pub validation_accuracy: Vec<f64>,
}

fn rows<'a>(instances: &[&'a Instance]) -> Vec<&'a [f64]> {
    instances.iter().map(|i| i.features.as_slice()).collect()
}

/// Labels of every expert on every instance, failing on the first gap.
fn label_matrix(
    source: &dyn LabelSource,
    expert_ids: &[usize],
    instances: &[&Instance],
) -> Result<Vec<Vec<usize>>> {
    expert_ids
        .iter()
        .map(|&e| instances.iter().map(|i| source.label(e, i)).collect())
        .collect()
}

/// Decisions of `model` for `expert_id` on `queries`, with the embedding
/// built from `context`.
pub fn decisions_for(
    model: &DeferralModel,
    context: Option<&ContextSet>,
    queries: &[&Instance],
    expert_id: usize,
) -> Result<Vec<DeferralDecision>> {
    let q = rows(queries);
    let psi = match (model.uses_context(), context) {
        (false, _) => None,
        (true, Some(ctx)) => model.embed(ctx, &q)?,
        (true, None) => return Err(Error::Config("context set required".into())),
    };
    model.decide_batch(&q, psi.as_ref(), expert_id)
}

/// Mean system accuracy over `expert_ids` on `queries`, with contexts
/// drawn from `pool` through `source`.
pub fn system_accuracy(
    model: &DeferralModel,
    source: &dyn LabelSource,
    expert_ids: &[usize],
    pool: &[&Instance],
    queries: &[&Instance],
    context_size: usize,
    seed: u64,
) -> Result<f64> {
    let mut tally = Tally::default();
    for &e in expert_ids {
        let ctx = if model.uses_context() {
            Some(sample_context(e, pool, context_size, rng::derive_n(seed, "val-context", e as u64), source)?)
        } else {
            None
        };
        let decisions = decisions_for(model, ctx.as_ref(), queries, e)?;
        for (d, inst) in decisions.into_iter().zip(queries) {
            tally.record(d, inst.label, source.label(e, inst)?);
        }
    }
    Ok(tally.system_accuracy())
}

/// Minimize the mean surrogate loss. Each batch pairs with one expert drawn
/// uniformly from `expert_ids`, whose embedding comes from a fresh context
/// set labeled by `source`.
pub fn train_l2d(
    model: &mut DeferralModel,
    train: &[&Instance],
    validation: &[&Instance],
    source: &dyn LabelSource,
    expert_ids: &[usize],
    config: &L2dConfig,
    seed: u64,
) -> Result<L2dReport> {
    if expert_ids.is_empty() {
        return Err(Error::Config("no experts to train against".into()));
    }
    if train.is_empty() || config.batch_size == 0 {
        return Err(Error::Config("empty training set or batch".into()));
    }
    let labels = label_matrix(source, expert_ids, train)?;
    let mut optimizer = Optimizer::new(OptimizerConfig::adam(config.lr), model.params());
    let mut order_rng = rng::stream(seed, "l2d-order");
    let mut expert_rng = rng::stream(seed, "l2d-expert");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = L2dReport { batch_losses: Vec::new(), epoch_losses: Vec::new(), validation_accuracy: Vec::new() };
    let mut batch_index = 0u64;
    for epoch in 0..config.epochs {
        if config.lr_decay {
            optimizer.set_lr(config.lr * (config.epochs - epoch) as f64 / config.epochs as f64);
        }
        order.shuffle(&mut order_rng);
        let mut epoch_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let slot = expert_rng.gen_range(0..expert_ids.len());
            let e = expert_ids[slot];
            let batch: Vec<&Instance> = chunk.iter().map(|&i| train[i]).collect();
            let q = rows(&batch);
            let ys: Vec<usize> = batch.iter().map(|i| i.label).collect();
            let ms: Vec<usize> = chunk.iter().map(|&i| labels[slot][i]).collect();
            let psi = if model.uses_context() {
                let ctx = sample_context(
                    e,
                    train,
                    config.context_size,
                    rng::derive_n(seed, "l2d-context", batch_index),
                    source,
                )?;
                model.embed(&ctx, &q)?
            } else {
                None
            };
            let (loss, grads) = {
                let m: &DeferralModel = model;
                value_and_grad(m.params(), &|t: &mut Tape, b: &Bound| {
                    m.surrogate_batch(t, b, &q, psi.as_ref(), &ys, &ms)
                })?
            };
            optimizer.step(model.params_mut(), &grads)?;
            report.batch_losses.push(loss);
            epoch_sum += loss;
            batches += 1;
            batch_index += 1;
        }
        report.epoch_losses.push(epoch_sum / batches as f64);
        if !validation.is_empty() {
            report.validation_accuracy.push(system_accuracy(
                model,
                source,
                expert_ids,
                train,
                validation,
                config.context_size,
                rng::derive(seed, "l2d-validation"),
            )?);
        }
    }
    Ok(report)
}

/// Train only the classifier trunk with plain cross-entropy.
pub fn train_classifier(
    model: &mut DeferralModel,
    train: &[&Instance],
    config: &L2dConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if train.is_empty() || config.batch_size == 0 {
        return Err(Error::Config("empty training set or batch".into()));
    }
    let mut optimizer = Optimizer::new(OptimizerConfig::adam(config.lr), model.params());
    let mut order_rng = rng::stream(seed, "l2d-order");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        if config.lr_decay {
            optimizer.set_lr(config.lr * (config.epochs - epoch) as f64 / config.epochs as f64);
        }
        order.shuffle(&mut order_rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Instance> = chunk.iter().map(|&i| train[i]).collect();
            let q = rows(&batch);
            let ys: Vec<usize> = batch.iter().map(|i| i.label).collect();
            let (loss, grads) = {
                let m: &DeferralModel = model;
                value_and_grad(m.params(), &|t: &mut Tape, b: &Bound| m.classifier_batch(t, b, &q, &ys))?
            };
            optimizer.step_filtered(model.params_mut(), &grads, |n| n.starts_with("trunk."))?;
            sum += loss;
            batches += 1;
        }
        epoch_losses.push(sum / batches as f64);
    }
    Ok(epoch_losses)
}

/// Accuracy of the classifier trunk alone.
pub fn classifier_accuracy(model: &DeferralModel, instances: &[&Instance]) -> Result<f64> {
    if instances.is_empty() {
        return Ok(0.0);
    }
    let logits = model.logits(&rows(instances), None)?;
    let hits = logits.iter().zip(instances).filter(|((g, _), i)| argmax(g) == i.label).count();
    Ok(hits as f64 / instances.len() as f64)
}

/// Copy a context-free model and tune its deferral head on one expert's
/// context set, full batch. Returns the tuned model and the loss before each
/// step plus the final loss.
pub fn finetune(
    base: &DeferralModel,
    context: &ContextSet,
    steps: usize,
    lr: f64,
) -> Result<(DeferralModel, Vec<f64>)> {
    if base.uses_context() {
        return Err(Error::Config("fine-tuning starts from a context-free model".into()));
    }
    if context.is_empty() {
        return Err(Error::Config("context set is empty".into()));
    }
    let mut model = base.clone().with_variant(L2dVariant::Finetune);
    let q: Vec<&[f64]> = context.triplets.iter().map(|t| t.features.as_slice()).collect();
    let ys: Vec<usize> = context.triplets.iter().map(|t| t.label).collect();
    let ms: Vec<usize> = context.triplets.iter().map(|t| t.expert_label).collect();
    let mut optimizer = Optimizer::new(OptimizerConfig::adam(lr), model.params());
    let mut losses = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let (loss, grads) = {
            let m = &model;
            value_and_grad(m.params(), &|t: &mut Tape, b: &Bound| m.surrogate_batch(t, b, &q, None, &ys, &ms))?
        };
        losses.push(loss);
        optimizer.step_filtered(model.params_mut(), &grads, |n| n.starts_with("defer."))?;
    }
    let final_loss = {
        let mut tape = Tape::new();
        let b = tape.bind(model.params(), false);
        let v = model.surrogate_batch(&mut tape, &b, &q, None, &ys, &ms)?;
        tape.value(v).item()
    };
    losses.push(final_loss);
    Ok((model, losses))
}
