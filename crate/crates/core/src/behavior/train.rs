//! Semi-supervised training of the behavior model across an expert
//! population: a supervised term on annotated instances and a
//! confidence-gated weak/strong consistency term on unannotated ones.

use std::collections::HashMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::model::{rows_tensor, BehaviorModel};
use crate::data::{Augmenter, DatasetSplit, FeatureBackbone, Instance};
use crate::error::{Error, Result};
use crate::experts::{binary_target, sample_context_set, ContextSet, ExpertProfile};
use crate::numcore::{argmax, softmax, value_and_grad, Bound, Optimizer, OptimizerConfig, Tape, Var};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslConfig {
    /// Confidence threshold on the weak-view probability.
    pub tau: f64,
    /// Weight of the consistency term.
    pub lambda: f64,
    pub steps: usize,
    pub lr: f64,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    /// Context size during training; `None` means twice the class count.
    pub context_size: Option<usize>,
    /// Use the same instance ids for every expert within a step.
    pub shared_batches: bool,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            tau: 0.95,
            lambda: 1.0,
            steps: 300,
            lr: 3e-3,
            labeled_batch: 64,
            unlabeled_batch: 64,
            context_size: None,
            shared_batches: true,
        }
    }
}

impl SslConfig {
    pub fn context_size_for(&self, classes: usize) -> usize {
        self.context_size.unwrap_or(2 * classes)
    }
}

/// Everything one expert contributes to a meta-step.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertTask {
    pub expert_id: usize,
    pub context: ContextSet,
    /// Weakly augmented annotated features and their binary targets.
    pub labeled: Vec<Vec<f64>>,
    pub targets: Vec<usize>,
    /// Weak and strong views of the same unannotated instances.
    pub weak: Vec<Vec<f64>>,
    pub strong: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaBatch {
    pub tasks: Vec<ExpertTask>,
}

fn refs(rows: &[Vec<f64>]) -> Vec<&[f64]> {
    rows.iter().map(Vec::as_slice).collect()
}

fn supervised_from_encoded(
    model: &BehaviorModel,
    tape: &mut Tape,
    bound: &Bound,
    encoded: Var,
    queries: &[&[f64]],
    targets: &[usize],
) -> Result<Var> {
    if queries.is_empty() {
        return Err(Error::Config("supervised batch is empty".into()));
    }
    let q = tape.constant(rows_tensor(queries, model.feature_dim())?);
    let psi = model.expert_embedding(tape, bound, encoded, q);
    let logits = model.correctness_logits(tape, bound, q, psi);
    let w = vec![1.0 / queries.len() as f64; queries.len()];
    tape.weighted_cross_entropy(logits, targets, &w)
}

fn consistency_from_encoded(
    model: &BehaviorModel,
    tape: &mut Tape,
    bound: &Bound,
    encoded: Var,
    weak: &[&[f64]],
    strong: &[&[f64]],
    tau: f64,
) -> Result<Var> {
    if weak.len() != strong.len() {
        return Err(Error::Structural("weak and strong views differ in count".into()));
    }
    if weak.is_empty() {
        return Ok(tape.constant(crate::numcore::Tensor::scalar(0.0)));
    }
    let u = weak.len() as f64;
    // Pseudo-labels come from values only; nothing flows back through them.
    let qw = tape.constant(rows_tensor(weak, model.feature_dim())?);
    let psi_w = model.expert_embedding(tape, bound, encoded, qw);
    let logits_w = model.correctness_logits(tape, bound, qw, psi_w);
    let (targets, weights): (Vec<usize>, Vec<f64>) = (0..weak.len())
        .map(|r| {
            let p = softmax(tape.value(logits_w).row_slice(r));
            let conf = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if conf >= tau {
                (argmax(&p), 1.0 / u)
            } else {
                (0, 0.0)
            }
        })
        .unzip();
    if weights.iter().all(|&w| w == 0.0) {
        return Ok(tape.constant(crate::numcore::Tensor::scalar(0.0)));
    }
    let qs = tape.constant(rows_tensor(strong, model.feature_dim())?);
    let psi_s = model.expert_embedding(tape, bound, encoded, qs);
    let logits_s = model.correctness_logits(tape, bound, qs, psi_s);
    tape.weighted_cross_entropy(logits_s, &targets, &weights)
}

/// Mean binary cross-entropy of the correctness head on (weakly augmented)
/// annotated queries, conditioned on the expert's context set.
pub fn supervised_loss(
    model: &BehaviorModel,
    tape: &mut Tape,
    bound: &Bound,
    context: &ContextSet,
    queries: &[&[f64]],
    targets: &[usize],
) -> Result<Var> {
    let encoded = model.encode_context(tape, bound, context)?;
    supervised_from_encoded(model, tape, bound, encoded, queries, targets)
}

/// Confidence-gated consistency loss, normalized by the full batch size.
pub fn consistency_loss(
    model: &BehaviorModel,
    tape: &mut Tape,
    bound: &Bound,
    context: &ContextSet,
    weak: &[&[f64]],
    strong: &[&[f64]],
    tau: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Config(format!("threshold {tau} outside [0, 1]")));
    }
    let encoded = model.encode_context(tape, bound, context)?;
    consistency_from_encoded(model, tape, bound, encoded, weak, strong, tau)
}

/// `Σ_e (L_s^e + λ·L_u^e)` over the batch's experts.
pub fn meta_objective(
    model: &BehaviorModel,
    tape: &mut Tape,
    bound: &Bound,
    batch: &MetaBatch,
    tau: f64,
    lambda: f64,
) -> Result<Var> {
    if batch.tasks.is_empty() {
        return Err(Error::Config("meta-step needs at least one expert".into()));
    }
    if lambda < 0.0 {
        return Err(Error::Config(format!("λ must be non-negative, got {lambda}")));
    }
    let mut total: Option<Var> = None;
    for task in &batch.tasks {
        let encoded = model.encode_context(tape, bound, &task.context)?;
        let mut term =
            supervised_from_encoded(model, tape, bound, encoded, &refs(&task.labeled), &task.targets)?;
        if lambda > 0.0 {
            let lu = consistency_from_encoded(
                model,
                tape,
                bound,
                encoded,
                &refs(&task.weak),
                &refs(&task.strong),
                tau,
            )?;
            let lu = tape.scale(lu, lambda);
            term = tape.add(term, lu);
        }
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term),
        });
    }
    Ok(total.expect("nonempty"))
}

/// One optimizer step on the meta-objective; returns the loss before the step.
pub fn meta_step(
    model: &mut BehaviorModel,
    optimizer: &mut Optimizer,
    batch: &MetaBatch,
    tau: f64,
    lambda: f64,
) -> Result<f64> {
    let (loss, grads) = {
        let m: &BehaviorModel = model;
        value_and_grad(m.params(), &|tape: &mut Tape, b: &Bound| {
            meta_objective(m, tape, b, batch, tau, lambda)
        })?
    };
    optimizer.step(model.params_mut(), &grads)?;
    Ok(loss)
}

/// Raw inputs, their frozen-feature images, and the augmentations applied
/// in raw space before the frozen map.
pub struct SslData<'a> {
    backbone: &'a FeatureBackbone,
    features: &'a DatasetSplit,
    raw_by_id: HashMap<usize, &'a Instance>,
    augmenter: Augmenter,
}

impl<'a> SslData<'a> {
    pub fn new(
        backbone: &'a FeatureBackbone,
        raw: &'a DatasetSplit,
        features: &'a DatasetSplit,
        augmenter: Augmenter,
    ) -> Result<Self> {
        if !backbone.is_frozen() {
            return Err(Error::State("feature backbone must be frozen before behavior training".into()));
        }
        if raw.annotated_ids() != features.annotated_ids() || raw.len() != features.len() {
            return Err(Error::Data("raw and feature splits disagree".into()));
        }
        let raw_by_id = raw.train.iter().map(|i| (i.id, i)).collect();
        Ok(Self { backbone, features, raw_by_id, augmenter })
    }

    pub fn features(&self) -> &DatasetSplit {
        self.features
    }

    fn views(&self, ids: &[usize], seed: u64, strong: bool) -> Result<Vec<Vec<f64>>> {
        let raw: Vec<Vec<f64>> = ids
            .iter()
            .map(|id| {
                let x = &self.raw_by_id[id].features;
                let s = rng::hash2(seed, *id as u64);
                if strong {
                    self.augmenter.strong(x, s)
                } else {
                    self.augmenter.weak(x, s)
                }
            })
            .collect();
        self.backbone.embed_batch(&refs(&raw))
    }

    /// Draw one meta-step's batches for `experts`.
    pub fn sample_batch(
        &self,
        experts: &[&ExpertProfile],
        config: &SslConfig,
        seed: u64,
    ) -> Result<MetaBatch> {
        let annotated = self.features.annotated();
        let unannotated = self.features.unannotated();
        let context_size = config.context_size_for(self.features.classes());
        let pick = |pool: &[&Instance], n: usize, s: u64| -> Vec<usize> {
            let n = n.min(pool.len());
            let mut r = rng::rng(s);
            index::sample(&mut r, pool.len(), n).into_iter().map(|i| pool[i].id).collect()
        };
        let by_id: HashMap<usize, &Instance> =
            self.features.train.iter().map(|i| (i.id, i)).collect();
        let mut shared: Option<(Vec<usize>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>)> = None;
        let mut tasks = Vec::with_capacity(experts.len());
        for (slot, expert) in experts.iter().enumerate() {
            let batch_seed = if config.shared_batches {
                rng::derive(seed, "batch")
            } else {
                rng::derive_n(seed, "batch", slot as u64)
            };
            let build = || -> Result<_> {
                let lab = pick(&annotated, config.labeled_batch, rng::derive(batch_seed, "lab"));
                let unl = pick(&unannotated, config.unlabeled_batch, rng::derive(batch_seed, "unl"));
                let lab_views = self.views(&lab, rng::derive(batch_seed, "lab-weak"), false)?;
                let weak = self.views(&unl, rng::derive(batch_seed, "unl-weak"), false)?;
                let strong = self.views(&unl, rng::derive(batch_seed, "unl-strong"), true)?;
                Ok((lab, lab_views, weak, strong))
            };
            let (lab, labeled, weak, strong) = if config.shared_batches {
                if shared.is_none() {
                    shared = Some(build()?);
                }
                shared.clone().expect("just built")
            } else {
                build()?
            };
            let targets =
                lab.iter().map(|id| binary_target(by_id[id].label, expert.label(by_id[id]))).collect();
            let context = sample_context_set(
                expert,
                &annotated,
                context_size,
                rng::derive_n(seed, "context", expert.id as u64),
            )?;
            tasks.push(ExpertTask { expert_id: expert.id, context, labeled, targets, weak, strong });
        }
        Ok(MetaBatch { tasks })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SslReport {
    pub losses: Vec<f64>,
}

/// Train `model` for `config.steps` meta-steps over the given experts.
pub fn train_behavior(
    model: &mut BehaviorModel,
    data: &SslData<'_>,
    experts: &[&ExpertProfile],
    config: &SslConfig,
    seed: u64,
) -> Result<SslReport> {
    if experts.is_empty() {
        return Err(Error::Config("population is empty".into()));
    }
    if data.features().annotated_ids().is_empty() {
        return Err(Error::Config("no annotated instances".into()));
    }
    let mut optimizer = Optimizer::new(OptimizerConfig::adam(config.lr), model.params());
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = data.sample_batch(experts, config, rng::derive_n(seed, "meta-step", step as u64))?;
        losses.push(meta_step(model, &mut optimizer, &batch, config.tau, config.lambda)?);
    }
    Ok(SslReport { losses })
}

/// Fraction of (expert, query) pairs whose predicted correctness matches
/// the simulator; one context set per expert drawn from `context_pool`.
pub fn binary_accuracy(
    model: &BehaviorModel,
    experts: &[&ExpertProfile],
    context_pool: &[&Instance],
    queries: &[&Instance],
    context_size: usize,
    seed: u64,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for e in experts {
        let ctx = sample_context_set(e, context_pool, context_size, rng::derive_n(seed, "eval", e.id as u64))?;
        let rows: Vec<&[f64]> = queries.iter().map(|i| i.features.as_slice()).collect();
        let probs = model.predict_correctness(&ctx, &rows)?;
        for (p, inst) in probs.iter().zip(queries) {
            let predicted = usize::from(*p > 0.5);
            correct += usize::from(predicted == binary_target(inst.label, e.label(inst)));
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}
