use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::dataset::{DatasetSplit, Instance};
use crate::error::{Error, Result};
use crate::numcore::nn::{Init, Linear};
use crate::numcore::{
    argmax, value_and_grad, Bound, Optimizer, OptimizerConfig, Parameters, Tape, Tensor, Var,
};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub hidden: usize,
    pub feature_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { hidden: 32, feature_dim: 16, epochs: 30, batch_size: 64, lr: 3e-3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub validation_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct Layers {
    hidden: Linear,
    out: Linear,
    head: Linear,
}

/// Feature map from raw inputs to the shared feature space, pretrained with a
/// classification head and frozen afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBackbone {
    params: Parameters,
    layers: Option<Layers>,
    raw_dim: usize,
    feature_dim: usize,
    classes: usize,
    frozen: bool,
}

impl FeatureBackbone {
    /// Two-layer map `raw → hidden (tanh) → feature` plus a linear head.
    pub fn new(raw_dim: usize, classes: usize, config: &BackboneConfig, seed: u64) -> Result<Self> {
        let mut rng = rng::stream(seed, "backbone-init");
        let mut params = Parameters::new();
        let hidden = Linear::new(&mut params, "emb.0", raw_dim, config.hidden, Init::Xavier, &mut rng)?;
        let out = Linear::new(
            &mut params,
            "emb.1",
            config.hidden,
            config.feature_dim,
            Init::Xavier,
            &mut rng,
        )?;
        let head =
            Linear::new(&mut params, "head", config.feature_dim, classes, Init::Xavier, &mut rng)?;
        Ok(Self {
            params,
            layers: Some(Layers { hidden, out, head }),
            raw_dim,
            feature_dim: config.feature_dim,
            classes,
            frozen: false,
        })
    }

    /// Identity map, already frozen; used when features are ingested directly.
    pub fn identity(dim: usize, classes: usize) -> Self {
        Self {
            params: Parameters::new(),
            layers: None,
            raw_dim: dim,
            feature_dim: dim,
            classes,
            frozen: true,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn is_identity(&self) -> bool {
        self.layers.is_none()
    }

    pub fn params(&self) -> &Parameters {
        &self.params
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Replace parameter values, e.g. from a checkpoint. Allowed only before freezing.
    pub fn load_params(&mut self, source: &Parameters) -> Result<()> {
        crate::numcore::checkpoint::restore_into(&mut self.params, source)
    }

    fn embed_var(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        match &self.layers {
            None => x,
            Some(l) => {
                let h = l.hidden.forward(tape, bound, x);
                let h = tape.tanh(h);
                l.out.forward(tape, bound, h)
            }
        }
    }

    fn batch_tensor(rows: &[&[f64]], dim: usize) -> Result<Tensor> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::Structural(format!(
                    "expected {dim} raw features, got {}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Tensor::matrix(rows.len(), dim, data)
    }

    /// Mean cross-entropy of the head over `batch`, recorded on `tape`.
    pub fn embedding_loss(&self, tape: &mut Tape, bound: &Bound, batch: &[&Instance]) -> Result<Var> {
        let layers = self
            .layers
            .as_ref()
            .ok_or_else(|| Error::State("identity backbone has no head".into()))?;
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let rows: Vec<&[f64]> = batch.iter().map(|i| i.features.as_slice()).collect();
        let x = tape.constant(Self::batch_tensor(&rows, self.raw_dim)?);
        let feats = self.embed_var(tape, bound, x);
        let logits = layers.head.forward(tape, bound, feats);
        let targets: Vec<usize> = batch.iter().map(|i| i.label).collect();
        let w = vec![1.0 / batch.len() as f64; batch.len()];
        tape.weighted_cross_entropy(logits, &targets, &w)
    }

    fn head_accuracy(&self, instances: &[Instance]) -> Result<f64> {
        let Some(layers) = &self.layers else { return Ok(0.0) };
        if instances.is_empty() {
            return Ok(0.0);
        }
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params, false);
        let rows: Vec<&[f64]> = instances.iter().map(|i| i.features.as_slice()).collect();
        let x = tape.constant(Self::batch_tensor(&rows, self.raw_dim)?);
        let feats = self.embed_var(&mut tape, &bound, x);
        let logits = layers.head.forward(&mut tape, &bound, feats);
        let correct = instances
            .iter()
            .enumerate()
            .filter(|(r, inst)| argmax(tape.value(logits).row_slice(*r)) == inst.label)
            .count();
        Ok(correct as f64 / instances.len() as f64)
    }

    fn full_loss(&self, instances: &[Instance]) -> Result<f64> {
        let refs: Vec<&Instance> = instances.iter().collect();
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params, false);
        let loss = self.embedding_loss(&mut tape, &bound, &refs)?;
        Ok(tape.value(loss).item())
    }

    /// Minimize the head's mean cross-entropy over the training split, then
    /// freeze. Fails if the backbone is already frozen.
    pub fn pretrain(
        &mut self,
        split: &DatasetSplit,
        config: &BackboneConfig,
        seed: u64,
    ) -> Result<PretrainReport> {
        if self.frozen {
            return Err(Error::State("backbone is frozen; pretraining runs once".into()));
        }
        if split.train.is_empty() {
            return Err(Error::Data("empty training split".into()));
        }
        let initial_loss = self.full_loss(&split.train)?;
        let mut opt = Optimizer::new(OptimizerConfig::adam(config.lr), &self.params);
        let mut rng = rng::stream(seed, "backbone-batches");
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        let mut epoch_losses = Vec::with_capacity(config.epochs);
        for _ in 0..config.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(config.batch_size.max(1)) {
                let batch: Vec<&Instance> = chunk.iter().map(|&i| &split.train[i]).collect();
                let (_, grads) = value_and_grad(&self.params, &|tape: &mut Tape, b: &Bound| {
                    self.embedding_loss(tape, b, &batch)
                })?;
                opt.step(&mut self.params, &grads)?;
            }
            epoch_losses.push(self.full_loss(&split.train)?);
        }
        let validation_accuracy = self.head_accuracy(&split.validation)?;
        self.frozen = true;
        Ok(PretrainReport { initial_loss, epoch_losses, validation_accuracy })
    }

    pub fn embed_batch(&self, rows: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        if self.layers.is_none() || rows.is_empty() {
            return Ok(rows.iter().map(|r| r.to_vec()).collect());
        }
        let mut tape = Tape::new();
        let bound = tape.bind(&self.params, false);
        let x = tape.constant(Self::batch_tensor(rows, self.raw_dim)?);
        let out = self.embed_var(&mut tape, &bound, x);
        let v = tape.value(out);
        Ok((0..rows.len()).map(|r| v.row_slice(r).to_vec()).collect())
    }

    /// The split mapped into feature space. Requires a frozen backbone.
    pub fn embed_split(&self, split: &DatasetSplit) -> Result<DatasetSplit> {
        if !self.frozen {
            return Err(Error::State("backbone must be frozen before embedding".into()));
        }
        if split.dim() != self.raw_dim {
            return Err(Error::Structural(format!(
                "backbone expects {} raw features, split has {}",
                self.raw_dim,
                split.dim()
            )));
        }
        let all = split.all();
        let rows: Vec<&[f64]> = all.iter().map(|i| i.features.as_slice()).collect();
        let embedded = self.embed_batch(&rows)?;
        let by_id: std::collections::HashMap<usize, Vec<f64>> =
            all.iter().map(|i| i.id).zip(embedded).collect();
        split.map_features(|i| by_id[&i.id].clone())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_dataset, SyntheticConfig};
    use crate::numcore::grad_check;

    fn small_config() -> BackboneConfig {
        BackboneConfig { hidden: 8, feature_dim: 4, epochs: 50, batch_size: 32, lr: 1e-2 }
    }

    #[test]
    fn separable_two_class_reaches_full_accuracy() {
        let data = make_synthetic_dataset(&SyntheticConfig {
            seed: 1,
            classes: 2,
            dim: 4,
            per_class: 50,
            spread: 0.05,
        })
        .unwrap();
        let mut bb = FeatureBackbone::new(4, 2, &small_config(), 1).unwrap();
        let report = bb.pretrain(&data, &small_config(), 1).unwrap();
        assert_eq!(report.validation_accuracy, 1.0);
        assert!(report.epoch_losses[0] < report.initial_loss);
        assert!(bb.is_frozen());
        assert!(matches!(bb.pretrain(&data, &small_config(), 1), Err(Error::State(_))));
    }

    #[test]
    fn embedding_loss_gradients() {
        let data = make_synthetic_dataset(&SyntheticConfig {
            seed: 2,
            classes: 3,
            dim: 4,
            per_class: 10,
            spread: 0.5,
        })
        .unwrap();
        let bb = FeatureBackbone::new(4, 3, &small_config(), 5).unwrap();
        let batch: Vec<&Instance> = data.train.iter().take(6).collect();
        let err = grad_check(bb.params(), 1e-5, |t, b| bb.embedding_loss(t, b, &batch)).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn unfrozen_backbone_refuses_to_embed() {
        let data = make_synthetic_dataset(&SyntheticConfig {
            seed: 2,
            classes: 3,
            dim: 4,
            per_class: 10,
            spread: 0.5,
        })
        .unwrap();
        let bb = FeatureBackbone::new(4, 3, &small_config(), 5).unwrap();
        assert!(bb.embed_split(&data).is_err());
    }
}
