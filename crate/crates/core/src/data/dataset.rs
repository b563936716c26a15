use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: usize,
    pub features: Vec<f64>,
    pub label: usize,
}

/// Train/validation/test split plus the annotated/unannotated partition of
/// the training ids.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    classes: usize,
    dim: usize,
    pub train: Vec<Instance>,
    pub validation: Vec<Instance>,
    pub test: Vec<Instance>,
    annotated: BTreeSet<usize>,
    unannotated: BTreeSet<usize>,
}

impl DatasetSplit {
    /// Stratified 80/10/10 split. Within each class the first 80% of its
    /// instances (in input order) go to train, the next 10% to validation and
    /// the rest to test. Every training id starts out unannotated.
    pub fn stratified(instances: Vec<Instance>, classes: usize) -> Result<Self> {
        let dim = instances.first().map_or(0, |i| i.features.len());
        let mut ids = BTreeSet::new();
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (pos, inst) in instances.iter().enumerate() {
            if inst.label >= classes {
                return Err(Error::Data(format!(
                    "instance {} has label {} but there are {classes} classes",
                    inst.id, inst.label
                )));
            }
            if inst.features.len() != dim {
                return Err(Error::Structural(format!(
                    "instance {} has {} features, expected {dim}",
                    inst.id,
                    inst.features.len()
                )));
            }
            if !ids.insert(inst.id) {
                return Err(Error::Data(format!("duplicate instance id {}", inst.id)));
            }
            by_class.entry(inst.label).or_default().push(pos);
        }
        let mut which = vec![0u8; instances.len()];
        for positions in by_class.values() {
            let n = positions.len();
            let n_train = n * 8 / 10;
            let n_val = n / 10;
            for (rank, &pos) in positions.iter().enumerate() {
                which[pos] = if rank < n_train {
                    0
                } else if rank < n_train + n_val {
                    1
                } else {
                    2
                };
            }
        }
        let (mut train, mut validation, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for (inst, w) in instances.into_iter().zip(which) {
            match w {
                0 => train.push(inst),
                1 => validation.push(inst),
                _ => test.push(inst),
            }
        }
        let unannotated = train.iter().map(|i| i.id).collect();
        Ok(Self { classes, dim, train, validation, test, annotated: BTreeSet::new(), unannotated })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn annotated_ids(&self) -> &BTreeSet<usize> {
        &self.annotated
    }

    pub fn unannotated_ids(&self) -> &BTreeSet<usize> {
        &self.unannotated
    }

    /// Replace the annotated subset; the rest of train becomes unannotated.
    pub fn set_annotated(&mut self, annotated: BTreeSet<usize>) -> Result<()> {
        let train_ids: BTreeSet<usize> = self.train.iter().map(|i| i.id).collect();
        if let Some(stray) = annotated.iter().find(|id| !train_ids.contains(id)) {
            return Err(Error::Data(format!("annotated id {stray} is not a training id")));
        }
        self.unannotated = train_ids.difference(&annotated).copied().collect();
        self.annotated = annotated;
        Ok(())
    }

    /// Annotate `per_class` randomly chosen training instances of each class,
    /// `L = classes × per_class` in total.
    pub fn annotate_per_class(&mut self, per_class: usize, seed: u64) -> Result<()> {
        let mut rng = rng::stream(seed, "annotate");
        let mut chosen = BTreeSet::new();
        for class in 0..self.classes {
            let mut ids: Vec<usize> =
                self.train.iter().filter(|i| i.label == class).map(|i| i.id).collect();
            if ids.len() < per_class {
                return Err(Error::Config(format!(
                    "class {class} has {} training instances, budget needs {per_class}",
                    ids.len()
                )));
            }
            ids.shuffle(&mut rng);
            chosen.extend(ids.into_iter().take(per_class));
        }
        self.set_annotated(chosen)
    }

    pub fn annotated(&self) -> Vec<&Instance> {
        self.train.iter().filter(|i| self.annotated.contains(&i.id)).collect()
    }

    pub fn unannotated(&self) -> Vec<&Instance> {
        self.train.iter().filter(|i| self.unannotated.contains(&i.id)).collect()
    }

    /// All instances ordered by id.
    pub fn all(&self) -> Vec<&Instance> {
        let mut all: Vec<&Instance> =
            self.train.iter().chain(&self.validation).chain(&self.test).collect();
        all.sort_by_key(|i| i.id);
        all
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Root-mean-square of the training feature coordinates.
    pub fn feature_scale(&self) -> f64 {
        let (sum, count) = self
            .train
            .iter()
            .flat_map(|i| i.features.iter())
            .fold((0.0, 0usize), |(s, c), v| (s + v * v, c + 1));
        if count == 0 {
            return 1.0;
        }
        (sum / count as f64).sqrt()
    }

    /// Same split and partition with every feature vector replaced by `f(instance)`.
    pub fn map_features(&self, f: impl Fn(&Instance) -> Vec<f64>) -> Result<Self> {
        let map = |v: &[Instance]| -> Vec<Instance> {
            v.iter()
                .map(|i| Instance { id: i.id, features: f(i), label: i.label })
                .collect()
        };
        let train = map(&self.train);
        let dim = train.first().map_or(0, |i| i.features.len());
        let out = Self {
            classes: self.classes,
            dim,
            train,
            validation: map(&self.validation),
            test: map(&self.test),
            annotated: self.annotated.clone(),
            unannotated: self.unannotated.clone(),
        };
        if out.all().iter().any(|i| i.features.len() != dim) {
            return Err(Error::Structural("feature map changed dimension per instance".into()));
        }
        Ok(out)
    }

    /// Check the partition invariants.
    pub fn validate(&self) -> Result<()> {
        let train_ids: BTreeSet<usize> = self.train.iter().map(|i| i.id).collect();
        if !self.annotated.is_disjoint(&self.unannotated) {
            return Err(Error::Data("annotated and unannotated ids overlap".into()));
        }
        let union: BTreeSet<usize> = self.annotated.union(&self.unannotated).copied().collect();
        if union != train_ids {
            return Err(Error::Data("annotated ∪ unannotated differs from train ids".into()));
        }
        Ok(())
    }
}
