//! Simulated expert population: oracle-set experts whose strength `H` is the
//! number of classes they always label correctly. Outside its oracle set an
//! expert answers with a wrong class chosen uniformly, deterministically per
//! (expert, instance) so repeated queries agree.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::data::Instance;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertProfile {
    pub id: usize,
    pub oracle_set: BTreeSet<usize>,
    pub seed: u64,
    pub classes: usize,
}

/// How the population is divided into experts used for training ("seen")
/// and experts met only at test time ("unseen").
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeenSplit {
    /// Even ids are seen, odd ids unseen.
    Interleaved,
    /// The first half of the ids is seen.
    Leading,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationConfig {
    pub size: usize,
    pub strength: usize,
    pub stride: usize,
    pub seed: u64,
    pub split: SeenSplit,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self { size: 10, strength: 8, stride: 1, seed: 11, split: SeenSplit::Interleaved }
    }
}

/// Expert `m` owns classes `(m·stride + j) mod K` for `j < H`.
pub fn build_population(
    size: usize,
    classes: usize,
    strength: usize,
    stride: usize,
    seed: u64,
) -> Result<Vec<ExpertProfile>> {
    if size == 0 {
        return Err(Error::Config("population needs at least one expert".into()));
    }
    if strength == 0 {
        return Err(Error::Config("oracle set must be nonempty (H ≥ 1)".into()));
    }
    if strength > classes {
        return Err(Error::Config(format!("strength H={strength} exceeds class count {classes}")));
    }
    Ok((0..size)
        .map(|m| ExpertProfile {
            id: m,
            oracle_set: (0..strength).map(|j| (m * stride + j) % classes).collect(),
            seed: rng::derive_n(seed, "expert", m as u64),
            classes,
        })
        .collect())
}

impl ExpertProfile {
    pub fn strength(&self) -> usize {
        self.oracle_set.len()
    }

    /// The expert's label for `instance`.
    pub fn label(&self, instance: &Instance) -> usize {
        let y = instance.label;
        if self.oracle_set.contains(&y) || self.classes < 2 {
            return y;
        }
        let draw = (rng::hash2(self.seed, instance.id as u64) % (self.classes as u64 - 1)) as usize;
        if draw >= y {
            draw + 1
        } else {
            draw
        }
    }
}

pub fn expert_label(profile: &ExpertProfile, instance: &Instance) -> usize {
    profile.label(instance)
}

/// 1 iff the expert's label matches the ground truth.
pub fn binary_target(y: usize, h: usize) -> usize {
    usize::from(y == h)
}

/// Anything that can report an expert's label for an instance: the
/// simulator itself or a table of synthesized labels.
pub trait LabelSource {
    fn label(&self, expert_id: usize, instance: &Instance) -> Result<usize>;
}

/// The population with its seen/unseen division.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    experts: Vec<ExpertProfile>,
    seen: Vec<usize>,
    unseen: Vec<usize>,
}

impl Population {
    pub fn new(config: &PopulationConfig, classes: usize) -> Result<Self> {
        let experts =
            build_population(config.size, classes, config.strength, config.stride, config.seed)?;
        let (seen, unseen) = match config.split {
            SeenSplit::Interleaved => (0..config.size).partition(|m| m % 2 == 0),
            SeenSplit::Leading => (0..config.size).partition(|&m| m < config.size.div_ceil(2)),
        };
        Ok(Self { experts, seen, unseen })
    }

    pub fn from_profiles(experts: Vec<ExpertProfile>, seen: Vec<usize>) -> Result<Self> {
        if let Some(bad) = seen.iter().find(|&&id| id >= experts.len()) {
            return Err(Error::Config(format!("seen expert {bad} not in population")));
        }
        let unseen = (0..experts.len()).filter(|id| !seen.contains(id)).collect();
        Ok(Self { experts, seen, unseen })
    }

    pub fn experts(&self) -> &[ExpertProfile] {
        &self.experts
    }

    pub fn expert(&self, id: usize) -> Result<&ExpertProfile> {
        self.experts.get(id).ok_or(Error::Index { index: id, len: self.experts.len() })
    }

    pub fn seen(&self) -> &[usize] {
        &self.seen
    }

    pub fn unseen(&self) -> &[usize] {
        &self.unseen
    }

    pub fn seen_profiles(&self) -> Vec<&ExpertProfile> {
        self.seen.iter().map(|&id| &self.experts[id]).collect()
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    /// Fraction of `instances` the expert labels correctly.
    pub fn accuracy(&self, expert_id: usize, instances: &[&Instance]) -> Result<f64> {
        let e = self.expert(expert_id)?;
        if instances.is_empty() {
            return Ok(0.0);
        }
        let correct = instances.iter().filter(|i| e.label(i) == i.label).count();
        Ok(correct as f64 / instances.len() as f64)
    }
}

impl LabelSource for Population {
    fn label(&self, expert_id: usize, instance: &Instance) -> Result<usize> {
        Ok(self.expert(expert_id)?.label(instance))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub instance_id: usize,
    pub features: Vec<f64>,
    pub label: usize,
    pub expert_label: usize,
}

/// `B` demonstrations of one expert.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextSet {
    pub expert_id: usize,
    pub triplets: Vec<Triplet>,
}

impl ContextSet {
    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn instance_ids(&self) -> Vec<usize> {
        self.triplets.iter().map(|t| t.instance_id).collect()
    }
}

/// Sample `size` distinct instances of `pool` and label them through `source`.
pub fn sample_context(
    expert_id: usize,
    pool: &[&Instance],
    size: usize,
    seed: u64,
    source: &dyn LabelSource,
) -> Result<ContextSet> {
    if pool.len() < size {
        return Err(Error::Sampling { requested: size, available: pool.len() });
    }
    let mut rng = rng::stream(seed, "context");
    let picks = index::sample(&mut rng, pool.len(), size);
    let triplets = picks
        .into_iter()
        .map(|i| {
            let inst = pool[i];
            Ok(Triplet {
                instance_id: inst.id,
                features: inst.features.clone(),
                label: inst.label,
                expert_label: source.label(expert_id, inst)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ContextSet { expert_id, triplets })
}

struct Single<'a>(&'a ExpertProfile);

impl LabelSource for Single<'_> {
    fn label(&self, _: usize, instance: &Instance) -> Result<usize> {
        Ok(self.0.label(instance))
    }
}

pub fn sample_context_set(
    profile: &ExpertProfile,
    pool: &[&Instance],
    size: usize,
    seed: u64,
) -> Result<ContextSet> {
    sample_context(profile.id, pool, size, seed, &Single(profile))
}

/// `expert_id,instance_id,h` rows for every expert and instance.
pub fn annotation_rows(experts: &[ExpertProfile], instances: &[&Instance]) -> String {
    let mut out = String::from("expert_id,instance_id,h\n");
    for e in experts {
        for inst in instances {
            writeln!(out, "{},{},{}", e.id, inst.id, e.label(inst)).unwrap();
        }
    }
    out
}
