//! Synthesized expert annotations: predicted correctness per (expert,
//! instance), turned into a categorical label.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::model::BehaviorModel;
use crate::data::Instance;
use crate::error::{Error, Result};
use crate::experts::{ContextSet, LabelSource};
use crate::rng;

const QUERY_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PseudoLabel {
    pub correct: bool,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PseudoLabelTable {
    entries: BTreeMap<(usize, usize), PseudoLabel>,
}

/// Seeded uniform draw from the classes other than `y`.
pub fn wrong_label(y: usize, classes: usize, seed: u64, expert_id: usize, instance_id: usize) -> usize {
    let draw = rng::hash2(rng::hash2(seed, expert_id as u64), instance_id as u64);
    let r = (draw % (classes as u64 - 1)) as usize;
    if r >= y {
        r + 1
    } else {
        r
    }
}

/// `y` when predicted correct, otherwise a seeded wrong class.
pub fn categorical_label(
    correct: bool,
    y: usize,
    classes: usize,
    seed: u64,
    expert_id: usize,
    instance_id: usize,
) -> usize {
    if correct {
        y
    } else {
        wrong_label(y, classes, seed, expert_id, instance_id)
    }
}

impl PseudoLabelTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert an entry, enforcing that the label agrees with the correctness bit.
    pub fn insert(&mut self, expert_id: usize, instance: &Instance, entry: PseudoLabel) -> Result<()> {
        if entry.correct != (entry.label == instance.label) {
            return Err(Error::Data(format!(
                "pseudo-label {} for instance {} (truth {}) contradicts correctness bit {}",
                entry.label, instance.id, instance.label, entry.correct
            )));
        }
        self.entries.insert((expert_id, instance.id), entry);
        Ok(())
    }

    pub fn get(&self, expert_id: usize, instance_id: usize) -> Option<PseudoLabel> {
        self.entries.get(&(expert_id, instance_id)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((usize, usize), PseudoLabel)> + '_ {
        self.entries.iter().map(|(k, v)| (*k, *v))
    }

    pub fn expert_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.entries.keys().map(|k| k.0).collect();
        ids.dedup();
        ids
    }

    /// Table holding exactly what `source` reports; a perfect behavior model
    /// would produce this.
    pub fn from_source(
        source: &dyn LabelSource,
        expert_ids: &[usize],
        instances: &[&Instance],
    ) -> Result<Self> {
        let mut table = Self::new();
        for &e in expert_ids {
            for inst in instances {
                let label = source.label(e, inst)?;
                table.insert(e, inst, PseudoLabel { correct: label == inst.label, label })?;
            }
        }
        Ok(table)
    }

    /// Fraction of entries whose correctness bit matches `source`.
    pub fn agreement(&self, source: &dyn LabelSource, instances: &[&Instance]) -> Result<f64> {
        let by_id: BTreeMap<usize, &Instance> = instances.iter().map(|i| (i.id, *i)).collect();
        let mut hits = 0usize;
        let mut total = 0usize;
        for ((e, id), entry) in self.iter() {
            if let Some(inst) = by_id.get(&id) {
                let truth = source.label(e, inst)? == inst.label;
                hits += usize::from(truth == entry.correct);
                total += 1;
            }
        }
        Ok(if total == 0 { 0.0 } else { hits as f64 / total as f64 })
    }

    /// `expert_id,instance_id,h_bin,h_cat` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("expert_id,instance_id,h_bin,h_cat\n");
        for ((e, i), entry) in self.iter() {
            writeln!(out, "{e},{i},{},{}", u8::from(entry.correct), entry.label).unwrap();
        }
        out
    }

    /// Parse [`Self::to_csv`] output. Consistency with ground truth is not
    /// checked because the instances are not at hand.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let row = n + 1;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::Parse { row, message: format!("expected 4 fields, got {}", fields.len()) });
            }
            let num = |s: &str| {
                s.trim().parse::<usize>().map_err(|e| Error::Parse { row, message: format!("{s:?}: {e}") })
            };
            let bin = num(fields[2])?;
            if bin > 1 {
                return Err(Error::Parse { row, message: format!("h_bin must be 0 or 1, got {bin}") });
            }
            entries.insert(
                (num(fields[0])?, num(fields[1])?),
                PseudoLabel { correct: bin == 1, label: num(fields[3])? },
            );
        }
        Ok(Self { entries })
    }
}

impl LabelSource for PseudoLabelTable {
    fn label(&self, expert_id: usize, instance: &Instance) -> Result<usize> {
        self.get(expert_id, instance.id).map(|e| e.label).ok_or_else(|| {
            Error::Data(format!("no label for expert {expert_id} on instance {}", instance.id))
        })
    }
}

/// Label every instance for every expert in `contexts` (one fixed context
/// set per expert). The correctness bit is the argmax of the head; wrong
/// labels are seeded uniform draws.
pub fn generate_pseudo_labels(
    model: &BehaviorModel,
    expert_ids: &[usize],
    instances: &[&Instance],
    contexts: &BTreeMap<usize, ContextSet>,
    seed: u64,
) -> Result<PseudoLabelTable> {
    let classes = model.classes();
    let label_seed = rng::derive(seed, "pseudo-label");
    let mut table = PseudoLabelTable::new();
    for &e in expert_ids {
        let context = contexts
            .get(&e)
            .ok_or_else(|| Error::Config(format!("no context set for expert {e}")))?;
        for chunk in instances.chunks(QUERY_CHUNK) {
            let rows: Vec<&[f64]> = chunk.iter().map(|i| i.features.as_slice()).collect();
            let probs = model.predict_correctness(context, &rows)?;
            for (inst, p) in chunk.iter().zip(probs) {
                // argmax over (incorrect, correct); ties go to index 0.
                let correct = p > 0.5;
                let label = categorical_label(correct, inst.label, classes, label_seed, e, inst.id);
                table.insert(e, inst, PseudoLabel { correct, label })?;
            }
        }
    }
    Ok(table)
}
