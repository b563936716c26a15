use std::collections::BTreeSet;
use std::fmt::{self, Write as _};

use crate::data::Instance;
use crate::error::{Error, Result};
use crate::experts::{sample_context_set, Population};
use crate::l2d::{decisions_for, DeferralDecision, DeferralModel, Tally};
use crate::numcore::argmax;
use crate::rng;

use super::config::ExperimentConfig;
use super::pipeline::{system_for_expert, Systems};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Group {
    Seen,
    Unseen,
    All,
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Group::Seen => "seen",
            Group::Unseen => "unseen",
            Group::All => "all",
        })
    }
}

/// Counts for one (variant, expert group) cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CellCounts {
    pub tally: Tally,
    /// Scored instances the stand-alone classifier gets right.
    pub classifier_correct: usize,
    /// Scored instances the expert gets right.
    pub expert_correct: usize,
}

impl CellCounts {
    pub fn n(&self) -> usize {
        self.tally.total()
    }

    fn ratio(&self, a: usize) -> f64 {
        if self.n() == 0 {
            0.0
        } else {
            a as f64 / self.n() as f64
        }
    }

    pub fn classifier_alone(&self) -> f64 {
        self.ratio(self.classifier_correct)
    }

    pub fn expert_alone(&self) -> f64 {
        self.ratio(self.expert_correct)
    }

    fn merge(&mut self, other: &CellCounts) {
        self.tally.merge(&other.tally);
        self.classifier_correct += other.classifier_correct;
        self.expert_correct += other.expert_correct;
    }

    /// The accounting identities every reported cell satisfies.
    pub fn verify(&self) -> Result<()> {
        let t = &self.tally;
        if t.correct() != t.classified_correct + t.deferred_correct
            || t.total() != t.classified + t.deferred
            || t.classified_correct > t.classified
            || t.deferred_correct > t.deferred
        {
            return Err(Error::Structural(format!("inconsistent cell counts {t:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalCell {
    pub variant: String,
    pub group: Group,
    pub counts: CellCounts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub cells: Vec<EvalCell>,
    /// `instance_id,expert_id,decision,predicted_class` rows per variant.
    pub decisions: Vec<(String, String)>,
}

/// Score every system against every expert. Each expert's embedding comes
/// from `B_eval` demonstrations drawn from the test split; those instances
/// are not scored.
pub fn evaluate(
    cfg: &ExperimentConfig,
    test: &[&Instance],
    pop: &Population,
    systems: &Systems,
    classifier: &DeferralModel,
    seed: u64,
) -> Result<Evaluation> {
    let b_eval = cfg.l2d.eval_context;
    if test.len() <= b_eval {
        return Err(Error::Config(format!(
            "{} test instances cannot supply {b_eval} demonstrations and leave any to score",
            test.len()
        )));
    }
    let rows: Vec<&[f64]> = test.iter().map(|i| i.features.as_slice()).collect();
    let classifier_hits: Vec<bool> = classifier
        .logits(&rows, None)?
        .iter()
        .zip(test)
        .map(|((g, _), i)| argmax(g) == i.label)
        .collect();
    let variants: Vec<_> = systems.models.keys().copied().collect();
    let mut per_group: Vec<Vec<CellCounts>> = vec![vec![CellCounts::default(); 3]; variants.len()];
    let mut decisions: Vec<String> =
        vec![String::from("instance_id,expert_id,decision,predicted_class\n"); variants.len()];
    for profile in pop.experts() {
        let ctx = sample_context_set(profile, test, b_eval, rng::derive_n(seed, "eval-context", profile.id as u64))?;
        let demo: BTreeSet<usize> = ctx.instance_ids().into_iter().collect();
        let scored: Vec<(usize, &Instance)> =
            test.iter().enumerate().filter(|(_, i)| !demo.contains(&i.id)).map(|(p, i)| (p, *i)).collect();
        let scored_refs: Vec<&Instance> = scored.iter().map(|(_, i)| *i).collect();
        let expert_labels: Vec<usize> = scored_refs.iter().map(|i| profile.label(i)).collect();
        let group = if pop.seen().contains(&profile.id) { 0 } else { 1 };
        for (v_idx, variant) in variants.iter().enumerate() {
            let model = system_for_expert(cfg, *variant, &systems.models[variant], &ctx)?;
            let ds = decisions_for(&model, Some(&ctx), &scored_refs, profile.id)?;
            let mut counts = CellCounts::default();
            for ((d, (pos, inst)), h) in ds.iter().zip(&scored).zip(&expert_labels) {
                counts.tally.record(*d, inst.label, *h);
                counts.classifier_correct += usize::from(classifier_hits[*pos]);
                counts.expert_correct += usize::from(*h == inst.label);
                let (kind, class) = match d {
                    DeferralDecision::Classify(c) => ("classify", *c),
                    DeferralDecision::Defer(_) => ("defer", *h),
                };
                writeln!(decisions[v_idx], "{},{},{kind},{class}", inst.id, profile.id).unwrap();
            }
            per_group[v_idx][group].merge(&counts);
            per_group[v_idx][2].merge(&counts);
        }
    }
    let mut cells = Vec::new();
    for (v_idx, variant) in variants.iter().enumerate() {
        for (g_idx, group) in [Group::Seen, Group::Unseen, Group::All].into_iter().enumerate() {
            let counts = per_group[v_idx][g_idx];
            counts.verify()?;
            cells.push(EvalCell { variant: variant.name().to_string(), group, counts });
        }
    }
    let decisions = variants.iter().map(|v| v.name().to_string()).zip(decisions).collect();
    Ok(Evaluation { cells, decisions })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LabelOrigin {
    /// Deferral training used synthesized labels.
    Pseudo,
    /// Deferral training used the simulator's labels on all of train.
    Oracle,
}

impl fmt::Display for LabelOrigin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelOrigin::Pseudo => "pseudo",
            LabelOrigin::Oracle => "oracle",
        })
    }
}

/// One row of the metric tables.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub seed: u64,
    /// Per-class budget; `None` for the oracle bound.
    pub k: Option<usize>,
    pub labels: Option<usize>,
    pub strength: usize,
    pub origin: LabelOrigin,
    pub cell: EvalCell,
}

pub const METRICS_HEADER: &str = "seed,k,L,H,variant,labels,group,n,classified,classified_correct,deferred,deferred_correct,system_accuracy,coverage,expert_accuracy_deferred,classifier_alone,expert_alone";

fn opt(v: Option<usize>) -> String {
    v.map_or_else(|| "full".to_string(), |v| v.to_string())
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        let c = &r.cell.counts;
        let t = &c.tally;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.seed,
            opt(r.k),
            opt(r.labels),
            r.strength,
            r.cell.variant,
            r.origin,
            r.cell.group,
            c.n(),
            t.classified,
            t.classified_correct,
            t.deferred,
            t.deferred_correct,
            t.system_accuracy(),
            t.coverage(),
            t.expert_accuracy_on_deferred(),
            c.classifier_alone(),
            c.expert_alone(),
        )
        .unwrap();
    }
    out
}

/// Median; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
