//! The stages of one replicate, each callable on its own so the CLI can run
//! them individually. Every stage is a pure function of the config and seed.

use std::collections::BTreeMap;

use crate::behavior::{
    generate_pseudo_labels, train_behavior, BehaviorModel, EncoderVariant, PseudoLabelTable, SslData,
    SslReport,
};
use crate::data::{
    ingest_feature_file, make_synthetic_dataset, Augmenter, DatasetSplit, FeatureBackbone, Instance,
    PretrainReport, SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::experts::{sample_context_set, ContextSet, LabelSource, Population, PopulationConfig};
use crate::l2d::{finetune, train_classifier, train_l2d, DeferralModel, L2dReport, L2dVariant};
use crate::rng;

use super::config::ExperimentConfig;

/// Dataset, frozen feature map and augmenter for one replicate.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub raw: DatasetSplit,
    pub backbone: FeatureBackbone,
    pub features: DatasetSplit,
    pub augmenter: Augmenter,
    pub pretrain: Option<PretrainReport>,
}

impl Prepared {
    pub fn classes(&self) -> usize {
        self.features.classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.dim()
    }

    /// Copy with `per_class` annotated instances per class, identical in the
    /// raw and feature views.
    pub fn annotated(&self, per_class: usize, seed: u64) -> Result<Prepared> {
        let mut out = self.clone();
        out.raw.annotate_per_class(per_class, rng::derive(seed, "annotate"))?;
        out.features.set_annotated(out.raw.annotated_ids().clone())?;
        Ok(out)
    }

    /// Copy with every training instance annotated.
    pub fn fully_annotated(&self) -> Result<Prepared> {
        let mut out = self.clone();
        let all = out.raw.train.iter().map(|i| i.id).collect();
        out.raw.set_annotated(all)?;
        out.features.set_annotated(out.raw.annotated_ids().clone())?;
        Ok(out)
    }
}

fn replicate_seed(base: u64, seed: u64) -> u64 {
    rng::hash2(base, seed)
}

/// Load or generate the data and pretrain (then freeze) the feature map.
pub fn prepare(cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let d = &cfg.dataset;
    let (raw, mut backbone) = match &d.feature_file {
        Some(path) => {
            let split = ingest_feature_file(path)?;
            let backbone = FeatureBackbone::identity(split.dim(), split.classes());
            (split, backbone)
        }
        None => {
            let split = make_synthetic_dataset(&SyntheticConfig {
                seed: replicate_seed(d.seed, seed),
                classes: d.classes,
                dim: d.dim,
                per_class: d.per_class,
                spread: d.spread,
            })?;
            let backbone = FeatureBackbone::new(d.dim, d.classes, &cfg.backbone, rng::derive(seed, "backbone"))?;
            (split, backbone)
        }
    };
    if raw.classes() != d.classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the config says {}",
            raw.classes(),
            d.classes
        )));
    }
    let pretrain = if backbone.is_frozen() {
        None
    } else {
        Some(backbone.pretrain(&raw, &cfg.backbone, rng::derive(seed, "pretrain"))?)
    };
    let features = backbone.embed_split(&raw)?;
    let augmenter = Augmenter::from_config(&cfg.augment, raw.feature_scale())?;
    Ok(Prepared { raw, backbone, features, augmenter, pretrain })
}

pub fn population(cfg: &ExperimentConfig, strength: usize, seed: u64) -> Result<Population> {
    let pc = PopulationConfig {
        strength,
        seed: replicate_seed(cfg.population.seed, seed),
        ..cfg.population
    };
    Population::new(&pc, cfg.dataset.classes)
}

/// Train one behavior model on the seen experts.
pub fn behavior_stage(
    cfg: &ExperimentConfig,
    data: &Prepared,
    pop: &Population,
    variant: EncoderVariant,
    seed: u64,
) -> Result<(BehaviorModel, SslReport)> {
    let mut model = BehaviorModel::new(
        variant,
        cfg.behavior.arch,
        data.feature_dim(),
        data.classes(),
        rng::derive(seed, variant.name()),
    )?;
    let ssl = SslData::new(&data.backbone, &data.raw, &data.features, data.augmenter.clone())?;
    let seen = pop.seen_profiles();
    let report = train_behavior(&mut model, &ssl, &seen, &cfg.behavior.ssl, rng::derive(seed, "ssl"))?;
    Ok((model, report))
}

/// One fixed context set per seen expert, drawn from the annotated pool.
pub fn generation_contexts(
    cfg: &ExperimentConfig,
    data: &Prepared,
    pop: &Population,
    seed: u64,
) -> Result<BTreeMap<usize, ContextSet>> {
    let pool = data.features.annotated();
    let size = cfg.behavior_context().min(pool.len());
    pop.seen_profiles()
        .into_iter()
        .map(|p| {
            let ctx = sample_context_set(p, &pool, size, rng::derive_n(seed, "generation", p.id as u64))?;
            Ok((p.id, ctx))
        })
        .collect()
}

/// Synthesized labels of the seen experts on every instance.
pub fn pseudo_label_stage(
    cfg: &ExperimentConfig,
    data: &Prepared,
    pop: &Population,
    model: &BehaviorModel,
    seed: u64,
) -> Result<PseudoLabelTable> {
    let contexts = generation_contexts(cfg, data, pop, seed)?;
    generate_pseudo_labels(model, pop.seen(), &data.features.all(), &contexts, rng::derive(seed, "pseudo"))
}

/// Trained deferral systems keyed by variant. Finetune holds the shared
/// context-free base; per-expert tuning happens at evaluation.
#[derive(Debug, Clone)]
pub struct Systems {
    pub models: BTreeMap<L2dVariant, DeferralModel>,
    pub reports: BTreeMap<L2dVariant, L2dReport>,
}

/// Train every configured variant. `encoders` and `sources` are keyed by
/// encoder variant; context-free variants use the attention entry.
pub fn l2d_stage(
    cfg: &ExperimentConfig,
    data: &Prepared,
    pop: &Population,
    encoders: &BTreeMap<EncoderVariant, BehaviorModel>,
    sources: &BTreeMap<EncoderVariant, &dyn LabelSource>,
    seed: u64,
) -> Result<Systems> {
    let train: Vec<&Instance> = data.features.train.iter().collect();
    let validation: Vec<&Instance> = data.features.validation.iter().collect();
    let l2d_seed = rng::derive(seed, "l2d");
    let mut systems = Systems { models: BTreeMap::new(), reports: BTreeMap::new() };
    let mut variants: Vec<L2dVariant> = cfg.l2d.variants.clone();
    if variants.contains(&L2dVariant::Finetune) && !variants.contains(&L2dVariant::Single) {
        variants.push(L2dVariant::Single);
    }
    variants.sort();
    variants.dedup();
    for variant in variants {
        if variant == L2dVariant::Finetune {
            continue;
        }
        let key = variant.encoder().unwrap_or(EncoderVariant::NpAttention);
        let source = *sources
            .get(&key)
            .ok_or_else(|| Error::Config(format!("no label source for {}", variant.name())))?;
        let encoder = match variant.encoder() {
            Some(e) => Some(
                encoders
                    .get(&e)
                    .ok_or_else(|| Error::Config(format!("no {} encoder", e.name())))?
                    .clone(),
            ),
            None => None,
        };
        let mut model = DeferralModel::new(
            variant,
            cfg.l2d.train.heads,
            data.feature_dim(),
            data.classes(),
            encoder,
            l2d_seed,
        )?;
        let report = train_l2d(&mut model, &train, &validation, source, pop.seen(), &cfg.l2d.train, l2d_seed)?;
        systems.models.insert(variant, model);
        systems.reports.insert(variant, report);
    }
    if cfg.l2d.variants.contains(&L2dVariant::Finetune) {
        let base = systems.models[&L2dVariant::Single].clone();
        systems.models.insert(L2dVariant::Finetune, base);
        if !cfg.l2d.variants.contains(&L2dVariant::Single) {
            systems.models.remove(&L2dVariant::Single);
        }
    }
    Ok(systems)
}

/// The deferral trunk trained with plain cross-entropy.
pub fn classifier_stage(cfg: &ExperimentConfig, data: &Prepared, seed: u64) -> Result<DeferralModel> {
    let train: Vec<&Instance> = data.features.train.iter().collect();
    let l2d_seed = rng::derive(seed, "l2d");
    let mut model =
        DeferralModel::new(L2dVariant::Single, cfg.l2d.train.heads, data.feature_dim(), data.classes(), None, l2d_seed)?;
    train_classifier(&mut model, &train, &cfg.l2d.train, l2d_seed)?;
    Ok(model)
}

/// Model actually used for one expert: Finetune tunes its head on the
/// expert's demonstrations, the others are shared.
pub fn system_for_expert(
    cfg: &ExperimentConfig,
    variant: L2dVariant,
    model: &DeferralModel,
    context: &ContextSet,
) -> Result<DeferralModel> {
    if variant == L2dVariant::Finetune {
        let steps = cfg.l2d.train.finetune_steps;
        Ok(finetune(model, context, steps, cfg.l2d.train.finetune_lr)?.0)
    } else {
        Ok(model.clone())
    }
}

/// Which expert ids each training-phase structure touched.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingAudit {
    pub behavior: Vec<usize>,
    pub generation: Vec<usize>,
    pub pseudo_labels: Vec<usize>,
    pub l2d: Vec<usize>,
}

impl TrainingAudit {
    /// Fails if any unseen expert appears in a training-phase structure.
    pub fn check(&self, pop: &Population) -> Result<()> {
        for (what, ids) in [
            ("behavior training", &self.behavior),
            ("generation contexts", &self.generation),
            ("pseudo-label table", &self.pseudo_labels),
            ("deferral training", &self.l2d),
        ] {
            if let Some(id) = ids.iter().find(|id| pop.unseen().contains(id)) {
                return Err(Error::State(format!("unseen expert {id} appears in {what}")));
            }
        }
        Ok(())
    }
}

/// Everything one budget cell produces before evaluation.
pub struct TrainedCell {
    pub encoders: BTreeMap<EncoderVariant, BehaviorModel>,
    pub behavior_reports: BTreeMap<EncoderVariant, SslReport>,
    pub tables: BTreeMap<EncoderVariant, PseudoLabelTable>,
    pub systems: Systems,
    pub audit: TrainingAudit,
}

/// Behavior training, pseudo-labeling and deferral training for one budget
/// (`per_class = None` means every training instance is annotated and the
/// deferral models learn from the simulator's labels).
pub fn train_cell(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    pop: &Population,
    per_class: Option<usize>,
    seed: u64,
) -> Result<TrainedCell> {
    let data = match per_class {
        Some(k) => prepared.annotated(k, seed),
        None => prepared.fully_annotated(),
    }
    .map_err(|e| e.in_stage("train-behavior"))?;
    let mut encoders = BTreeMap::new();
    let mut behavior_reports = BTreeMap::new();
    for variant in cfg.encoders() {
        let (model, report) =
            behavior_stage(cfg, &data, pop, variant, seed).map_err(|e| e.in_stage("train-behavior"))?;
        encoders.insert(variant, model);
        behavior_reports.insert(variant, report);
    }
    let mut tables = BTreeMap::new();
    let mut audit = TrainingAudit { behavior: pop.seen().to_vec(), l2d: pop.seen().to_vec(), ..Default::default() };
    if per_class.is_some() {
        for (variant, model) in &encoders {
            let table = pseudo_label_stage(cfg, &data, pop, model, seed).map_err(|e| e.in_stage("pseudo-label"))?;
            audit.pseudo_labels.extend(table.expert_ids());
            tables.insert(*variant, table);
        }
        audit.generation = generation_contexts(cfg, &data, pop, seed)?.keys().copied().collect();
    }
    let sources: BTreeMap<EncoderVariant, &dyn LabelSource> = if per_class.is_some() {
        tables.iter().map(|(k, t)| (*k, t as &dyn LabelSource)).collect()
    } else {
        encoders.keys().map(|k| (*k, pop as &dyn LabelSource)).collect()
    };
    let systems = l2d_stage(cfg, &data, pop, &encoders, &sources, seed).map_err(|e| e.in_stage("train-l2d"))?;
    audit.check(pop)?;
    Ok(TrainedCell { encoders, behavior_reports, tables, systems, audit })
}
