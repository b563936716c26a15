use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::behavior::{ArchitectureConfig, EncoderVariant, SslConfig};
use crate::data::{AugmentConfig, BackboneConfig, DEFAULT_SPREAD};
use crate::error::{Error, Result};
use crate::experts::PopulationConfig;
use crate::l2d::{L2dConfig, L2dVariant};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub classes: usize,
    /// Raw input dimension of the synthetic task.
    pub dim: usize,
    pub per_class: usize,
    pub spread: f64,
    /// Precomputed features to use instead of the synthetic task. The
    /// feature map is then the identity.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_file: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { seed: 7, classes: 10, dim: 16, per_class: 500, spread: DEFAULT_SPREAD, feature_file: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    /// Annotations per class; the budget is `L = classes × k`.
    pub k_list: Vec<usize>,
    /// Per-class budget used by the strength sweep.
    pub strength_k: usize,
    pub h_list: Vec<usize>,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self { k_list: vec![2, 4, 10, 50], strength_k: 10, h_list: vec![2, 5, 8] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorSection {
    pub arch: ArchitectureConfig,
    pub ssl: SslConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct L2dSection {
    pub variants: Vec<L2dVariant>,
    /// Demonstrations per expert at evaluation time.
    pub eval_context: usize,
    pub train: L2dConfig,
}

impl Default for L2dSection {
    fn default() -> Self {
        Self { variants: L2dVariant::ALL.to_vec(), eval_context: 50, train: L2dConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub population: PopulationConfig,
    #[serde(default)]
    pub budget: BudgetConfig,
    #[serde(default)]
    pub behavior: BehaviorSection,
    #[serde(default)]
    pub l2d: L2dSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![1, 2, 3, 4, 5],
            dataset: DatasetConfig::default(),
            backbone: BackboneConfig::default(),
            augment: AugmentConfig::default(),
            population: PopulationConfig::default(),
            budget: BudgetConfig::default(),
            behavior: BehaviorSection::default(),
            l2d: L2dSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| Error::ConfigParse {
            path: e.path().to_string(),
            message: e.inner().message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative feature-file paths are taken from the config's directory.
        if let (Some(file), Some(dir)) = (&cfg.dataset.feature_file, path.parent()) {
            if file.is_relative() {
                cfg.dataset.feature_file = Some(dir.join(file));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.dataset.classes;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds: at least one seed is required".into()));
        }
        if self.budget.k_list.is_empty() {
            return Err(Error::Config("budget.k_list is empty".into()));
        }
        if self.budget.k_list.contains(&0) || self.budget.strength_k == 0 {
            return Err(Error::Config("budgets need at least one annotation per class".into()));
        }
        if let Some(&h) = self.budget.h_list.iter().find(|&&h| h == 0 || h > k) {
            return Err(Error::Config(format!("expert strength {h} outside 1..={k}")));
        }
        if self.population.strength == 0 || self.population.strength > k {
            return Err(Error::Config(format!(
                "population.strength {} outside 1..={k}",
                self.population.strength
            )));
        }
        if self.l2d.variants.is_empty() {
            return Err(Error::Config("l2d.variants is empty".into()));
        }
        let ssl = &self.behavior.ssl;
        if !(0.0..=1.0).contains(&ssl.tau) || ssl.lambda < 0.0 {
            return Err(Error::Config("behavior.ssl: tau must lie in [0, 1] and lambda be ≥ 0".into()));
        }
        Ok(())
    }

    /// `(k, L)` pairs of the budget sweep.
    pub fn budgets(&self) -> Vec<(usize, usize)> {
        self.budget.k_list.iter().map(|&k| (k, k * self.dataset.classes)).collect()
    }

    /// Context size while training the behavior model.
    pub fn behavior_context(&self) -> usize {
        self.behavior.ssl.context_size_for(self.dataset.classes)
    }

    /// Encoders the configured variants need. Context-free variants use the
    /// attention encoder's labels.
    pub fn encoders(&self) -> Vec<EncoderVariant> {
        let mut out: Vec<EncoderVariant> = self
            .l2d
            .variants
            .iter()
            .map(|v| v.encoder().unwrap_or(EncoderVariant::NpAttention))
            .collect();
        out.sort();
        out.dedup();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_toml();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn derived_budgets() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.budgets(), vec![(2, 20), (4, 40), (10, 100), (50, 500)]);
        assert_eq!(cfg.behavior_context(), 20);
    }

    #[test]
    fn bad_key_reports_path() {
        let err = ExperimentConfig::from_toml("seeds = [1]\n[behavior.ssl]\ntau = \"high\"\n").unwrap_err();
        match err {
            Error::ConfigParse { path, .. } => assert_eq!(path, "behavior.ssl.tau"),
            other => panic!("{other}"),
        }
        let err = ExperimentConfig::from_toml("seeds = [1]\n[dataset]\nclases = 3\n").unwrap_err();
        assert!(matches!(err, Error::ConfigParse { .. }));
    }

    #[test]
    fn invalid_values_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.budget.k_list.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::default();
        cfg.budget.h_list = vec![0];
        assert!(cfg.validate().is_err());
    }
}
