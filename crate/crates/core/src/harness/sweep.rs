use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::data::Instance;
use crate::error::{Error, Result};
use crate::numcore::checkpoint;

use super::config::ExperimentConfig;
use super::metrics::{evaluate, median, metrics_csv, Group, LabelOrigin, MetricsRow};
use super::pipeline::{classifier_stage, population, prepare, train_cell, Prepared, TrainedCell};

/// Wall-clock seconds per stage, kept apart from the deterministic tables.
#[derive(Debug, Default, Clone)]
pub struct Timings {
    rows: Vec<(String, f64)>,
}

impl Timings {
    pub fn time<T>(&mut self, label: impl Into<String>, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f();
        self.rows.push((label.into(), start.elapsed().as_secs_f64()));
        out
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("stage,seconds\n");
        for (label, secs) in &self.rows {
            writeln!(s, "{label},{secs:.3}").unwrap();
        }
        s
    }

    pub fn total(&self) -> f64 {
        self.rows.iter().map(|r| r.1).sum()
    }
}

pub fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn save_params(path: &Path, params: &crate::numcore::Parameters) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    checkpoint::save(path, params)
}

/// Checkpoints, pseudo-label tables and training curves of one cell.
pub fn write_cell(dir: &Path, cell: &TrainedCell) -> Result<()> {
    for (variant, model) in &cell.encoders {
        save_params(&dir.join(format!("behavior_{}.bin", variant.name())), model.params())?;
    }
    for (variant, report) in &cell.behavior_reports {
        let mut s = String::from("step,loss\n");
        for (i, l) in report.losses.iter().enumerate() {
            writeln!(s, "{i},{l:.6}").unwrap();
        }
        write(&dir.join(format!("behavior_{}_loss.csv", variant.name())), &s)?;
    }
    for (variant, table) in &cell.tables {
        write(&dir.join(format!("pseudo_labels_{}.csv", variant.name())), &table.to_csv())?;
    }
    for (variant, model) in &cell.systems.models {
        save_params(&dir.join(format!("l2d_{}.bin", variant.name())), model.params())?;
    }
    for (variant, report) in &cell.systems.reports {
        let mut s = String::from("epoch,loss,validation_system_accuracy\n");
        for (i, l) in report.epoch_losses.iter().enumerate() {
            let acc = report.validation_accuracy.get(i).copied().unwrap_or(f64::NAN);
            writeln!(s, "{i},{l:.6},{acc:.6}").unwrap();
        }
        write(&dir.join(format!("l2d_{}_curve.csv", variant.name())), &s)?;
    }
    Ok(())
}

fn prepare_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path, timings: &mut Timings) -> Result<Prepared> {
    let prepared = timings
        .time(format!("seed{seed}/pretrain"), || prepare(cfg, seed))
        .map_err(|e| e.in_stage("pretrain"))?;
    save_params(&dir.join("backbone.bin"), prepared.backbone.params())?;
    if let Some(report) = &prepared.pretrain {
        let mut s = String::from("epoch,loss\n");
        writeln!(s, "init,{:.6}", report.initial_loss).unwrap();
        for (i, l) in report.epoch_losses.iter().enumerate() {
            writeln!(s, "{i},{l:.6}").unwrap();
        }
        writeln!(s, "validation_accuracy,{:.6}", report.validation_accuracy).unwrap();
        write(&dir.join("pretrain.csv"), &s)?;
    }
    Ok(prepared)
}

/// Result of a budget sweep.
#[derive(Debug, Clone)]
pub struct SweepReport {
    pub rows: Vec<MetricsRow>,
    pub timings: Timings,
}

impl SweepReport {
    /// Per-seed system accuracy for one (variant, origin, k, group) cell.
    pub fn system(&self, variant: &str, origin: LabelOrigin, k: Option<usize>, group: Group) -> Vec<f64> {
        self.select(variant, origin, k, group).map(|r| r.cell.counts.tally.system_accuracy()).collect()
    }

    /// Per-seed classifier-alone accuracy over the same scored instances.
    pub fn classifier_alone(&self, variant: &str, k: Option<usize>, group: Group) -> Vec<f64> {
        self.select(variant, LabelOrigin::Pseudo, k, group).map(|r| r.cell.counts.classifier_alone()).collect()
    }

    fn select<'a>(
        &'a self,
        variant: &'a str,
        origin: LabelOrigin,
        k: Option<usize>,
        group: Group,
    ) -> impl Iterator<Item = &'a MetricsRow> + 'a {
        self.rows.iter().filter(move |r| {
            r.cell.variant == variant && r.origin == origin && r.k == k && r.cell.group == group
        })
    }

    pub fn variants(&self) -> Vec<String> {
        let mut v: Vec<String> = self.rows.iter().map(|r| r.cell.variant.clone()).collect();
        v.sort();
        v.dedup();
        v
    }

    /// Medians over seeds per (k, variant, origin, group).
    pub fn summary_csv(&self) -> String {
        let mut keys: BTreeMap<(Option<usize>, String, LabelOrigin, Group), Vec<&MetricsRow>> = BTreeMap::new();
        for r in &self.rows {
            keys.entry((r.k, r.cell.variant.clone(), r.origin, r.cell.group)).or_default().push(r);
        }
        let mut s = String::from(
            "k,variant,labels,group,seeds,system_accuracy,coverage,expert_accuracy_deferred,classifier_alone,expert_alone\n",
        );
        for ((k, variant, origin, group), rows) in keys {
            let m = |f: &dyn Fn(&MetricsRow) -> f64| median(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
            writeln!(
                s,
                "{},{variant},{origin},{group},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                k.map_or_else(|| "full".into(), |k| k.to_string()),
                rows.len(),
                m(&|r| r.cell.counts.tally.system_accuracy()),
                m(&|r| r.cell.counts.tally.coverage()),
                m(&|r| r.cell.counts.tally.expert_accuracy_on_deferred()),
                m(&|r| r.cell.counts.classifier_alone()),
                m(&|r| r.cell.counts.expert_alone()),
            )
            .unwrap();
        }
        s
    }

    /// Budget-curve data: per variant and budget, median system accuracy on
    /// synthesized labels, the oracle bound, the classifier alone and the gap.
    pub fn budget_curve_csv(&self, k_list: &[usize], classes: usize) -> String {
        let mut s = String::from("variant,k,L,group,system_accuracy,oracle_system_accuracy,classifier_alone,oracle_gap\n");
        for variant in self.variants() {
            for group in [Group::Seen, Group::Unseen, Group::All] {
                let oracle = self.system(&variant, LabelOrigin::Oracle, None, group);
                for &k in k_list {
                    let pseudo = self.system(&variant, LabelOrigin::Pseudo, Some(k), group);
                    let gaps: Vec<f64> = oracle.iter().zip(&pseudo).map(|(o, p)| o - p).collect();
                    writeln!(
                        s,
                        "{variant},{k},{},{group},{:.6},{:.6},{:.6},{:.6}",
                        k * classes,
                        median(&pseudo),
                        median(&oracle),
                        median(&self.classifier_alone(&variant, Some(k), group)),
                        median(&gaps),
                    )
                    .unwrap();
                }
            }
        }
        s
    }
}

/// Train and evaluate every budget in the k-list for every seed, plus the
/// oracle bound per seed. Each (seed, budget) writes to its own directory;
/// the merged tables land in `out`.
pub fn budget_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<SweepReport> {
    cfg.validate()?;
    let mut timings = Timings::default();
    let mut rows = Vec::new();
    let strength = cfg.population.strength;
    for &seed in &cfg.seeds {
        let seed_dir = out.join("cells").join(format!("seed{seed}"));
        let prepared = prepare_seed(cfg, seed, &seed_dir, &mut timings)?;
        let pop = population(cfg, strength, seed)?;
        let test: Vec<&Instance> = prepared.features.test.iter().collect();
        let classifier = timings
            .time(format!("seed{seed}/classifier"), || classifier_stage(cfg, &prepared, seed))
            .map_err(|e| e.in_stage("train-l2d"))?;
        save_params(&seed_dir.join("classifier.bin"), classifier.params())?;
        let mut cells: Vec<(Option<usize>, LabelOrigin)> =
            cfg.budget.k_list.iter().map(|&k| (Some(k), LabelOrigin::Pseudo)).collect();
        cells.push((None, LabelOrigin::Oracle));
        for (k, origin) in cells {
            let name = k.map_or_else(|| "oracle".to_string(), |k| format!("k{k}"));
            let dir = seed_dir.join(&name);
            let trained = timings.time(format!("seed{seed}/{name}/train"), || train_cell(cfg, &prepared, &pop, k, seed))?;
            write_cell(&dir, &trained)?;
            let eval = timings
                .time(format!("seed{seed}/{name}/evaluate"), || {
                    evaluate(cfg, &test, &pop, &trained.systems, &classifier, seed)
                })
                .map_err(|e| e.in_stage("evaluate"))?;
            for (variant, text) in &eval.decisions {
                write(&dir.join(format!("decisions_{variant}.csv")), text)?;
            }
            let cell_rows: Vec<MetricsRow> = eval
                .cells
                .into_iter()
                .map(|cell| MetricsRow { seed, k, labels: k.map(|k| k * cfg.dataset.classes), strength, origin, cell })
                .collect();
            write(&dir.join("metrics.csv"), &metrics_csv(&cell_rows))?;
            rows.extend(cell_rows);
        }
    }
    Ok(SweepReport { rows, timings })
}

/// Run the full pipeline from a config file into `out`: config snapshot,
/// per-cell artifacts, merged metric tables and budget-curve data.
pub fn run_experiment(config_path: &Path, out: &Path) -> Result<PathBuf> {
    let cfg = ExperimentConfig::load(config_path)?;
    run_config(&cfg, out)?;
    Ok(out.to_path_buf())
}

pub fn run_config(cfg: &ExperimentConfig, out: &Path) -> Result<SweepReport> {
    write(&out.join("config.toml"), &cfg.to_toml())?;
    let report = budget_sweep(cfg, out)?;
    write_sweep(cfg, &report, out)?;
    Ok(report)
}

pub fn write_sweep(cfg: &ExperimentConfig, report: &SweepReport, out: &Path) -> Result<()> {
    write(&out.join("metrics.csv"), &metrics_csv(&report.rows))?;
    write(&out.join("summary.csv"), &report.summary_csv())?;
    write(&out.join("budget_curve.csv"), &report.budget_curve_csv(&cfg.budget.k_list, cfg.dataset.classes))?;
    write(&out.join("timings.csv"), &report.timings.csv())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainRow {
    pub seed: u64,
    pub strength: usize,
    pub variant: String,
    pub system_accuracy: f64,
    pub classifier_alone: f64,
}

impl GainRow {
    pub fn gain(&self) -> f64 {
        self.system_accuracy - self.classifier_alone
    }
}

#[derive(Debug, Clone)]
pub struct StrengthReport {
    pub rows: Vec<GainRow>,
    pub timings: Timings,
}

impl StrengthReport {
    /// Per-seed gains for one variant and strength.
    pub fn gains(&self, variant: &str, strength: usize) -> Vec<f64> {
        self.rows.iter().filter(|r| r.variant == variant && r.strength == strength).map(GainRow::gain).collect()
    }

    pub fn median_gain(&self, variant: &str, strength: usize) -> f64 {
        median(&self.gains(variant, strength))
    }

    pub fn rows_csv(&self) -> String {
        let mut s = String::from("seed,H,variant,system_accuracy,classifier_alone,gain\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{:.6},{:.6},{:.6}",
                r.seed,
                r.strength,
                r.variant,
                r.system_accuracy,
                r.classifier_alone,
                r.gain()
            )
            .unwrap();
        }
        s
    }

    /// One row per variant, one column per strength: median gain in
    /// percentage points.
    pub fn table_csv(&self, h_list: &[usize]) -> String {
        let mut variants: Vec<&str> = self.rows.iter().map(|r| r.variant.as_str()).collect();
        variants.sort();
        variants.dedup();
        let mut s = String::from("variant");
        for h in h_list {
            write!(s, ",H={h}").unwrap();
        }
        s.push('\n');
        for v in variants {
            s.push_str(v);
            for &h in h_list {
                write!(s, ",{:.2}", 100.0 * self.median_gain(v, h)).unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// System-accuracy gain over the stand-alone classifier for each expert
/// strength in `h_list`, at the configured strength budget.
pub fn strength_sweep(cfg: &ExperimentConfig, h_list: &[usize], out: &Path) -> Result<StrengthReport> {
    cfg.validate()?;
    if let Some(&h) = h_list.iter().find(|&&h| h == 0 || h > cfg.dataset.classes) {
        return Err(Error::Config(format!("expert strength {h} outside 1..={}", cfg.dataset.classes)));
    }
    let mut timings = Timings::default();
    let mut rows = Vec::new();
    let k = cfg.budget.strength_k;
    for &seed in &cfg.seeds {
        let seed_dir = out.join("cells").join(format!("seed{seed}"));
        let prepared = prepare_seed(cfg, seed, &seed_dir, &mut timings)?;
        let test: Vec<&Instance> = prepared.features.test.iter().collect();
        let classifier = timings
            .time(format!("seed{seed}/classifier"), || classifier_stage(cfg, &prepared, seed))
            .map_err(|e| e.in_stage("train-l2d"))?;
        for &h in h_list {
            let pop = population(cfg, h, seed)?;
            let dir = seed_dir.join(format!("H{h}"));
            let trained = timings.time(format!("seed{seed}/H{h}/train"), || train_cell(cfg, &prepared, &pop, Some(k), seed))?;
            write_cell(&dir, &trained)?;
            let eval = evaluate(cfg, &test, &pop, &trained.systems, &classifier, seed).map_err(|e| e.in_stage("evaluate"))?;
            let cell_rows: Vec<MetricsRow> = eval
                .cells
                .into_iter()
                .map(|cell| MetricsRow {
                    seed,
                    k: Some(k),
                    labels: Some(k * cfg.dataset.classes),
                    strength: h,
                    origin: LabelOrigin::Pseudo,
                    cell,
                })
                .collect();
            write(&dir.join("metrics.csv"), &metrics_csv(&cell_rows))?;
            for r in cell_rows.iter().filter(|r| r.cell.group == Group::All) {
                rows.push(GainRow {
                    seed,
                    strength: h,
                    variant: r.cell.variant.clone(),
                    system_accuracy: r.cell.counts.tally.system_accuracy(),
                    classifier_alone: r.cell.counts.classifier_alone(),
                });
            }
        }
    }
    let report = StrengthReport { rows, timings };
    write(&out.join("config.toml"), &cfg.to_toml())?;
    write(&out.join("strength_gains.csv"), &report.rows_csv())?;
    write(&out.join("strength_table.csv"), &report.table_csv(h_list))?;
    write(&out.join("timings.csv"), &report.timings.csv())?;
    Ok(report)
}
