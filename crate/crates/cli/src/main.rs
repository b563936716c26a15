use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use popdefer::behavior::binary_accuracy;
use popdefer::data::{export_feature_file, Instance};
use popdefer::harness::pipeline::{classifier_stage, population, prepare};
use popdefer::harness::{
    evaluate, metrics_csv, run_config, strength_sweep, train_cell, write, write_cell, ExperimentConfig,
    LabelOrigin, MetricsRow,
};
use popdefer::numcore::checkpoint;
use popdefer::{rng, Error, Result};

#[derive(Parser)]
#[command(name = "popdefer", version, about = "Learning to defer to an expert population from few demonstrations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the config's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct Budget {
    #[command(flatten)]
    common: Common,
    /// Annotations per class; defaults to the first entry of the k-list.
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the dataset and pretrain the frozen feature map.
    Pretrain(Common),
    /// Train the behavior encoders on the seen experts.
    TrainBehavior(Budget),
    /// Train the behavior encoders and synthesize expert labels.
    PseudoLabel(Budget),
    /// Run the pipeline through deferral training.
    TrainL2d(Budget),
    /// Run the pipeline through evaluation for one budget.
    Evaluate(Budget),
    /// Budget sweep over the k-list, with the oracle bound.
    Sweep(Common),
    /// Gain over the classifier for each expert strength.
    StrengthSweep {
        #[command(flatten)]
        common: Common,
        /// Strengths to sweep; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        h: Option<Vec<usize>>,
    },
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Pretrain(_) => "pretrain",
            Command::TrainBehavior(_) => "train-behavior",
            Command::PseudoLabel(_) => "pseudo-label",
            Command::TrainL2d(_) => "train-l2d",
            Command::Evaluate(_) => "evaluate",
            Command::Sweep(_) => "sweep",
            Command::StrengthSweep { .. } => "strength-sweep",
        }
    }
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn budget(cfg: &ExperimentConfig, b: &Budget) -> usize {
    b.k.unwrap_or(cfg.budget.k_list[0])
}

fn pretrain(common: &Common) -> Result<()> {
    let cfg = load(common)?;
    write(&common.out.join("config.toml"), &cfg.to_toml())?;
    for &seed in &cfg.seeds {
        let dir = common.out.join(format!("seed{seed}"));
        let p = prepare(&cfg, seed).map_err(|e| e.in_stage("pretrain"))?;
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        checkpoint::save(&dir.join("backbone.bin"), p.backbone.params())?;
        export_feature_file(&p.features, &dir.join("features.csv"))?;
        if let Some(r) = &p.pretrain {
            let mut s = String::from("epoch,loss\n");
            writeln!(s, "init,{:.6}", r.initial_loss).unwrap();
            for (i, l) in r.epoch_losses.iter().enumerate() {
                writeln!(s, "{i},{l:.6}").unwrap();
            }
            writeln!(s, "validation_accuracy,{:.6}", r.validation_accuracy).unwrap();
            write(&dir.join("pretrain.csv"), &s)?;
        }
    }
    Ok(())
}

/// Stages up to and including deferral training for one budget, optionally
/// followed by evaluation.
fn staged(b: &Budget, upto: &'static str) -> Result<()> {
    let common = &b.common;
    let cfg = load(common)?;
    let k = budget(&cfg, b);
    write(&common.out.join("config.toml"), &cfg.to_toml())?;
    for &seed in &cfg.seeds {
        let dir = common.out.join(format!("seed{seed}")).join(format!("k{k}"));
        let p = prepare(&cfg, seed).map_err(|e| e.in_stage("pretrain"))?;
        let pop = population(&cfg, cfg.population.strength, seed)?;
        if upto == "train-behavior" {
            let data = p.annotated(k, seed).map_err(|e| e.in_stage("train-behavior"))?;
            let mut s = String::from("encoder,expert_group,binary_accuracy\n");
            for variant in cfg.encoders() {
                let (model, report) = popdefer::harness::pipeline::behavior_stage(&cfg, &data, &pop, variant, seed)
                    .map_err(|e| e.in_stage("train-behavior"))?;
                checkpoint::save(&dir_file(&dir, &format!("behavior_{}.bin", variant.name()))?, model.params())?;
                let mut curve = String::from("step,loss\n");
                for (i, l) in report.losses.iter().enumerate() {
                    writeln!(curve, "{i},{l:.6}").unwrap();
                }
                write(&dir.join(format!("behavior_{}_loss.csv", variant.name())), &curve)?;
                let pool = data.features.annotated();
                let queries: Vec<&Instance> = data.features.validation.iter().collect();
                for (group, ids) in [("seen", pop.seen()), ("unseen", pop.unseen())] {
                    let experts: Vec<_> = ids.iter().map(|&i| &pop.experts()[i]).collect();
                    let acc = binary_accuracy(
                        &model,
                        &experts,
                        &pool,
                        &queries,
                        cfg.behavior_context().min(pool.len()),
                        rng::derive(seed, "behavior-eval"),
                    )?;
                    writeln!(s, "{},{group},{acc:.6}", variant.name()).unwrap();
                }
            }
            write(&dir.join("behavior_accuracy.csv"), &s)?;
            continue;
        }
        let trained = train_cell(&cfg, &p, &pop, Some(k), seed)?;
        if upto == "pseudo-label" {
            for (variant, table) in &trained.tables {
                write(&dir.join(format!("pseudo_labels_{}.csv", variant.name())), &table.to_csv())?;
            }
            continue;
        }
        write_cell(&dir, &trained)?;
        if upto == "evaluate" {
            let classifier = classifier_stage(&cfg, &p, seed).map_err(|e| e.in_stage("train-l2d"))?;
            let test: Vec<&Instance> = p.features.test.iter().collect();
            let eval =
                evaluate(&cfg, &test, &pop, &trained.systems, &classifier, seed).map_err(|e| e.in_stage("evaluate"))?;
            for (variant, text) in &eval.decisions {
                write(&dir.join(format!("decisions_{variant}.csv")), text)?;
            }
            let rows: Vec<MetricsRow> = eval
                .cells
                .into_iter()
                .map(|cell| MetricsRow {
                    seed,
                    k: Some(k),
                    labels: Some(k * cfg.dataset.classes),
                    strength: cfg.population.strength,
                    origin: LabelOrigin::Pseudo,
                    cell,
                })
                .collect();
            write(&dir.join("metrics.csv"), &metrics_csv(&rows))?;
        }
    }
    Ok(())
}

fn dir_file(dir: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.join(name))
}

fn run(command: &Command) -> Result<()> {
    match command {
        Command::Pretrain(c) => pretrain(c),
        Command::TrainBehavior(b) => staged(b, "train-behavior"),
        Command::PseudoLabel(b) => staged(b, "pseudo-label"),
        Command::TrainL2d(b) => staged(b, "train-l2d"),
        Command::Evaluate(b) => staged(b, "evaluate"),
        Command::Sweep(c) => {
            let cfg = load(c)?;
            let report = run_config(&cfg, &c.out)?;
            print!("{}", report.summary_csv());
            Ok(())
        }
        Command::StrengthSweep { common, h } => {
            let cfg = load(common)?;
            let h_list = h.clone().unwrap_or_else(|| cfg.budget.h_list.clone());
            let report = strength_sweep(&cfg, &h_list, &common.out)?;
            print!("{}", report.table_csv(&h_list));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let stage = e.stage().unwrap_or(cli.command.stage());
            eprintln!("popdefer: stage `{stage}` failed: {e}");
            ExitCode::FAILURE
        }
    }
}
