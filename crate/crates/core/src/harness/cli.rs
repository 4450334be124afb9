//! Command-line entry point. Exit codes: 0 success, 1 usage or validation
//! error, 2 runtime failure.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{error::ErrorKind, ArgAction, Parser, Subcommand};

use super::config::{DatasetSpec, ExperimentConfig, Objective};
use super::{Checkpoint, HarnessError, Layout, Split};
use crate::metrics::export;
use crate::par::Exec;

#[derive(Debug, Parser)]
#[command(name = "bearlab", version, about = "Beam-search-aware fine-tuning lab for item recommendation")]
struct Cli {
    /// Experiment config (JSON). `compare` accepts it repeatedly.
    #[arg(long, global = true, action = ArgAction::Append)]
    config: Vec<PathBuf>,
    /// Seed overriding the config's seed list (and the synthetic data seed for gen-data).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory overriding the config's out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic catalog and interaction log.
    GenData,
    /// Filter, window and split the interaction log.
    Prepare,
    /// Train one checkpoint per seed.
    Train {
        #[arg(long)]
        objective: Option<String>,
    },
    /// Evaluate a checkpoint and write report CSV/JSON.
    Evaluate {
        #[arg(long)]
        objective: Option<String>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the beam trace for one user.
    Diagnose {
        #[arg(long)]
        user: usize,
        #[arg(long)]
        objective: Option<String>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate several objectives or configs over seeds.
    Compare {
        /// Comma-separated objectives applied to the (single) base config.
        #[arg(long, value_delimiter = ',')]
        objectives: Vec<String>,
    },
}

fn parse_split(s: &str) -> Result<Split, HarnessError> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(HarnessError::Validation(format!("unknown split {s}"))),
    }
}

fn with_objective(mut cfg: ExperimentConfig, objective: &Option<String>) -> Result<ExperimentConfig, HarnessError> {
    if let Some(o) = objective {
        cfg.objective = Objective::parse(o)
            .ok_or_else(|| HarnessError::Validation(format!("unknown objective {o}")))?;
        cfg.name = None;
    }
    Ok(cfg)
}

fn base_config(cli: &Cli, path: Option<&PathBuf>) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn single_config(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    if cli.config.len() > 1 {
        return Err(HarnessError::Validation("only compare accepts several --config".into()));
    }
    base_config(cli, cli.config.first())
}

fn load_checkpoint(cfg: &ExperimentConfig, layout: &Layout, explicit: &Option<PathBuf>) -> Result<Checkpoint, HarnessError> {
    let dir = explicit
        .clone()
        .unwrap_or_else(|| layout.checkpoint_dir(&cfg.method(), cfg.seeds[0]));
    if !dir.exists() {
        return Err(HarnessError::Validation(format!("checkpoint {} not found", dir.display())));
    }
    Checkpoint::load(&dir)
}

fn execute(cli: &Cli) -> Result<(), HarnessError> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match &cli.command {
        Command::GenData => {
            let mut cfg = single_config(cli)?;
            if let (Some(seed), DatasetSpec::Synthetic(s)) = (cli.seed, &mut cfg.dataset) {
                s.seed = seed;
            }
            let layout = Layout::new(&cfg.out_dir);
            super::gen_data(&cfg, &layout)?;
            eprintln!("wrote {} and {}", layout.catalog_csv().display(), layout.interactions_csv().display());
        }
        Command::Prepare => {
            let cfg = single_config(cli)?;
            let layout = Layout::new(&cfg.out_dir);
            let (_, d) = super::prepare(&cfg, &layout)?;
            eprintln!(
                "instances: train {} val {} test {} -> {}",
                d.train.len(),
                d.val.len(),
                d.test.len(),
                layout.dataset_json().display()
            );
        }
        Command::Train { objective } => {
            let cfg = with_objective(single_config(cli)?, objective)?;
            let layout = Layout::new(&cfg.out_dir);
            let (catalog, dataset) = super::load_prepared(&cfg, &layout)?;
            for &seed in &cfg.seeds {
                let ck = super::run_train(&cfg, &layout, &catalog, &dataset, seed, exec)?;
                eprintln!(
                    "{} seed {seed}: best epoch {} val ndcg {:.4} -> {}",
                    cfg.method(),
                    ck.epoch,
                    ck.history.val_ndcg[ck.epoch - 1],
                    layout.checkpoint_dir(&cfg.method(), seed).display()
                );
            }
        }
        Command::Evaluate { objective, split, checkpoint } => {
            let cfg = with_objective(single_config(cli)?, objective)?;
            let layout = Layout::new(&cfg.out_dir);
            let (catalog, dataset) = super::load_prepared(&cfg, &layout)?;
            let ck = load_checkpoint(&cfg, &layout, checkpoint)?;
            let report = super::evaluate_checkpoint(&cfg, &catalog, &dataset, &ck, parse_split(split)?, exec)?;
            let dir = layout.run_dir(&ck.method, ck.seed);
            export(std::slice::from_ref(&report), &dir, "report")?;
            for row in &report.rows {
                println!(
                    "{} seed {} K={} ndcg={:.4} hr={:.4} pr={} prop={}",
                    report.method,
                    report.seed,
                    row.k,
                    row.ndcg,
                    row.hr,
                    row.pr.value.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into()),
                    row.prop.value.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into()),
                );
            }
        }
        Command::Diagnose {
            user,
            objective,
            split,
            checkpoint,
        } => {
            let cfg = with_objective(single_config(cli)?, objective)?;
            let layout = Layout::new(&cfg.out_dir);
            let (catalog, dataset) = super::load_prepared(&cfg, &layout)?;
            let ck = load_checkpoint(&cfg, &layout, checkpoint)?;
            let trace = super::diagnose(&cfg, &catalog, &dataset, &ck, parse_split(split)?, *user)?;
            let json = trace.to_json();
            let dir = layout.root.join("traces");
            std::fs::create_dir_all(&dir)?;
            std::fs::write(dir.join(format!("user{user}.json")), &json)?;
            println!("{json}");
        }
        Command::Compare { objectives } => {
            let mut configs = Vec::new();
            if cli.config.len() > 1 {
                if !objectives.is_empty() {
                    return Err(HarnessError::Validation("use either several --config or --objectives".into()));
                }
                for p in &cli.config {
                    configs.push(base_config(cli, Some(p))?);
                }
            } else {
                let base = base_config(cli, cli.config.first())?;
                let list: Vec<String> = if objectives.is_empty() {
                    vec!["sft".into(), "bear".into()]
                } else {
                    objectives.clone()
                };
                for o in &list {
                    configs.push(with_objective(base.clone(), &Some(o.clone()))?);
                }
            }
            let seeds = configs[0].seeds.clone();
            let layout = Layout::new(&configs[0].out_dir);
            let cmp = super::compare(&configs, &seeds, &layout, exec)?;
            for r in &cmp.summary {
                println!(
                    "{} K={} ndcg={:.4}±{:.4} pr={} epoch_s={}",
                    r.method,
                    r.k,
                    r.ndcg_mean,
                    r.ndcg_std,
                    r.pr_mean.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into()),
                    r.epoch_time_mean.map(|v| format!("{v:.3}")).unwrap_or_else(|| "n/a".into()),
                );
            }
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
