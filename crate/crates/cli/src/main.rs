use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mcd_core::experiments::{self, ExperimentConfig, ExperimentKind};
use mcd_core::scm::{read_scms, ScmGenConfig};
use mcd_core::stats::Alternative;

#[derive(Parser)]
#[command(name = "mcd", version, about = "Learn and evaluate causal discovery policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a test set of random linear SCMs over distinct DAGs.
    GenTestset {
        #[arg(long)]
        nodes: usize,
        #[arg(long)]
        graphs: usize,
        #[arg(long)]
        scms_per_graph: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the experiment described by a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on an SCM file with frozen weights.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scms: PathBuf,
        /// Environment settings; defaults to env.json beside the model.
        #[arg(long)]
        env: Option<PathBuf>,
        #[arg(long)]
        greedy: bool,
        /// Write one trace CSV per episode into this directory.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Evaluate only the first N SCMs.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 1)]
        episodes_per_scm: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate on the two observationally equivalent toy SCMs.
    Toy {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare the full model with the no-intervention variant.
    Ablation {
        #[arg(long)]
        config: PathBuf,
    },
    /// Report how many interventions a checkpoint uses and on which variables.
    Budget {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scms: PathBuf,
        #[arg(long)]
        env: Option<PathBuf>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Descriptive statistics and a paired Wilcoxon signed-rank test.
    Stats {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value = "wilcoxon")]
        test: String,
        #[arg(long, default_value = "two-sided")]
        alt: String,
    },
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_config(path: &Path, expected: Option<ExperimentKind>) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(kind) = expected {
        if cfg.kind != kind {
            bail!("{} describes a {:?} experiment, expected {:?}", path.display(), cfg.kind, kind);
        }
    }
    Ok(cfg)
}

fn load_scms(path: &Path, limit: Option<usize>) -> Result<Vec<mcd_core::scm::Scm>> {
    let mut scms = read_scms(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(k) = limit {
        scms.truncate(k);
    }
    Ok(scms)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenTestset {
            nodes,
            graphs,
            scms_per_graph,
            seed,
            out,
        } => {
            let scms = experiments::gen_testset(nodes, graphs, scms_per_graph, &ScmGenConfig::default(), seed)?;
            experiments::save_scms(&out, &scms)?;
            log::info!("wrote {} SCMs over {} graphs to {}", scms.len(), graphs, out.display());
        }
        Command::Train { config } => print_json(&experiments::run(&load_config(&config, None)?)?)?,
        Command::Toy { config } => {
            print_json(&experiments::run_toy(&load_config(&config, Some(ExperimentKind::Toy))?)?)?
        }
        Command::Ablation { config } => {
            print_json(&experiments::run_ablation(&load_config(&config, Some(ExperimentKind::Ablation))?)?)?
        }
        Command::Eval {
            model,
            scms,
            env,
            greedy,
            trace,
            limit,
            episodes_per_scm,
            seed,
        } => {
            let env = experiments::env_for_model(&model, env.as_deref())?;
            let scms = load_scms(&scms, limit)?;
            let report = experiments::eval_model(&model, &env, &scms, episodes_per_scm, greedy, seed, trace.as_deref())?;
            print_json(&report)?;
        }
        Command::Budget {
            model,
            scms,
            env,
            limit,
            seed,
        } => {
            let env_cfg = experiments::env_for_model(&model, env.as_deref())?;
            let scms = load_scms(&scms, limit)?;
            let params = mcd_core::policy::load_params(&model)?;
            print_json(&experiments::run_budget(&params, &env_cfg, &scms, 1, true, seed)?)?;
        }
        Command::Stats { a, b, test, alt } => {
            if test != "wilcoxon" {
                bail!("unsupported test {test:?}; only wilcoxon is available");
            }
            let alternative: Alternative = alt.parse()?;
            let a = experiments::read_value_column(&a)?;
            let b = experiments::read_value_column(&b)?;
            print_json(&experiments::compare_samples(&a, &b, alternative)?)?;
        }
    }
    Ok(())
}
