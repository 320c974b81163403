use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jrm::experiment::{self, ExpError, ExperimentConfig};

/// Joint reward modeling lab on a synthetic image-editing world.
#[derive(Parser)]
#[command(name = "jrm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults apply to every missing key.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/eval JSONL datasets and the vocabulary.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_eval: Option<usize>,
    },
    /// Train one model; writes checkpoints, metrics.csv and eval.json.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the eval split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Representation statistics and aligned PCA clouds of checkpoints.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// `label=path` or a bare path (labelled by its position).
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// GRPO on the toy editor against a checkpoint's reward or the oracle.
    Rl {
        #[command(flatten)]
        common: Common,
        /// Reward checkpoint; omit for the ground-truth rubric.
        #[arg(long)]
        reward: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Diagnose, correct and re-score the eval split.
    SelfCorrect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every stage for all configured seeds and alphas.
    Experiment {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate a run directory into summary.json.
    Report {
        #[arg(long)]
        dir: PathBuf,
        /// Exit 4 when a directional check fails.
        #[arg(long)]
        strict: bool,
    },
}

fn load(common: &Common) -> Result<(ExperimentConfig, Option<String>), ExpError> {
    let (mut cfg, text) = match &common.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| ExpError::Io {
                path: p.display().to_string(),
                message: e.to_string(),
            })?;
            (ExperimentConfig::from_json(&text)?, Some(text))
        }
        None => (ExperimentConfig::default(), None),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.seeds = vec![s];
    }
    Ok((cfg, text))
}

/// Writes the effective config, plus the loaded file byte for byte.
fn echo(cfg: &ExperimentConfig, source: &Option<String>, dir: &Path) -> Result<(), ExpError> {
    experiment::echo_config(cfg, dir)?;
    if let Some(text) = source {
        let p = dir.join("config.source.json");
        std::fs::write(&p, text).map_err(|e| ExpError::Io {
            path: p.display().to_string(),
            message: e.to_string(),
        })?;
    }
    Ok(())
}

fn print(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn run(cli: Cli) -> Result<(), ExpError> {
    match cli.command {
        Command::GenData {
            common,
            out,
            n_train,
            n_eval,
        } => {
            let (mut cfg, src) = load(&common)?;
            cfg.n_train = n_train.unwrap_or(cfg.n_train);
            cfg.n_eval = n_eval.unwrap_or(cfg.n_eval);
            experiment::gen_data(&cfg, cfg.seed, &out)?;
            echo(&cfg, &src, &out)?;
        }
        Command::Train {
            common,
            alpha,
            data,
            out,
        } => {
            let (mut cfg, src) = load(&common)?;
            cfg.train.alpha = alpha.unwrap_or(cfg.train.alpha);
            let report = experiment::train_run(&cfg, &data, &out)?;
            echo(&cfg, &src, &out)?;
            print(&report);
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            out,
        } => {
            let (cfg, src) = load(&common)?;
            let e = experiment::eval_run(&cfg, &checkpoint, &data, &out)?;
            echo(&cfg, &src, &out)?;
            print(&e);
        }
        Command::Analyze {
            common,
            checkpoints,
            data,
            out,
        } => {
            let (cfg, src) = load(&common)?;
            let models: Vec<(String, PathBuf)> = checkpoints
                .iter()
                .enumerate()
                .map(|(i, c)| match c.split_once('=') {
                    Some((label, path)) => (label.to_string(), PathBuf::from(path)),
                    None => (format!("model{i}"), PathBuf::from(c)),
                })
                .collect();
            let r = experiment::analyze_run(&cfg, &models, &data, &out)?;
            echo(&cfg, &src, &out)?;
            print(&r.models.iter().map(|m| (&m.model, m.effective_rank)).collect::<Vec<_>>());
        }
        Command::Rl {
            common,
            reward,
            iterations,
            out,
        } => {
            let (mut cfg, src) = load(&common)?;
            cfg.rl.iterations = iterations.unwrap_or(cfg.rl.iterations);
            let r = experiment::rl_run(&cfg, reward.as_deref(), &out)?;
            echo(&cfg, &src, &out)?;
            print(&serde_json::json!({ "initial": r.initial, "final": r.final_eval }));
        }
        Command::SelfCorrect {
            common,
            checkpoint,
            data,
            out,
        } => {
            let (cfg, src) = load(&common)?;
            let r = experiment::selfcorrect_run(&cfg, &checkpoint, &data, &out)?;
            echo(&cfg, &src, &out)?;
            print(&r.buckets);
        }
        Command::Experiment { common, out } => {
            let (cfg, src) = load(&common)?;
            let out = out.unwrap_or_else(|| cfg.paths.out.clone());
            echo(&cfg, &src, &out)?;
            let summary = experiment::standard(&cfg, &out)?;
            print(&summary);
        }
        Command::Report { dir, strict } => {
            let summary = experiment::report(&dir)?;
            let failed = experiment::failed_checks(&summary);
            for f in &failed {
                eprintln!("check does not hold: {f}");
            }
            print(&summary);
            if strict && !failed.is_empty() {
                return Err(ExpError::Numerical(format!("{} directional check(s) failed", failed.len())));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
