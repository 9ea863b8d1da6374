use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use uad_cli::commands::{cmd_analyze, cmd_eval, cmd_train, exit_code, Analysis};
use uad_cli::config::RunConfig;
use uad_core::{Result, UadError};

#[derive(Parser)]
#[command(
    name = "uad",
    version,
    about = "Uncertainty-aware distributional adversarial training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file of `section.key = value` lines.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// `section.key=value`, applied after the config file. Repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints, metrics and the resolved config.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a `ckpt_epoch{t}.bin` training-state checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Clean and PGD robust accuracy of a checkpoint on the `eval.split` split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// PGD iterations of the evaluation attack (`eval.steps`).
        #[arg(long = "attack.steps")]
        attack_steps: Option<usize>,
        /// Random restarts of the evaluation attack (`eval.restarts`).
        #[arg(long = "attack.restarts")]
        attack_restarts: Option<usize>,
        /// Radius of the evaluation attack (`eval.epsilon`), e.g. 8/255.
        #[arg(long = "attack.epsilon")]
        attack_epsilon: Option<String>,
    },
    /// Feature-disruption curves or adversarial normality tests.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `disruption` or `normality`.
        #[arg(long)]
        analysis: String,
    },
}

fn load_config(common: &Common, extra: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(&common.config)
        .map_err(|e| UadError::io(format!("reading config {}", common.config.display()), e))?;
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    overrides.extend_from_slice(extra);
    RunConfig::parse(&text, &overrides)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, resume } => {
            let cfg = load_config(&common, &[])?;
            let summary = cmd_train(&cfg, resume.as_deref())?;
            if let Some(last) = summary.epochs.last() {
                println!(
                    "epoch {}: val clean {:.4} robust {:.4}",
                    last.epoch, last.val_clean_acc, last.val_robust_acc
                );
            }
            if let Some(p) = &summary.final_checkpoint {
                println!("final checkpoint {}", p.display());
            }
            Ok(())
        }
        Command::Eval {
            common,
            checkpoint,
            attack_steps,
            attack_restarts,
            attack_epsilon,
        } => {
            let mut extra = Vec::new();
            if let Some(s) = attack_steps {
                extra.push(format!("eval.steps={s}"));
            }
            if let Some(r) = attack_restarts {
                extra.push(format!("eval.restarts={r}"));
            }
            if let Some(e) = attack_epsilon {
                extra.push(format!("eval.epsilon={e}"));
            }
            let cfg = load_config(&common, &extra)?;
            let r = cmd_eval(&cfg, &checkpoint)?;
            println!(
                "PGD-{} restarts {} eps {:.6}: clean {:.4} robust {:.4} (n = {})",
                r.settings.steps, r.settings.restarts, r.settings.epsilon, r.clean_acc, r.robust_acc, r.n
            );
            Ok(())
        }
        Command::Analyze {
            common,
            checkpoint,
            analysis,
        } => {
            let which: Analysis = analysis.parse()?;
            let cfg = load_config(&common, &[])?;
            let out = cmd_analyze(&cfg, Path::new(&checkpoint), which)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
