use clap::{Args, Parser, Subcommand};
use lscl::config::ExperimentConfig;
use lscl::error::LsclError;
use lscl::pipeline::{
    baseline_path, cmd_ablate, cmd_evaluate, cmd_finetune, cmd_gen_data, cmd_pretrain,
    ensure_out_dir, method_path, FinetuneMethod,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "lscl", about = "Local style curriculum learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults apply for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override every seed in the config from this base value.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-vendor dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the baseline U-Net on the train split.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Finetune the baseline with one method.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// One of: lscl, scl, random-style, mixup, none.
        #[arg(long)]
        method: String,
    },
    /// Evaluate checkpoints on all vendor test splits.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoints to evaluate; defaults to every known method file
        /// present in the output directory.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
        /// Also evaluate each checkpoint with test-time augmentation.
        #[arg(long)]
        tta: Option<bool>,
    },
    /// Run the full ablation from an existing baseline.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
}

fn build_config(common: &Common) -> Result<ExperimentConfig, LsclError> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), LsclError> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = build_config(&common)?;
            ensure_out_dir(&cfg)?;
            cmd_gen_data(&cfg)?;
            println!("wrote dataset under {}", cfg.out_dir.join("data").display());
        }
        Command::Pretrain { common } => {
            let cfg = build_config(&common)?;
            ensure_out_dir(&cfg)?;
            cmd_pretrain(&cfg)?;
            println!("wrote {}", baseline_path(&cfg).display());
        }
        Command::Finetune { common, method } => {
            let cfg = build_config(&common)?;
            let method = FinetuneMethod::parse(&method)?;
            ensure_out_dir(&cfg)?;
            cmd_finetune(&cfg, method)?;
            println!("wrote {}", method_path(&cfg, &method.to_string()).display());
        }
        Command::Evaluate {
            common,
            checkpoint,
            tta,
        } => {
            let mut cfg = build_config(&common)?;
            if let Some(tta) = tta {
                cfg.tta = tta;
            }
            ensure_out_dir(&cfg)?;
            let checkpoints = if checkpoint.is_empty() {
                let mut found: Vec<PathBuf> = std::iter::once(baseline_path(&cfg))
                    .chain(
                        ["lscl", "scl", "random-style", "mixup", "none"]
                            .iter()
                            .map(|m| method_path(&cfg, m)),
                    )
                    .filter(|p| p.exists())
                    .collect();
                found.sort();
                if found.is_empty() {
                    return Err(LsclError::MissingInput(format!(
                        "no checkpoints under {}",
                        cfg.out_dir.display()
                    )));
                }
                found
            } else {
                checkpoint
            };
            cmd_evaluate(&cfg, &checkpoints)?;
            println!("wrote {}", cfg.out_dir.join("metrics.csv").display());
        }
        Command::Ablate { common } => {
            let cfg = build_config(&common)?;
            ensure_out_dir(&cfg)?;
            let outcome = cmd_ablate(&cfg)?;
            println!(
                "ablation finished in {:.1}s; ranking by min-max score:",
                outcome.wall_clock_secs
            );
            for s in &outcome.scores {
                println!(
                    "  {:<14} dsc_score={:.4} hd_score={:.4} minmax={:.4}",
                    s.method, s.dsc_score, s.hd_score, s.minmax_score
                );
            }
            println!("wrote {}", cfg.out_dir.join("ablation_summary.csv").display());
        }
    }
    Ok(())
}

fn exit_code(err: &LsclError) -> u8 {
    match err {
        LsclError::InvalidConfig(_)
        | LsclError::UnknownMethod { .. }
        | LsclError::GammaOutOfRange { .. } => 2,
        LsclError::MissingInput(_) | LsclError::Io { .. } | LsclError::CheckpointFormat(_) => 3,
        LsclError::NonFinite(_) => 4,
        _ => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
