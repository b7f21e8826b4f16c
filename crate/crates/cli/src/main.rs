use std::path::PathBuf;
use std::process::ExitCode;

use booknet::train::Supervision;
use booknet_cli::*;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "booknet", version, about = "Dual-page book image rectification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of distorted spreads with exact flows.
    Generate {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Generator configuration (JSON); defaults apply to missing fields.
        #[arg(long)]
        ranges: Option<PathBuf>,
        /// Render at 1200×800 instead of the configured size.
        #[arg(long)]
        full_resolution: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a generated dataset.
    Train {
        /// Training manifest.
        #[arg(long)]
        data: PathBuf,
        /// Validation manifest; the training set is used when absent.
        #[arg(long)]
        val: Option<PathBuf>,
        /// Training configuration (JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Model configuration (JSON); overrides --preset.
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "paper")]
        preset: Preset,
        /// Replace cross-page attention with the identity exchange.
        #[arg(long)]
        ablate_cross_page: bool,
        /// Predict the spread flow from the page heads without fusion.
        #[arg(long)]
        ablate_fusion: bool,
        /// Supervised flows, e.g. `l,r,f` or `f`.
        #[arg(long)]
        supervise: Option<Supervision>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, conflicts_with = "epochs")]
        steps: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Start from this checkpoint instead of a fresh initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Verify that unsupervised page heads receive zero gradient.
        #[arg(long)]
        check_isolation: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rectify one image with a trained checkpoint.
    Rectify {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Model configuration; defaults to model_config.json beside the checkpoint.
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the predicted flows as BKFL files into this directory.
        #[arg(long)]
        dump_flows: Option<PathBuf>,
    },
    /// Score rectified images against references.
    Evaluate {
        /// JSON list of pairs.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of every differentiable op and the whole model.
    Gradcheck {
        #[arg(long, value_enum, default_value = "toy")]
        scale: CheckScale,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fraction of model parameters probed in the end-to-end check.
        #[arg(long, default_value_t = 0.01)]
        fraction: f64,
        /// Deliberately break one op's backward pass.
        #[arg(long)]
        corrupt: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a freshly initialized checkpoint.
    Init {
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "paper")]
        preset: Preset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Zero the flow heads so every predicted flow is the identity.
        #[arg(long)]
        identity: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the full model and each single ablation, then compare.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        model_config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "toy")]
        preset: Preset,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(command: Command) -> Result<(), (Stage, anyhow::Error)> {
    match command {
        Command::Generate {
            count,
            seed,
            ranges,
            full_resolution,
            out,
        } => {
            let m = cmd_generate(&GenerateArgs {
                count,
                seed,
                ranges,
                full_resolution,
                out,
            })
            .map_err(|e| (Stage::Generation, e))?;
            println!(
                "generated {} samples ({} draws rejected, rate {:.3})",
                m.count,
                m.rejected,
                m.rejection_rate()
            );
        }
        Command::Train {
            data,
            val,
            config,
            model_config,
            preset,
            ablate_cross_page,
            ablate_fusion,
            supervise,
            seed,
            steps,
            epochs,
            init,
            check_isolation,
            out,
        } => {
            let (_, log) = cmd_train(&TrainArgs {
                data,
                validation: val,
                config,
                model_config,
                preset,
                ablate_cross_page,
                ablate_fusion,
                supervise,
                seed,
                steps,
                epochs,
                init,
                check_isolation,
                out,
            })
            .map_err(|e| (Stage::Training, e))?;
            let losses = log.losses();
            if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
                println!("trained {} steps: loss {first:.6} → {last:.6}", losses.len());
            }
            if let Some(e) = log.epochs().last() {
                println!("validation flow L1 {:.6}", e.val_flow_l1);
            }
        }
        Command::Rectify {
            image,
            checkpoint,
            model_config,
            out,
            dump_flows,
        } => {
            cmd_rectify(&RectifyArgs {
                image,
                checkpoint,
                model_config,
                out: out.clone(),
                dump_flows,
            })
            .map_err(|e| (Stage::Inference, e))?;
            println!("wrote {}", out.display());
        }
        Command::Evaluate { pairs, out } => {
            let report = cmd_evaluate(&pairs, &out).map_err(|e| (Stage::Evaluation, e))?;
            for s in &report.skipped {
                eprintln!("warning: skipped {}: {}", s.id, s.reason);
            }
            print!("{}", booknet::metrics::format_table(&report));
        }
        Command::Gradcheck {
            scale,
            seed,
            fraction,
            corrupt,
            out,
        } => {
            let report = cmd_gradcheck(&GradcheckArgs {
                scale,
                seed,
                fraction,
                corrupt,
                out,
            })
            .map_err(|e| (Stage::SelfCheck, e))?;
            print!("{}", report.table());
            if !report.passed {
                return Err((Stage::SelfCheck, anyhow::anyhow!("gradient check failed")));
            }
        }
        Command::Init {
            model_config,
            preset,
            seed,
            identity,
            out,
        } => {
            let path = cmd_init(&InitArgs {
                model_config,
                preset,
                seed,
                identity,
                out,
            })
            .map_err(|e| (Stage::Training, e))?;
            println!("wrote {}", path.display());
        }
        Command::Ablate {
            data,
            val,
            config,
            model_config,
            preset,
            steps,
            seed,
            out,
        } => {
            let results = cmd_ablate(&AblateArgs {
                data,
                validation: val,
                config,
                model_config,
                preset,
                steps,
                seed,
                out,
            })
            .map_err(|e| (Stage::Training, e))?;
            print!("{}", format_ablation(&results));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err((stage, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(stage.exit_code() as u8)
        }
    }
}
