use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};
use mintiqa::synth::SynthConfig;
use mintiqa_cli::server::{serve, ServerConfig};
use mintiqa_cli::{
    cmd_eval, cmd_process_study, cmd_segment, cmd_split, cmd_synth, cmd_train, cmd_vqa_eval, emit_report, load_dataset,
    ProcessStudyArgs, TrainArgs,
};

/// Multi-perspective quality assessment toolkit for AI-generated images.
#[derive(Parser)]
#[command(name = "mintiqa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Screen subjective ratings and compute per-image MOS.
    ProcessStudy {
        #[arg(long, env = "MINTIQA_RATINGS")]
        ratings: PathBuf,
        /// TOML rejection policy.
        #[arg(long, env = "MINTIQA_POLICY")]
        policy: Option<PathBuf>,
        /// Manifest to copy with the new MOS.
        #[arg(long, env = "MINTIQA_MANIFEST")]
        manifest: Option<PathBuf>,
        #[arg(long, env = "MINTIQA_OUT")]
        out: PathBuf,
    },
    /// Run training stages 1, 2, 3 or all.
    Train {
        #[arg(long, env = "MINTIQA_MANIFEST")]
        manifest: PathBuf,
        /// TOML training plan.
        #[arg(long, env = "MINTIQA_CONFIG")]
        config: Option<PathBuf>,
        #[arg(long, env = "MINTIQA_STAGE", default_value = "all")]
        stage: String,
        /// Checkpoint to resume from.
        #[arg(long, env = "MINTIQA_CHECKPOINT")]
        checkpoint: Option<PathBuf>,
        #[arg(long, env = "MINTIQA_SEED")]
        seed: Option<u64>,
        #[arg(long, env = "MINTIQA_OUT")]
        out: PathBuf,
    },
    /// Correlation report of a checkpoint against MOS.
    Eval {
        #[arg(long, env = "MINTIQA_MANIFEST")]
        manifest: PathBuf,
        #[arg(long, env = "MINTIQA_CHECKPOINT")]
        checkpoint: PathBuf,
        /// Report path; stdout when absent.
        #[arg(long, env = "MINTIQA_OUT")]
        out: Option<PathBuf>,
    },
    /// Question-answering accuracy against fine-grained annotations.
    VqaEval {
        #[arg(long, env = "MINTIQA_MANIFEST")]
        manifest: PathBuf,
        #[arg(long, env = "MINTIQA_CHECKPOINT")]
        checkpoint: PathBuf,
        #[arg(long, env = "MINTIQA_OUT")]
        out: Option<PathBuf>,
    },
    /// Split a manifest by prompt into train.jsonl and test.jsonl.
    Split {
        #[arg(long, env = "MINTIQA_MANIFEST")]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        ratio: f64,
        #[arg(long, env = "MINTIQA_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "MINTIQA_OUT")]
        out: PathBuf,
    },
    /// Generate a procedural toy corpus.
    Synth {
        #[arg(long, env = "MINTIQA_OUT")]
        out: PathBuf,
        #[arg(long, default_value_t = 50)]
        n_prompts: usize,
        #[arg(long, default_value_t = 4)]
        images_per_prompt: usize,
        #[arg(long, default_value_t = 16)]
        image_size: usize,
        #[arg(long, default_value_t = 20)]
        n_annotated: usize,
        #[arg(long, env = "MINTIQA_SEED", default_value_t = 7)]
        seed: u64,
    },
    /// Add style/content/atmosphere segmentation to every prompt.
    Segment {
        #[arg(long, env = "MINTIQA_MANIFEST")]
        manifest: PathBuf,
        /// TOML endpoint configuration; rule-based segmentation when absent.
        #[arg(long, env = "MINTIQA_CONFIG")]
        config: Option<PathBuf>,
        /// Output manifest path.
        #[arg(long, env = "MINTIQA_OUT")]
        out: PathBuf,
    },
    /// Serve the annotation API and UI bundle.
    Serve {
        #[arg(long, env = "MINTIQA_MANIFEST")]
        manifest: PathBuf,
        #[arg(long, env = "MINTIQA_BIND", default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        /// Ratings log (JSON Lines, appended).
        #[arg(long, env = "MINTIQA_OUT")]
        out: PathBuf,
        #[arg(long = "static", env = "MINTIQA_STATIC")]
        static_dir: Option<PathBuf>,
        #[arg(long, env = "MINTIQA_SEED", default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::ProcessStudy {
            ratings,
            policy,
            manifest,
            out,
        } => cmd_process_study(&ProcessStudyArgs {
            ratings,
            policy,
            manifest,
            out,
        }),
        Command::Train {
            manifest,
            config,
            stage,
            checkpoint,
            seed,
            out,
        } => cmd_train(&TrainArgs {
            manifest,
            config,
            stage,
            checkpoint,
            seed,
            out,
        }),
        Command::Eval {
            manifest,
            checkpoint,
            out,
        } => emit_report(out.as_deref(), &cmd_eval(&manifest, &checkpoint)?),
        Command::VqaEval {
            manifest,
            checkpoint,
            out,
        } => emit_report(out.as_deref(), &cmd_vqa_eval(&manifest, &checkpoint)?),
        Command::Split {
            manifest,
            ratio,
            seed,
            out,
        } => cmd_split(&manifest, ratio, seed, &out),
        Command::Synth {
            out,
            n_prompts,
            images_per_prompt,
            image_size,
            n_annotated,
            seed,
        } => cmd_synth(
            &out,
            &SynthConfig {
                n_prompts,
                images_per_prompt,
                image_size,
                n_annotated,
                seed,
            },
        ),
        Command::Segment { manifest, config, out } => cmd_segment(&manifest, config.as_deref(), &out),
        Command::Serve {
            manifest,
            bind,
            out,
            static_dir,
            seed,
        } => {
            let dataset = load_dataset(&manifest)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(
                dataset,
                ServerConfig {
                    bind,
                    out,
                    static_dir,
                    seed,
                },
            ))
        }
    }
}
