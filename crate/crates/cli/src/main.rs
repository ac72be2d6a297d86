use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use sela_cli::config::{parse_rank_scale_grid, RunConfig};
use sela_cli::run::{
    adapt_stage, eval_stage, pretrain_stage, report_stage, synth_data, AdaptRequest, Layout,
};
use sela_core::adapt::Method;
use sela_core::scenes::ScheduleMode;
use sela_core::Result;

/// Self-supervised low-rank adaptation of a speech enhancer across
/// acoustic scenes.
#[derive(Debug, Parser)]
#[command(name = "sela", version)]
struct Cli {
    /// Run configuration (TOML).
    #[arg(short, long, global = true, default_value = "sela.toml")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build the scene corpus and write it with its manifest.
    SynthData {
        /// Ingest `speech/*.wav` and `noise/<scenario>/*.wav` from this
        /// directory instead of synthesizing.
        #[arg(long)]
        wav_dir: Option<PathBuf>,
    },
    /// Train the backbone and write the checkpoint and epoch log.
    Pretrain,
    /// Adapt every scene and store trajectories and final states.
    Adapt {
        #[arg(long = "method")]
        methods: Vec<Method>,
        #[arg(long = "mode")]
        modes: Vec<ScheduleMode>,
        /// Updates per scene, overriding the config.
        #[arg(long)]
        updates: Option<usize>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Extra LoRA runs as `rank:scale` pairs, e.g. `16:1,32:1,64:1,1:64`.
        #[arg(long)]
        rank_scale_grid: Option<String>,
    },
    /// Evaluate the pretrained model and all stored runs; writes results.csv.
    Eval {
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Aggregate results.csv into the report grid.
    Report,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::read(&cli.config)?;
    let layout = Layout::new(cfg.resolved_out_dir());
    match cli.command {
        Command::SynthData { wav_dir } => {
            let manifest = synth_data(&cfg, &layout, wav_dir.as_deref())?;
            println!(
                "wrote {} scenes to {}",
                manifest.scenes.len(),
                layout.corpus().display()
            );
        }
        Command::Pretrain => {
            let out = pretrain_stage(&cfg, &layout, |e| {
                println!(
                    "epoch {:>3}  loss {:.6}  lr {:e}",
                    e.epoch, e.mean_loss, e.lr
                )
            })?;
            println!(
                "best epoch {}; checkpoint {}",
                out.best_epoch,
                layout.checkpoint().display()
            );
        }
        Command::Adapt {
            methods,
            modes,
            updates,
            jobs,
            rank_scale_grid,
        } => {
            let req = AdaptRequest {
                methods,
                modes,
                updates,
                jobs,
                rank_scale_grid: match rank_scale_grid {
                    Some(text) => parse_rank_scale_grid(&text)?,
                    None => Vec::new(),
                },
            };
            for meta in adapt_stage(&cfg, &layout, &req)? {
                let a = meta.accounting();
                println!(
                    "{:<16} {:<11} adaptable {} of {} ({:.2}%), stored {}",
                    meta.label,
                    meta.mode,
                    a.adaptable,
                    a.total,
                    a.percent(),
                    meta.stored
                );
            }
        }
        Command::Eval { jobs } => {
            let rows = eval_stage(&cfg, &layout, jobs)?;
            println!(
                "wrote {} rows to {}",
                rows.len(),
                layout.results().display()
            );
        }
        Command::Report => {
            print!("{}", report_stage(&layout)?.to_text());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
