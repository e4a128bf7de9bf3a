use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use nac_cli::commands::{
    cmd_eval, cmd_export_graph, cmd_prune, cmd_train, default_checkpoint, default_schedule, load_config,
};
use nac_cli::CliError;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Train,
    Eval,
    Prune,
    ExportGraph,
}

/// Train, evaluate, prune and export neural attentive circuits.
#[derive(Debug, Parser)]
#[command(name = "nac", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// TOML run config; desk defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Checkpoint to load; defaults to `checkpoint.nacc` in the output directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Link probability above which export-graph writes an edge.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Comma-separated counts of modules to drop.
    #[arg(long, value_delimiter = ',')]
    schedule: Option<Vec<usize>>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn run(args: &Args) -> Result<(), CliError> {
    let cfg = load_config(args.config.as_deref(), args.seed)?;
    let ckpt = args.checkpoint.clone().unwrap_or_else(|| default_checkpoint(&cfg));
    match args.command {
        Command::Train => {
            eprint!("effective config:\n{}", cfg.to_toml_string());
            let s = cmd_train(&cfg)?;
            println!(
                "trained {} steps, final loss {:.6}, validation accuracy {}",
                s.steps_run, s.final_loss, s.final_accuracy
            );
        }
        Command::Eval => {
            let s = cmd_eval(&cfg, &ckpt)?;
            println!("accuracy {}", s.accuracy);
            match s.l_graph {
                Some(l) => println!("l_graph {l}"),
                None => println!("l_graph n/a (conditional model)"),
            }
        }
        Command::Prune => {
            let schedule = args
                .schedule
                .clone()
                .unwrap_or_else(|| default_schedule(cfg.executor.processors));
            for r in cmd_prune(&cfg, &ckpt, &schedule)? {
                println!(
                    "dropped {:>3}  accuracy {:.4}  flops {:>10}  s/sample {:.3e}",
                    r.dropped, r.accuracy, r.flops, r.seconds_per_sample
                );
            }
        }
        Command::ExportGraph => {
            for s in cmd_export_graph(&cfg, &ckpt, args.threshold)? {
                println!(
                    "threshold {}: {} edges, degree min {} max {} mean {:.3}",
                    s.threshold, s.edges, s.min_degree, s.max_degree, s.mean_degree
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
