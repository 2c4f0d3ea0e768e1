use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ddmlab::commands::{cmd_experiment, cmd_gen_data, cmd_report, cmd_sample, cmd_train, RunOpts};

#[derive(Debug, Parser)]
#[command(name = "ddmlab", version, about = "Desk-scale decentralized diffusion laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON config; defaults to <out>/config.json, then built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Use the paper's sample counts.
    #[arg(long, global = true)]
    paper_n: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the clustered dataset.
    GenData,
    /// Partition the data and train experts and router.
    Train,
    /// Write sampled trajectories for each policy.
    Sample {
        /// Policy names; defaults to the config's list.
        #[arg(long, value_delimiter = ',')]
        policy: Option<Vec<String>>,
        /// Trajectories per policy.
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
    /// Run an experiment preset (or `all`).
    Experiment { name: String },
    /// Render SVG charts and a markdown summary from experiment metrics.
    Report,
}

fn fmt_metric(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-4 || v.abs() >= 1e6) {
        format!("{v:e}")
    } else {
        v.to_string()
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    let opts = RunOpts {
        config: cli.config,
        seed: cli.seed,
        out: cli.out,
        paper_n: cli.paper_n,
    };
    match cli.command {
        Command::GenData => {
            let files = cmd_gen_data(&opts)?;
            println!("wrote {} files to {}", files.len(), opts.out.display());
        }
        Command::Train => {
            let files = cmd_train(&opts)?;
            println!("trained system; wrote {} files to {}", files.len(), opts.out.display());
        }
        Command::Sample { policy, count } => {
            let files = cmd_sample(&opts, policy.as_deref(), count)?;
            println!("wrote {} trajectory files", files.len());
        }
        Command::Experiment { name } => {
            for out in cmd_experiment(&opts, &name)? {
                println!("{}", out.name);
                for (k, v) in &out.metrics {
                    println!("  {k} = {}", fmt_metric(*v));
                }
            }
        }
        Command::Report => {
            let s = cmd_report(&opts)?;
            println!("report: {} ({} charts)", s.markdown.display(), s.charts.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
