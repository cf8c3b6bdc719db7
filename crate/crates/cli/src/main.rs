use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use queue_lottery::model::ObjectiveKind;
use queue_lottery_cli::commands::{cmd_benchmark, cmd_simulate, cmd_solve, cmd_sweep};
use queue_lottery_cli::config::ExperimentConfig;
use queue_lottery_cli::{exit_code, output_dir};

#[derive(Parser)]
#[command(name = "queue-lottery", version, about = "Entry-position lotteries for virtual driver queues")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Output directory (default: config output_dir, then $QUEUE_LOTTERY_OUT/<command>)
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Seed for the GA, the lower-level starts and the simulator
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads (default: all cores)
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[arg(long, global = true, value_enum)]
    objective: Option<Objective>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Objective {
    Profit,
    Welfare,
}

#[derive(Subcommand)]
enum Command {
    /// Optimize capacities and lotteries
    Solve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Compare lottery control with FIFO dynamic and static pricing
    Benchmark {
        #[arg(long)]
        config: PathBuf,
    },
    /// Re-solve over a parameter grid
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Simulate a solved policy and check it against the analytic values
    Simulate {
        /// Directory of a previous `solve` run
        #[arg(long)]
        run: PathBuf,
        /// Simulator settings; defaults to those stored with the run
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also write one record per event
        #[arg(long)]
        event_log: bool,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    let objective = cli.objective.map(|o| match o {
        Objective::Profit => ObjectiveKind::Profit,
        Objective::Welfare => ObjectiveKind::Welfare,
    });
    let load = |path: &PathBuf| ExperimentConfig::load(path).map(|c| c.resolve(cli.seed, objective));
    let result = match &cli.command {
        Command::Solve { config } => load(config).and_then(|c| {
            cmd_solve(&c, &output_dir(cli.out.as_deref(), c.output_dir.as_deref(), "solve"))
        }),
        Command::Benchmark { config } => load(config).and_then(|c| {
            cmd_benchmark(&c, &output_dir(cli.out.as_deref(), c.output_dir.as_deref(), "benchmark"))
        }),
        Command::Sweep { config } => load(config).and_then(|c| {
            cmd_sweep(&c, &output_dir(cli.out.as_deref(), c.output_dir.as_deref(), "sweep"))
        }),
        Command::Simulate { run, config, event_log } => config
            .as_ref()
            .map(load)
            .transpose()
            .and_then(|c| {
                let out = output_dir(cli.out.as_deref(), None, "simulate");
                cmd_simulate(c.as_ref(), run, &out, *event_log)
            }),
    };
    if let Err(e) = &result {
        eprintln!("error: {e:#}");
    }
    std::process::exit(exit_code(&result));
}
