use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rlep_cli::{
    collect, gen_tasks, report, train_baseline, train_rlep, CliError, CollectArgs, GenTasksArgs, ReportArgs,
    TrainArgs, TrainRlepArgs, TrainSummary,
};

/// Experience-replay GRPO on synthetic verifiable tasks.
#[derive(Parser, Debug)]
#[command(name = "rlep", version)]
struct Cli {
    /// Worker threads for sampling and gradient work. Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a taskset file.
    GenTasks(GenTasksArgs),
    /// Train without replay.
    TrainBaseline(TrainArgs),
    /// Build an experience pool from a checkpoint.
    Collect(CollectArgs),
    /// Train with replayed successes mixed into each group.
    TrainRlep(TrainRlepArgs),
    /// Compare two run logs.
    Report(ReportArgs),
}

fn print_train(summary: &TrainSummary) {
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    let pass1 = summary.final_pass1.map_or_else(|| "n/a".to_string(), |p| format!("{p:.4}"));
    println!("trained {} steps, final eval_pass1 {pass1}", summary.steps);
    println!("log: {}", summary.log_path.display());
    println!("checkpoint: {}", summary.final_checkpoint.display());
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Validation("--workers must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Validation(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::GenTasks(args) => {
            let path = gen_tasks(&args)?;
            println!("wrote {} {} tasks to {}", args.count, args.family, path.display());
        }
        Command::TrainBaseline(args) => print_train(&train_baseline(&args)?),
        Command::TrainRlep(args) => print_train(&train_rlep(&args)?),
        Command::Collect(args) => {
            let s = collect(&args)?;
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "retained {}/{} questions ({:.1}% coverage), {} records -> {}",
                s.retained,
                s.total,
                100.0 * s.coverage(),
                s.records,
                args.out.display()
            );
        }
        Command::Report(args) => {
            let summary = report(&args)?;
            print!("{}", summary.table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
