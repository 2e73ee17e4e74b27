//! `stagesum` command line: one TOML config per run, artifacts under
//! `$STAGESUM_OUTPUT_ROOT` (default: the working directory).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stagesum::harness::{self, GridConfig, Run};
use stagesum::metrics::format_report;
use stagesum::train::TrainReport;

#[derive(Parser)]
#[command(
    name = "stagesum",
    version,
    about = "Multi-stage pretraining for abstractive summarization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpora a run config describes.
    Generate { config: PathBuf },
    /// Masked-token pretraining of an encoder.
    Pretrain { config: PathBuf },
    /// Train a summarizer from the configured initialization.
    Train { config: PathBuf },
    /// Train the content selector and calibrate its threshold.
    SelectTrain { config: PathBuf },
    /// Decode the dev corpus with the run's checkpoint.
    Decode { config: PathBuf },
    /// Score summaries against references.
    Eval { config: PathBuf },
    /// Every stage a run config asks for, in order.
    Run { config: PathBuf },
    /// Run an experiment grid and write its comparative report.
    Grid {
        config: PathBuf,
        /// Only print the runs the grid expands to.
        #[arg(long)]
        dry_run: bool,
    },
}

fn print_train(report: &TrainReport) {
    for e in &report.epochs {
        match e.dev_metric {
            Some(m) => println!("epoch {} loss {:.4} {} {:.4}", e.epoch, e.train_loss, report.metric, m),
            None => println!("epoch {} loss {:.4}", e.epoch, e.train_loss),
        }
    }
    println!(
        "best epoch {} {} {:.4}",
        report.best_epoch, report.metric, report.best_metric
    );
}

fn grid(path: &Path, dry_run: bool) -> stagesum::Result<()> {
    let gc = GridConfig::load(path)?;
    let grid = harness::build_grid(&gc, path.parent())?;
    if dry_run {
        for c in grid.prerequisites.iter().chain(grid.rows.iter().map(|e| &e.config)) {
            println!("{}\t{}", c.name, c.output_dir.display());
        }
        return Ok(());
    }
    let report = harness::run_grid(&grid, &harness::output_root(), &mut |m| eprintln!("{m}"))?;
    print!("{}", report.to_tsv());
    if let Some(r) = report.pearson_r {
        println!("pearson_r {r:.4}");
    }
    Ok(())
}

fn dispatch(command: Command) -> stagesum::Result<()> {
    match command {
        Command::Generate { config } => {
            for dir in harness::cmd_generate(&Run::from_file(&config)?)? {
                println!("{}", dir.display());
            }
        }
        Command::Pretrain { config } => print_train(&harness::cmd_pretrain(&Run::from_file(&config)?)?),
        Command::Train { config } => print_train(&harness::cmd_train(&Run::from_file(&config)?)?),
        Command::SelectTrain { config } => {
            print!(
                "{}",
                format_report(&harness::cmd_select_train(&Run::from_file(&config)?)?)
            );
        }
        Command::Decode { config } => {
            for line in harness::cmd_decode(&Run::from_file(&config)?)? {
                println!("{line}");
            }
        }
        Command::Eval { config } => print!("{}", format_report(&harness::cmd_eval(&Run::from_file(&config)?)?)),
        Command::Run { config } => {
            let run = Run::from_file(&config)?;
            harness::run_pipeline(&run)?;
            println!("{}", run.dir().display());
        }
        Command::Grid { config, dry_run } => grid(&config, dry_run)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
