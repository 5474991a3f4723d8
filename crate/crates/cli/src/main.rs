use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use feddis::runner::{compare_strategies, RunManifest};
use feddis::{Error, ExperimentConfig, Runner, Strategy};

/// Federated shape/appearance-disentangled anomaly segmentation on phantoms.
#[derive(Debug, Parser)]
#[command(name = "feddis", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Dataset operations.
    Data {
        #[command(subcommand)]
        action: DataAction,
    },
    /// Train the federation (generating data first if needed).
    Train(RunArgs),
    /// Segment the lesioned test slices.
    Segment(RunArgs),
    /// Score the segmentations and write the report.
    Evaluate(RunArgs),
    /// Every stage; same as `evaluate`.
    Run(RunArgs),
    /// Write shape, appearance and shifted-shape embeddings as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        run: RunArgs,
        /// Destination; defaults to `<out>/embeddings.csv`.
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Tabulate finished runs against a baseline.
    Compare {
        /// Run directories.
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Row label of the baseline run, e.g. `local_only`.
        #[arg(long)]
        baseline: String,
        /// Directory receiving comparison.csv and comparison.md.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
enum DataAction {
    /// Generate the phantom sites of a configuration.
    Generate(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run directory; overrides `output_dir` in the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue an interrupted training stage from its last checkpoint.
    #[arg(long)]
    resume: bool,
    /// Overrides the configuration's global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configuration's strategy.
    #[arg(long)]
    strategy: Option<Strategy>,
}

impl RunArgs {
    fn open(&self) -> feddis::Result<Runner> {
        let mut config = ExperimentConfig::from_file(&self.config)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(strategy) = self.strategy {
            config.federation.strategy = strategy;
        }
        let out = self
            .out
            .clone()
            .or_else(|| config.output_dir.clone())
            .ok_or_else(|| Error::Config("no run directory: pass --out or set output_dir".into()))?;
        let mut runner = Runner::open(config, &out)?;
        runner.set_resume(self.resume);
        Ok(runner)
    }
}

fn out_dir(runner: &Runner) -> &Path {
    &runner.manifest().root
}

fn execute(command: Command) -> feddis::Result<()> {
    match command {
        Command::Data {
            action: DataAction::Generate(args),
        } => {
            let mut r = args.open()?;
            r.data()?;
            println!("data written to {}", out_dir(&r).join("data").display());
        }
        Command::Train(args) => {
            let mut r = args.open()?;
            let state = r.train()?;
            if let Some(last) = state.history.last() {
                println!(
                    "{} rounds, final validation L_Rec {:.5}",
                    state.rounds_done(),
                    last.val_rec
                );
            }
        }
        Command::Segment(args) => {
            let mut r = args.open()?;
            r.segment()?;
            println!("masks written to {}", out_dir(&r).join("segment").display());
        }
        Command::Evaluate(args) | Command::Run(args) => {
            let mut r = args.open()?;
            let report = r.evaluate()?;
            print!("{}", report.to_markdown());
        }
        Command::ExportEmbeddings { run, file } => {
            let mut r = run.open()?;
            let path = file.unwrap_or_else(|| out_dir(&r).join("embeddings.csv"));
            let records = r.export_embeddings(&path)?;
            println!("{} embeddings written to {}", records.len(), path.display());
        }
        Command::Compare { runs, baseline, out } => {
            let manifests = runs
                .iter()
                .map(|d| RunManifest::load(d))
                .collect::<feddis::Result<Vec<_>>>()?;
            let table = compare_strategies(&manifests, &baseline)?;
            if let Some(dir) = out {
                table.write(&dir)?;
            }
            print!("{}", table.to_markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
