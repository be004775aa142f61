use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rfdiss_cli::{
    cmd_dissim, cmd_run, cmd_synth, cmd_validate, format_report, CliError, DatasetSource, DissimConfig, RunConfig,
};

#[derive(Parser)]
#[command(name = "rfdiss", version, about = "Multi-view classification benchmarks with random-forest dissimilarities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the repeated-split protocol and write the reports.
    Run(RunArgs),
    /// Write per-view and joint dissimilarity matrices for a whole dataset.
    Dissim(DissimArgs),
    /// Check a dataset manifest and print its shape.
    Validate {
        /// Manifest path or synth:<preset>[:<seed>]
        dataset: String,
    },
    /// Write a synthetic dataset as manifest + CSV files.
    Synth {
        #[arg(long, default_value = "toy")]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// key = value file; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Manifest path or synth:<preset>[:<seed>]; repeatable.
    #[arg(long = "dataset")]
    datasets: Vec<String>,
    /// Comma-separated method ids.
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    trees: Option<usize>,
    /// Comma-separated, strictly increasing C values.
    #[arg(long)]
    c_grid: Option<String>,
    #[arg(long)]
    relief_k: Option<usize>,
    #[arg(long)]
    no_bootstrap: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct DissimArgs {
    dataset: String,
    #[arg(long)]
    view: Option<String>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    trees: usize,
    #[arg(long)]
    no_bootstrap: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run_config(args: RunArgs) -> Result<RunConfig, CliError> {
    let mut config = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    let mut overrides: Vec<(&str, String)> = Vec::new();
    if !args.datasets.is_empty() {
        overrides.push(("datasets", args.datasets.join(",")));
    }
    if let Some(v) = args.methods {
        overrides.push(("methods", v));
    }
    if let Some(v) = args.repeats {
        overrides.push(("repeats", v.to_string()));
    }
    if let Some(v) = args.train_fraction {
        overrides.push(("train-fraction", v.to_string()));
    }
    if let Some(v) = args.trees {
        overrides.push(("trees", v.to_string()));
    }
    if let Some(v) = args.c_grid {
        overrides.push(("c-grid", v));
    }
    if let Some(v) = args.relief_k {
        overrides.push(("relief-k", v.to_string()));
    }
    if args.no_bootstrap {
        overrides.push(("bootstrap", "false".into()));
    }
    if let Some(v) = args.seed {
        overrides.push(("seed", v.to_string()));
    }
    if let Some(v) = args.out {
        overrides.push(("out", v.display().to_string()));
    }
    if let Some(v) = args.jobs {
        overrides.push(("jobs", v.to_string()));
    }
    for (key, value) in overrides {
        config.set(key, &value)?;
    }
    Ok(config)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(args) => {
            let config = run_config(args)?;
            let outcome = cmd_run(&config)?;
            print!("{}", format_report(&outcome.report));
            for f in &outcome.files {
                eprintln!("wrote {}", f.display());
            }
        }
        Command::Dissim(args) => {
            let config = DissimConfig {
                dataset: DatasetSource::parse(&args.dataset)?,
                view: args.view,
                output_dir: args.out,
                num_trees: args.trees,
                bootstrap: !args.no_bootstrap,
                seed: args.seed,
            };
            for f in cmd_dissim(&config)? {
                println!("{}", f.display());
            }
        }
        Command::Validate { dataset } => {
            print!("{}", cmd_validate(&DatasetSource::parse(&dataset)?)?);
        }
        Command::Synth { preset, seed, out } => {
            println!("{}", cmd_synth(&preset, seed, &out)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
