//! `deap`: simulate, sense, reconstruct and score electrode-array maps.

mod commands;
mod config;
mod figures;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use deap_core::DeapError;

use crate::config::{Protocol, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("artifact `{id}` failed validation (expected {expected}): {reason}")]
    Artifact { id: String, expected: String, reason: String },

    #[error(transparent)]
    Core(#[from] DeapError),

    #[error("figure {path}: {reason}")]
    Figure { path: PathBuf, reason: String },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "deap", version, about = "Membrane-potential mapping from sparse electrode arrays")]
struct Cli {
    /// TOML run configuration; omitted fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker threads for parallel stages. Results do not depend on it.
    #[arg(long, global = true, env = "DEAP_THREADS")]
    threads: Option<usize>,

    /// Output root; overrides `out_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Corpus seed; overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate tissue episodes.
    Simulate {
        /// Number of episodes.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_enum)]
        protocol: Option<Protocol>,
        #[arg(long)]
        duration_ms: Option<usize>,
    },
    /// Synthesize electrograms for every simulated episode.
    Sense {
        /// Also write one CSV per recording.
        #[arg(long)]
        csv: bool,
    },
    /// Activation detection and interpolated activation-map movies.
    Baseline,
    /// Train the reconstruction network.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Reconstruct membrane-potential movies with the trained network.
    Infer {
        /// Every recording, not only the held-out test split.
        #[arg(long)]
        all: bool,
        /// Also write a movie on the full tissue grid.
        #[arg(long)]
        tissue: bool,
    },
    /// Phase, PVI, singularity and isochrone products.
    Analyze {
        /// Isochrone window start, ms from the first analyzed frame.
        #[arg(long, default_value_t = 100.0)]
        iso_start_ms: f64,
        #[arg(long, default_value_t = 150.0)]
        iso_len_ms: f64,
        #[arg(long, default_value_t = 10.0)]
        iso_step_ms: f64,
    },
    /// Score the network and the baseline against ground truth.
    Eval {
        /// Substitute ground truth for both estimates (sanity check).
        #[arg(long)]
        truth_as_estimate: bool,
        /// Every recording, not only the held-out test split.
        #[arg(long)]
        all: bool,
    },
    /// Render figures and an HTML index from existing artifacts.
    Report,
    /// Print the effective configuration as TOML.
    Config,
}

fn effective_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        config.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    match &cli.command {
        Command::Simulate { n, protocol, duration_ms } => {
            if let Some(n) = n {
                config.simulate.n_episodes = *n;
            }
            if let Some(p) = protocol {
                config.simulate.protocol = *p;
            }
            if let Some(d) = duration_ms {
                config.simulate.duration_ms = *d;
            }
        }
        Command::Train { epochs: Some(e) } => config.train.max_epochs = *e,
        _ => {}
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be > 0".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let config = effective_config(&cli)?;
    let root = config.out_dir.clone();
    match cli.command {
        Command::Simulate { .. } => commands::simulate(&config, &root),
        Command::Sense { csv } => commands::sense(&config, &root, csv),
        Command::Baseline => commands::baseline(&config, &root),
        Command::Train { .. } => commands::train(&config, &root),
        Command::Infer { all, tissue } => commands::infer(&config, &root, all, tissue),
        Command::Analyze {
            iso_start_ms,
            iso_len_ms,
            iso_step_ms,
        } => commands::analyze(&config, &root, (iso_start_ms, iso_start_ms + iso_len_ms), iso_step_ms),
        Command::Eval { truth_as_estimate, all } => commands::eval(&config, &root, truth_as_estimate, all),
        Command::Report => commands::report(&config, &root),
        Command::Config => {
            print!("{}", config.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
