mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Divergence(String),
    Io(String),
    Internal(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Divergence(_) => 3,
            CliError::Io(_) => 4,
            CliError::Internal(_) => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Divergence(_) => "divergence",
            CliError::Io(_) => "io",
            CliError::Internal(_) => "internal",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Divergence(m) | CliError::Io(m) | CliError::Internal(m) => m,
        }
    }
}

impl From<metreg::Error> for CliError {
    fn from(e: metreg::Error) -> Self {
        use metreg::Error as E;
        let msg = e.to_string();
        match e {
            E::InvalidParameter(_) | E::InvalidWeights(_) | E::InvalidSpec(_) | E::Shape(_) => CliError::Config(msg),
            E::Divergence { .. } => CliError::Divergence(msg),
            E::Io(_) | E::Format(_) => CliError::Io(msg),
            E::StaleTape => CliError::Internal(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "metreg", version, about = "Registration with a learned spatially varying multi-Gaussian metric")]
struct Cli {
    /// Worker threads for per-case and per-task work.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic ring corpus.
    SynthGen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the regressor and momenta on a corpus with the two-stage schedule.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from the checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Register one pair with a frozen regressor.
    Register {
        #[arg(long)]
        theta: PathBuf,
        #[arg(long)]
        source: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare registration outputs with ground truth.
    Evaluate {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Finite-difference check of every energy term.
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    if cli.jobs == 0 {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    let jobs = cli.jobs;
    match cli.command {
        Command::SynthGen {
            out,
            n,
            seed,
            size,
            config,
        } => commands::synth_gen(&out, n, seed, size, config.as_deref(), jobs),
        Command::Train {
            corpus,
            out,
            config,
            resume,
        } => commands::train(&corpus, &out, config.as_deref(), resume, jobs),
        Command::Register {
            theta,
            source,
            target,
            out,
            config,
        } => commands::register(&theta, &source, &target, &out, config.as_deref()),
        Command::Evaluate {
            runs,
            truth,
            out,
            config,
        } => commands::evaluate(&runs, &truth, &out, config.as_deref()),
        Command::Gradcheck { size, seed, step } => commands::gradcheck(size, seed, step),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            eprintln!("MREG-E2 config: {}", e.to_string().lines().next().unwrap_or("bad arguments"));
            return ExitCode::from(2);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("MREG-E{} {}: {}", e.code(), e.kind(), e.message().replace('\n', " "));
            ExitCode::from(e.code())
        }
    }
}
