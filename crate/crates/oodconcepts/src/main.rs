use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use oodconcepts::commands;
use oodconcepts::config::RunConfig;
use oodconcepts::{CliError, Result};

#[derive(Parser)]
#[command(name = "oodconcepts", version, about = "Learn and evaluate concepts that explain an OOD detector")]
struct Cli {
    /// Run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Exact,
    Mc,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic bundle as .cft/.labels files.
    Generate,
    /// Train the classifier head.
    TrainHead,
    /// Train concepts and g; writes model.ckpt and history.csv.
    Learn,
    /// Completeness and separability of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Checkpoint to measure relative separability against.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Shapley values, pattern summaries and nearest patches.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Permutations for Monte Carlo mode.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Intervention curve over K.
    Intervene {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated K values; defaults to 0 through the concept count.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
    },
    /// eval, explain and intervene into one directory with a manifest.
    Report {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg = cfg.with_seed(s);
    }
    let Some(out) = cli.out.clone().or_else(|| cfg.out.clone()) else {
        Cli::command()
            .error(clap::error::ErrorKind::MissingRequiredArgument, "--out is required (or set `out` in the config)")
            .exit();
    };
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    match cli.command {
        Command::Generate => {
            let files = commands::generate(&cfg, &out)?;
            println!("wrote {} files to {}", files.len(), out.display());
        }
        Command::TrainHead => {
            let acc = commands::train_head_cmd(&cfg, &out)?;
            println!("head validation accuracy {acc:.4}");
        }
        Command::Learn => {
            let model = commands::learn(&cfg, &out)?;
            println!("learned {} concepts into {}", model.concepts.len(), out.join(commands::MODEL_FILE).display());
        }
        Command::Eval { checkpoint, baseline } => {
            let m = commands::eval(&cfg, &out, &checkpoint, baseline.as_deref())?;
            println!("etaClf {:.4} etaDet {:.4} jSepGlobal {:.4}", m.eta_clf, m.eta_det, m.j_sep_global);
        }
        Command::Explain { checkpoint, mode, samples } => {
            let exact = mode.map(|m| matches!(m, Mode::Exact));
            let r = commands::explain(&cfg, &out, &checkpoint, exact, samples)?;
            println!("explained {} concepts for {} targets", r.concepts, r.results.len());
        }
        Command::Intervene { checkpoint, k } => {
            let rows = commands::intervene(&cfg, &out, &checkpoint, k.as_deref())?;
            for r in rows {
                println!("K={} flips={} auroc {:.4} -> {:.4}", r.k, r.flips, r.auroc_before, r.auroc_after);
            }
        }
        Command::Report { checkpoint, baseline } => {
            let p = commands::report(&cfg, &out, &checkpoint, baseline.as_deref())?;
            println!("report manifest at {}", p.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
