use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use superfeat_core::{Error, RunConfig};

mod commands;

/// Super-feature retrieval pipeline on a synthetic benchmark.
///
/// Every command resolves the same configuration (file, then `--set`
/// overrides, then `--seed`) and works inside the run directory named by
/// its hash, under `$SUPERFEAT_RUN_ROOT` (default `runs`).
#[derive(Parser, Debug)]
#[command(name = "superfeat", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Dotted-key override such as `lit.templates=8`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Top-level seed, shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn resolve(&self) -> superfeat_core::Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Study {
    Losses,
    Constraints,
    Budget,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic train and eval corpora to PNG.
    GenData(Common),
    /// Fit both PCA whiteners on a freshly initialized model.
    FitWhitening(Common),
    /// Train the model; writes the checkpoint and per-epoch metrics.
    Train(Common),
    /// Fit the visual-word codebook on train-set super-features.
    FitCodebook(Common),
    /// Build the binary inverted-file index over the eval corpus.
    Index(Common),
    /// Rank the indexed images for one query.
    Search {
        #[command(flatten)]
        common: Common,
        /// Id of an eval image to use as query.
        #[arg(long, conflicts_with = "image", required_unless_present = "image")]
        query: Option<String>,
        /// PNG file to use as query.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Number of results to print.
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Query every eval image against the index and report mAP.
    Eval(Common),
    /// Attention correlation, redundancy, per-scale, match-count and heatmap diagnostics.
    Diagnose(Common),
    /// Loss, match-constraint and selection-budget ablations.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Restrict to one study; all run by default.
        #[arg(long, value_enum)]
        only: Option<Study>,
    },
    /// Print the resolved configuration and its run directory.
    ShowConfig(Common),
}

fn run(cli: Cli) -> superfeat_core::Result<()> {
    match cli.command {
        Command::GenData(c) => commands::gen_data(&c.resolve()?),
        Command::FitWhitening(c) => commands::fit_whitening(&c.resolve()?),
        Command::Train(c) => commands::train(&c.resolve()?),
        Command::FitCodebook(c) => commands::fit_codebook(&c.resolve()?),
        Command::Index(c) => commands::index(&c.resolve()?),
        Command::Search {
            common,
            query,
            image,
            top,
        } => commands::search(&common.resolve()?, query.as_deref(), image.as_deref(), top),
        Command::Eval(c) => commands::eval(&c.resolve()?),
        Command::Diagnose(c) => commands::diagnose(&c.resolve()?),
        Command::Ablate { common, only } => {
            let cfg = common.resolve()?;
            let all = only.is_none();
            if all || only == Some(Study::Losses) {
                commands::ablate_losses(&cfg)?;
            }
            if all || only == Some(Study::Constraints) {
                commands::ablate_constraints(&cfg)?;
            }
            if all || only == Some(Study::Budget) {
                commands::ablate_budget(&cfg)?;
            }
            Ok(())
        }
        Command::ShowConfig(c) => {
            let cfg = c.resolve()?;
            println!("# run directory: {}", cfg.run_dir().display());
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Config { .. }) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
