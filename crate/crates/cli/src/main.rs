use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use pbs_cli::commands::{self, Paths};
use pbs_cli::config::{output_dir, ExperimentConfig, Overrides};
use pbs_cli::exit_code;

/// Portfolio beam search experiments on tabular ground-truth environments.
#[derive(Debug, Parser)]
#[command(name = "pbs", version)]
struct Cli {
    /// TOML experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (default: config value, then $PBS_OUTPUT_DIR, then ./pbs-out).
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Roll the behavior policy and fit the discretizer.
    GenData,
    /// Fit the count model on the generated episodes.
    Train,
    /// Plan once and dump the beam trace.
    Decode {
        /// Comma-separated real state; defaults to the most likely start state.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        state: Option<Vec<f64>>,
    },
    /// Closed-loop evaluation of every strategy over the seed list.
    Eval,
    /// Merge results files into a summary table and plot data.
    Report {
        /// Results files (default: the output directory's results.csv).
        inputs: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let config = ExperimentConfig::resolve(cli.config.as_deref(), &cli.overrides)?;
    let paths = Paths::new(output_dir(cli.output_dir.as_deref(), &config));
    match cli.command {
        Command::GenData => {
            let s = commands::gen_data(&config, &paths)?;
            println!("episodes: {}", s.episodes);
            println!("transitions: {}", s.transitions);
            println!("mean return: {:.4}", s.mean_return);
            if let Some(f) = s.risky_fraction {
                println!("risky-corridor coverage: {:.4}", f);
            }
            println!("wrote {} and {}", paths.episodes().display(), paths.discretizer().display());
        }
        Command::Train => {
            let s = commands::train(&config, &paths)?;
            println!("contexts: {} (window {})", s.contexts, s.window);
            println!("train log-likelihood per token: {:.6}", s.train_log_likelihood);
            println!("held-out log-likelihood per token: {:.6}", s.heldout_log_likelihood);
            println!("uniform log-likelihood per token: {:.6}", s.uniform_log_likelihood);
            println!("wrote {}", paths.model().display());
        }
        Command::Decode { state } => {
            let t = commands::decode(&config, &paths, state)?;
            println!("strategy: {}", t.strategy);
            println!("action: {:?}", t.action);
            println!("final beam: {} candidates", t.beam.len());
            println!("wrote {}", paths.trace().display());
        }
        Command::Eval => {
            let rows = commands::eval(&config, &paths)?;
            for r in rows.iter().filter(|r| r.row == pbs_cli::results::RowKind::Summary) {
                println!(
                    "{}: n={} mean={} std={} failed={}",
                    r.strategy,
                    r.n.unwrap_or(0),
                    r.mean.map_or("-".into(), |m| format!("{m:.4}")),
                    r.std.map_or("-".into(), |s| format!("{s:.4}")),
                    r.failed
                );
            }
            println!("wrote {}", paths.results().display());
        }
        Command::Report { inputs } => {
            let inputs = if inputs.is_empty() { vec![paths.results()] } else { inputs };
            let rows = commands::report(&inputs, &paths)?;
            for r in &rows {
                println!(
                    "{}: n={} mean={} std={}",
                    r.strategy,
                    r.n.unwrap_or(0),
                    r.mean.map_or("-".into(), |m| format!("{m:.4}")),
                    r.std.map_or("-".into(), |s| format!("{s:.4}"))
                );
            }
            println!("wrote {} and {}", paths.report().display(), paths.plot_data().display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
