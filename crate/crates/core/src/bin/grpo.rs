use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use grpo_core::bounds::BoundMutation;
use grpo_core::harness::{self, CheckBoundsOptions, ExperimentConfig, PlotKind};
use grpo_core::{Error, Execution, Result};

/// Exact GRPO experiments on finite prompt/response spaces.
#[derive(Parser)]
#[command(name = "grpo", version)]
struct Cli {
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a TOML experiment config.
    Train {
        config: PathBuf,
        /// Override a config key, e.g. `--set trainer.learning_rate=0.1`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Search random instances for violations of the improvement bound.
    CheckBounds {
        #[arg(long, default_value_t = 10_000)]
        instances: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-9)]
        tolerance: f64,
        #[arg(long, default_value_t = 4)]
        prompts: usize,
        #[arg(long, default_value_t = 6)]
        responses: usize,
        #[arg(long, default_value_t = 1e-4)]
        var_epsilon: f64,
        /// Evaluate a deliberately corrupted bound instead.
        #[arg(long, value_enum, default_value = "none")]
        mutation: BoundMutation,
        /// Where to write replay files for counterexamples.
        #[arg(long)]
        replay_dir: Option<PathBuf>,
    },
    /// Render an SVG chart.
    Plot {
        #[arg(long, value_enum)]
        kind: PlotKind,
        #[arg(long, short)]
        out: PathBuf,
        /// Metrics files (not needed for `variance_factor`).
        files: Vec<PathBuf>,
    },
    /// Tabulate min/max/median/mean of a metric across runs.
    Compare {
        #[arg(long, default_value = "mean_reward")]
        metric: String,
        /// Also write the table here.
        #[arg(long, default_value = "comparison.txt")]
        out: PathBuf,
        dirs: Vec<PathBuf>,
    },
    /// Pass@1 of a checkpointed policy.
    Eval {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 50)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::Train {
            config,
            overrides,
            resume,
        } => {
            let cfg = ExperimentConfig::load(&config, &overrides)?;
            let out = harness::run_experiment(&cfg, resume.as_deref(), exec)?;
            println!("run directory: {}", out.dir.display());
            println!("iterations: {}", out.iterations);
            println!("final mean reward: {:.6}", out.final_reward);
            if let Some(p) = out.pass_at_1 {
                println!("final pass@1: {p:.6}");
            }
        }
        Command::CheckBounds {
            instances,
            seed,
            tolerance,
            prompts,
            responses,
            var_epsilon,
            mutation,
            replay_dir,
        } => {
            let opts = CheckBoundsOptions {
                instances,
                seed,
                tolerance,
                prompts,
                responses,
                var_epsilon,
                mutation,
                replay_dir,
            };
            let summary = harness::check_bounds(&opts, exec)?;
            println!("instances: {}", summary.instances);
            println!("min slack: {:e}", summary.min_slack);
            println!("counterexamples: {}", summary.counterexamples.len());
            for c in summary.counterexamples.iter().take(5) {
                println!(
                    "  instance {}: slack {:e}, shrunk slack {:e}",
                    c.index,
                    c.report.min_slack(),
                    c.shrunk_slack
                );
            }
            if !summary.counterexamples.is_empty() {
                return Ok(ExitCode::from(4));
            }
        }
        Command::Plot { kind, out, files } => {
            let refs: Vec<&std::path::Path> = files.iter().map(|f| f.as_path()).collect();
            harness::write_plot(kind, &refs, &out)?;
            println!("wrote {}", out.display());
        }
        Command::Compare { metric, out, dirs } => {
            let rows = harness::compare_runs(&dirs, &metric)?;
            let table = harness::format_table(&metric, &rows);
            print!("{table}");
            std::fs::write(&out, &table).map_err(|e| Error::Io {
                path: out.display().to_string(),
                source: e,
            })?;
        }
        Command::Eval {
            checkpoint,
            samples,
            seed,
        } => {
            let p = harness::run::evaluate_checkpoint(&checkpoint, samples, seed, exec)?;
            if !p.binary {
                eprintln!("warning: reward is not binary; pass@1 is reported as the sampled mean reward");
            }
            println!(
                "{}",
                serde_json::to_string_pretty(&p).map_err(|e| Error::Format(e.to_string()))?
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
