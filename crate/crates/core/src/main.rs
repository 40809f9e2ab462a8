use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lozo::bench::compare::{format_table, CompareEntry, CompareOptions, PlantedComparison};
use lozo::bench::config::{parse_config, ConfigOverrides, ExperimentConfig};
use lozo::bench::experiment::write_atomic;
use lozo::bench::verify::{verify_suite_with, Level, Mutation};
use lozo::bench::{compare_algorithms, run_experiment};
use lozo::Error;

/// Low-rank zeroth-order optimization experiments.
#[derive(Parser)]
#[command(name = "lozo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write a CSV of records plus a JSON summary.
    Run {
        /// JSON config file; flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        flags: ConfigOverrides,
    },
    /// Run the property checks and print one line per check.
    Verify {
        #[arg(long, value_enum, default_value = "fast")]
        level: Level,
        /// Inject a known defect to confirm the checks catch it.
        #[arg(long, value_enum, default_value = "none", hide = true)]
        mutate: Mutation,
    },
    /// Run several configs on the same problem and report evaluations to a target loss.
    ///
    /// Without --config, runs the planted low-rank LOZO vs ZO-SGD comparison over 10 seeds.
    Compare {
        /// Config files, one per row. The first one's problem is used for all rows.
        #[arg(long = "config", requires = "target")]
        configs: Vec<PathBuf>,
        /// Target for the trailing-10 average loss.
        #[arg(long)]
        target: Option<f64>,
        /// Write the table to this file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::DimensionMismatch { .. } => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Check(e.to_string()),
        }
    }
}

fn load(path: &PathBuf, flags: &ConfigOverrides) -> Result<ExperimentConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    parse_config(Some(&text), flags).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn emit(out: Option<PathBuf>, text: &str) -> Result<(), Failure> {
    match out {
        Some(path) => write_atomic(&path, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, flags } => {
            let cfg = match &config {
                Some(p) => load(p, &flags)?,
                None => parse_config(None, &flags)?,
            };
            let summary = run_experiment(&cfg)?;
            println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
        }
        Command::Verify { level, mutate } => {
            let report = verify_suite_with(level, mutate);
            println!("{report}");
            if !report.all_passed() {
                return Err(Failure::Check("verification failed".into()));
            }
        }
        Command::Compare { configs, target, out } => {
            if configs.is_empty() {
                let outcome = PlantedComparison::default().run()?;
                let mut table = format!(
                    "seed\tlozo_evals\trge_evals\nalpha\t{}\t{}\n",
                    outcome.lozo_alpha, outcome.rge_alpha
                );
                for s in &outcome.seeds {
                    let show = |e: Option<u64>| e.map_or("not reached".to_string(), |v| v.to_string());
                    table.push_str(&format!("{}\t{}\t{}\n", s.seed, show(s.lozo_evals), show(s.rge_evals)));
                }
                table.push_str(&format!("lozo_wins\t{}\t{}\n", outcome.lozo_wins, outcome.seeds.len()));
                return emit(out, &table);
            }
            let target = target.expect("clap requires --target with --config");
            let parsed = configs
                .iter()
                .map(|p| load(p, &ConfigOverrides::default()))
                .collect::<Result<Vec<_>, _>>()?;
            let problem = parsed[0].problem.clone();
            let entries = parsed
                .iter()
                .zip(&configs)
                .map(|(c, p)| {
                    Ok(CompareEntry {
                        label: p.file_stem().map_or_else(|| c.algo.to_string(), |s| s.to_string_lossy().into_owned()),
                        algo: c.algo,
                        config: c.optimizer_config()?,
                    })
                })
                .collect::<Result<Vec<_>, Error>>()?;
            let rows = compare_algorithms(
                &problem,
                &entries,
                target,
                CompareOptions {
                    eval_every: parsed[0].eval_every,
                    stop_at_target: false,
                },
            )?;
            emit(out, &format_table(&rows))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
