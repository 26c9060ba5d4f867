use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use watchanxiety::commands;
use watchanxiety::config::ExperimentConfig;
use watchanxiety::verify::Fault;
use watchanxiety::Error;

/// State-anxiety prediction pipeline over duty-cycled smartwatch heart rate.
#[derive(Debug, Parser)]
#[command(name = "watchanxiety", version)]
struct Cli {
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Folds processed concurrently.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic study and write it as CSV files.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to `<output_dir>/data`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Extract windows and write recurrence plots plus windows.jsonl.
    Featurize {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to `<output_dir>/features`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the nested cross-validation experiment and write the report bundle.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Defaults to `<output_dir>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the oracle suite.
    Verify {
        /// Deliberately break a component to show that its oracle fails.
        #[arg(long, value_enum)]
        inject_fault: Vec<FaultArg>,
    },
    /// Re-render report.md from report.json.
    Report {
        /// Directory holding report.json.
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FaultArg {
    FocalGradient,
}

fn load_config(path: Option<&Path>, cli: &Cli) -> watchanxiety::Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(jobs) = cli.jobs {
        cfg.pipeline.jobs = jobs;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn is_input_error(e: &Error) -> bool {
    match e {
        Error::Stage { source, .. } => is_input_error(source),
        Error::MalformedRow { .. }
        | Error::UnknownScale(_)
        | Error::DuplicateTraitRow { .. }
        | Error::UnresolvableScale { .. }
        | Error::InvalidConfig(_)
        | Error::InvalidInput(_)
        | Error::SeriesTooShort { .. }
        | Error::Io { .. }
        | Error::Csv(_)
        | Error::Json(_)
        | Error::Toml(_) => true,
        _ => false,
    }
}

fn execute(cli: &Cli) -> watchanxiety::Result<bool> {
    match &cli.command {
        Command::Synth { config, out } => {
            let cfg = load_config(config.as_deref(), cli)?;
            let out = out.clone().unwrap_or_else(|| cfg.output_dir.join("data"));
            let s = commands::synth(&cfg, &out)?;
            println!(
                "wrote {} participants, {} EMAs, {} heart-rate samples to {}",
                s.participants,
                s.emas,
                s.hr_samples,
                out.display()
            );
            Ok(true)
        }
        Command::Featurize { config, out } => {
            let cfg = load_config(config.as_deref(), cli)?;
            let out = out.clone().unwrap_or_else(|| cfg.output_dir.join("features"));
            for s in commands::featurize(&cfg, &out)? {
                println!(
                    "{}: {} of {} EMAs have a window ({} degenerate) -> {}",
                    s.window,
                    s.windows,
                    s.emas,
                    s.degenerate,
                    s.dir.display()
                );
            }
            Ok(true)
        }
        Command::Run { config, out } => {
            let cfg = load_config(config.as_deref(), cli)?;
            let out = out.clone().unwrap_or_else(|| cfg.output_dir.clone());
            let bundle = commands::run(&cfg, &out)?;
            for c in &bundle.conditions {
                println!(
                    "{:>5} {:<20} n={:<5} BA {:.1}%  recall {:.1}%  specificity {:.1}%",
                    c.window,
                    c.condition,
                    c.metrics.n,
                    100.0 * c.metrics.balanced_accuracy,
                    100.0 * c.metrics.recall,
                    100.0 * c.metrics.specificity
                );
            }
            println!("leakage audit passed; report written to {}", out.display());
            Ok(true)
        }
        Command::Verify { inject_fault } => {
            let faults: BTreeSet<Fault> = inject_fault
                .iter()
                .map(|f| match f {
                    FaultArg::FocalGradient => Fault::FocalGradient,
                })
                .collect();
            let results = commands::verify(cli.seed.unwrap_or(0), &faults);
            let mut ok = true;
            for r in &results {
                for c in &r.checks {
                    ok &= c.passed;
                    println!(
                        "{} [{}] {}: worst {:.3e} (tolerance {:.0e}) {}",
                        if c.passed { "PASS" } else { "FAIL" },
                        r.oracle,
                        c.name,
                        c.worst,
                        c.tolerance,
                        c.detail
                    );
                }
            }
            Ok(ok)
        }
        Command::Report { dir } => {
            print!("{}", commands::report(dir)?);
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            if is_input_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
