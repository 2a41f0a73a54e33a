//! Command-line front end: scenario generation, experiment runs, comparison
//! tables and model scoring.
//!
//! Failures print a single JSON object to stderr and exit nonzero:
//! 1 for errors that stop the command, 2 when an experiment finished but some
//! of its runs failed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use poolsift::experiment::{
    compare_runs, comparison_csv, run_experiment, score_dataset, write_scenario, ExperimentConfig, Preset, SystemSpec,
};
use poolsift::synth::make_scenario;
use poolsift::{Algorithm, Error, Scenario64, ScorerKind};

#[derive(Parser)]
#[command(name = "poolsift", version, about = "Pool-based active learning for binary countermeasures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write every split of a synthetic scenario as dataset files.
    Generate {
        /// Experiment config; its [scenario] section picks the scenario.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = parse_preset)]
        preset: Option<Preset>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment and write its artifacts.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Base seed; repeat k uses seed + k.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run a single AL system with this scorer instead of the configured list.
        #[arg(long, value_parser = parse_scorer)]
        scorer: Option<ScorerKind>,
        /// Algorithm for --scorer, or for every configured system.
        #[arg(long, value_parser = parse_algorithm)]
        algorithm: Option<Algorithm>,
        /// Worker threads (0 = all cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Final-iteration comparison table over run or experiment directories.
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a dataset with a saved model (`uid,cm_score,label` lines).
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_scorer(s: &str) -> Result<ScorerKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_algorithm(s: &str) -> Result<Algorithm, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn system_name(scorer: ScorerKind, algorithm: Algorithm) -> String {
    let tag = match scorer {
        ScorerKind::NegEnergy => "NegE",
        ScorerKind::AdvDistance => "Adv",
        ScorerKind::Random => "Pas",
        ScorerKind::PosEnergy => "PosE",
    };
    match algorithm {
        Algorithm::Select => format!("AL_{tag}"),
        Algorithm::Remove => format!("AL_Rem_{tag}"),
    }
}

fn load_config(path: Option<&PathBuf>) -> poolsift::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

enum Failure {
    Fatal(Error),
    Partial(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Fatal(e)
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate {
            config,
            preset,
            seed,
            out,
        } => {
            let cfg = load_config(config.as_ref())?;
            let mut section = cfg.scenario.clone().unwrap_or_default();
            if let Some(p) = preset {
                section.preset = p;
                section.spec = None;
            }
            if let Some(s) = seed {
                section.seed = Some(s);
            }
            let cfg = ExperimentConfig {
                scenario: Some(section),
                data: None,
                ..cfg
            };
            let spec = cfg.scenario_spec()?;
            let scenario: Scenario64 = make_scenario(&spec)?;
            for path in write_scenario(&scenario, &out)? {
                println!("{}", path.display());
            }
            Ok(())
        }
        Command::Run {
            config,
            seed,
            out,
            scorer,
            algorithm,
            jobs,
        } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(s) = seed {
                cfg.base_seed = s;
            }
            if let Some(j) = jobs {
                cfg.jobs = j;
            }
            match (scorer, algorithm) {
                (Some(s), a) => {
                    let a = a.unwrap_or(Algorithm::Select);
                    cfg.systems = vec![SystemSpec::new(system_name(s, a), s, a)];
                }
                (None, Some(a)) => cfg.systems.iter_mut().for_each(|s| s.algorithm = a),
                (None, None) => {}
            }
            let out = out
                .or_else(|| cfg.out.clone())
                .ok_or_else(|| Error::Config("no output directory (use --out or set `out` in the config)".into()))?;
            let report = run_experiment(&cfg, &out)?;
            println!(
                "{} runs completed, {} failed; artifacts in {}",
                report.completed,
                report.failures.len(),
                out.display()
            );
            if report.failures.is_empty() {
                Ok(())
            } else {
                Err(Failure::Partial(format!(
                    "{} of {} runs failed; see {}",
                    report.failures.len(),
                    report.completed + report.failures.len(),
                    out.join("errors.jsonl").display()
                )))
            }
        }
        Command::Compare { dirs, alpha, out } => {
            let rows = compare_runs(&dirs, alpha)?;
            let table = comparison_csv(&rows);
            match out {
                Some(path) => std::fs::write(&path, table).map_err(|e| Error::Io {
                    path: path.display().to_string(),
                    source: e,
                })?,
                None => print!("{table}"),
            }
            Ok(())
        }
        Command::Score { model, data, out } => {
            let n = score_dataset(&model, &data, &out)?;
            println!("{n} trials scored into {}", out.display());
            Ok(())
        }
    }
}

fn report(kind: &str, message: &str) {
    eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => {
            report("usage", e.to_string().trim_end());
            return ExitCode::from(1);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Fatal(e)) => {
            report(e.kind(), &e.to_string());
            ExitCode::from(1)
        }
        Err(Failure::Partial(message)) => {
            report("runs_failed", &message);
            ExitCode::from(2)
        }
    }
}
