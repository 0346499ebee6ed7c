//! `tips`: ingest, simulate, train, eval, ablate, analyze, print-config.
//!
//! Exit codes: 0 success, 1 user error (bad input, config, data), 2 internal
//! error. Log verbosity comes from `TIPS_LOG` (e.g. `TIPS_LOG=debug`).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use tips_core::checkpoint::{self, CheckpointInfo};
use tips_core::config::RunConfig;
use tips_core::data::{load_log, InteractionLog, LogFormat};
use tips_core::dataset::{EvalCase, TrainingData};
use tips_core::objective::Mode;
use tips_core::pipeline::{ablate, analyze_propensity, evaluate_model, load_configured_log, train_mode};
use tips_core::simulator::{simulate, unbiased_cases, OracleBundle, WorldSpec};
use tips_core::{Result, TipsError};

#[derive(Parser)]
#[command(name = "tips", version, about = "Time-aware exposure-debiased sequential recommendation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a log and print dataset statistics as JSON.
    Ingest {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Log file; overrides `data.path`.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Preset format: movielens, csv or tsv; overrides `data.format`.
        #[arg(long)]
        format: Option<String>,
    },
    /// Simulate a biased-exposure world and write its click log and
    /// evaluation-only oracle files.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one mode and write a checkpoint and training history.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `objective.mode`.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Evaluate a checkpoint; prints the metric report as JSON.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Simulator output directory: evaluate on its unbiased test set.
        #[arg(long)]
        oracle: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and compare the ablation variants under one seed.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        oracle: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Propensity gap of a checkpoint against the static estimate.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        users: usize,
        #[arg(long, default_value_t = 20)]
        bins: usize,
    },
    /// Print the default configuration.
    PrintConfig,
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| TipsError::Config(format!("{}: {e}", dir.display())))?;
        }
    }
    std::fs::write(path, body).map_err(|e| TipsError::Config(format!("{}: {e}", path.display())))
}

fn to_json(v: &impl serde::Serialize) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| TipsError::Serde(e.to_string()))
}

fn parse_format(name: &str) -> Result<LogFormat> {
    match name {
        "movielens" => Ok(LogFormat::movielens()),
        "csv" => Ok(LogFormat::csv()),
        "tsv" => Ok(LogFormat::tsv()),
        other => Err(TipsError::Config(format!("unknown format {other:?} (movielens, csv, tsv)"))),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn prepare(cfg: &RunConfig) -> Result<(InteractionLog, TrainingData)> {
    let log = load_configured_log(cfg)?;
    let data = TrainingData::from_log(&log, cfg.model.max_len)?;
    info!(
        "{} users ({} dropped), {} items, {} training instances",
        data.users.len(),
        data.dropped_users,
        data.n_items,
        data.n_instances()
    );
    Ok((log, data))
}

/// Re-creates the simulated world from its recorded spec and seed and
/// checks it reproduces the log.
fn load_oracle(dir: &Path, log: &InteractionLog) -> Result<OracleBundle> {
    let p = dir.join("evaluation_only").join("world.json");
    let text = std::fs::read_to_string(&p).map_err(|e| TipsError::Config(format!("{}: {e}", p.display())))?;
    let (spec, seed): (WorldSpec, u64) =
        serde_json::from_str(&text).map_err(|e| TipsError::Config(format!("{}: {e}", p.display())))?;
    let bundle = simulate(&spec, seed)?;
    if bundle.clicks.len() != log.len() {
        return Err(TipsError::Config(format!(
            "log has {} interactions but the world in {} produces {}",
            log.len(),
            dir.display(),
            bundle.clicks.len()
        )));
    }
    Ok(bundle)
}

fn eval_cases(log: &InteractionLog, data: &TrainingData, oracle: Option<&Path>) -> Result<Vec<EvalCase>> {
    match oracle {
        Some(dir) => {
            let bundle = load_oracle(dir, log)?;
            let (cases, skipped) = unbiased_cases(&bundle, log, data)?;
            info!("unbiased test set: {} users, {skipped} skipped", cases.len());
            Ok(cases)
        }
        None => Ok(data.test_cases()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrintConfig => {
            print!("{}", RunConfig::default().to_toml()?);
        }
        Command::Ingest { config, input, format } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(p) = input {
                cfg.data.path = Some(p);
            }
            if let Some(f) = format {
                cfg.data.format = parse_format(&f)?;
            }
            let path = cfg
                .data
                .path
                .clone()
                .ok_or_else(|| TipsError::Config("no input: pass --input or set data.path".into()))?;
            let log = load_log(&path, &cfg.data.format)?;
            let report = serde_json::json!({
                "stats": log.stats(),
                "config_hash": cfg.config_hash(),
                "seed": cfg.seed,
            });
            println!("{}", to_json(&report)?);
        }
        Command::Simulate { config, out } => {
            let cfg = load_config(config.as_deref())?;
            let bundle = simulate(&cfg.world, cfg.seed)?;
            bundle.check_consistency()?;
            bundle.write(&out)?;
            let summary = serde_json::json!({
                "clicks": bundle.clicks.len(),
                "exposures": bundle.exposures.len(),
                "interactions": out.join("interactions.tsv"),
                "config_hash": cfg.config_hash(),
                "seed": cfg.seed,
            });
            println!("{}", to_json(&summary)?);
        }
        Command::Train { config, out, mode } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(m) = mode {
                cfg.objective.mode = m.parse()?;
            }
            let (_, data) = prepare(&cfg)?;
            let mode = cfg.objective.mode;
            let (model, outcome) = train_mode(&cfg, &data, mode)?;
            let info = CheckpointInfo {
                training_hash: cfg.training_hash(),
                seed: cfg.seed,
                mode,
                model: cfg.model.clone(),
                best_epoch: outcome.best_epoch,
                best_val_hr10: outcome.best_val_hr10,
            };
            checkpoint::save(&out, &model, &info)?;
            let history = format!(
                "# config {} seed {}\n{}",
                cfg.config_hash(),
                cfg.seed,
                outcome.history_csv()
            );
            write_file(&out.join("history.csv"), &history)?;
            println!(
                "{}",
                to_json(&serde_json::json!({
                    "checkpoint": out,
                    "best_epoch": outcome.best_epoch,
                    "best_val_hr10": outcome.best_val_hr10,
                    "config_hash": cfg.config_hash(),
                    "seed": cfg.seed,
                }))?
            );
        }
        Command::Eval {
            config,
            checkpoint: dir,
            oracle,
            out,
        } => {
            let cfg = RunConfig::load(&config)?;
            let (model, manifest) = checkpoint::load(&dir, Some(&cfg.training_hash()))?;
            let (log, data) = prepare(&cfg)?;
            if manifest.n_items != data.n_items {
                return Err(TipsError::CheckpointMismatch(format!(
                    "checkpoint has {} items, data has {}",
                    manifest.n_items, data.n_items
                )));
            }
            let cases = eval_cases(&log, &data, oracle.as_deref())?;
            let report = evaluate_model(&cfg, &model, manifest.mode, &cases, data.n_items)?;
            let json = report.to_json()?;
            match out {
                Some(p) => write_file(&p, &json)?,
                None => println!("{json}"),
            }
        }
        Command::Ablate { config, oracle, out } => {
            let cfg = RunConfig::load(&config)?;
            let (log, data) = prepare(&cfg)?;
            let cases = eval_cases(&log, &data, oracle.as_deref())?;
            let table = ablate(&cfg, &data, &cases, &Mode::ABLATIONS)?;
            print!("{}", table.to_text());
            if let Some(dir) = out {
                write_file(&dir.join("ablation.txt"), &table.to_text())?;
                write_file(&dir.join("ablation.json"), &to_json(&table)?)?;
            }
        }
        Command::Analyze {
            config,
            checkpoint: dir,
            out,
            users,
            bins,
        } => {
            let cfg = RunConfig::load(&config)?;
            let (model, manifest) = checkpoint::load(&dir, Some(&cfg.training_hash()))?;
            let (_, data) = prepare(&cfg)?;
            let cases = data.test_cases();
            let analysis = analyze_propensity(&cfg, &model, manifest.mode, &data, &cases, users)?;
            write_file(&out.join("propensity_gap.json"), &to_json(&analysis)?)?;
            write_file(&out.join("propensity_gap_histogram.csv"), &analysis.histogram_csv(bins.max(1)))?;
            println!(
                "{}",
                to_json(&serde_json::json!({
                    "learned": analysis.learned,
                    "static": analysis.static_ips,
                    "learned_wins": analysis.learned_wins,
                    "config_hash": analysis.config_hash,
                    "seed": analysis.seed,
                }))?
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TIPS_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}
