use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use draftrl::config::{TrainingConfig, ABLATIONS};
use draftrl::draft::{parse_draft_file, validate_draft};
use draftrl::env::{generate_suite, read_suite, write_suite, OperandRange, MAX_DEPTH};
use draftrl::orchestrator::{load_suites, train, Trainer};
use draftrl::reward_model::spearman;
use draftrl::run_dir::{self, RunDirError, RunLock, RunManifest, RunWriter};
use draftrl_backend::{BackendConfig, HttpGenerator};

const LOG_ENV: &str = "DRAFT_RL_LOG";

#[derive(Parser)]
#[command(name = "draftrl", version, about = "Multi-agent draft reasoning with peer evaluation and PPO")]
#[command(after_help = "Set DRAFT_RL_LOG=info (or debug, warn) for progress logs.\n\
Exit codes: 0 success, 1 invalid drafts (validate), 2 usage or config error, 3 runtime failure.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train agents, writing metrics, logs and checkpoints to a run directory.
    Train {
        /// TOML config; defaults are used for anything it leaves out.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. --set drafts_per_query=1 --set ppo.clip_epsilon=0.1
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Start from a named ablation: full, no_drafts, no_peer_eval, no_reward_model, no_cod, no_rl.
        #[arg(long)]
        ablation: Option<String>,
        /// Run directory.
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Check drafts in the `step:` / `####` wire format against the five-word rule.
    Validate {
        /// File with one or more drafts, each ended by its `####` line.
        file: PathBuf,
    },
    /// Print a CSV derived from a run directory.
    ///
    /// learning_curve: iteration,task_reward,validation_reward
    ///   task_reward is the realized reward of executed drafts; validation_reward
    ///   is blank between validation points.
    ///
    /// reward_components: stage,task,peer,coherence,diversity,combined
    ///   means over five equal stages of training.
    ///
    /// ablation_summary: run,iterations,final_stage_task_reward,final_validation_reward,
    ///   mean_diversity,final_agreement,final_specialization
    ///   one row for the run, or one per subdirectory holding a run;
    ///   final_stage_task_reward averages task over the last fifth of iterations.
    #[command(verbatim_doc_comment)]
    Export {
        run: PathBuf,
        #[arg(long)]
        kind: String,
    },
    /// Run a checkpoint over a suite without learning and print the results.
    Eval {
        run: PathBuf,
        /// Checkpoint iteration; the latest by default.
        #[arg(long)]
        iteration: Option<usize>,
        /// Suite to evaluate on; the run's validation suite by default.
        #[arg(long)]
        suite: Option<PathBuf>,
    },
    /// Write a synthetic task suite as JSONL.
    GenSuite {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        count: usize,
        #[arg(long, default_value_t = 3)]
        depth: usize,
        #[arg(long, default_value_t = 1)]
        operand_min: i64,
        #[arg(long, default_value_t = 9)]
        operand_max: i64,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<RunDirError> for Failure {
    fn from(e: RunDirError) -> Self {
        match e {
            RunDirError::Locked(_) | RunDirError::Incomplete(..) | RunDirError::UnknownKind(_) => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn load_config(path: Option<&Path>, ablation: Option<&str>, overrides: &[String]) -> Result<TrainingConfig, Failure> {
    let mut cfg = match path {
        Some(p) => TrainingConfig::load(p).map_err(usage)?,
        None => TrainingConfig::default(),
    };
    if let Some(name) = ablation {
        if !ABLATIONS.contains(&name) {
            return Err(usage(format!("unknown ablation `{name}`; expected one of {}", ABLATIONS.join(", "))));
        }
        cfg = cfg.with_ablation(name).map_err(usage)?;
    }
    cfg.with_overrides(overrides).map_err(usage)
}

fn make_trainer(cfg: &TrainingConfig) -> Result<Trainer, Failure> {
    let trainer = Trainer::new(cfg.clone()).map_err(usage)?;
    if cfg.backend.enabled {
        let backend = BackendConfig::from_settings(&cfg.backend).map_err(usage)?;
        log::info!("drafts come from {}; learning is disabled", backend.endpoint);
        Ok(trainer.with_generator(Arc::new(HttpGenerator::new(backend))))
    } else {
        Ok(trainer)
    }
}

fn cmd_train(config: Option<&Path>, overrides: &[String], ablation: Option<&str>, out: &Path) -> Result<(), Failure> {
    let cfg = load_config(config, ablation, overrides)?;
    let (train_suite, val_suite) = load_suites(&cfg, Path::new(".")).map_err(usage)?;
    let trainer = make_trainer(&cfg)?;
    let _lock = RunLock::acquire(out)?;
    let mut manifest = RunManifest::new(&cfg);
    manifest.write(out)?;
    let mut writer = RunWriter::create(out, &cfg)?;
    let result = train(trainer, &train_suite, &val_suite, Some(&mut writer));
    writer.flush()?;
    manifest.finished_unix_ms = Some(run_dir::unix_millis());
    match result {
        Ok(outcome) => {
            manifest.status = "completed".into();
            manifest.steps_to_threshold = outcome.report.steps_to_threshold;
            manifest.stopped_early = outcome.stopped_early;
            manifest.write(out)?;
            let r = &outcome.report;
            println!(
                "iterations: {}\nfinal validation reward: {:.4}\nsteps to {:.2}: {}",
                outcome.history.len(),
                r.final_mean_reward,
                r.threshold,
                r.steps_to_threshold.map_or("not reached".into(), |s| s.to_string())
            );
            Ok(())
        }
        Err(e) => {
            manifest.status = "failed".into();
            manifest.write(out)?;
            Err(runtime(e))
        }
    }
}

fn cmd_validate(file: &Path) -> Result<bool, Failure> {
    let text = fs::read_to_string(file).map_err(|e| usage(format!("{}: {e}", file.display())))?;
    let mut all_valid = true;
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let parsed = parse_draft_file(&text);
    let mut errors = Vec::new();
    for (i, (line, result)) in parsed.iter().enumerate() {
        match result {
            Err(e) => errors.push(format!("draft {} (line {line}): {e}", i + 1)),
            Ok(body) => {
                let report = validate_draft(body);
                if report.valid {
                    let _ = writeln!(out, "draft {} (line {line}): valid", i + 1);
                } else {
                    all_valid = false;
                    let _ = writeln!(out, "draft {} (line {line}): invalid", i + 1);
                    for (site, reason) in &report.violations {
                        let _ = writeln!(out, "  {site}: {reason:?}");
                    }
                }
            }
        }
    }
    if !errors.is_empty() {
        return Err(usage(errors.join("\n")));
    }
    Ok(all_valid)
}

fn cmd_eval(run: &Path, iteration: Option<usize>, suite: Option<&Path>) -> Result<(), Failure> {
    let cfg = TrainingConfig::load(&run.join("config.toml")).map_err(usage)?;
    let (iteration, agents, rm) = run_dir::load_checkpoint(run, iteration, cfg.num_agents)?;
    let suite_path = suite.map(Path::to_path_buf).unwrap_or_else(|| cfg.val_suite.clone());
    let file = fs::File::open(&suite_path).map_err(|e| usage(format!("{}: {e}", suite_path.display())))?;
    let queries = read_suite(io::BufReader::new(file)).map_err(usage)?;
    let trainer = make_trainer(&cfg)?.with_parameters(agents, rm).map_err(usage)?;
    let summary = trainer.validate(&queries).map_err(runtime)?;
    println!("checkpoint: {iteration}");
    println!("queries: {}", queries.len());
    println!("reward: {:.6}", summary.reward);
    println!("diversity: {:.6}", summary.diversity);
    println!("agreement: {:.6}", summary.agreement);
    println!("cod_valid_fraction: {:.6}", summary.cod_valid_fraction);
    match spearman(&summary.predictions) {
        Some(rho) => println!("reward_model_spearman: {rho:.6}"),
        None => println!("reward_model_spearman: undefined"),
    }
    Ok(())
}

fn cmd_gen_suite(seed: u64, count: usize, depth: usize, lo: i64, hi: i64, out: Option<&Path>) -> Result<(), Failure> {
    if depth == 0 || depth > MAX_DEPTH {
        return Err(usage(format!("depth must be in 1..={MAX_DEPTH}")));
    }
    let suite = generate_suite(seed, count, depth, OperandRange { lo, hi }).map_err(usage)?;
    match out {
        Some(path) => {
            let f = fs::File::create(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
            let mut w = BufWriter::new(f);
            write_suite(&mut w, &suite).map_err(runtime)?;
            w.flush().map_err(runtime)
        }
        None => write_suite(io::stdout().lock(), &suite).map_err(runtime),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config, overrides, ablation, out } => {
            cmd_train(config.as_deref(), overrides, ablation.as_deref(), out).map(|_| true)
        }
        Command::Validate { file } => cmd_validate(file),
        Command::Export { run, kind } => run_dir::export(run, kind).map_err(Failure::from).map(|csv| {
            print!("{csv}");
            true
        }),
        Command::Eval { run, iteration, suite } => cmd_eval(run, *iteration, suite.as_deref()).map(|_| true),
        Command::GenSuite { seed, count, depth, operand_min, operand_max, out } => {
            cmd_gen_suite(*seed, *count, *depth, *operand_min, *operand_max, out.as_deref()).map(|_| true)
        }
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
