//! Run directory layout, writers and CSV exports.
//!
//! ```text
//! run/
//!   config.toml        canonical config
//!   manifest.json      hash, version, seed, timestamps, artifact paths
//!   metrics.csv        one row per iteration
//!   losses.csv         one row per agent update
//!   timings.csv        wall-clock seconds per phase (not reproducible)
//!   events.jsonl       drafts, evaluations, selections, executions, updates
//!   checkpoints/{iter}/agent_{i}.ckpt, reward_model.ckpt
//!   run.lock           present while a process owns the directory
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::config::TrainingConfig;
use crate::orchestrator::{EventSink, IterationMetrics, LossRow, Phase, PhaseTimings, RunOutput, TrainError, Trainer};
use crate::policy::PolicyParams;
use crate::reward_model::RewardModelParams;
use crate::rl_update::ValueParams;

pub const METRICS_HEADER: &str = "iteration,mean_task_reward,task,peer,coherence,diversity,combined,agreement,specialization,cod_valid_fraction,validation_reward";
pub const LOSSES_HEADER: &str = "iteration,agent_id,ppo_loss,imitation_loss,value_loss,mean_ratio,clip_fraction";
pub const TIMINGS_HEADER: &str = "iteration,generation,evaluation,selection,execution,update";

pub const EXPORT_KINDS: [&str; 3] = ["learning_curve", "reward_components", "ablation_summary"];
pub const REWARD_COMPONENT_STAGES: usize = 5;

#[derive(Debug, Error)]
pub enum RunDirError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("run directory {0} is locked by another process (remove run.lock if stale)")]
    Locked(PathBuf),
    #[error("run directory {0} is incomplete: {1}")]
    Incomplete(PathBuf, String),
    #[error("unknown export kind `{0}`; expected one of learning_curve, reward_components, ablation_summary")]
    UnknownKind(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunDirError + '_ {
    move |source| RunDirError::Io { path: path.to_path_buf(), source }
}

pub fn unix_millis() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub started_unix_ms: u64,
    pub finished_unix_ms: Option<u64>,
    pub status: String,
    pub steps_to_threshold: Option<usize>,
    pub stopped_early: bool,
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(config: &TrainingConfig) -> Self {
        let artifacts = [
            ("config", "config.toml"),
            ("metrics", "metrics.csv"),
            ("losses", "losses.csv"),
            ("timings", "timings.csv"),
            ("events", "events.jsonl"),
            ("checkpoints", "checkpoints"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        Self {
            config_hash: config.hash(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            started_unix_ms: unix_millis(),
            finished_unix_ms: None,
            status: "running".into(),
            steps_to_threshold: None,
            stopped_early: false,
            artifacts,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), RunDirError> {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(io_err(&path))
    }

    pub fn read(dir: &Path) -> Result<Self, RunDirError> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(|e| RunDirError::Incomplete(dir.to_path_buf(), e.to_string()))
    }
}

/// Exclusive ownership of a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self, RunDirError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join("run.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(RunDirError::Locked(dir.to_path_buf())),
            Err(e) => Err(RunDirError::Io { path, source: e }),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn fmt_f(v: f64) -> String {
    format!("{v:.6}")
}

/// Streams a run's artifacts to disk.
pub struct RunWriter {
    dir: PathBuf,
    metrics: BufWriter<File>,
    losses: BufWriter<File>,
    timings: BufWriter<File>,
    events: BufWriter<File>,
    seq: u64,
}

impl RunWriter {
    /// Creates (truncating) the run files and writes `config.toml`.
    /// Checkpoints left by an earlier run in `dir` are removed.
    pub fn create(dir: &Path, config: &TrainingConfig) -> Result<Self, RunDirError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let old = dir.join("checkpoints");
        if old.is_dir() {
            fs::remove_dir_all(&old).map_err(io_err(&old))?;
        }
        let cfg_path = dir.join("config.toml");
        fs::write(&cfg_path, config.to_toml()).map_err(io_err(&cfg_path))?;
        let open = |name: &str, header: Option<&str>| -> Result<BufWriter<File>, RunDirError> {
            let path = dir.join(name);
            let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
            if let Some(h) = header {
                writeln!(w, "{h}").map_err(io_err(&path))?;
            }
            Ok(w)
        };
        Ok(Self {
            metrics: open("metrics.csv", Some(METRICS_HEADER))?,
            losses: open("losses.csv", Some(LOSSES_HEADER))?,
            timings: open("timings.csv", Some(TIMINGS_HEADER))?,
            events: open("events.jsonl", None)?,
            dir: dir.to_path_buf(),
            seq: 0,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn flush(&mut self) -> Result<(), RunDirError> {
        for w in [&mut self.metrics, &mut self.losses, &mut self.timings, &mut self.events] {
            w.flush().map_err(io_err(&self.dir))?;
        }
        Ok(())
    }
}

fn out_err(e: impl std::fmt::Display) -> TrainError {
    TrainError::Output(e.to_string())
}

impl EventSink for RunWriter {
    fn event(&mut self, iteration: usize, phase: Phase, kind: &str, data: serde_json::Value) -> Result<(), TrainError> {
        let record = json!({
            "seq": self.seq,
            "iteration": iteration,
            "phase": phase,
            "kind": kind,
            "data": data,
        });
        self.seq += 1;
        serde_json::to_writer(&mut self.events, &record).map_err(out_err)?;
        self.events.write_all(b"\n").map_err(out_err)
    }
}

impl RunOutput for RunWriter {
    fn iteration(&mut self, m: &IterationMetrics, t: &PhaseTimings, validation: Option<f64>) -> Result<(), TrainError> {
        let c = &m.components;
        let row = [
            m.iteration.to_string(),
            fmt_f(m.mean_task_reward),
            fmt_f(c.task),
            fmt_f(c.peer),
            fmt_f(c.coherence),
            fmt_f(c.diversity),
            fmt_f(c.combined),
            fmt_f(m.agreement),
            fmt_f(m.specialization),
            fmt_f(m.cod_valid_fraction),
            validation.map(fmt_f).unwrap_or_default(),
        ];
        writeln!(self.metrics, "{}", row.join(",")).map_err(out_err)?;
        writeln!(
            self.timings,
            "{},{},{},{},{},{}",
            m.iteration,
            fmt_f(t.generation),
            fmt_f(t.evaluation),
            fmt_f(t.selection),
            fmt_f(t.execution),
            fmt_f(t.update)
        )
        .map_err(out_err)
    }

    fn losses(&mut self, rows: &[LossRow]) -> Result<(), TrainError> {
        for r in rows {
            let l = &r.report;
            writeln!(
                self.losses,
                "{},{},{},{},{},{},{}",
                r.iteration,
                r.agent_id,
                fmt_f(l.ppo_loss),
                fmt_f(l.imitation_loss),
                fmt_f(l.value_loss),
                fmt_f(l.mean_ratio),
                fmt_f(l.clip_fraction)
            )
            .map_err(out_err)?;
        }
        Ok(())
    }

    fn checkpoint(&mut self, iteration: usize, trainer: &Trainer) -> Result<(), TrainError> {
        let dir = self.dir.join("checkpoints").join(iteration.to_string());
        fs::create_dir_all(&dir).map_err(out_err)?;
        for (i, a) in trainer.agents.iter().enumerate() {
            checkpoint::save_agent(&dir.join(format!("agent_{i}.ckpt")), &a.policy, &a.critic).map_err(out_err)?;
        }
        checkpoint::save_reward_model(&dir.join("reward_model.ckpt"), &trainer.reward_model).map_err(out_err)?;
        self.flush().map_err(out_err)
    }
}

pub type AgentParams = (PolicyParams, ValueParams);

/// Loads the checkpoint written at `iteration`, or the latest one.
pub fn load_checkpoint(
    run: &Path,
    iteration: Option<usize>,
    num_agents: usize,
) -> Result<(usize, Vec<AgentParams>, RewardModelParams), RunDirError> {
    let root = run.join("checkpoints");
    let iteration = match iteration {
        Some(i) => i,
        None => fs::read_dir(&root)
            .map_err(io_err(&root))?
            .filter_map(|e| e.ok()?.file_name().to_str()?.parse::<usize>().ok())
            .max()
            .ok_or_else(|| RunDirError::Incomplete(run.to_path_buf(), "no checkpoints".into()))?,
    };
    let dir = root.join(iteration.to_string());
    let agents = (0..num_agents)
        .map(|i| checkpoint::load_agent(&dir.join(format!("agent_{i}.ckpt"))))
        .collect::<Result<Vec<_>, _>>()?;
    let rm = checkpoint::load_reward_model(&dir.join("reward_model.ckpt"))?;
    Ok((iteration, agents, rm))
}

/// One parsed row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub iteration: usize,
    pub mean_task_reward: f64,
    pub task: f64,
    pub peer: f64,
    pub coherence: f64,
    pub diversity: f64,
    pub combined: f64,
    pub agreement: f64,
    pub specialization: f64,
    pub cod_valid_fraction: f64,
    pub validation_reward: Option<f64>,
}

pub fn read_metrics(run: &Path) -> Result<Vec<MetricsRow>, RunDirError> {
    let path = run.join("metrics.csv");
    if !path.is_file() {
        return Err(RunDirError::Incomplete(run.to_path_buf(), "metrics.csv is missing".into()));
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(RunDirError::Incomplete(run.to_path_buf(), "metrics.csv has an unexpected header".into()));
    }
    let bad = |n: usize| RunDirError::Incomplete(run.to_path_buf(), format!("metrics.csv line {n} is malformed"));
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 11 {
                return Err(bad(i + 2));
            }
            let num = |j: usize| f[j].parse::<f64>().map_err(|_| bad(i + 2));
            Ok(MetricsRow {
                iteration: f[0].parse().map_err(|_| bad(i + 2))?,
                mean_task_reward: num(1)?,
                task: num(2)?,
                peer: num(3)?,
                coherence: num(4)?,
                diversity: num(5)?,
                combined: num(6)?,
                agreement: num(7)?,
                specialization: num(8)?,
                cod_valid_fraction: num(9)?,
                validation_reward: if f[10].is_empty() { None } else { Some(num(10)?) },
            })
        })
        .collect()
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// `iteration,task_reward,validation_reward`; validation is blank between
/// validation points.
pub fn export_learning_curve(rows: &[MetricsRow]) -> String {
    let mut out = String::from("iteration,task_reward,validation_reward\n");
    for r in rows {
        out += &format!(
            "{},{},{}\n",
            r.iteration,
            fmt_f(r.task),
            r.validation_reward.map(fmt_f).unwrap_or_default()
        );
    }
    out
}

/// Component means over five equal contiguous stages of training (fewer
/// when there are fewer than five iterations).
pub fn export_reward_components(rows: &[MetricsRow]) -> String {
    let mut out = String::from("stage,task,peer,coherence,diversity,combined\n");
    let stages = REWARD_COMPONENT_STAGES.min(rows.len());
    for s in 0..stages {
        let lo = s * rows.len() / stages;
        let hi = (s + 1) * rows.len() / stages;
        let chunk = &rows[lo..hi];
        out += &format!(
            "{},{},{},{},{},{}\n",
            s + 1,
            fmt_f(mean(chunk.iter().map(|r| r.task))),
            fmt_f(mean(chunk.iter().map(|r| r.peer))),
            fmt_f(mean(chunk.iter().map(|r| r.coherence))),
            fmt_f(mean(chunk.iter().map(|r| r.diversity))),
            fmt_f(mean(chunk.iter().map(|r| r.combined))),
        );
    }
    out
}

/// One row per run: `run` itself when it holds metrics, otherwise each
/// immediate subdirectory that does, in name order.
pub fn export_ablation_summary(run: &Path) -> Result<String, RunDirError> {
    let mut runs: Vec<(String, PathBuf)> = Vec::new();
    if run.join("metrics.csv").is_file() {
        let name = run.file_name().and_then(|n| n.to_str()).unwrap_or(".").to_string();
        runs.push((name, run.to_path_buf()));
    } else {
        let entries = fs::read_dir(run).map_err(io_err(run))?;
        for e in entries {
            let e = e.map_err(io_err(run))?;
            let p = e.path();
            if p.join("metrics.csv").is_file() {
                runs.push((e.file_name().to_string_lossy().into_owned(), p));
            }
        }
        runs.sort();
        if runs.is_empty() {
            return Err(RunDirError::Incomplete(run.to_path_buf(), "no runs with metrics.csv found".into()));
        }
    }
    let mut out = String::from("run,iterations,final_stage_task_reward,final_validation_reward,mean_diversity,final_agreement,final_specialization\n");
    for (name, path) in runs {
        let rows = read_metrics(&path)?;
        let last = rows.last();
        let tail = &rows[rows.len() - (rows.len() / 5).max(1).min(rows.len())..];
        out += &format!(
            "{},{},{},{},{},{},{}\n",
            name,
            rows.len(),
            if tail.is_empty() { String::new() } else { fmt_f(mean(tail.iter().map(|r| r.task))) },
            rows.iter().rev().find_map(|r| r.validation_reward).map(fmt_f).unwrap_or_default(),
            fmt_f(mean(rows.iter().map(|r| r.diversity))),
            last.map(|r| fmt_f(r.agreement)).unwrap_or_default(),
            last.map(|r| fmt_f(r.specialization)).unwrap_or_default(),
        );
    }
    Ok(out)
}

pub fn export(run: &Path, kind: &str) -> Result<String, RunDirError> {
    match kind {
        "learning_curve" => Ok(export_learning_curve(&read_metrics(run)?)),
        "reward_components" => Ok(export_reward_components(&read_metrics(run)?)),
        "ablation_summary" => export_ablation_summary(run),
        other => Err(RunDirError::UnknownKind(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(iteration: usize, task: f64, val: Option<f64>) -> MetricsRow {
        MetricsRow {
            iteration,
            mean_task_reward: task,
            task,
            peer: 0.5,
            coherence: 0.5,
            diversity: 0.25,
            combined: 0.5,
            agreement: 1.0,
            specialization: 0.0,
            cod_valid_fraction: 1.0,
            validation_reward: val,
        }
    }

    #[test]
    fn reward_components_stages() {
        assert_eq!(export_reward_components(&[]), "stage,task,peer,coherence,diversity,combined\n");
        let rows: Vec<MetricsRow> = (1..=10).map(|i| row(i, i as f64 / 10.0, None)).collect();
        let csv = export_reward_components(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[1], "1,0.150000,0.500000,0.500000,0.250000,0.500000");
        assert_eq!(lines[5], "5,0.950000,0.500000,0.500000,0.250000,0.500000");
    }

    #[test]
    fn learning_curve_blanks() {
        let csv = export_learning_curve(&[row(1, 0.5, None), row(2, 0.75, Some(0.8))]);
        assert_eq!(csv, "iteration,task_reward,validation_reward\n1,0.500000,\n2,0.750000,0.800000\n");
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(RunDirError::Locked(_))));
        drop(lock);
        assert!(RunLock::acquire(dir.path()).is_ok());
    }

    #[test]
    fn unknown_kind_and_missing_metrics() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(export(dir.path(), "nope"), Err(RunDirError::UnknownKind(_))));
        assert!(matches!(export(dir.path(), "learning_curve"), Err(RunDirError::Incomplete(..))));
        assert!(matches!(export(dir.path(), "ablation_summary"), Err(RunDirError::Incomplete(..))));
    }
}
