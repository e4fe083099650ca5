//! The training loop.
//!
//! One iteration runs five phases strictly in order over a batch of queries:
//! generation, peer evaluation, reward prediction and selection, execution,
//! and updates. Work inside a phase fans out over a rayon pool, but results
//! are collected in `(query, agent, draft)` order and all reductions are
//! serial, so the thread count never changes an output bit.

use std::collections::VecDeque;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::config::{SelectionMode, TrainingConfig};
use crate::draft::{diversity, validate_draft, Draft, DraftBody, DraftRecord, DraftRef};
use crate::env::{read_suite, task_reward, EnvError, Query, TaskReward};
use crate::peer_eval::{
    aggregate, evaluate, AggregatedScores, EvaluationRecord, EvaluatorMode, EvaluatorProfile, PeerEvalError,
    PeerEvaluation, CONSTANT_SCORE, NUM_CRITERIA,
};
use crate::policy::{
    encode_draft, sample_draft, temperature_schedule, FeatureLayout, PolicyError, PolicyParams, SamplingOptions,
    StepTemplate, StrategyHint, TrajectoryRecord,
};
use crate::reward_model::{
    featurize, predict, select, update_reward_model, RewardFeatureLayout, RewardFeatures, RewardModelError,
    RewardModelParams, RewardPrediction,
};
use crate::rl_update::{combined_update, AdamW, AgentBatch, ImitationTarget, LossReport, RlError, ValueParams};
use crate::seed::{self, tag};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("task suite not found: {}", .0.display())]
    SuiteNotFound(PathBuf),
    #[error("task suite {}: {source}", path.display())]
    Suite { path: PathBuf, source: EnvError },
    #[error("query {query}, agent {agent}{}: {source}", draft.map(|k| format!(", draft {k}")).unwrap_or_default())]
    At {
        query: u64,
        agent: usize,
        draft: Option<usize>,
        source: Box<TrainError>,
    },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    PeerEval(#[from] PeerEvalError),
    #[error(transparent)]
    RewardModel(#[from] RewardModelError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error("generator failed: {0}")]
    Generator(String),
    #[error("generator returned a draft that breaks the step rule: {0:?}")]
    InvalidDraft(String),
    #[error("{0}")]
    Output(String),
}

impl TrainError {
    fn at(self, query: u64, agent: usize, draft: Option<usize>) -> Self {
        TrainError::At { query, agent, draft, source: Box::new(self) }
    }
}

/// Everything an external draft source is told about one draft slot.
pub struct GenerationRequest<'a> {
    pub agent_id: usize,
    pub draft_index: usize,
    pub query: &'a Query,
    pub history: &'a [Draft],
    pub hint: &'a StrategyHint,
    pub temperature: f64,
    pub seed: u64,
}

/// A draft source other than the built-in policy. Such sources expose no
/// log-probabilities, so learning is switched off while one is in use.
pub trait DraftGenerator: Send + Sync {
    fn generate(&self, request: &GenerationRequest<'_>) -> Result<DraftBody, String>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Generation,
    Evaluation,
    Selection,
    Execution,
    Update,
    Validation,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::Generation => "generation",
            Phase::Evaluation => "evaluation",
            Phase::Selection => "selection",
            Phase::Execution => "execution",
            Phase::Update => "update",
            Phase::Validation => "validation",
        };
        f.write_str(s)
    }
}

/// Receives the structured event stream. Events arrive in canonical order.
pub trait EventSink {
    fn event(&mut self, iteration: usize, phase: Phase, kind: &str, data: serde_json::Value) -> Result<(), TrainError>;
}

pub struct NullSink;

impl EventSink for NullSink {
    fn event(&mut self, _: usize, _: Phase, _: &str, _: serde_json::Value) -> Result<(), TrainError> {
        Ok(())
    }
}

/// Collects events in memory; handy for tests.
#[derive(Default)]
pub struct MemorySink {
    pub events: Vec<(usize, Phase, String, serde_json::Value)>,
}

impl EventSink for MemorySink {
    fn event(&mut self, iteration: usize, phase: Phase, kind: &str, data: serde_json::Value) -> Result<(), TrainError> {
        self.events.push((iteration, phase, kind.to_string(), data));
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardComponents {
    /// Realized reward of executed drafts.
    pub task: f64,
    /// Mean peer scalar of executed drafts.
    pub peer: f64,
    /// Mean peer coherence of executed drafts.
    pub coherence: f64,
    /// Mean within-agent draft diversity.
    pub diversity: f64,
    /// Mean reward-model prediction for executed drafts.
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    /// Task reward averaged over every generated draft, executed or not.
    pub mean_task_reward: f64,
    pub components: RewardComponents,
    pub agreement: f64,
    pub specialization: f64,
    pub cod_valid_fraction: f64,
    pub num_drafts: usize,
    pub num_evaluations: usize,
}

/// Wall-clock seconds per phase. Kept apart from [`IterationMetrics`] so the
/// metrics stay reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub generation: f64,
    pub evaluation: f64,
    pub selection: f64,
    pub execution: f64,
    pub update: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: usize,
    pub agent_id: usize,
    pub report: LossReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub steps_to_threshold: Option<usize>,
    pub threshold: f64,
    pub final_mean_reward: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub iteration: usize,
    pub reward: f64,
}

/// Result of running the frozen system over a suite.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSummary {
    /// Mean realized reward of each agent's selected draft.
    pub reward: f64,
    pub diversity: f64,
    pub agreement: f64,
    pub cod_valid_fraction: f64,
    /// `(predicted, realized)` for every draft generated.
    pub predictions: Vec<(f64, f64)>,
}

/// Mean over queries of the fraction of agent pairs whose selected answers
/// match. One agent agrees with itself.
pub fn agreement(answers_by_query: &[Vec<String>]) -> f64 {
    if answers_by_query.is_empty() {
        return 1.0;
    }
    let per_query = answers_by_query.iter().map(|answers| {
        let n = answers.len();
        if n < 2 {
            return 1.0;
        }
        let mut same = 0usize;
        for i in 0..n {
            for j in i + 1..n {
                if answers[i].trim() == answers[j].trim() {
                    same += 1;
                }
            }
        }
        same as f64 / (n * (n - 1) / 2) as f64
    });
    per_query.sum::<f64>() / answers_by_query.len() as f64
}

/// Mean pairwise total-variation distance between agents' winning-strategy
/// histograms. Empty histograms are treated as uniform.
pub fn specialization(histograms: &[Vec<u64>]) -> f64 {
    let n = histograms.len();
    if n < 2 {
        return 0.0;
    }
    let normalize = |h: &Vec<u64>| -> Vec<f64> {
        let total: u64 = h.iter().sum();
        if total == 0 {
            vec![1.0 / h.len().max(1) as f64; h.len()]
        } else {
            h.iter().map(|&c| c as f64 / total as f64).collect()
        }
    };
    let dists: Vec<Vec<f64>> = histograms.iter().map(normalize).collect();
    let width = dists.iter().map(Vec::len).max().unwrap_or(0);
    let at = |d: &Vec<f64>, s: usize| d.get(s).copied().unwrap_or(0.0);
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let tv: f64 = (0..width).map(|s| (at(&dists[i], s) - at(&dists[j], s)).abs()).sum::<f64>() / 2.0;
            total += tv;
        }
    }
    total / (n * (n - 1) / 2) as f64
}

/// First validation point at or above `threshold`.
pub fn convergence_steps(history: &[ValidationPoint], threshold: f64) -> ConvergenceReport {
    ConvergenceReport {
        steps_to_threshold: history.iter().find(|p| p.reward >= threshold).map(|p| p.iteration),
        threshold,
        final_mean_reward: history.last().map_or(0.0, |p| p.reward),
    }
}

/// Loads the training and validation suites named in `config`, resolving
/// relative paths against `base`.
pub fn load_suites(config: &TrainingConfig, base: &Path) -> Result<(Vec<Query>, Vec<Query>), TrainError> {
    let load = |p: &Path| -> Result<Vec<Query>, TrainError> {
        let path = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let file = std::fs::File::open(&path).map_err(|_| TrainError::SuiteNotFound(path.clone()))?;
        read_suite(std::io::BufReader::new(file)).map_err(|source| TrainError::Suite { path, source })
    };
    Ok((load(&config.suite)?, load(&config.val_suite)?))
}

pub struct AgentState {
    pub policy: PolicyParams,
    pub critic: ValueParams,
    optimizer: AdamW,
}

/// All drafts one agent produced for one query.
struct AgentDrafts {
    drafts: Vec<Draft>,
    trajectories: Vec<TrajectoryRecord>,
}

/// Everything known about one query during an iteration.
struct QueryRound<'q> {
    query: &'q Query,
    agents: Vec<AgentDrafts>,
    evaluations: Vec<PeerEvaluation>,
    /// `[agent][k]`.
    scores: Vec<Vec<AggregatedScores>>,
    features: Vec<Vec<RewardFeatures>>,
    predictions: Vec<Vec<RewardPrediction>>,
    /// Selected slot per agent.
    selected: Vec<usize>,
    global_winner: Option<DraftRef>,
    realized: Vec<TaskReward>,
}

/// Which random streams a round draws from.
#[derive(Clone, Copy)]
enum Streams {
    Train(usize),
    Validation,
}

impl Streams {
    fn generation(self, root: u64, query: u64, agent: usize, k: usize) -> u64 {
        match self {
            Streams::Train(it) => seed::derive(root, &[tag::GENERATION, it as u64, query, agent as u64, k as u64]),
            Streams::Validation => seed::derive(root, &[tag::VALIDATION, 0, query, agent as u64, k as u64]),
        }
    }

    fn evaluation(self, root: u64) -> u64 {
        match self {
            Streams::Train(it) => seed::derive(root, &[tag::EVALUATION, it as u64]),
            Streams::Validation => seed::derive(root, &[tag::VALIDATION, 1]),
        }
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub struct Trainer {
    config: TrainingConfig,
    pub agents: Vec<AgentState>,
    pub reward_model: RewardModelParams,
    replay: VecDeque<(Vec<f64>, f64)>,
    strategy_wins: Vec<Vec<u64>>,
    pool: rayon::ThreadPool,
    generator: Option<Arc<dyn DraftGenerator>>,
}

impl Trainer {
    pub fn new(config: TrainingConfig) -> Result<Self, TrainError> {
        config.validate().map_err(|e| TrainError::ConfigInvalid(e.to_string()))?;
        let k = config.drafts_per_query;
        let layout = FeatureLayout::new(k);
        let agents = (0..config.num_agents)
            .map(|i| {
                let policy = PolicyParams::with_history_prior(i, &layout, config.history_repulsion);
                let critic = ValueParams::zeros(i, layout.dim());
                let optimizer = AdamW::new(policy.num_params() + critic.num_params());
                AgentState { policy, critic, optimizer }
            })
            .collect();
        let rm_layout = RewardFeatureLayout { num_strategies: k };
        let reward_model = RewardModelParams::init(
            rm_layout.dim(),
            config.reward_model.hidden,
            seed::derive(config.seed, &[tag::INIT, 0]),
        );
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| TrainError::ConfigInvalid(format!("thread pool: {e}")))?;
        Ok(Self {
            strategy_wins: vec![vec![0; k]; config.num_agents],
            config,
            agents,
            reward_model,
            replay: VecDeque::new(),
            pool,
            generator: None,
        })
    }

    /// Routes generation through `generator` and switches learning off.
    pub fn with_generator(mut self, generator: Arc<dyn DraftGenerator>) -> Self {
        self.generator = Some(generator);
        self
    }

    /// Replaces the parameters with checkpointed ones.
    pub fn with_parameters(
        mut self,
        agents: Vec<(PolicyParams, ValueParams)>,
        reward_model: RewardModelParams,
    ) -> Result<Self, TrainError> {
        if agents.len() != self.agents.len() {
            return Err(TrainError::ConfigInvalid(format!(
                "checkpoint has {} agents, config has {}",
                agents.len(),
                self.agents.len()
            )));
        }
        for (state, (policy, critic)) in self.agents.iter_mut().zip(agents) {
            if policy.layout != state.policy.layout || critic.weights.len() != state.critic.weights.len() {
                return Err(TrainError::ConfigInvalid("checkpoint shape does not match config".into()));
            }
            state.policy = policy;
            state.critic = critic;
        }
        if reward_model.input_dim != self.reward_model.input_dim {
            return Err(TrainError::ConfigInvalid("reward model shape does not match config".into()));
        }
        self.reward_model = reward_model;
        Ok(self)
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    fn learning_enabled(&self) -> bool {
        self.config.learn && self.generator.is_none()
    }

    /// The queries used by iteration `iteration`: a seeded sample without
    /// replacement, in ascending id order.
    pub fn sample_batch<'s>(&self, suite: &'s [Query], iteration: usize) -> Vec<&'s Query> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(self.config.seed, &[tag::BATCH, iteration as u64]));
        let n = self.config.batch_size.min(suite.len());
        let mut idx = rand::seq::index::sample(&mut rng, suite.len(), n).into_vec();
        idx.sort_unstable();
        let mut batch: Vec<&Query> = idx.into_iter().map(|i| &suite[i]).collect();
        batch.sort_by_key(|q| q.id);
        batch
    }

    fn generate_for(&self, query: &Query, agent: usize, streams: Streams) -> Result<AgentDrafts, TrainError> {
        let k_total = self.config.drafts_per_query;
        let params = &self.agents[agent].policy;
        let opts = SamplingOptions {
            template: if self.config.chain_of_draft { StepTemplate::Concise } else { StepTemplate::Verbose },
            enforce_cod: self.config.chain_of_draft,
        };
        let mut drafts: Vec<Draft> = Vec::with_capacity(k_total);
        let mut trajectories = Vec::with_capacity(k_total);
        for k in 0..k_total {
            let temperature = temperature_schedule(k, k_total)?;
            let hint = StrategyHint::for_slot(k);
            let s = streams.generation(self.config.seed, query.id, agent, k);
            let wrap = |e: TrainError| e.at(query.id, agent, Some(k));
            match &self.generator {
                None => {
                    let sampled = sample_draft(params, query, &drafts, &hint, temperature, s, opts)
                        .map_err(|e| wrap(e.into()))?;
                    drafts.push(sampled.draft);
                    trajectories.push(sampled.trajectory);
                }
                Some(g) => {
                    let request = GenerationRequest {
                        agent_id: agent,
                        draft_index: k,
                        query,
                        history: &drafts,
                        hint: &hint,
                        temperature,
                        seed: s,
                    };
                    let body = g.generate(&request).map_err(|e| wrap(TrainError::Generator(e)))?;
                    if !validate_draft(&body).valid {
                        return Err(wrap(TrainError::InvalidDraft(crate::draft::render_draft(&body))));
                    }
                    let meta = crate::draft::GenerationMeta {
                        temperature,
                        strategy_id: k,
                        history_len: drafts.len(),
                        seed: s,
                    };
                    drafts.push(Draft { agent_id: agent, draft_index: k, body, meta });
                }
            }
        }
        Ok(AgentDrafts { drafts, trajectories })
    }

    fn generation_phase<'q>(&self, queries: &[&'q Query], streams: Streams) -> Result<Vec<QueryRound<'q>>, TrainError> {
        let n = self.config.num_agents;
        let items: Vec<(usize, usize)> = (0..queries.len()).flat_map(|q| (0..n).map(move |a| (q, a))).collect();
        let results: Vec<Result<AgentDrafts, TrainError>> = self.pool.install(|| {
            items
                .par_iter()
                .map(|&(q, a)| self.generate_for(queries[q], a, streams))
                .collect()
        });
        let mut results = results.into_iter();
        let mut rounds = Vec::with_capacity(queries.len());
        for query in queries {
            let agents = (0..n)
                .map(|_| results.next().expect("one result per item"))
                .collect::<Result<Vec<_>, _>>()?;
            rounds.push(QueryRound {
                query,
                agents,
                evaluations: Vec::new(),
                scores: Vec::new(),
                features: Vec::new(),
                predictions: Vec::new(),
                selected: Vec::new(),
                global_winner: None,
                realized: Vec::new(),
            });
        }
        Ok(rounds)
    }

    fn evaluation_phase(&self, rounds: &mut [QueryRound<'_>], streams: Streams) -> Result<(), TrainError> {
        let n = self.config.num_agents;
        let mode = if self.config.constant_peer_scores {
            EvaluatorMode::Constant
        } else {
            EvaluatorMode::Informative
        };
        let profile_seed = streams.evaluation(self.config.seed);
        let profiles: Vec<EvaluatorProfile> = (0..n)
            .map(|j| EvaluatorProfile::new(j, self.config.evaluator_noise, profile_seed).map(|p| p.with_mode(mode)))
            .collect::<Result<_, _>>()?;
        let evaluated: Vec<Result<(Vec<PeerEvaluation>, Vec<Vec<AggregatedScores>>), TrainError>> =
            self.pool.install(|| {
                rounds
                    .par_iter()
                    .map(|round| {
                        let mut evals = Vec::new();
                        let mut scores = Vec::with_capacity(n);
                        for (i, agent) in round.agents.iter().enumerate() {
                            let mut per_draft = Vec::with_capacity(agent.drafts.len());
                            for draft in &agent.drafts {
                                let mine: Vec<PeerEvaluation> = profiles
                                    .iter()
                                    .filter(|p| p.agent_id != i)
                                    .map(|p| evaluate(p, draft, round.query))
                                    .collect::<Result<_, _>>()
                                    .map_err(|e| TrainError::from(e).at(round.query.id, i, Some(draft.draft_index)))?;
                                // Nobody to ask: fall back to the uninformative score.
                                let agg = if mine.is_empty() {
                                    AggregatedScores { criteria: [CONSTANT_SCORE; NUM_CRITERIA], scalar: CONSTANT_SCORE }
                                } else {
                                    aggregate(&mine)?
                                };
                                per_draft.push(agg);
                                evals.extend(mine);
                            }
                            scores.push(per_draft);
                        }
                        Ok((evals, scores))
                    })
                    .collect()
            });
        for (round, result) in rounds.iter_mut().zip(evaluated) {
            let (evals, scores) = result?;
            round.evaluations = evals;
            round.scores = scores;
        }
        Ok(())
    }

    fn selection_phase(&self, rounds: &mut [QueryRound<'_>]) -> Result<(), TrainError> {
        let layout = RewardFeatureLayout { num_strategies: self.config.drafts_per_query };
        for round in rounds.iter_mut() {
            let mut all = Vec::new();
            let mut by_mode = Vec::new();
            for (i, agent) in round.agents.iter().enumerate() {
                let mut feats = Vec::with_capacity(agent.drafts.len());
                let mut preds = Vec::with_capacity(agent.drafts.len());
                for (draft, agg) in agent.drafts.iter().zip(&round.scores[i]) {
                    let wrap = |e: RewardModelError| TrainError::from(e).at(round.query.id, i, Some(draft.draft_index));
                    let f = featurize(&layout, draft, round.query, agg, &agent.drafts).map_err(wrap)?;
                    let p = predict(&self.reward_model, &f).map_err(wrap)?;
                    let key = match self.config.selection {
                        SelectionMode::RewardModel => p,
                        SelectionMode::PeerMean => RewardPrediction { draft_ref: p.draft_ref, value: agg.scalar },
                    };
                    by_mode.push(key);
                    feats.push(f);
                    preds.push(p);
                }
                let offset = by_mode.len() - preds.len();
                let choice = select(&by_mode[offset..])?;
                round.selected.push(choice.draft_index);
                all.extend_from_slice(&by_mode[offset..]);
                round.features.push(feats);
                round.predictions.push(preds);
            }
            round.global_winner = select(&all).ok();
        }
        Ok(())
    }

    fn execution_phase(&self, rounds: &mut [QueryRound<'_>]) {
        for round in rounds.iter_mut() {
            round.realized = round
                .agents
                .iter()
                .zip(&round.selected)
                .map(|(a, &k)| task_reward(&a.drafts[k].body, round.query, &self.config.reward))
                .collect();
        }
    }

    fn policy_updates(&mut self, rounds: &[QueryRound<'_>], iteration: usize) -> Result<Vec<LossRow>, TrainError> {
        let cfg = &self.config;
        let batches: Vec<Result<AgentBatch, TrainError>> = self
            .agents
            .iter()
            .enumerate()
            .map(|(i, state)| {
                let mut trajectories = Vec::new();
                let mut imitation = Vec::new();
                for round in rounds {
                    let agent = &round.agents[i];
                    let chosen = round.selected[i];
                    for (k, traj) in agent.trajectories.iter().enumerate() {
                        if cfg.selected_only && k != chosen {
                            continue;
                        }
                        let reward = if k == chosen {
                            round.realized[i].value
                        } else {
                            round.predictions[i][k].value
                        };
                        let mut traj = traj.clone();
                        for step in &mut traj.steps {
                            step.value_estimate = state.critic.predict(&step.features);
                            step.reward = 0.0;
                        }
                        if let Some(last) = traj.steps.last_mut() {
                            last.reward = reward;
                        }
                        trajectories.push(traj);
                    }
                    let selected = &agent.drafts[chosen];
                    let steps = encode_draft(
                        &state.policy.layout,
                        round.query,
                        &agent.drafts[..chosen],
                        &StrategyHint::for_slot(chosen),
                        &selected.body,
                    )
                    .map_err(|e| TrainError::from(e).at(round.query.id, i, Some(chosen)))?;
                    imitation.push(ImitationTarget { steps, temperature: selected.meta.temperature });
                }
                Ok(AgentBatch::from_trajectories(state.policy.version, &trajectories, imitation, &cfg.ppo)?)
            })
            .collect();
        let batches = batches.into_iter().collect::<Result<Vec<_>, _>>()?;

        let ppo = cfg.ppo;
        let updated: Vec<Result<_, RlError>> = self.pool.install(|| {
            self.agents
                .par_iter()
                .zip(batches.par_iter())
                .map(|(state, batch)| {
                    let mut opt = state.optimizer.clone();
                    let (p, c, reports) = combined_update(&state.policy, &state.critic, batch, &ppo, &mut opt)?;
                    Ok((p, c, opt, reports))
                })
                .collect()
        });
        let mut rows = Vec::new();
        for (i, result) in updated.into_iter().enumerate() {
            let (policy, critic, optimizer, reports) = result?;
            if !policy.is_finite() {
                return Err(RlError::NonFinite.into());
            }
            self.agents[i] = AgentState { policy, critic, optimizer };
            let last = *reports.last().expect("epochs_per_batch >= 1");
            rows.push(LossRow { iteration, agent_id: i, report: last });
        }
        Ok(rows)
    }

    fn reward_model_update(&mut self, rounds: &[QueryRound<'_>]) -> Result<(), TrainError> {
        for round in rounds {
            for (i, &k) in round.selected.iter().enumerate() {
                self.replay
                    .push_back((round.features[i][k].values.clone(), round.realized[i].value));
            }
        }
        while self.replay.len() > self.config.reward_model.replay_capacity.max(1) {
            self.replay.pop_front();
        }
        let batch: Vec<(Vec<f64>, f64)> = self.replay.iter().cloned().collect();
        for _ in 0..self.config.reward_model.steps_per_iteration {
            match update_reward_model(&self.reward_model, &batch, self.config.reward_model.learning_rate) {
                Ok((next, _)) => self.reward_model = next,
                Err(RewardModelError::NonFiniteLoss) => {
                    log::warn!("reward-model update skipped: non-finite loss");
                    break;
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    }

    /// Runs one iteration over `batch`. `iteration` selects the random
    /// streams; it is 1-based in [`train`].
    pub fn run_iteration(
        &mut self,
        batch: &[&Query],
        iteration: usize,
        sink: &mut dyn EventSink,
    ) -> Result<(IterationMetrics, PhaseTimings, Vec<LossRow>), TrainError> {
        let streams = Streams::Train(iteration);
        let mut timings = PhaseTimings::default();

        let t = Instant::now();
        let mut rounds = self.generation_phase(batch, streams)?;
        timings.generation = t.elapsed().as_secs_f64();
        for round in &rounds {
            for agent in &round.agents {
                for d in &agent.drafts {
                    let valid = validate_draft(&d.body).valid;
                    sink.event(
                        iteration,
                        Phase::Generation,
                        "draft",
                        json!({"query_id": round.query.id, "draft": DraftRecord::from(d), "cod_valid": valid}),
                    )?;
                }
            }
        }

        let t = Instant::now();
        self.evaluation_phase(&mut rounds, streams)?;
        timings.evaluation = t.elapsed().as_secs_f64();
        for round in &rounds {
            for e in &round.evaluations {
                sink.event(iteration, Phase::Evaluation, "evaluation", json!(EvaluationRecord::from(e)))?;
            }
        }

        let t = Instant::now();
        self.selection_phase(&mut rounds)?;
        timings.selection = t.elapsed().as_secs_f64();
        for round in &rounds {
            for (i, &k) in round.selected.iter().enumerate() {
                sink.event(
                    iteration,
                    Phase::Selection,
                    "selection",
                    json!({
                        "query_id": round.query.id,
                        "agent_id": i,
                        "draft_index": k,
                        "predicted": round.predictions[i][k].value,
                        "predictions": round.predictions[i].iter().map(|p| p.value).collect::<Vec<_>>(),
                    }),
                )?;
            }
            sink.event(
                iteration,
                Phase::Selection,
                "global_winner",
                json!({"query_id": round.query.id, "winner": round.global_winner}),
            )?;
        }

        let t = Instant::now();
        self.execution_phase(&mut rounds);
        timings.execution = t.elapsed().as_secs_f64();
        for round in &rounds {
            for (i, r) in round.realized.iter().enumerate() {
                sink.event(
                    iteration,
                    Phase::Execution,
                    "execution",
                    json!({
                        "query_id": round.query.id,
                        "agent_id": i,
                        "draft_index": round.selected[i],
                        "reward": r.value,
                        "answer_correct": r.answer_correct,
                        "intermediate_fraction": r.intermediate_fraction,
                    }),
                )?;
            }
        }

        // Metrics only read state that exists before the updates.
        for round in &rounds {
            for (i, &k) in round.selected.iter().enumerate() {
                self.strategy_wins[i][round.agents[i].drafts[k].meta.strategy_id] += 1;
            }
        }
        let metrics = self.metrics(iteration, &rounds)?;

        let t = Instant::now();
        let mut losses = Vec::new();
        if self.learning_enabled() {
            losses = self.policy_updates(&rounds, iteration)?;
            self.reward_model_update(&rounds)?;
        }
        timings.update = t.elapsed().as_secs_f64();
        for row in &losses {
            sink.event(iteration, Phase::Update, "policy_update", json!(row))?;
        }
        if self.learning_enabled() {
            sink.event(
                iteration,
                Phase::Update,
                "reward_model_update",
                json!({"version": self.reward_model.version, "replay": self.replay.len()}),
            )?;
        }
        Ok((metrics, timings, losses))
    }

    fn metrics(&self, iteration: usize, rounds: &[QueryRound<'_>]) -> Result<IterationMetrics, TrainError> {
        let mut all_rewards = Vec::new();
        let mut valid = 0usize;
        let mut divs = Vec::new();
        let mut answers = Vec::new();
        let mut comp = Vec::new();
        for round in rounds {
            for (i, agent) in round.agents.iter().enumerate() {
                for d in &agent.drafts {
                    all_rewards.push(task_reward(&d.body, round.query, &self.config.reward).value);
                    valid += usize::from(validate_draft(&d.body).valid);
                }
                divs.push(diversity(&agent.drafts).map_err(|e| TrainError::Output(e.to_string()))?);
                let k = round.selected[i];
                let s = &round.scores[i][k];
                comp.push((round.realized[i].value, s.scalar, s.criteria[0], round.predictions[i][k].value));
            }
            answers.push(
                round
                    .selected
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| round.agents[i].drafts[k].body.answer.clone())
                    .collect(),
            );
        }
        let num_drafts = all_rewards.len();
        Ok(IterationMetrics {
            iteration,
            mean_task_reward: mean(all_rewards),
            components: RewardComponents {
                task: mean(comp.iter().map(|c| c.0)),
                peer: mean(comp.iter().map(|c| c.1)),
                coherence: mean(comp.iter().map(|c| c.2)),
                diversity: mean(divs),
                combined: mean(comp.iter().map(|c| c.3)),
            },
            agreement: agreement(&answers),
            specialization: specialization(&self.strategy_wins),
            cod_valid_fraction: if num_drafts == 0 { 1.0 } else { valid as f64 / num_drafts as f64 },
            num_drafts,
            num_evaluations: rounds.iter().map(|r| r.evaluations.len()).sum(),
        })
    }

    /// Generates, scores and selects on `suite` with fixed streams and no
    /// learning.
    pub fn validate(&self, suite: &[Query]) -> Result<ValidationSummary, TrainError> {
        let queries: Vec<&Query> = suite.iter().collect();
        let mut rounds = self.generation_phase(&queries, Streams::Validation)?;
        self.evaluation_phase(&mut rounds, Streams::Validation)?;
        self.selection_phase(&mut rounds)?;
        self.execution_phase(&mut rounds);
        let mut predictions = Vec::new();
        let mut divs = Vec::new();
        let mut answers = Vec::new();
        let mut valid = 0usize;
        let mut total = 0usize;
        for round in &rounds {
            for (i, agent) in round.agents.iter().enumerate() {
                for (d, p) in agent.drafts.iter().zip(&round.predictions[i]) {
                    predictions.push((p.value, task_reward(&d.body, round.query, &self.config.reward).value));
                    valid += usize::from(validate_draft(&d.body).valid);
                    total += 1;
                }
                divs.push(diversity(&agent.drafts).map_err(|e| TrainError::Output(e.to_string()))?);
            }
            answers.push(
                round
                    .selected
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| round.agents[i].drafts[k].body.answer.clone())
                    .collect(),
            );
        }
        Ok(ValidationSummary {
            reward: mean(rounds.iter().flat_map(|r| r.realized.iter().map(|t| t.value))),
            diversity: mean(divs),
            agreement: agreement(&answers),
            cod_valid_fraction: if total == 0 { 1.0 } else { valid as f64 / total as f64 },
            predictions,
        })
    }
}

/// Where a training run writes its artifacts.
pub trait RunOutput: EventSink {
    fn iteration(&mut self, metrics: &IterationMetrics, timings: &PhaseTimings, validation: Option<f64>) -> Result<(), TrainError>;
    fn losses(&mut self, rows: &[LossRow]) -> Result<(), TrainError>;
    fn checkpoint(&mut self, iteration: usize, trainer: &Trainer) -> Result<(), TrainError>;
}

pub struct TrainOutcome {
    pub history: Vec<IterationMetrics>,
    pub validations: Vec<ValidationPoint>,
    pub report: ConvergenceReport,
    pub stopped_early: bool,
    pub trainer: Trainer,
}

/// Runs the configured number of iterations, validating every
/// `validation_every` iterations and stopping early on a plateau.
pub fn train(
    trainer: Trainer,
    train_suite: &[Query],
    val_suite: &[Query],
    output: Option<&mut dyn RunOutput>,
) -> Result<TrainOutcome, TrainError> {
    let mut trainer = trainer;
    let mut null = NullSink;
    let mut output = output;
    let cfg = trainer.config.clone();
    if train_suite.is_empty() && cfg.iterations > 0 {
        return Err(TrainError::ConfigInvalid("training suite is empty".into()));
    }
    let mut history = Vec::new();
    let mut validations = Vec::new();
    let mut best = f64::NEG_INFINITY;
    let mut stale = 0usize;
    let mut stopped_early = false;
    for it in 1..=cfg.iterations {
        let batch = trainer.sample_batch(train_suite, it);
        let sink: &mut dyn EventSink = match output.as_deref_mut() {
            Some(o) => o,
            None => &mut null,
        };
        let (metrics, timings, losses) = trainer.run_iteration(&batch, it, sink)?;
        let mut val = None;
        if it % cfg.validation_every == 0 && !val_suite.is_empty() {
            let summary = trainer.validate(val_suite)?;
            val = Some(summary.reward);
            validations.push(ValidationPoint { iteration: it, reward: summary.reward });
            if let Some(o) = output.as_deref_mut() {
                o.event(
                    it,
                    Phase::Validation,
                    "validation",
                    json!({"reward": summary.reward, "diversity": summary.diversity, "agreement": summary.agreement}),
                )?;
                o.checkpoint(it, &trainer)?;
            }
            if summary.reward > best {
                best = summary.reward;
                stale = 0;
            } else {
                stale += 1;
            }
        }
        if let Some(o) = output.as_deref_mut() {
            o.iteration(&metrics, &timings, val)?;
            o.losses(&losses)?;
        }
        log::info!(
            "iteration {it}: reward {:.4}, selected {:.4}{}",
            metrics.mean_task_reward,
            metrics.components.task,
            val.map(|v| format!(", validation {v:.4}")).unwrap_or_default()
        );
        history.push(metrics);
        if cfg.patience > 0 && stale >= cfg.patience {
            stopped_early = true;
            log::info!("early stop after iteration {it}: no improvement in {stale} validations");
            break;
        }
    }
    let report = convergence_steps(&validations, cfg.validation_threshold);
    Ok(TrainOutcome { history, validations, report, stopped_early, trainer })
}
