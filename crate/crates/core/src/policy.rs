//! Per-agent stochastic draft policy.
//!
//! At each chain position the policy picks one of [`NUM_CANDIDATES`]
//! candidate values centred on the true intermediate (offsets `-4..=4`).
//! The choice is a softmax over a linear function of hand-built state
//! features, divided by the draft's sampling temperature. Because every
//! draft is a short sequence of categorical choices, log-probabilities and
//! their gradients are exact and cheap.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::draft::{validate_draft, Draft, DraftBody, DraftRef, GenerationMeta, ReasoningStep};
use crate::env::{declared_value, integer_literals, Op, Query, MAX_DEPTH, OPERAND_MAX, OPERAND_MIN};

/// Candidate values span `truth - WINDOW ..= truth + WINDOW`.
pub const WINDOW: i64 = 4;
pub const NUM_CANDIDATES: usize = (2 * WINDOW + 1) as usize;

const VALUE_BUCKETS: usize = 5;
const NUM_OPERANDS: usize = (OPERAND_MAX - OPERAND_MIN + 1) as usize;
const MAX_RESAMPLES: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("draft slot {k} out of range for {count} drafts")]
    BadIndex { k: usize, count: usize },
    #[error("step {step} declares a value outside the candidate window")]
    OutOfSupport { step: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("no CoD-valid draft after {0} resamples")]
    CodRejected(usize),
}

/// Temperature for draft slot `k` of `count`: an inclusive linear grid over
/// `[0.2, 0.8]`, or the midpoint when there is a single slot.
pub fn temperature_schedule(k: usize, count: usize) -> Result<f64, PolicyError> {
    if k >= count {
        return Err(PolicyError::BadIndex { k, count });
    }
    if count == 1 {
        return Ok(0.5);
    }
    Ok(0.2 + 0.6 * k as f64 / (count - 1) as f64)
}

/// Strategic guidance for one draft slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyHint {
    pub strategy_id: usize,
    pub description: String,
}

const STRATEGIES: [&str; 5] = [
    "work forward one operation at a time",
    "double-check each operation before moving on",
    "estimate the magnitude first, then refine",
    "recompute from the start value independently",
    "take a different route than earlier drafts",
];

impl StrategyHint {
    pub fn for_slot(k: usize) -> Self {
        let base = STRATEGIES[k % STRATEGIES.len()];
        let description = if k < STRATEGIES.len() {
            base.to_owned()
        } else {
            format!("{base} (variant {})", k / STRATEGIES.len())
        };
        Self { strategy_id: k, description }
    }
}

/// How a chosen value is rendered as step text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepTemplate {
    /// `apply add 4 get 7`, exactly five words.
    #[default]
    Concise,
    /// `apply the add 4 to get 7`, seven words; only for the no-CoD ablation.
    Verbose,
}

impl StepTemplate {
    pub fn render(self, op: Op, operand: i64, value: i64) -> String {
        match self {
            StepTemplate::Concise => format!("apply {op} {operand} get {value}"),
            StepTemplate::Verbose => format!("apply the {op} {operand} to get {value}"),
        }
    }
}

/// Layout of the per-step state vector:
///
/// | slice | meaning |
/// |---|---|
/// | 1 | position / 8 |
/// | 3 | operator one-hot |
/// | 9 | operand one-hot |
/// | 5 | bucket of the previously declared value |
/// | K | strategy one-hot |
/// | 9 | per-offset counts of earlier drafts' choices at this position |
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub num_strategies: usize,
}

impl FeatureLayout {
    pub fn new(num_strategies: usize) -> Self {
        Self { num_strategies }
    }

    pub fn dim(&self) -> usize {
        1 + Op::ALL.len() + NUM_OPERANDS + VALUE_BUCKETS + self.num_strategies + NUM_CANDIDATES
    }

    fn strategy_offset(&self) -> usize {
        1 + Op::ALL.len() + NUM_OPERANDS + VALUE_BUCKETS
    }

    pub fn history_offset(&self) -> usize {
        self.strategy_offset() + self.num_strategies
    }
}

fn value_bucket(v: i64) -> usize {
    match v {
        i64::MIN..=-1 => 0,
        0..=9 => 1,
        10..=99 => 2,
        100..=999 => 3,
        _ => 4,
    }
}

/// Builds the state vector for chain position `t`.
pub fn step_features(
    layout: &FeatureLayout,
    query: &Query,
    t: usize,
    prev_value: i64,
    hint: &StrategyHint,
    history_counts: &[f64; NUM_CANDIDATES],
) -> Result<Vec<f64>, PolicyError> {
    if hint.strategy_id >= layout.num_strategies {
        return Err(PolicyError::DimensionMismatch {
            expected: layout.num_strategies,
            got: hint.strategy_id + 1,
        });
    }
    let (op, operand) = query.payload.ops[t];
    let mut x = vec![0.0; layout.dim()];
    x[0] = t as f64 / MAX_DEPTH as f64;
    x[1 + op.index()] = 1.0;
    let operand_idx = (operand.clamp(OPERAND_MIN, OPERAND_MAX) - OPERAND_MIN) as usize;
    x[1 + Op::ALL.len() + operand_idx] = 1.0;
    x[1 + Op::ALL.len() + NUM_OPERANDS + value_bucket(prev_value)] = 1.0;
    x[layout.strategy_offset() + hint.strategy_id] = 1.0;
    x[layout.history_offset()..].copy_from_slice(history_counts);
    Ok(x)
}

/// Counts, per candidate offset, how many earlier drafts chose it at `t`.
pub fn history_counts(history: &[Draft], t: usize, truth_t: i64) -> [f64; NUM_CANDIDATES] {
    let mut counts = [0.0; NUM_CANDIDATES];
    for h in history {
        if let Some(v) = h.body.steps.get(t).and_then(|s| declared_value(s.text())) {
            let offset = v - truth_t;
            if offset.abs() <= WINDOW {
                counts[(offset + WINDOW) as usize] += 1.0;
            }
        }
    }
    counts
}

/// Linear softmax policy parameters for one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub agent_id: usize,
    pub layout: FeatureLayout,
    /// Row-major `[layout.dim()][NUM_CANDIDATES]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub version: u64,
}

impl PolicyParams {
    pub fn zeros(agent_id: usize, layout: &FeatureLayout) -> Self {
        Self {
            agent_id,
            layout: *layout,
            weights: vec![0.0; layout.dim() * NUM_CANDIDATES],
            bias: vec![0.0; NUM_CANDIDATES],
            version: 0,
        }
    }

    /// Zero weights except a repulsive prior on the history features: an
    /// offset already chosen `n` times by earlier drafts starts with its logit
    /// lowered by `n * repulsion`.
    pub fn with_history_prior(agent_id: usize, layout: &FeatureLayout, repulsion: f64) -> Self {
        let mut p = Self::zeros(agent_id, layout);
        let h0 = layout.history_offset();
        for c in 0..NUM_CANDIDATES {
            p.weights[(h0 + c) * NUM_CANDIDATES + c] = -repulsion;
        }
        p
    }

    pub fn feature_dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Weights then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.weights.clone();
        v.extend_from_slice(&self.bias);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let (w, b) = flat.split_at(self.weights.len());
        self.weights.copy_from_slice(w);
        self.bias.copy_from_slice(b);
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), PolicyError> {
        if x.len() != self.feature_dim() {
            return Err(PolicyError::DimensionMismatch {
                expected: self.feature_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn logits(&self, x: &[f64]) -> [f64; NUM_CANDIDATES] {
        let mut z = [0.0; NUM_CANDIDATES];
        z.copy_from_slice(&self.bias);
        for (f, &xf) in x.iter().enumerate() {
            if xf == 0.0 {
                continue;
            }
            let row = &self.weights[f * NUM_CANDIDATES..(f + 1) * NUM_CANDIDATES];
            for (zc, w) in z.iter_mut().zip(row) {
                *zc += xf * w;
            }
        }
        z
    }

    /// Softmax of `logits / temperature`.
    pub fn distribution(&self, x: &[f64], temperature: f64) -> [f64; NUM_CANDIDATES] {
        let z = self.logits(x);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut p = [0.0; NUM_CANDIDATES];
        let mut total = 0.0;
        for (pc, zc) in p.iter_mut().zip(z) {
            *pc = ((zc - max) / temperature).exp();
            total += *pc;
        }
        p.iter_mut().for_each(|pc| *pc /= total);
        p
    }

    pub fn step_log_prob(&self, x: &[f64], action: usize, temperature: f64) -> f64 {
        let z = self.logits(x);
        let scaled: Vec<f64> = z.iter().map(|v| v / temperature).collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scaled.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        scaled[action] - lse
    }

    /// Adds `scale * d log pi(action | x) / d theta` into `grad` (flat layout).
    pub fn accumulate_step_grad(
        &self,
        x: &[f64],
        action: usize,
        temperature: f64,
        scale: f64,
        grad: &mut [f64],
    ) {
        let p = self.distribution(x, temperature);
        let mut delta = [0.0; NUM_CANDIDATES];
        for c in 0..NUM_CANDIDATES {
            let indicator = if c == action { 1.0 } else { 0.0 };
            delta[c] = scale * (indicator - p[c]) / temperature;
        }
        for (f, &xf) in x.iter().enumerate() {
            if xf == 0.0 {
                continue;
            }
            let row = &mut grad[f * NUM_CANDIDATES..(f + 1) * NUM_CANDIDATES];
            for (g, d) in row.iter_mut().zip(&delta) {
                *g += xf * d;
            }
        }
        let b0 = self.weights.len();
        for (g, d) in grad[b0..].iter_mut().zip(&delta) {
            *g += d;
        }
    }
}

/// One step of a sampled trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSample {
    pub features: Vec<f64>,
    pub action: usize,
    pub log_prob: f64,
    pub value_estimate: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub draft_ref: DraftRef,
    pub temperature: f64,
    pub policy_version: u64,
    pub steps: Vec<StepSample>,
}

impl TrajectoryRecord {
    pub fn total_log_prob(&self) -> f64 {
        self.steps.iter().map(|s| s.log_prob).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledDraft {
    pub draft: Draft,
    pub trajectory: TrajectoryRecord,
}

/// Everything `sample_draft` needs besides parameters.
#[derive(Debug, Clone, Copy)]
pub struct SamplingOptions {
    pub template: StepTemplate,
    /// Reject and resample drafts that break the five-word rule.
    pub enforce_cod: bool,
}

impl Default for SamplingOptions {
    fn default() -> Self {
        Self { template: StepTemplate::Concise, enforce_cod: true }
    }
}

fn sample_categorical(p: &[f64; NUM_CANDIDATES], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, pc) in p.iter().enumerate() {
        acc += pc;
        if u < acc {
            return c;
        }
    }
    NUM_CANDIDATES - 1
}

/// Samples one draft for `query`, conditioned on this agent's earlier drafts
/// and the strategy hint for this slot.
pub fn sample_draft(
    params: &PolicyParams,
    query: &Query,
    history: &[Draft],
    hint: &StrategyHint,
    temperature: f64,
    seed: u64,
    opts: SamplingOptions,
) -> Result<SampledDraft, PolicyError> {
    let layout = &params.layout;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = query.intermediates();
    for _ in 0..MAX_RESAMPLES {
        let mut steps = Vec::with_capacity(truth.len());
        let mut samples = Vec::with_capacity(truth.len());
        let mut prev = query.payload.start;
        for (t, &truth_t) in truth.iter().enumerate() {
            let counts = history_counts(history, t, truth_t);
            let x = step_features(layout, query, t, prev, hint, &counts)?;
            params.check_dim(&x)?;
            let p = params.distribution(&x, temperature);
            let action = sample_categorical(&p, &mut rng);
            let value = truth_t + action as i64 - WINDOW;
            let (op, operand) = query.payload.ops[t];
            let text = opts.template.render(op, operand, value);
            steps.push(ReasoningStep::new(&text).expect("templates have no newlines"));
            let log_prob = params.step_log_prob(&x, action, temperature);
            samples.push(StepSample {
                features: x,
                action,
                log_prob,
                value_estimate: 0.0,
                reward: 0.0,
            });
            prev = value;
        }
        let body = DraftBody::new(steps, prev.to_string());
        if opts.enforce_cod && !validate_draft(&body).valid {
            continue;
        }
        let draft = Draft {
            agent_id: params.agent_id,
            draft_index: hint.strategy_id,
            body,
            meta: GenerationMeta {
                temperature,
                strategy_id: hint.strategy_id,
                history_len: history.len(),
                seed,
            },
        };
        let trajectory = TrajectoryRecord {
            draft_ref: draft.draft_ref(query.id),
            temperature,
            policy_version: params.version,
            steps: samples,
        };
        return Ok(SampledDraft { draft, trajectory });
    }
    Err(PolicyError::CodRejected(MAX_RESAMPLES))
}

/// Recovers the per-step `(features, action)` pairs that would have produced
/// `body` under this policy's action space.
pub fn encode_draft(
    layout: &FeatureLayout,
    query: &Query,
    history: &[Draft],
    hint: &StrategyHint,
    body: &DraftBody,
) -> Result<Vec<(Vec<f64>, usize)>, PolicyError> {
    let truth = query.intermediates();
    if body.steps.len() != truth.len() {
        return Err(PolicyError::OutOfSupport {
            step: body.steps.len().min(truth.len()),
        });
    }
    let mut prev = query.payload.start;
    let mut out = Vec::with_capacity(truth.len());
    for (t, (step, &truth_t)) in body.steps.iter().zip(&truth).enumerate() {
        // The operand must match too, otherwise the template could not have
        // produced this step.
        let literals = integer_literals(step.text());
        let value = match literals.as_slice() {
            [operand, .., value] if *operand == query.payload.ops[t].1 => *value,
            _ => return Err(PolicyError::OutOfSupport { step: t }),
        };
        let offset = value - truth_t;
        if offset.abs() > WINDOW {
            return Err(PolicyError::OutOfSupport { step: t });
        }
        let counts = history_counts(history, t, truth_t);
        let x = step_features(layout, query, t, prev, hint, &counts)?;
        out.push((x, (offset + WINDOW) as usize));
        prev = value;
    }
    Ok(out)
}

/// Exact log-probability of `body` under the policy.
pub fn log_prob(
    params: &PolicyParams,
    query: &Query,
    history: &[Draft],
    hint: &StrategyHint,
    temperature: f64,
    body: &DraftBody,
) -> Result<f64, PolicyError> {
    let encoded = encode_draft(&params.layout, query, history, hint, body)?;
    for (x, _) in &encoded {
        params.check_dim(x)?;
    }
    Ok(encoded
        .iter()
        .map(|(x, a)| params.step_log_prob(x, *a, temperature))
        .sum())
}

/// Gradient of [`log_prob`] with respect to the flat parameter vector
/// (weights, then bias).
pub fn log_prob_grad(
    params: &PolicyParams,
    query: &Query,
    history: &[Draft],
    hint: &StrategyHint,
    temperature: f64,
    body: &DraftBody,
) -> Result<Vec<f64>, PolicyError> {
    let encoded = encode_draft(&params.layout, query, history, hint, body)?;
    let mut grad = vec![0.0; params.num_params()];
    for (x, a) in &encoded {
        params.check_dim(x)?;
        params.accumulate_step_grad(x, *a, temperature, 1.0, &mut grad);
    }
    Ok(grad)
}
