//! Cross-agent draft scoring.
//!
//! Every agent scores every other agent's drafts on five criteria. The
//! criteria are computed from the draft text and the query payload alone
//! (the evaluator recomputes the chain itself), then perturbed by the
//! evaluator's own noise to stand in for judge variability.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::draft::{validate_step, Draft, DraftBody, DraftRef};
use crate::env::{integer_literals, Op, Query};
use crate::seed;

pub const NUM_CRITERIA: usize = 5;
pub const MAX_NOISE_SIGMA: f64 = 0.5;

pub const CRITERION_NAMES: [&str; NUM_CRITERIA] = [
    "coherence",
    "step_validity",
    "relevance",
    "completeness",
    "answer_correctness",
];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PeerEvalError {
    #[error("agent {0} cannot evaluate its own draft")]
    SelfEvaluation(usize),
    #[error("evaluations reference different drafts")]
    MixedDrafts,
    #[error("no evaluations to aggregate")]
    EmptyList,
    #[error("noise sigma {0} outside [0, {MAX_NOISE_SIGMA}]")]
    BadSigma(f64),
}

/// What the evaluator reports.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvaluatorMode {
    /// Scores derived from the draft, plus noise.
    #[default]
    Informative,
    /// The same uninformative score for every criterion of every draft.
    Constant,
}

pub const CONSTANT_SCORE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorProfile {
    pub agent_id: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    #[serde(default)]
    pub mode: EvaluatorMode,
}

impl EvaluatorProfile {
    pub fn new(agent_id: usize, noise_sigma: f64, seed: u64) -> Result<Self, PeerEvalError> {
        if !(0.0..=MAX_NOISE_SIGMA).contains(&noise_sigma) {
            return Err(PeerEvalError::BadSigma(noise_sigma));
        }
        Ok(Self {
            agent_id,
            noise_sigma,
            seed,
            mode: EvaluatorMode::Informative,
        })
    }

    pub fn with_mode(mut self, mode: EvaluatorMode) -> Self {
        self.mode = mode;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerEvaluation {
    pub evaluator_id: usize,
    pub draft_ref: DraftRef,
    /// coherence, step_validity, relevance, completeness, answer_correctness.
    pub criteria: [f64; NUM_CRITERIA],
    pub scalar: f64,
    pub feedback: String,
}

/// Parsed `<op> <operand> ... <value>` content of a step, when present.
struct StepClaim {
    op: Option<Op>,
    operand: Option<i64>,
    value: Option<i64>,
}

fn claim(text: &str) -> StepClaim {
    let op = text
        .split_whitespace()
        .find_map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).parse::<Op>().ok());
    let literals = integer_literals(text);
    StepClaim {
        op,
        operand: literals.first().copied().filter(|_| literals.len() >= 2),
        value: literals.last().copied(),
    }
}

fn fraction(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Noise-free criteria for `body` against `query`.
pub fn exact_criteria(body: &DraftBody, query: &Query) -> [f64; NUM_CRITERIA] {
    let m = body.steps.len();
    let claims: Vec<StepClaim> = body.steps.iter().map(|s| claim(s.text())).collect();

    // Each step's claimed value must follow from the previous one (the start
    // value for the first step) under the step's own operator and operand.
    let mut prev = Some(query.payload.start);
    let mut coherent = 0;
    for c in &claims {
        let expected = match (prev, c.op, c.operand) {
            (Some(p), Some(op), Some(x)) => op.apply(p, x),
            _ => None,
        };
        if expected.is_some() && expected == c.value {
            coherent += 1;
        }
        prev = c.value;
    }

    let valid = body.steps.iter().filter(|s| validate_step(s)).count();

    let relevant = claims
        .iter()
        .zip(&query.payload.ops)
        .filter(|(c, (op, operand))| c.op == Some(*op) && c.operand == Some(*operand))
        .count();

    let completeness = (m as f64 / query.depth() as f64).min(1.0);

    let recomputed = query.payload.intermediates().ok().and_then(|v| v.last().copied());
    let answer_ok = body.answer.trim().parse::<i64>().ok().is_some_and(|a| Some(a) == recomputed);

    [
        fraction(coherent, m),
        fraction(valid, m),
        fraction(relevant, m),
        completeness,
        if answer_ok { 1.0 } else { 0.0 },
    ]
}

fn feedback_for(criteria: &[f64; NUM_CRITERIA]) -> String {
    let (idx, score) = criteria
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, &v)| if v < best.1 { (i, v) } else { best });
    format!("weakest criterion: {} ({score:.2})", CRITERION_NAMES[idx])
}

/// Scores one draft. Deterministic in `(profile, draft, query)`.
pub fn evaluate(profile: &EvaluatorProfile, draft: &Draft, query: &Query) -> Result<PeerEvaluation, PeerEvalError> {
    if profile.agent_id == draft.agent_id {
        return Err(PeerEvalError::SelfEvaluation(profile.agent_id));
    }
    let draft_ref = draft.draft_ref(query.id);
    let criteria = match profile.mode {
        EvaluatorMode::Constant => [CONSTANT_SCORE; NUM_CRITERIA],
        EvaluatorMode::Informative => {
            let mut c = exact_criteria(&draft.body, query);
            if profile.noise_sigma > 0.0 {
                let stream = seed::derive(
                    profile.seed,
                    &[
                        profile.agent_id as u64,
                        query.id,
                        draft.agent_id as u64,
                        draft.draft_index as u64,
                    ],
                );
                let mut rng = ChaCha8Rng::seed_from_u64(stream);
                let normal = Normal::new(0.0, profile.noise_sigma).expect("sigma checked finite");
                let bound = 2.0 * profile.noise_sigma;
                for v in &mut c {
                    let noise: f64 = normal.sample(&mut rng);
                    *v = (*v + noise.clamp(-bound, bound)).clamp(0.0, 1.0);
                }
            }
            c
        }
    };
    let scalar = criteria.iter().sum::<f64>() / NUM_CRITERIA as f64;
    Ok(PeerEvaluation {
        evaluator_id: profile.agent_id,
        draft_ref,
        criteria,
        scalar,
        feedback: feedback_for(&criteria),
    })
}

/// Per-criterion means and the mean scalar over one draft's evaluations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregatedScores {
    pub criteria: [f64; NUM_CRITERIA],
    pub scalar: f64,
}

impl AggregatedScores {
    pub fn as_vec(&self) -> Vec<f64> {
        let mut v = self.criteria.to_vec();
        v.push(self.scalar);
        v
    }
}

pub fn aggregate(evals: &[PeerEvaluation]) -> Result<AggregatedScores, PeerEvalError> {
    let first = evals.first().ok_or(PeerEvalError::EmptyList)?;
    if evals.iter().any(|e| e.draft_ref != first.draft_ref) {
        return Err(PeerEvalError::MixedDrafts);
    }
    let n = evals.len() as f64;
    let mut criteria = [0.0; NUM_CRITERIA];
    for e in evals {
        for (acc, v) in criteria.iter_mut().zip(e.criteria) {
            *acc += v;
        }
    }
    criteria.iter_mut().for_each(|c| *c /= n);
    Ok(AggregatedScores {
        criteria,
        scalar: evals.iter().map(|e| e.scalar).sum::<f64>() / n,
    })
}

/// JSONL record shape for evaluation logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub evaluator_id: usize,
    pub query_id: u64,
    pub agent_id: usize,
    pub draft_index: usize,
    pub criteria: [f64; NUM_CRITERIA],
    pub scalar: f64,
    pub feedback: String,
}

impl From<&PeerEvaluation> for EvaluationRecord {
    fn from(e: &PeerEvaluation) -> Self {
        Self {
            evaluator_id: e.evaluator_id,
            query_id: e.draft_ref.query_id,
            agent_id: e.draft_ref.agent_id,
            draft_index: e.draft_ref.draft_index,
            criteria: e.criteria,
            scalar: e.scalar,
            feedback: e.feedback.clone(),
        }
    }
}
