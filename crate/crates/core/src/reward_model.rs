//! Learned draft reward and best-draft selection.
//!
//! The model sees only what is known before a draft is executed: the
//! aggregated peer scores plus a few draft-level features. It never sees the
//! ground truth, so selecting by its output is a fair pre-execution choice.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::draft::{mean_distance_to_others, Draft, DraftRef};
use crate::env::{Query, MAX_DEPTH};
use crate::peer_eval::{AggregatedScores, NUM_CRITERIA};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("draft {0} is not among its siblings")]
    NotASibling(usize),
    #[error("nothing to select from")]
    EmptyList,
    #[error("empty training batch")]
    EmptyBatch,
    #[error("non-finite loss; update skipped")]
    NonFiniteLoss,
}

/// `[5 criterion means, mean scalar, steps/8, diversity rank, temperature,
/// strategy one-hot (K)]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardFeatureLayout {
    pub num_strategies: usize,
}

impl RewardFeatureLayout {
    pub fn dim(&self) -> usize {
        NUM_CRITERIA + 1 + 3 + self.num_strategies
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardFeatures {
    pub draft_ref: DraftRef,
    pub values: Vec<f64>,
}

/// Builds the model input for `draft`. `siblings` are all K drafts of the
/// same agent for the same query, `draft` included.
pub fn featurize(
    layout: &RewardFeatureLayout,
    draft: &Draft,
    query: &Query,
    agg: &AggregatedScores,
    siblings: &[Draft],
) -> Result<RewardFeatures, RewardModelError> {
    if draft.meta.strategy_id >= layout.num_strategies {
        return Err(RewardModelError::DimensionMismatch {
            expected: layout.num_strategies,
            got: draft.meta.strategy_id + 1,
        });
    }
    let me = siblings
        .iter()
        .position(|d| d.draft_index == draft.draft_index && d.agent_id == draft.agent_id)
        .ok_or(RewardModelError::NotASibling(draft.draft_index))?;

    // Rank by mean distance to the other siblings, ties by slot order.
    let dist: Vec<f64> = (0..siblings.len()).map(|j| mean_distance_to_others(siblings, j)).collect();
    let rank = (0..siblings.len())
        .filter(|&j| (dist[j], j) < (dist[me], me))
        .count();
    let rank = if siblings.len() > 1 {
        rank as f64 / (siblings.len() - 1) as f64
    } else {
        0.0
    };

    let mut values = agg.as_vec();
    values.push(draft.body.steps.len() as f64 / MAX_DEPTH as f64);
    values.push(rank);
    values.push(draft.meta.temperature);
    let mut strategy = vec![0.0; layout.num_strategies];
    strategy[draft.meta.strategy_id] = 1.0;
    values.extend(strategy);
    debug_assert_eq!(values.len(), layout.dim());
    Ok(RewardFeatures {
        draft_ref: draft.draft_ref(query.id),
        values,
    })
}

/// One-hidden-layer perceptron with a tanh hidden layer and logistic output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardModelParams {
    pub input_dim: usize,
    pub hidden: usize,
    /// Row-major `[hidden][input_dim]`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
    pub version: u64,
}

struct Forward {
    hidden: Vec<f64>,
    output: f64,
}

impl RewardModelParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            input_dim,
            hidden,
            w1: vec![0.0; hidden * input_dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden],
            b2: 0.0,
            version: 0,
        }
    }

    /// Hidden weights uniform, scaled by fan-in. Output weights start at
    /// zero, so an untrained model predicts 0.5 for every draft and selection
    /// falls back to the tie-break instead of following random weights.
    pub fn init(input_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(input_dim, hidden);
        let s1 = 1.0 / (input_dim as f64).sqrt();
        p.w1.iter_mut().for_each(|w| *w = rng.random_range(-s1..s1));
        p
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + 1
    }

    /// `w1, b1, w2, b2`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(&self.w1);
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.push(self.b2);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let (w1, rest) = flat.split_at(self.w1.len());
        let (b1, rest) = rest.split_at(self.b1.len());
        let (w2, rest) = rest.split_at(self.w2.len());
        self.w1.copy_from_slice(w1);
        self.b1.copy_from_slice(b1);
        self.w2.copy_from_slice(w2);
        self.b2 = rest[0];
    }

    fn check(&self, x: &[f64]) -> Result<(), RewardModelError> {
        if x.len() != self.input_dim {
            return Err(RewardModelError::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn forward(&self, x: &[f64]) -> Forward {
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|h| {
                let row = &self.w1[h * self.input_dim..(h + 1) * self.input_dim];
                let a: f64 = row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + self.b1[h];
                a.tanh()
            })
            .collect();
        let o: f64 = hidden.iter().zip(&self.w2).map(|(h, w)| h * w).sum::<f64>() + self.b2;
        Forward {
            output: 1.0 / (1.0 + (-o).exp()),
            hidden,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardPrediction {
    pub draft_ref: DraftRef,
    pub value: f64,
}

const OUTPUT_MARGIN: f64 = 1e-12;

pub fn predict(params: &RewardModelParams, features: &RewardFeatures) -> Result<RewardPrediction, RewardModelError> {
    params.check(&features.values)?;
    let value = params
        .forward(&features.values)
        .output
        .clamp(OUTPUT_MARGIN, 1.0 - OUTPUT_MARGIN);
    Ok(RewardPrediction {
        draft_ref: features.draft_ref,
        value,
    })
}

/// Highest predicted value wins; ties go to the lowest `(agent_id, draft_index)`.
pub fn select(predictions: &[RewardPrediction]) -> Result<DraftRef, RewardModelError> {
    predictions
        .iter()
        .reduce(|best, p| {
            if p.value > best.value || (p.value == best.value && p.draft_ref < best.draft_ref) {
                p
            } else {
                best
            }
        })
        .map(|p| p.draft_ref)
        .ok_or(RewardModelError::EmptyList)
}

/// Mean squared error of the model on `batch` and its gradient (flat layout).
pub fn mse_and_grad(
    params: &RewardModelParams,
    batch: &[(Vec<f64>, f64)],
) -> Result<(f64, Vec<f64>), RewardModelError> {
    if batch.is_empty() {
        return Err(RewardModelError::EmptyBatch);
    }
    let n = batch.len() as f64;
    let (nw1, nb1, nw2) = (params.w1.len(), params.b1.len(), params.w2.len());
    let mut grad = vec![0.0; params.num_params()];
    let mut loss = 0.0;
    for (x, target) in batch {
        params.check(x)?;
        let fwd = params.forward(x);
        let err = fwd.output - target;
        loss += err * err;
        let d_out = 2.0 * err / n * fwd.output * (1.0 - fwd.output);
        for h in 0..params.hidden {
            grad[nw1 + nb1 + h] += d_out * fwd.hidden[h];
            let d_pre = d_out * params.w2[h] * (1.0 - fwd.hidden[h] * fwd.hidden[h]);
            grad[nw1 + h] += d_pre;
            let row = &mut grad[h * params.input_dim..(h + 1) * params.input_dim];
            for (g, xi) in row.iter_mut().zip(x) {
                *g += d_pre * xi;
            }
        }
        grad[nw1 + nb1 + nw2] += d_out;
    }
    Ok((loss / n, grad))
}

/// One plain gradient step on the batch MSE. Returns the loss before the step.
pub fn update_reward_model(
    params: &RewardModelParams,
    batch: &[(Vec<f64>, f64)],
    learning_rate: f64,
) -> Result<(RewardModelParams, f64), RewardModelError> {
    let (loss, grad) = mse_and_grad(params, batch)?;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(RewardModelError::NonFiniteLoss);
    }
    let mut next = params.clone();
    let flat: Vec<f64> = params
        .to_flat()
        .iter()
        .zip(&grad)
        .map(|(p, g)| p - learning_rate * g)
        .collect();
    next.set_flat(&flat);
    next.version += 1;
    Ok((next, loss))
}

/// Spearman rank correlation of `(predicted, realized)` pairs, with tied
/// values sharing their average rank. `None` when either side is constant
/// or there are fewer than two pairs.
pub fn spearman(pairs: &[(f64, f64)]) -> Option<f64> {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }
    if pairs.len() < 2 {
        return None;
    }
    let a = ranks(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let b = ranks(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(&b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}
