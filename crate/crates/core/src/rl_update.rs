//! PPO with an imitation term and a linear critic.
//!
//! Per agent the objective is
//!
//! ```text
//! L = L_ppo + alpha * L_imitation + 0.5 * L_value
//! ```
//!
//! `L_ppo` is the clipped surrogate over every sampled step, `L_imitation`
//! the mean negative log-likelihood of the agent's selected drafts, and
//! `L_value` the critic's squared error against GAE returns. All gradients
//! are analytic.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::draft::{Draft, DraftBody};
use crate::env::Query;
use crate::policy::{self, PolicyError, PolicyParams, StrategyHint, TrajectoryRecord};

pub const VALUE_LOSS_WEIGHT: f64 = 0.5;
pub const MAX_LOG_RATIO: f64 = 20.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RlError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("batch sampled at policy version {batch}, current is {current}")]
    StaleBatch { batch: u64, current: u64 },
    #[error("invalid PPO config: {0}")]
    BadConfig(&'static str),
    #[error("non-finite loss")]
    NonFinite,
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub imitation_weight: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs_per_batch: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            clip_epsilon: 0.2,
            gamma: 0.99,
            gae_lambda: 0.95,
            imitation_weight: 0.5,
            learning_rate: 4e-4,
            weight_decay: 1e-4,
            epochs_per_batch: 4,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), RlError> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(RlError::BadConfig("clip_epsilon must be in (0, 1)"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(RlError::BadConfig("gamma must be in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(RlError::BadConfig("gae_lambda must be in [0, 1]"));
        }
        if !(self.imitation_weight >= 0.0) {
            return Err(RlError::BadConfig("imitation_weight must be >= 0"));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(RlError::BadConfig("learning_rate must be > 0 and weight_decay >= 0"));
        }
        if self.epochs_per_batch == 0 {
            return Err(RlError::BadConfig("epochs_per_batch must be >= 1"));
        }
        Ok(())
    }
}

/// Generalized advantage estimation over one episode.
///
/// `delta_t = r_t + gamma * v_{t+1} - v_t`, with `v_T = bootstrap`, and
/// `A_t = sum_l (gamma * lambda)^l delta_{t+l}`. Returns `(advantages,
/// returns)` with `returns = advantages + values`.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), RlError> {
    if rewards.len() != values.len() {
        return Err(RlError::LengthMismatch(rewards.len(), values.len()));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { bootstrap };
        let delta = rewards[t] + gamma * next - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Shifts to zero mean and scales to unit (population) standard deviation.
/// A batch of one, or a constant batch, becomes all zeros.
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    if adv.len() < 2 {
        adv.iter_mut().for_each(|a| *a = 0.0);
        return;
    }
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-12 {
        adv.iter_mut().for_each(|a| *a = 0.0);
    } else {
        adv.iter_mut().for_each(|a| *a = (*a - mean) / std);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoTerms {
    pub loss: f64,
    /// `-min(rho * A, clip(rho) * A)` per sample.
    pub per_sample: Vec<f64>,
    /// `d loss / d new_log_prob` per sample.
    pub grad_new_log_prob: Vec<f64>,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
    /// Samples whose log-ratio was clamped to `MAX_LOG_RATIO`.
    pub clamped: usize,
}

/// Clipped surrogate loss. Advantages are used as given; normalize them
/// beforehand.
pub fn ppo_loss(
    old_log_probs: &[f64],
    new_log_probs: &[f64],
    advantages: &[f64],
    epsilon: f64,
) -> Result<PpoTerms, RlError> {
    if old_log_probs.len() != new_log_probs.len() {
        return Err(RlError::LengthMismatch(old_log_probs.len(), new_log_probs.len()));
    }
    if old_log_probs.len() != advantages.len() {
        return Err(RlError::LengthMismatch(old_log_probs.len(), advantages.len()));
    }
    let n = advantages.len().max(1) as f64;
    let mut terms = PpoTerms {
        loss: 0.0,
        per_sample: Vec::with_capacity(advantages.len()),
        grad_new_log_prob: Vec::with_capacity(advantages.len()),
        mean_ratio: 0.0,
        clip_fraction: 0.0,
        clamped: 0,
    };
    let mut clipped = 0usize;
    for ((&old, &new), &a) in old_log_probs.iter().zip(new_log_probs).zip(advantages) {
        let raw = new - old;
        let log_ratio = raw.clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO);
        let was_clamped = log_ratio != raw;
        if was_clamped {
            terms.clamped += 1;
        }
        let rho = log_ratio.exp();
        let unclipped = rho * a;
        let clipped_obj = rho.clamp(1.0 - epsilon, 1.0 + epsilon) * a;
        let objective = unclipped.min(clipped_obj);
        let grad = if clipped_obj < unclipped {
            clipped += 1;
            0.0
        } else if was_clamped {
            0.0
        } else {
            -unclipped / n
        };
        terms.per_sample.push(-objective);
        terms.grad_new_log_prob.push(grad);
        terms.loss -= objective / n;
        terms.mean_ratio += rho / n;
    }
    if terms.clamped > 0 {
        log::warn!("clamped {} PPO log-ratios to +/-{MAX_LOG_RATIO}", terms.clamped);
    }
    terms.clip_fraction = clipped as f64 / n;
    Ok(terms)
}

/// Negative log-likelihood of the selected draft.
pub fn imitation_loss(
    params: &PolicyParams,
    query: &Query,
    history: &[Draft],
    hint: &StrategyHint,
    temperature: f64,
    selected: &DraftBody,
) -> Result<f64, RlError> {
    Ok(-policy::log_prob(params, query, history, hint, temperature, selected)?)
}

pub fn imitation_grad(
    params: &PolicyParams,
    query: &Query,
    history: &[Draft],
    hint: &StrategyHint,
    temperature: f64,
    selected: &DraftBody,
) -> Result<Vec<f64>, RlError> {
    let g = policy::log_prob_grad(params, query, history, hint, temperature, selected)?;
    Ok(g.into_iter().map(|v| -v).collect())
}

/// Linear state-value function over the policy's state features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueParams {
    pub agent_id: usize,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub version: u64,
}

impl ValueParams {
    pub fn zeros(agent_id: usize, feature_dim: usize) -> Self {
        Self {
            agent_id,
            weights: vec![0.0; feature_dim],
            bias: 0.0,
            version: 0,
        }
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + self.bias
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + 1
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.weights.clone();
        v.push(self.bias);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let (w, b) = flat.split_at(self.weights.len());
        self.weights.copy_from_slice(w);
        self.bias = b[0];
    }
}

/// Mean squared error of the critic over `(features, return)` pairs and its
/// gradient (weights, then bias).
pub fn value_mse_and_grad(
    critic: &ValueParams,
    features: &[&[f64]],
    returns: &[f64],
) -> Result<(f64, Vec<f64>), RlError> {
    if features.len() != returns.len() {
        return Err(RlError::LengthMismatch(features.len(), returns.len()));
    }
    let mut grad = vec![0.0; critic.num_params()];
    if features.is_empty() {
        return Ok((0.0, grad));
    }
    let n = features.len() as f64;
    let mut loss = 0.0;
    for (x, r) in features.iter().zip(returns) {
        if x.len() != critic.weights.len() {
            return Err(RlError::LengthMismatch(x.len(), critic.weights.len()));
        }
        let err = critic.predict(x) - r;
        loss += err * err / n;
        let g = 2.0 * err / n;
        for (gw, xi) in grad.iter_mut().zip(x.iter()) {
            *gw += g * xi;
        }
        *grad.last_mut().expect("bias slot") += g;
    }
    Ok((loss, grad))
}

/// Critic loss over whole trajectories; `returns[i]` aligns with
/// `trajectories[i].steps`.
pub fn value_loss_and_grad(
    critic: &ValueParams,
    trajectories: &[TrajectoryRecord],
    returns: &[Vec<f64>],
) -> Result<(f64, Vec<f64>), RlError> {
    if trajectories.len() != returns.len() {
        return Err(RlError::LengthMismatch(trajectories.len(), returns.len()));
    }
    let mut xs = Vec::new();
    let mut rs = Vec::new();
    for (traj, ret) in trajectories.iter().zip(returns) {
        if traj.steps.len() != ret.len() {
            return Err(RlError::LengthMismatch(traj.steps.len(), ret.len()));
        }
        xs.extend(traj.steps.iter().map(|s| s.features.as_slice()));
        rs.extend_from_slice(ret);
    }
    value_mse_and_grad(critic, &xs, &rs)
}

/// One sampled step, ready for the surrogate loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoSample {
    pub features: Vec<f64>,
    pub action: usize,
    pub temperature: f64,
    pub old_log_prob: f64,
    pub advantage: f64,
    pub return_target: f64,
}

/// The encoded steps of one selected draft.
#[derive(Debug, Clone, PartialEq)]
pub struct ImitationTarget {
    pub steps: Vec<(Vec<f64>, usize)>,
    pub temperature: f64,
}

/// Everything one agent's update consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentBatch {
    pub policy_version: u64,
    pub samples: Vec<PpoSample>,
    pub imitation: Vec<ImitationTarget>,
}

impl AgentBatch {
    /// Builds the batch from trajectories whose step rewards and value
    /// estimates are filled in. Advantages are normalized across the batch.
    pub fn from_trajectories(
        policy_version: u64,
        trajectories: &[TrajectoryRecord],
        imitation: Vec<ImitationTarget>,
        cfg: &PpoConfig,
    ) -> Result<Self, RlError> {
        let mut samples = Vec::new();
        for traj in trajectories {
            if traj.policy_version != policy_version {
                return Err(RlError::StaleBatch {
                    batch: traj.policy_version,
                    current: policy_version,
                });
            }
            let rewards: Vec<f64> = traj.steps.iter().map(|s| s.reward).collect();
            let values: Vec<f64> = traj.steps.iter().map(|s| s.value_estimate).collect();
            let (adv, ret) = gae(&rewards, &values, 0.0, cfg.gamma, cfg.gae_lambda)?;
            for ((step, a), r) in traj.steps.iter().zip(adv).zip(ret) {
                samples.push(PpoSample {
                    features: step.features.clone(),
                    action: step.action,
                    temperature: traj.temperature,
                    old_log_prob: step.log_prob,
                    advantage: a,
                    return_target: r,
                });
            }
        }
        let mut adv: Vec<f64> = samples.iter().map(|s| s.advantage).collect();
        normalize_advantages(&mut adv);
        for (s, a) in samples.iter_mut().zip(adv) {
            s.advantage = a;
        }
        Ok(Self {
            policy_version,
            samples,
            imitation,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub ppo_loss: f64,
    pub imitation_loss: f64,
    pub value_loss: f64,
    pub total: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
}

/// Total loss and its gradient over the concatenated `[policy, critic]`
/// parameter vector.
pub fn combined_loss_and_grad(
    policy_params: &PolicyParams,
    critic: &ValueParams,
    batch: &AgentBatch,
    cfg: &PpoConfig,
) -> Result<(LossReport, Vec<f64>), RlError> {
    let np = policy_params.num_params();
    let mut grad = vec![0.0; np + critic.num_params()];

    let new_lp: Vec<f64> = batch
        .samples
        .iter()
        .map(|s| policy_params.step_log_prob(&s.features, s.action, s.temperature))
        .collect();
    let old_lp: Vec<f64> = batch.samples.iter().map(|s| s.old_log_prob).collect();
    let adv: Vec<f64> = batch.samples.iter().map(|s| s.advantage).collect();
    let ppo = ppo_loss(&old_lp, &new_lp, &adv, cfg.clip_epsilon)?;
    for (s, &g) in batch.samples.iter().zip(&ppo.grad_new_log_prob) {
        if g != 0.0 {
            policy_params.accumulate_step_grad(&s.features, s.action, s.temperature, g, &mut grad[..np]);
        }
    }

    let mut imitation = 0.0;
    if !batch.imitation.is_empty() {
        let n = batch.imitation.len() as f64;
        let scale = -cfg.imitation_weight / n;
        for target in &batch.imitation {
            for (x, a) in &target.steps {
                imitation -= policy_params.step_log_prob(x, *a, target.temperature) / n;
                if scale != 0.0 {
                    policy_params.accumulate_step_grad(x, *a, target.temperature, scale, &mut grad[..np]);
                }
            }
        }
    }

    let xs: Vec<&[f64]> = batch.samples.iter().map(|s| s.features.as_slice()).collect();
    let rs: Vec<f64> = batch.samples.iter().map(|s| s.return_target).collect();
    let (value_loss, vgrad) = value_mse_and_grad(critic, &xs, &rs)?;
    for (g, v) in grad[np..].iter_mut().zip(vgrad) {
        *g += VALUE_LOSS_WEIGHT * v;
    }

    let total = ppo.loss + cfg.imitation_weight * imitation + VALUE_LOSS_WEIGHT * value_loss;
    if !total.is_finite() {
        return Err(RlError::NonFinite);
    }
    Ok((
        LossReport {
            ppo_loss: ppo.loss,
            imitation_loss: imitation,
            value_loss,
            total,
            mean_ratio: ppo.mean_ratio,
            clip_fraction: ppo.clip_fraction,
        },
        grad,
    ))
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(num_params: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, weight_decay: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + weight_decay * params[i]);
        }
    }
}

/// Runs `epochs_per_batch` full-batch optimizer passes. Returns the updated
/// parameters and the loss report measured before each pass.
pub fn combined_update(
    policy_params: &PolicyParams,
    critic: &ValueParams,
    batch: &AgentBatch,
    cfg: &PpoConfig,
    optimizer: &mut AdamW,
) -> Result<(PolicyParams, ValueParams, Vec<LossReport>), RlError> {
    if batch.policy_version != policy_params.version {
        return Err(RlError::StaleBatch {
            batch: batch.policy_version,
            current: policy_params.version,
        });
    }
    let mut theta = policy_params.clone();
    let mut psi = critic.clone();
    let np = theta.num_params();
    let mut reports = Vec::with_capacity(cfg.epochs_per_batch);
    for _ in 0..cfg.epochs_per_batch {
        let (report, grad) = combined_loss_and_grad(&theta, &psi, batch, cfg)?;
        let mut flat = theta.to_flat();
        flat.extend(psi.to_flat());
        optimizer.step(&mut flat, &grad, cfg.learning_rate, cfg.weight_decay);
        theta.set_flat(&flat[..np]);
        psi.set_flat(&flat[np..]);
        theta.version += 1;
        psi.version += 1;
        reports.push(report);
    }
    Ok((theta, psi, reports))
}
