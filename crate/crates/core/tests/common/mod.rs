//! Oracles shared by the gradient and acceptance tests.
#![allow(dead_code)]

use draftrl::draft::Draft;
use draftrl::env::{generate_task, OperandRange, Query};
use draftrl::policy::{
    encode_draft, log_prob, log_prob_grad, sample_draft, temperature_schedule, FeatureLayout, PolicyParams,
    SamplingOptions, StrategyHint, TrajectoryRecord,
};
use draftrl::reward_model::{mse_and_grad, RewardModelParams};
use draftrl::rl_update::{
    combined_loss_and_grad, value_loss_and_grad, AgentBatch, ImitationTarget, PpoConfig, ValueParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
/// Denominator floor: below it errors are measured absolutely.
pub const FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

/// Max relative error between `grad` and central differences of `f`,
/// checked on every coordinate.
pub fn check(theta: &[f64], grad: &[f64], f: impl Fn(&[f64]) -> f64) -> f64 {
    assert_eq!(theta.len(), grad.len());
    let mut worst = 0.0f64;
    let mut t = theta.to_vec();
    for i in 0..theta.len() {
        t[i] = theta[i] + H;
        let up = f(&t);
        t[i] = theta[i] - H;
        let down = f(&t);
        t[i] = theta[i];
        worst = worst.max(rel_err(grad[i], (up - down) / (2.0 * H)));
    }
    worst
}

pub fn random_policy(rng: &mut ChaCha8Rng, agent: usize, k: usize) -> PolicyParams {
    let mut p = PolicyParams::with_history_prior(agent, &FeatureLayout::new(k), 0.5);
    let flat: Vec<f64> = p.to_flat().iter().map(|w| w + rng.random_range(-0.5..0.5)).collect();
    p.set_flat(&flat);
    p
}

pub fn query(rng: &mut ChaCha8Rng) -> Query {
    let depth = rng.random_range(1..=4);
    generate_task(rng.random(), depth, OperandRange::default()).unwrap()
}

/// K drafts for one query, each conditioned on the earlier ones.
pub fn drafts(p: &PolicyParams, q: &Query, k: usize, seed: u64) -> Vec<(Draft, TrajectoryRecord)> {
    let mut out: Vec<(Draft, _)> = Vec::new();
    for slot in 0..k {
        let history: Vec<Draft> = out.iter().map(|(d, _)| d.clone()).collect();
        let t = temperature_schedule(slot, k).unwrap();
        let s = sample_draft(p, q, &history, &StrategyHint::for_slot(slot), t, seed + slot as u64, SamplingOptions::default())
            .unwrap();
        out.push((s.draft, s.trajectory));
    }
    out
}

pub fn policy_log_prob_worst(seed: u64, cases: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let k = 3;
        let p = random_policy(&mut rng, 0, k);
        let q = query(&mut rng);
        let ds = drafts(&p, &q, k, case);
        let slot = rng.random_range(0..k);
        let history: Vec<Draft> = ds[..slot].iter().map(|(d, _)| d.clone()).collect();
        let hint = StrategyHint::for_slot(slot);
        let temp = temperature_schedule(slot, k).unwrap();
        let body = &ds[slot].0.body;
        let g = log_prob_grad(&p, &q, &history, &hint, temp, body).unwrap();
        worst = worst.max(check(&p.to_flat(), &g, |flat| {
            let mut pp = p.clone();
            pp.set_flat(flat);
            log_prob(&pp, &q, &history, &hint, temp, body).unwrap()
        }));
    }
    worst
}

pub fn reward_model_worst(seed: u64, cases: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let dim = rng.random_range(2..12);
        let hidden = rng.random_range(1..10);
        let mut p = RewardModelParams::init(dim, hidden, case);
        let flat: Vec<f64> = p.to_flat().iter().map(|w| w + rng.random_range(-1.0..1.0)).collect();
        p.set_flat(&flat);
        let n = rng.random_range(1..8);
        let batch: Vec<(Vec<f64>, f64)> = (0..n)
            .map(|_| ((0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(), rng.random_range(0.0..1.0)))
            .collect();
        let (_, g) = mse_and_grad(&p, &batch).unwrap();
        worst = worst.max(check(&p.to_flat(), &g, |flat| {
            let mut pp = p.clone();
            pp.set_flat(flat);
            mse_and_grad(&pp, &batch).unwrap().0
        }));
    }
    worst
}

pub fn critic_worst(seed: u64, cases: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let p = random_policy(&mut rng, 0, 2);
        let q = query(&mut rng);
        let trajs: Vec<_> = drafts(&p, &q, 2, 200 + case).into_iter().map(|(_, t)| t).collect();
        let mut critic = ValueParams::zeros(0, p.feature_dim());
        critic.weights.iter_mut().for_each(|w| *w = rng.random_range(-0.5..0.5));
        critic.bias = rng.random_range(-0.5..0.5);
        let returns: Vec<Vec<f64>> = trajs
            .iter()
            .map(|t| t.steps.iter().map(|_| rng.random_range(0.0..1.0)).collect())
            .collect();
        let (_, g) = value_loss_and_grad(&critic, &trajs, &returns).unwrap();
        worst = worst.max(check(&critic.to_flat(), &g, |flat| {
            let mut c = critic.clone();
            c.set_flat(flat);
            value_loss_and_grad(&c, &trajs, &returns).unwrap().0
        }));
    }
    worst
}

/// A batch assembled the way the orchestrator does it, with the policy
/// perturbed after sampling so ratios differ from one.
pub fn combined_case(rng: &mut ChaCha8Rng, case: u64, k: usize) -> (PolicyParams, ValueParams, AgentBatch) {
    let sampler = random_policy(rng, 0, k);
    let q = query(rng);
    let ds = drafts(&sampler, &q, k, 300 + case);
    let mut trajs = Vec::new();
    for (_, t) in &ds {
        let mut t = t.clone();
        for s in &mut t.steps {
            s.value_estimate = rng.random_range(-0.2..0.2);
        }
        t.steps.last_mut().unwrap().reward = rng.random_range(0.0..1.0);
        trajs.push(t);
    }
    let history: Vec<Draft> = ds[..k - 1].iter().map(|(d, _)| d.clone()).collect();
    let steps = encode_draft(&sampler.layout, &q, &history, &StrategyHint::for_slot(k - 1), &ds[k - 1].0.body).unwrap();
    let imitation = vec![ImitationTarget { steps, temperature: temperature_schedule(k - 1, k).unwrap() }];
    let batch = AgentBatch::from_trajectories(sampler.version, &trajs, imitation, &PpoConfig::default()).unwrap();
    let mut policy = sampler.clone();
    let flat: Vec<f64> = policy.to_flat().iter().map(|w| w + rng.random_range(-0.05..0.05)).collect();
    policy.set_flat(&flat);
    let mut critic = ValueParams::zeros(0, policy.feature_dim());
    critic.weights.iter_mut().for_each(|w| *w = rng.random_range(-0.3..0.3));
    (policy, critic, batch)
}

/// Worst error of the combined PPO + imitation + value gradient over
/// `cases` instances, skipping those sitting on a clip kink.
pub fn combined_worst(seed: u64, cases: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = PpoConfig::default();
    let mut worst = 0.0f64;
    let mut checked = 0u64;
    let mut case = 0u64;
    while checked < cases {
        case += 1;
        let (policy, critic, batch) = combined_case(&mut rng, case, 3);
        let ratios: Vec<f64> = batch
            .samples
            .iter()
            .map(|s| (policy.step_log_prob(&s.features, s.action, s.temperature) - s.old_log_prob).exp())
            .collect();
        if ratios.iter().any(|r| (r - 0.8).abs() < 1e-3 || (r - 1.2).abs() < 1e-3) {
            continue;
        }
        let np = policy.num_params();
        let (_, g) = combined_loss_and_grad(&policy, &critic, &batch, &cfg).unwrap();
        let mut flat = policy.to_flat();
        flat.extend(critic.to_flat());
        worst = worst.max(check(&flat, &g, |flat| {
            let mut p = policy.clone();
            let mut c = critic.clone();
            p.set_flat(&flat[..np]);
            c.set_flat(&flat[np..]);
            combined_loss_and_grad(&p, &c, &batch, &cfg).unwrap().0.total
        }));
        checked += 1;
    }
    worst
}

/// Advantages as the explicit double sum over TD residuals.
pub fn gae_brute_force(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let v = |t: usize| if t < n { values[t] } else { bootstrap };
    (0..n)
        .map(|t| {
            (t..n)
                .map(|u| (gamma * lambda).powi((u - t) as i32) * (rewards[u] + gamma * v(u + 1) - v(u)))
                .sum()
        })
        .collect()
}
