//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed. Build with optimizations (the test profile
//! already does); the training criteria take a few minutes in total.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use draftrl::config::TrainingConfig;
use draftrl::draft::{validate_draft, DraftBody, DraftRef};
use draftrl::env::{generate_task, OperandRange, Query};
use draftrl::orchestrator::{agreement, load_suites, specialization, train, Trainer, TrainOutcome};
use draftrl::policy::{log_prob, temperature_schedule, StepTemplate, StrategyHint};
use draftrl::reward_model::{select, spearman, RewardPrediction};
use draftrl::rl_update::gae;
use draftrl::run_dir::RunWriter;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn suites(cfg: &TrainingConfig) -> (Vec<Query>, Vec<Query>) {
    load_suites(cfg, &repo_root()).expect("data/dev500.jsonl and data/val100.jsonl")
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn train_quiet(cfg: &TrainingConfig) -> TrainOutcome {
    let (tr, va) = suites(cfg);
    train(Trainer::new(cfg.clone()).unwrap(), &tr, &va, None).unwrap()
}

/// Summary of one training run used by the ablation, convergence and
/// diversity criteria.
struct RunStats {
    /// Mean executed-draft task reward over the last fifth of the run.
    final_task: f64,
    mean_diversity: f64,
    steps_to_threshold: Option<usize>,
}

fn run_stats(cfg: &TrainingConfig) -> RunStats {
    let out = train_quiet(cfg);
    let h = &out.history;
    let tail = &h[h.len() - (h.len() / 5).max(1)..];
    RunStats {
        final_task: tail.iter().map(|m| m.components.task).sum::<f64>() / tail.len() as f64,
        mean_diversity: h.iter().map(|m| m.components.diversity).sum::<f64>() / h.len() as f64,
        steps_to_threshold: out.report.steps_to_threshold,
    }
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Full default run on dev500, logged to a run directory. Returns the
/// validity outcome and the finished run for the reward-model check.
fn cod_validity(dir: &Path) -> (Outcome, TrainOutcome, Vec<Query>) {
    let t = Instant::now();
    let cfg = TrainingConfig::default();
    let (tr, va) = suites(&cfg);
    let mut writer = RunWriter::create(dir, &cfg).unwrap();
    let out = train(Trainer::new(cfg).unwrap(), &tr, &va, Some(&mut writer)).unwrap();
    writer.flush().unwrap();
    drop(writer);
    let secs = t.elapsed().as_secs_f64();

    let events = fs::read_to_string(dir.join("events.jsonl")).unwrap();
    let mut total = 0usize;
    let mut valid = 0usize;
    for line in events.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        if v["kind"] != "draft" {
            continue;
        }
        let d = &v["data"]["draft"];
        let steps: Vec<&str> = d["steps"].as_array().unwrap().iter().map(|s| s.as_str().unwrap()).collect();
        let body = DraftBody::from_strs(&steps, d["answer"].as_str().unwrap());
        total += 1;
        valid += usize::from(validate_draft(&body).valid);
    }
    let pass = total > 0 && valid == total && secs < 300.0;
    let detail = format!("{valid}/{total} logged drafts valid over {} iterations, {secs:.1} s", out.history.len());
    (outcome(pass, detail), out, va)
}

fn gradients() -> Outcome {
    let t = Instant::now();
    let errs = [
        ("policy", common::policy_log_prob_worst(101, 100)),
        ("reward model", common::reward_model_worst(102, 100)),
        ("critic", common::critic_worst(103, 100)),
        ("combined", common::combined_worst(104, 100)),
    ];
    let secs = t.elapsed().as_secs_f64();
    let pass = errs.iter().all(|(_, e)| *e < common::TOL) && secs < 60.0;
    let parts: Vec<String> = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    outcome(pass, format!("max rel err {} (100 instances each), {secs:.1} s", parts.join(", ")))
}

fn gae_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for episode in 0..1000 {
        let n = rng.random_range(1..=10);
        let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bootstrap = if rng.random_bool(0.5) { 0.0 } else { rng.random_range(-1.0..1.0) };
        let (gamma, lambda) = if episode % 2 == 0 {
            (0.99, 0.95)
        } else {
            (rng.random_range(0.0..=1.0), rng.random_range(0.0..=1.0))
        };
        let (adv, returns) = gae(&rewards, &values, bootstrap, gamma, lambda).unwrap();
        let oracle = common::gae_brute_force(&rewards, &values, bootstrap, gamma, lambda);
        for t in 0..n {
            worst = worst.max((adv[t] - oracle[t]).abs());
            worst = worst.max((returns[t] - (oracle[t] + values[t])).abs());
        }
    }
    let secs = t.elapsed().as_secs_f64();
    outcome(worst < 1e-10 && secs < 10.0, format!("max abs diff {worst:.1e} on 1000 episodes, {secs:.2} s"))
}

fn enumeration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for case in 0..200u64 {
        let k = rng.random_range(1..=5);
        let p = common::random_policy(&mut rng, 0, k);
        let q = generate_task(rng.random(), 1, OperandRange::default()).unwrap();
        let slot = rng.random_range(0..k);
        let history: Vec<_> = common::drafts(&p, &q, slot, case).into_iter().map(|(d, _)| d).collect();
        let hint = StrategyHint::for_slot(slot);
        let temp = temperature_schedule(slot, k).unwrap();
        let (op, operand) = q.payload.ops[0];
        let truth = q.intermediates()[0];
        let total: f64 = (truth - 4..=truth + 4)
            .map(|v| {
                let step = StepTemplate::Concise.render(op, operand, v);
                let body = DraftBody::from_strs(&[&step], &v.to_string());
                log_prob(&p, &q, &history, &hint, temp, &body).unwrap().exp()
            })
            .sum();
        worst = worst.max((total - 1.0).abs());
    }
    outcome(worst <= 1e-10, format!("max |sum - 1| = {worst:.1e} over 200 depth-1 draft spaces"))
}

fn dref(agent_id: usize, draft_index: usize) -> DraftRef {
    DraftRef { query_id: 0, agent_id, draft_index }
}

/// Reference selection: highest value, then lowest (agent, draft).
fn brute_select(preds: &[RewardPrediction]) -> DraftRef {
    let best = preds.iter().map(|p| p.value).fold(f64::NEG_INFINITY, f64::max);
    preds.iter().filter(|p| p.value == best).map(|p| p.draft_ref).min().unwrap()
}

fn random_monotone(rng: &mut ChaCha8Rng) -> impl Fn(f64) -> f64 {
    let picks: Vec<(u8, f64, f64)> = (0..rng.random_range(1..=4))
        .map(|_| (rng.random_range(0..5), rng.random_range(0.1..10.0), rng.random_range(-3.0..3.0)))
        .collect();
    move |mut x: f64| {
        for &(kind, a, b) in &picks {
            x = match kind {
                0 => a * x + b,
                1 => (x / a).exp(),
                2 => x * x * x + x,
                3 => (x / a).atan(),
                _ => x + b.abs() * x.tanh(),
            };
        }
        x
    }
}

fn selection() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut failures = 0usize;
    let mut checks = 0usize;
    for _ in 0..200 {
        let n_agents = rng.random_range(1..=3);
        let k = rng.random_range(1..=5);
        // Coarse values so ties are common.
        let mut preds: Vec<RewardPrediction> = (0..n_agents)
            .flat_map(|a| (0..k).map(move |d| (a, d)))
            .map(|(a, d)| RewardPrediction { draft_ref: dref(a, d), value: 0.05 + 0.1 * rng.random_range(0..10) as f64 })
            .collect();
        preds.shuffle(&mut rng);
        let expected = brute_select(&preds);
        checks += 1;
        failures += usize::from(select(&preds).unwrap() != expected);
        let mut applied = 0;
        while applied < 100 {
            let f = random_monotone(&mut rng);
            let moved: Vec<RewardPrediction> =
                preds.iter().map(|p| RewardPrediction { draft_ref: p.draft_ref, value: f(p.value) }).collect();
            // A composition can overflow or merge nearby values through
            // rounding; such a draw is not strictly increasing in floating
            // point, so draw again.
            let strict = moved.iter().all(|m| m.value.is_finite())
                && preds.iter().zip(&moved).all(|(p, m)| {
                    preds.iter().zip(&moved).all(|(q, n)| (p.value < q.value) == (m.value < n.value))
                });
            if !strict {
                continue;
            }
            applied += 1;
            checks += 1;
            failures += usize::from(select(&moved).unwrap() != expected);
        }
    }
    let fixed = [
        select(&[0.3, 0.7, 0.5].map(|v| RewardPrediction { draft_ref: dref(0, (v * 10.0) as usize), value: v }))
            .unwrap()
            == dref(0, 7),
        select(&[
            RewardPrediction { draft_ref: dref(1, 0), value: 0.5 },
            RewardPrediction { draft_ref: dref(0, 2), value: 0.5 },
        ])
        .unwrap()
            == dref(0, 2),
    ];
    let pass = failures == 0 && fixed.iter().all(|&b| b);
    outcome(pass, format!("{failures} mismatches in {checks} selections (200 lists x 100 transforms), fixed cases ok={}", fixed.iter().all(|&b| b)))
}

struct Sweep {
    full: Vec<RunStats>,
    no_peer_eval: Vec<RunStats>,
    no_drafts: Vec<RunStats>,
    k3: Vec<RunStats>,
    secs: f64,
}

fn sweep() -> Sweep {
    let t = Instant::now();
    let base = TrainingConfig::default();
    let runs = |f: &dyn Fn(TrainingConfig) -> TrainingConfig| -> Vec<RunStats> {
        SEEDS.iter().map(|&seed| run_stats(&f(TrainingConfig { seed, ..base.clone() }))).collect()
    };
    let full = runs(&|c| c.with_ablation("full").unwrap());
    let no_peer_eval = runs(&|c| c.with_ablation("no_peer_eval").unwrap());
    let no_drafts = runs(&|c| c.with_ablation("no_drafts").unwrap());
    let k3 = runs(&|c| TrainingConfig { drafts_per_query: 3, ..c });
    Sweep { full, no_peer_eval, no_drafts, k3, secs: t.elapsed().as_secs_f64() }
}

fn ablation(s: &Sweep) -> Outcome {
    let f = mean(s.full.iter().map(|r| r.final_task));
    let p = mean(s.no_peer_eval.iter().map(|r| r.final_task));
    let d = mean(s.no_drafts.iter().map(|r| r.final_task));
    let pass = f > p && p > d && (f - d) > (f - p) && s.secs < 1800.0;
    outcome(
        pass,
        format!(
            "final task reward over seeds {SEEDS:?}: full {f:.4} > no_peer_eval {p:.4} > no_drafts {d:.4}; drops {:.4} vs {:.4}; sweep {:.0} s",
            f - p,
            f - d,
            s.secs
        ),
    )
}

fn convergence(s: &Sweep) -> Outcome {
    let never = TrainingConfig::default().iterations as f64 + 1.0;
    let steps = |rs: &[RunStats]| -> Vec<f64> {
        rs.iter().map(|r| r.steps_to_threshold.map_or(never, |v| v as f64)).collect()
    };
    let (k5, k1) = (steps(&s.full), steps(&s.no_drafts));
    let (m5, m1) = (median(k5.clone()), median(k1.clone()));
    outcome(m5 < m1, format!("median steps to 0.8: K=5 {m5} {k5:?} < K=1 {m1} {k1:?}"))
}

fn diversity_trend(s: &Sweep) -> Outcome {
    let k1_exact = s.no_drafts.iter().all(|r| r.mean_diversity == 0.0);
    let d1 = mean(s.no_drafts.iter().map(|r| r.mean_diversity));
    let d3 = mean(s.k3.iter().map(|r| r.mean_diversity));
    let d5 = mean(s.full.iter().map(|r| r.mean_diversity));
    let pass = k1_exact && d1 < d3 && d3 < d5;
    outcome(pass, format!("mean diversity K=1 {d1:.4} (exactly 0: {k1_exact}), K=3 {d3:.4}, K=5 {d5:.4}"))
}

fn reward_model_fidelity(out: &TrainOutcome, val: &[Query]) -> Outcome {
    let summary = out.trainer.validate(val).unwrap();
    match spearman(&summary.predictions) {
        Some(rho) => outcome(rho >= 0.6, format!("Spearman {rho:.4} on {} held-out drafts", summary.predictions.len())),
        None => outcome(false, "Spearman undefined (constant predictions or rewards)"),
    }
}

fn logged_run(dir: &Path, workers: usize) -> Vec<Vec<u8>> {
    let cfg = TrainingConfig { iterations: 8, validation_every: 4, batch_size: 8, workers, ..Default::default() };
    let (tr, va) = suites(&cfg);
    let mut writer = RunWriter::create(dir, &cfg).unwrap();
    train(Trainer::new(cfg).unwrap(), &tr, &va[..20], Some(&mut writer)).unwrap();
    writer.flush().unwrap();
    drop(writer);
    ["metrics.csv", "events.jsonl", "losses.csv"].iter().map(|f| fs::read(dir.join(f)).unwrap()).collect()
}

fn determinism(root: &Path) -> Outcome {
    let runs: Vec<(usize, Vec<Vec<u8>>)> = [1usize, 1, 2, 4]
        .iter()
        .enumerate()
        .map(|(i, &w)| (w, logged_run(&root.join(format!("det{i}")), w)))
        .collect();
    let reference = &runs[0].1;
    let same = runs.iter().all(|(_, files)| files == reference);
    let sizes: Vec<usize> = reference.iter().map(Vec::len).collect();
    outcome(
        same,
        format!("metrics.csv, events.jsonl, losses.csv identical across workers 1,1,2,4 (bytes {sizes:?})"),
    )
}

fn anchors() -> Outcome {
    let direct = agreement(&[vec!["12".to_string()], vec!["7".to_string()]]) == 1.0
        && specialization(&[vec![4, 1, 0]]) == 0.0;
    let cfg = TrainingConfig { num_agents: 1, iterations: 3, batch_size: 4, validation_every: 3, ..Default::default() };
    let out = train_quiet(&cfg);
    let in_run = out.history.iter().all(|m| m.agreement == 1.0 && m.specialization == 0.0);
    outcome(direct && in_run, format!("direct {direct}, over a 3-iteration N=1 run {in_run}"))
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().unwrap();
    let mut lines: Vec<(u8, &str, Outcome)> = Vec::new();
    let mut report = |id: u8, name: &'static str, o: Outcome| {
        println!("[{}] {id:>2}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        lines.push((id, name, o));
    };

    let (o1, full_run, val) = cod_validity(&tmp.path().join("full"));
    report(1, "CoD validity", o1);
    report(2, "gradient checks", gradients());
    report(3, "GAE oracle", gae_oracle());
    report(4, "probability normalization", enumeration());
    report(5, "selection semantics", selection());
    let s = sweep();
    report(6, "ablation direction", ablation(&s));
    report(7, "convergence speedup", convergence(&s));
    report(8, "diversity trend", diversity_trend(&s));
    report(9, "reward-model fidelity", reward_model_fidelity(&full_run, &val));
    report(10, "determinism", determinism(tmp.path()));
    report(11, "metric anchors", anchors());

    let failed: Vec<u8> = lines.iter().filter(|(_, _, o)| !o.pass).map(|(id, _, _)| *id).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", lines.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed {failed:?}");
        ExitCode::FAILURE
    }
}
