//! Chain-arithmetic reasoning tasks.
//!
//! A task starts from an integer and applies a short chain of `add`/`sub`/`mul`
//! operations with single-digit operands. The ground truth is the value at
//! the end of the chain; every intermediate value is also known, which gives
//! drafts partial credit and gives the policy a dense learning signal.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::draft::DraftBody;
use crate::seed;

pub const MAX_DEPTH: usize = 8;
pub const OPERAND_MIN: i64 = 1;
pub const OPERAND_MAX: i64 = 9;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("chain depth {0} outside [1, {MAX_DEPTH}]")]
    BadDepth(usize),
    #[error("operand range [{0}, {1}] is not a non-empty subrange of [1, 9]")]
    BadOperandRange(i64, i64),
    #[error("chain overflows 64-bit integers")]
    Overflow,
    #[error("suite line {line}: {msg}")]
    Suite { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Op {
    Add,
    Sub,
    Mul,
}

impl Op {
    pub const ALL: [Op; 3] = [Op::Add, Op::Sub, Op::Mul];

    pub fn apply(self, lhs: i64, rhs: i64) -> Option<i64> {
        match self {
            Op::Add => lhs.checked_add(rhs),
            Op::Sub => lhs.checked_sub(rhs),
            Op::Mul => lhs.checked_mul(rhs),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Op {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "add" => Ok(Op::Add),
            "sub" => Ok(Op::Sub),
            "mul" => Ok(Op::Mul),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChainSpec {
    pub start: i64,
    pub ops: Vec<(Op, i64)>,
}

impl ChainSpec {
    pub fn depth(&self) -> usize {
        self.ops.len()
    }

    /// Value after each operation, in order. The last entry is the answer.
    pub fn intermediates(&self) -> Result<Vec<i64>, EnvError> {
        let mut acc = self.start;
        self.ops
            .iter()
            .map(|&(op, operand)| {
                acc = op.apply(acc, operand).ok_or(EnvError::Overflow)?;
                Ok(acc)
            })
            .collect()
    }

    /// Value before position `t`: the start value, or the `t-1`th intermediate.
    pub fn value_before(&self, intermediates: &[i64], t: usize) -> i64 {
        if t == 0 {
            self.start
        } else {
            intermediates[t - 1]
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperandRange {
    pub lo: i64,
    pub hi: i64,
}

impl Default for OperandRange {
    fn default() -> Self {
        Self { lo: OPERAND_MIN, hi: OPERAND_MAX }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: u64,
    pub prompt: String,
    pub payload: ChainSpec,
    pub truth: i64,
}

impl Query {
    pub fn from_spec(id: u64, payload: ChainSpec) -> Result<Self, EnvError> {
        if payload.depth() == 0 || payload.depth() > MAX_DEPTH {
            return Err(EnvError::BadDepth(payload.depth()));
        }
        let truth = *payload.intermediates()?.last().expect("depth >= 1");
        Ok(Self {
            id,
            prompt: render_prompt(&payload),
            payload,
            truth,
        })
    }

    pub fn depth(&self) -> usize {
        self.payload.depth()
    }

    pub fn intermediates(&self) -> Vec<i64> {
        self.payload
            .intermediates()
            .expect("queries are validated at construction")
    }
}

/// Canonical prompt text, e.g. `start 3; add 4; mul 2; ?`.
pub fn render_prompt(payload: &ChainSpec) -> String {
    let mut s = format!("start {}", payload.start);
    for (op, operand) in &payload.ops {
        s.push_str(&format!("; {op} {operand}"));
    }
    s.push_str("; ?");
    s
}

/// Draws a chain from `seed`. The query id is the seed itself.
pub fn generate_task(seed: u64, depth: usize, range: OperandRange) -> Result<Query, EnvError> {
    if depth == 0 || depth > MAX_DEPTH {
        return Err(EnvError::BadDepth(depth));
    }
    if range.lo < OPERAND_MIN || range.hi > OPERAND_MAX || range.lo > range.hi {
        return Err(EnvError::BadOperandRange(range.lo, range.hi));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = rng.random_range(range.lo..=range.hi);
    let ops = (0..depth)
        .map(|_| {
            let op = Op::ALL[rng.random_range(0..Op::ALL.len())];
            (op, rng.random_range(range.lo..=range.hi))
        })
        .collect();
    Query::from_spec(seed, ChainSpec { start, ops })
}

/// `count` tasks with ids `0..count`; task `i` is drawn from a seed derived
/// from `(seed, i)`.
pub fn generate_suite(
    seed: u64,
    count: usize,
    depth: usize,
    range: OperandRange,
) -> Result<Vec<Query>, EnvError> {
    (0..count as u64)
        .map(|i| {
            let mut q = generate_task(seed::derive(seed, &[seed::tag::SUITE, i]), depth, range)?;
            q.id = i;
            Ok(q)
        })
        .collect()
}

pub fn write_suite<W: Write>(mut w: W, suite: &[Query]) -> Result<(), EnvError> {
    for q in suite {
        serde_json::to_writer(&mut w, q).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a JSONL suite and re-checks every record's prompt and truth.
pub fn read_suite<R: BufRead>(r: R) -> Result<Vec<Query>, EnvError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| EnvError::Suite { line: i + 1, msg };
        let q: Query = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let check = Query::from_spec(q.id, q.payload.clone()).map_err(|e| bad(e.to_string()))?;
        if check != q {
            return Err(bad("prompt or truth does not match payload".into()));
        }
        out.push(q);
    }
    Ok(out)
}

/// Relative weights of answer correctness and intermediate partial credit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardWeights {
    pub answer: f64,
    pub intermediate: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self { answer: 0.7, intermediate: 0.3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskReward {
    pub value: f64,
    pub answer_correct: bool,
    pub intermediate_fraction: f64,
}

/// The last integer literal in `text`, if any. A `-` directly before the
/// digits makes it negative.
pub fn declared_value(text: &str) -> Option<i64> {
    let bytes = text.as_bytes();
    let mut end = bytes.len();
    while end > 0 {
        if bytes[end - 1].is_ascii_digit() {
            let mut start = end - 1;
            while start > 0 && bytes[start - 1].is_ascii_digit() {
                start -= 1;
            }
            if start > 0 && bytes[start - 1] == b'-' {
                start -= 1;
            }
            return text[start..end].parse().ok();
        }
        end -= 1;
    }
    None
}

/// Integer literals in `text`, in order of appearance.
pub fn integer_literals(text: &str) -> Vec<i64> {
    let mut out = Vec::new();
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let mut start = i;
            if start > 0 && bytes[start - 1] == b'-' {
                start -= 1;
            }
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if let Ok(v) = text[start..i].parse() {
                out.push(v);
            }
        } else {
            i += 1;
        }
    }
    out
}

/// Scores a draft against the query's ground truth.
///
/// Intermediate credit compares each step's declared value position-wise to
/// the true chain. The denominator is the longer of the two chains, so both
/// truncated and padded drafts lose credit.
pub fn task_reward(draft: &DraftBody, query: &Query, weights: &RewardWeights) -> TaskReward {
    let answer_correct = draft.answer.trim().parse::<i64>().ok() == Some(query.truth);
    let truth = query.intermediates();
    let matches = draft
        .steps
        .iter()
        .zip(&truth)
        .filter(|(step, &t)| declared_value(step.text()) == Some(t))
        .count();
    let denom = draft.steps.len().max(truth.len());
    let intermediate_fraction = if denom == 0 { 0.0 } else { matches as f64 / denom as f64 };
    let value = weights.answer * f64::from(u8::from(answer_correct))
        + weights.intermediate * intermediate_fraction;
    TaskReward {
        value: value.clamp(0.0, 1.0),
        answer_correct,
        intermediate_fraction,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(start: i64, ops: &[(Op, i64)]) -> Query {
        Query::from_spec(0, ChainSpec { start, ops: ops.to_vec() }).unwrap()
    }

    #[test]
    fn truth_of_simple_chain() {
        let query = q(3, &[(Op::Add, 4), (Op::Mul, 2)]);
        assert_eq!(query.truth, 14);
        assert_eq!(query.intermediates(), vec![7, 14]);
        assert_eq!(query.prompt, "start 3; add 4; mul 2; ?");
    }

    #[test]
    fn prompt_format() {
        assert_eq!(
            render_prompt(&ChainSpec { start: 3, ops: vec![(Op::Add, 4)] }),
            "start 3; add 4; ?"
        );
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_task(1, 1, OperandRange::default()).unwrap();
        let b = generate_task(1, 1, OperandRange::default()).unwrap();
        assert_eq!(a, b);
        assert_eq!(render_prompt(&a.payload), render_prompt(&b.payload));
        assert_ne!(a, generate_task(2, 1, OperandRange::default()).unwrap());
    }

    #[test]
    fn depth_and_range_errors() {
        assert!(matches!(generate_task(1, 0, OperandRange::default()), Err(EnvError::BadDepth(0))));
        assert!(matches!(generate_task(1, 9, OperandRange::default()), Err(EnvError::BadDepth(9))));
        assert!(matches!(
            generate_task(1, 3, OperandRange { lo: 0, hi: 9 }),
            Err(EnvError::BadOperandRange(0, 9))
        ));
        assert!(matches!(
            generate_task(1, 3, OperandRange { lo: 5, hi: 4 }),
            Err(EnvError::BadOperandRange(..))
        ));
    }

    #[test]
    fn declared_value_extraction() {
        assert_eq!(declared_value("apply add 4 get 7"), Some(7));
        assert_eq!(declared_value("apply sub 9 get -5"), Some(-5));
        assert_eq!(declared_value("value is 12."), Some(12));
        assert_eq!(declared_value("no digits"), None);
        assert_eq!(integer_literals("apply mul 3 get -12"), vec![3, -12]);
    }

    #[test]
    fn reward_examples() {
        let w = RewardWeights::default();
        let query = q(3, &[(Op::Add, 4), (Op::Mul, 2)]);

        let perfect = DraftBody::from_strs(&["apply add 4 get 7", "apply mul 2 get 14"], "14");
        let r = task_reward(&perfect, &query, &w);
        assert_eq!(r.value, 1.0);
        assert!(r.answer_correct);

        let wrong = DraftBody::from_strs(&["apply add 4 get 8", "apply mul 2 get 16"], "16");
        assert_eq!(task_reward(&wrong, &query, &w).value, 0.0);

        let half = DraftBody::from_strs(&["apply add 4 get 8", "apply mul 2 get 14"], "14");
        let r = task_reward(&half, &query, &w);
        assert!((r.value - 0.85).abs() < 1e-12);
        assert_eq!(r.intermediate_fraction, 0.5);

        let garbage = DraftBody::from_strs(&["apply add 4 get 7"], "fourteen");
        let r = task_reward(&garbage, &query, &w);
        assert!(!r.answer_correct);
        assert!((r.value - 0.15).abs() < 1e-12);
    }

    #[test]
    fn suite_round_trip_and_tamper_detection() {
        let suite = generate_suite(42, 20, 3, OperandRange::default()).unwrap();
        assert_eq!(suite.iter().map(|q| q.id).collect::<Vec<_>>(), (0..20).collect::<Vec<_>>());
        let mut buf = Vec::new();
        write_suite(&mut buf, &suite).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().next().unwrap().contains(r#""ops":[["#));
        assert_eq!(read_suite(text.as_bytes()).unwrap(), suite);

        let tampered = text.replacen(r#""truth":"#, r#""truth":1"#, 1);
        assert!(matches!(read_suite(tampered.as_bytes()), Err(EnvError::Suite { line: 1, .. })));
    }

    fn brute_force(spec: &ChainSpec) -> i64 {
        let mut v = spec.start;
        for (op, x) in &spec.ops {
            v = match op {
                Op::Add => v + x,
                Op::Sub => v - x,
                Op::Mul => v * x,
            };
        }
        v
    }

    fn chain() -> impl Strategy<Value = ChainSpec> {
        let op = prop_oneof![Just(Op::Add), Just(Op::Sub), Just(Op::Mul)];
        (1i64..=9, prop::collection::vec((op, 1i64..=9), 1..=MAX_DEPTH))
            .prop_map(|(start, ops)| ChainSpec { start, ops })
    }

    proptest! {
        #[test]
        fn truth_matches_interpreter(spec in chain()) {
            let query = Query::from_spec(0, spec.clone()).unwrap();
            prop_assert_eq!(query.truth, brute_force(&spec));
        }

        #[test]
        fn prompt_injective(a in chain(), b in chain()) {
            prop_assert_eq!(a == b, render_prompt(&a) == render_prompt(&b));
        }

        #[test]
        fn reward_bounded_and_monotone(spec in chain(), answer_ok in any::<bool>(), mask in any::<u8>()) {
            let query = Query::from_spec(0, spec).unwrap();
            let truth = query.intermediates();
            let answer = if answer_ok { query.truth } else { query.truth + 1 };
            let render = |m: u8| {
                let steps: Vec<String> = truth.iter().enumerate().map(|(i, v)| {
                    let v = if m & (1 << i) != 0 { *v } else { v + 1 };
                    format!("apply op get {v}")
                }).collect();
                let steps: Vec<&str> = steps.iter().map(String::as_str).collect();
                DraftBody::from_strs(&steps, &answer.to_string())
            };
            let w = RewardWeights::default();
            let r = task_reward(&render(mask), &query, &w);
            prop_assert!((0.0..=1.0).contains(&r.value));
            prop_assert_eq!(r, task_reward(&render(mask), &query, &w));
            // Flip one more intermediate to correct: value never decreases.
            for bit in 0..truth.len() {
                let more = mask | (1 << bit);
                prop_assert!(task_reward(&render(more), &query, &w).value >= r.value);
            }
        }
    }
}
