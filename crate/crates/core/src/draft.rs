//! Chain-of-Draft data model.
//!
//! A draft is an ordered list of terse reasoning steps followed by a final
//! answer. Each step may carry at most [`MAX_STEP_WORDS`] whitespace-delimited
//! words, and at least one.
//!
//! Wire format, one item per line, surrounding whitespace ignored:
//!
//! ```text
//! step: halve the input
//! step: add one back
//! #### 42
//! ```

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_STEP_WORDS: usize = 5;

const STEP_PREFIX: &str = "step:";
const ANSWER_PREFIX: &str = "####";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DraftError {
    #[error("draft has no `#### <answer>` line")]
    MissingAnswerLine,
    #[error("draft has no step lines")]
    EmptyDraft,
    #[error("line {line}: malformed draft line `{content}`")]
    MalformedLine { line: usize, content: String },
    #[error("step text contains a newline")]
    NewlineInStep,
    #[error("diversity of an empty draft set is undefined")]
    EmptyInput,
}

/// One reasoning step. The word count is cached at construction.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ReasoningStep {
    text: String,
    word_count: usize,
}

impl ReasoningStep {
    /// Builds a step from `text`, trimming surrounding whitespace.
    pub fn new(text: &str) -> Result<Self, DraftError> {
        let text = text.trim();
        if text.contains(['\n', '\r']) {
            return Err(DraftError::NewlineInStep);
        }
        Ok(Self {
            word_count: count_words(text),
            text: text.to_owned(),
        })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn word_count(&self) -> usize {
        self.word_count
    }
}

/// Counts Unicode-whitespace-separated tokens; punctuation sticks to its word.
pub fn count_words(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Steps plus answer, without any generation metadata. This is what the wire
/// format carries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DraftBody {
    pub steps: Vec<ReasoningStep>,
    pub answer: String,
}

impl DraftBody {
    pub fn new(steps: Vec<ReasoningStep>, answer: impl Into<String>) -> Self {
        Self {
            steps,
            answer: answer.into().trim().to_owned(),
        }
    }

    /// Convenience for tests and fixtures; panics on a newline in a step.
    pub fn from_strs(steps: &[&str], answer: &str) -> Self {
        let steps = steps
            .iter()
            .map(|s| ReasoningStep::new(s).expect("step text without newlines"))
            .collect();
        Self::new(steps, answer)
    }
}

impl AsRef<DraftBody> for DraftBody {
    fn as_ref(&self) -> &DraftBody {
        self
    }
}

/// Identifies one draft within a run: which query, which agent, which slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DraftRef {
    pub query_id: u64,
    pub agent_id: usize,
    pub draft_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationMeta {
    /// Sampling temperature; the training loop keeps it in `[0.2, 0.8]`.
    pub temperature: f64,
    pub strategy_id: usize,
    /// Number of this agent's earlier drafts the draft was conditioned on.
    pub history_len: usize,
    pub seed: u64,
}

/// A candidate solution produced by one agent for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Draft {
    pub agent_id: usize,
    pub draft_index: usize,
    pub body: DraftBody,
    pub meta: GenerationMeta,
}

impl Draft {
    pub fn draft_ref(&self, query_id: u64) -> DraftRef {
        DraftRef {
            query_id,
            agent_id: self.agent_id,
            draft_index: self.draft_index,
        }
    }
}

impl AsRef<DraftBody> for Draft {
    fn as_ref(&self) -> &DraftBody {
        &self.body
    }
}

/// JSON shape of a draft inside event logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DraftRecord {
    pub agent_id: usize,
    pub draft_index: usize,
    pub steps: Vec<String>,
    pub answer: String,
    pub meta: GenerationMeta,
}

impl From<&Draft> for DraftRecord {
    fn from(d: &Draft) -> Self {
        Self {
            agent_id: d.agent_id,
            draft_index: d.draft_index,
            steps: d.body.steps.iter().map(|s| s.text.clone()).collect(),
            answer: d.body.answer.clone(),
            meta: d.meta,
        }
    }
}

impl TryFrom<DraftRecord> for Draft {
    type Error = DraftError;

    fn try_from(r: DraftRecord) -> Result<Self, Self::Error> {
        let steps = r
            .steps
            .iter()
            .map(|s| ReasoningStep::new(s))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Draft {
            agent_id: r.agent_id,
            draft_index: r.draft_index,
            body: DraftBody::new(steps, r.answer),
            meta: r.meta,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationReason {
    TooManyWords,
    EmptyStep,
    EmptyAnswer,
    NoSteps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationSite {
    Step(usize),
    Answer,
    Draft,
}

impl fmt::Display for ViolationSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViolationSite::Step(i) => write!(f, "step {i}"),
            ViolationSite::Answer => f.write_str("answer"),
            ViolationSite::Draft => f.write_str("draft"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub valid: bool,
    pub violations: Vec<(ViolationSite, ViolationReason)>,
}

pub fn validate_step(step: &ReasoningStep) -> bool {
    (1..=MAX_STEP_WORDS).contains(&step.word_count)
}

/// Checks every step against the word bound, then the answer.
pub fn validate_draft(draft: impl AsRef<DraftBody>) -> ValidationReport {
    let body = draft.as_ref();
    let mut violations = Vec::new();
    if body.steps.is_empty() {
        violations.push((ViolationSite::Draft, ViolationReason::NoSteps));
    }
    for (i, step) in body.steps.iter().enumerate() {
        if step.word_count == 0 {
            violations.push((ViolationSite::Step(i), ViolationReason::EmptyStep));
        } else if step.word_count > MAX_STEP_WORDS {
            violations.push((ViolationSite::Step(i), ViolationReason::TooManyWords));
        }
    }
    if body.answer.trim().is_empty() {
        violations.push((ViolationSite::Answer, ViolationReason::EmptyAnswer));
    }
    ValidationReport {
        valid: violations.is_empty(),
        violations,
    }
}

/// Renders the canonical wire form. `parse_draft(render_draft(b)) == b`.
pub fn render_draft(body: &DraftBody) -> String {
    let mut out = String::new();
    for step in &body.steps {
        out.push_str(STEP_PREFIX);
        out.push(' ');
        out.push_str(&step.text);
        out.push('\n');
    }
    out.push_str(ANSWER_PREFIX);
    out.push(' ');
    out.push_str(&body.answer);
    out
}

/// Trims every line and drops blank ones; the canonical form `render_draft`
/// reproduces.
pub fn normalize_draft_text(text: &str) -> String {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            if let Some(rest) = l.strip_prefix(STEP_PREFIX) {
                format!("{STEP_PREFIX} {}", rest.trim())
            } else if let Some(rest) = l.strip_prefix(ANSWER_PREFIX) {
                format!("{ANSWER_PREFIX} {}", rest.trim())
            } else {
                l.to_owned()
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

enum Line<'a> {
    Blank,
    Step(&'a str),
    Answer(&'a str),
    Other,
}

fn classify(line: &str) -> Line<'_> {
    let line = line.trim();
    if line.is_empty() {
        Line::Blank
    } else if let Some(rest) = line.strip_prefix(STEP_PREFIX) {
        Line::Step(rest)
    } else if let Some(rest) = line.strip_prefix(ANSWER_PREFIX) {
        Line::Answer(rest)
    } else {
        Line::Other
    }
}

/// Parses a single draft. Line numbers in errors are 1-based.
pub fn parse_draft(text: &str) -> Result<DraftBody, DraftError> {
    parse_block(text.lines().enumerate().map(|(i, l)| (i + 1, l)))
}

fn parse_block<'a>(lines: impl Iterator<Item = (usize, &'a str)>) -> Result<DraftBody, DraftError> {
    let mut steps = Vec::new();
    let mut answer: Option<String> = None;
    for (line_no, raw) in lines {
        match classify(raw) {
            Line::Blank => {}
            Line::Step(rest) if answer.is_none() => {
                steps.push(ReasoningStep::new(rest)?);
            }
            Line::Answer(rest) if answer.is_none() => {
                answer = Some(rest.trim().to_owned());
            }
            _ => {
                return Err(DraftError::MalformedLine {
                    line: line_no,
                    content: raw.trim().to_owned(),
                })
            }
        }
    }
    match answer {
        _ if steps.is_empty() => Err(DraftError::EmptyDraft),
        None => Err(DraftError::MissingAnswerLine),
        Some(answer) => Ok(DraftBody { steps, answer }),
    }
}

/// Parses a file holding several drafts, each terminated by its answer line.
/// Returns one result per draft, along with the 1-based line it starts on.
pub fn parse_draft_file(text: &str) -> Vec<(usize, Result<DraftBody, DraftError>)> {
    let mut out = Vec::new();
    let mut block: Vec<(usize, &str)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if block.is_empty() && matches!(classify(line), Line::Blank) {
            continue;
        }
        block.push((line_no, line));
        if matches!(classify(line), Line::Answer(_)) {
            let start = block[0].0;
            out.push((start, parse_block(block.drain(..))));
        }
    }
    if !block.is_empty() || out.is_empty() {
        let start = block.first().map_or(1, |b| b.0);
        out.push((start, parse_block(block.into_iter())));
    }
    out
}

fn token_set(body: &DraftBody) -> BTreeSet<String> {
    body.steps
        .iter()
        .map(|s| s.text.as_str())
        .chain(std::iter::once(body.answer.as_str()))
        .flat_map(str::split_whitespace)
        .map(str::to_lowercase)
        .collect()
}

fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Mean pairwise `1 - Jaccard` over lowercased tokens of steps and answer.
pub fn diversity<D: AsRef<DraftBody>>(drafts: &[D]) -> Result<f64, DraftError> {
    if drafts.is_empty() {
        return Err(DraftError::EmptyInput);
    }
    let sets: Vec<_> = drafts.iter().map(|d| token_set(d.as_ref())).collect();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..sets.len() {
        for j in (i + 1)..sets.len() {
            total += 1.0 - jaccard(&sets[i], &sets[j]);
            pairs += 1;
        }
    }
    Ok(if pairs == 0 { 0.0 } else { total / pairs as f64 })
}

/// Mean `1 - Jaccard` between `drafts[index]` and each of its siblings.
pub fn mean_distance_to_others<D: AsRef<DraftBody>>(drafts: &[D], index: usize) -> f64 {
    if drafts.len() < 2 {
        return 0.0;
    }
    let me = token_set(drafts[index].as_ref());
    let total: f64 = drafts
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != index)
        .map(|(_, d)| 1.0 - jaccard(&me, &token_set(d.as_ref())))
        .sum();
    total / (drafts.len() - 1) as f64
}
