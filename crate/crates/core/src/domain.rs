//! Questions, sampled responses, rewards and the rule-based answer verifier.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default number of responses sampled per question.
pub const DEFAULT_GROUP_SIZE: usize = 8;

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("invalid question: {0}")]
    InvalidQuestion(String),
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("invalid group: {0}")]
    InvalidGroup(String),
    #[error("reward configuration error: {0}")]
    RewardConfig(String),
    #[error("sampler failed: {0}")]
    Sampler(String),
    #[error("dataset line {line}: {message}")]
    Dataset { line: usize, message: String },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Where a question came from: the original dataset or one of the three
/// reformulation aspects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Original,
    Background,
    Term,
    Subproblem,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Original => "original",
            Source::Background => "background",
            Source::Term => "term",
            Source::Subproblem => "subproblem",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "original" => Ok(Source::Original),
            "background" => Ok(Source::Background),
            "term" => Ok(Source::Term),
            "subproblem" => Ok(Source::Subproblem),
            other => Err(format!("unknown source {other:?}")),
        }
    }
}

/// A verifiable question. Prompt tokens are the UTF-8 bytes of the question
/// text, so every question, synthetic or reformulated, has a stable encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Question {
    pub id: String,
    pub text: String,
    pub prompt_tokens: Vec<u32>,
    pub gold_answer: String,
    pub stratum: u32,
    pub source: Source,
}

impl Question {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        gold_answer: impl Into<String>,
        stratum: u32,
        source: Source,
    ) -> Result<Self, DomainError> {
        let text = text.into();
        let gold_answer = gold_answer.into();
        if text.is_empty() {
            return Err(DomainError::InvalidQuestion("empty question text".into()));
        }
        if gold_answer.is_empty() {
            return Err(DomainError::InvalidQuestion("empty gold answer".into()));
        }
        let prompt_tokens = encode_prompt(&text);
        Ok(Self {
            id: id.into(),
            text,
            prompt_tokens,
            gold_answer,
            stratum,
            source,
        })
    }

    pub fn to_record(&self) -> QuestionRecord {
        QuestionRecord {
            id: self.id.clone(),
            question: self.text.clone(),
            answer: self.gold_answer.clone(),
            stratum: self.stratum,
            source: self.source,
        }
    }
}

/// Byte-level prompt encoding.
pub fn encode_prompt(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionRecord {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub stratum: u32,
    pub source: Source,
}

impl TryFrom<QuestionRecord> for Question {
    type Error = DomainError;

    fn try_from(r: QuestionRecord) -> Result<Self, Self::Error> {
        Question::new(r.id, r.question, r.answer, r.stratum, r.source)
    }
}

pub fn write_jsonl<W: Write>(mut out: W, questions: &[Question]) -> Result<(), DomainError> {
    for q in questions {
        let line = serde_json::to_string(&q.to_record()).expect("record serializes");
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<Question>, DomainError> {
    let mut questions = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: QuestionRecord = serde_json::from_str(&line).map_err(|e| DomainError::Dataset {
            line: idx + 1,
            message: e.to_string(),
        })?;
        let q = Question::try_from(record).map_err(|e| DomainError::Dataset {
            line: idx + 1,
            message: e.to_string(),
        })?;
        questions.push(q);
    }
    Ok(questions)
}

pub fn save_dataset(path: &Path, questions: &[Question]) -> Result<(), DomainError> {
    let file = std::fs::File::create(path)?;
    write_jsonl(std::io::BufWriter::new(file), questions)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Question>, DomainError> {
    let file = std::fs::File::open(path)?;
    read_jsonl(std::io::BufReader::new(file))
}

/// A sampled response. `logp_old` holds the per-token log-probabilities under
/// the policy that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    pub tokens: Vec<u32>,
    pub text: String,
    pub logp_old: Vec<f64>,
}

impl Response {
    pub fn new(tokens: Vec<u32>, text: impl Into<String>, logp_old: Vec<f64>) -> Result<Self, DomainError> {
        if tokens.is_empty() {
            return Err(DomainError::InvalidResponse("response has no tokens".into()));
        }
        if tokens.len() != logp_old.len() {
            return Err(DomainError::InvalidResponse(format!(
                "{} tokens but {} log-probabilities",
                tokens.len(),
                logp_old.len()
            )));
        }
        if let Some(bad) = logp_old.iter().find(|lp| !(**lp <= 0.0)) {
            return Err(DomainError::InvalidResponse(format!(
                "log-probability {bad} is not <= 0"
            )));
        }
        Ok(Self {
            tokens,
            text: text.into(),
            logp_old,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A question with its group of sampled responses and their rewards.
///
/// `accuracies` carries the accuracy component of each reward. Under an
/// accuracy-only reward it equals `rewards`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardedGroup {
    pub question: Question,
    pub responses: Vec<Response>,
    pub rewards: Vec<f64>,
    pub accuracies: Vec<f64>,
}

impl RewardedGroup {
    pub fn new(
        question: Question,
        responses: Vec<Response>,
        rewards: Vec<f64>,
        accuracies: Vec<f64>,
    ) -> Result<Self, DomainError> {
        if responses.len() < 2 {
            return Err(DomainError::InvalidGroup(format!("group size {} < 2", responses.len())));
        }
        if rewards.len() != responses.len() || accuracies.len() != responses.len() {
            return Err(DomainError::InvalidGroup(format!(
                "{} responses, {} rewards, {} accuracies",
                responses.len(),
                rewards.len(),
                accuracies.len()
            )));
        }
        Ok(Self {
            question,
            responses,
            rewards,
            accuracies,
        })
    }

    /// Group whose rewards are pure accuracies.
    pub fn with_accuracy_rewards(
        question: Question,
        responses: Vec<Response>,
        rewards: Vec<f64>,
    ) -> Result<Self, DomainError> {
        let acc = rewards.clone();
        Self::new(question, responses, rewards, acc)
    }

    pub fn group_size(&self) -> usize {
        self.responses.len()
    }

    pub fn token_count(&self) -> usize {
        self.responses.iter().map(Response::len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    AccuracyOnly,
    AccuracyPlusLength,
}

/// How rewards are computed from verified accuracy and response length.
///
/// Under `AccuracyPlusLength` the penalty is zero up to `length_soft_threshold`
/// tokens and falls linearly to `-length_penalty_cap` at `length_limit`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub kind: RewardKind,
    pub length_penalty_cap: f64,
    pub length_soft_threshold: usize,
    pub length_limit: usize,
}

impl RewardSpec {
    pub fn accuracy_only() -> Self {
        Self {
            kind: RewardKind::AccuracyOnly,
            length_penalty_cap: 0.0,
            length_soft_threshold: 0,
            length_limit: 0,
        }
    }

    pub fn accuracy_plus_length(cap: f64, soft_threshold: usize, limit: usize) -> Result<Self, DomainError> {
        let spec = Self {
            kind: RewardKind::AccuracyPlusLength,
            length_penalty_cap: cap,
            length_soft_threshold: soft_threshold,
            length_limit: limit,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), DomainError> {
        if self.kind == RewardKind::AccuracyOnly {
            return Ok(());
        }
        if !(self.length_penalty_cap >= 0.0) || !self.length_penalty_cap.is_finite() {
            return Err(DomainError::RewardConfig(format!(
                "length penalty cap {} must be finite and >= 0",
                self.length_penalty_cap
            )));
        }
        if self.length_limit < self.length_soft_threshold {
            return Err(DomainError::RewardConfig(format!(
                "length limit {} is below soft threshold {}",
                self.length_limit, self.length_soft_threshold
            )));
        }
        Ok(())
    }

    /// Reward for a response with the given verified accuracy and length.
    pub fn reward(&self, accuracy: f64, response_len: usize) -> Result<f64, DomainError> {
        match self.kind {
            RewardKind::AccuracyOnly => Ok(accuracy),
            RewardKind::AccuracyPlusLength => composite_reward(accuracy, response_len, self),
        }
    }
}

/// Accuracy plus a linear overlong penalty.
pub fn composite_reward(accuracy: f64, response_len: usize, spec: &RewardSpec) -> Result<f64, DomainError> {
    if spec.kind != RewardKind::AccuracyPlusLength {
        return Err(DomainError::RewardConfig(
            "composite reward requested for an accuracy-only spec".into(),
        ));
    }
    spec.validate()?;
    let penalty = if response_len <= spec.length_soft_threshold {
        0.0
    } else if response_len >= spec.length_limit {
        -spec.length_penalty_cap
    } else {
        let ramp = (spec.length_limit - spec.length_soft_threshold) as f64;
        let over = (response_len - spec.length_soft_threshold) as f64;
        -spec.length_penalty_cap * over / ramp
    };
    Ok(accuracy + penalty)
}

/// Canonical form of an answer: trimmed, boxed wrapper removed, leading zeros
/// stripped from integers. Returns `None` when nothing answer-like remains.
pub fn canonicalize_answer(raw: &str) -> Option<String> {
    let mut s = raw.trim();
    s = unwrap_boxed(s).trim();
    if s.is_empty() {
        return None;
    }
    Some(strip_leading_zeros(s))
}

fn unwrap_boxed(s: &str) -> &str {
    // Accept `\boxed{..}` and `boxed{..}`; take the last boxed answer.
    let Some(start) = s.rfind("boxed{") else {
        return s;
    };
    let inner_start = start + "boxed{".len();
    let mut depth = 1usize;
    for (offset, ch) in s[inner_start..].char_indices() {
        match ch {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return &s[inner_start..inner_start + offset];
                }
            }
            _ => {}
        }
    }
    // Unbalanced wrapper: leave as is, it will not match a clean gold answer.
    s
}

fn strip_leading_zeros(s: &str) -> String {
    let (sign, digits) = match s.strip_prefix('-') {
        Some(rest) => ("-", rest),
        None => ("", s),
    };
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return s.to_string();
    }
    let trimmed = digits.trim_start_matches('0');
    if trimmed.is_empty() {
        "0".to_string()
    } else {
        format!("{sign}{trimmed}")
    }
}

/// Binary accuracy: 1 when the canonical final answer matches the gold answer.
pub fn verify_answer(response_text: &str, gold_answer: &str) -> f64 {
    match (canonicalize_answer(response_text), canonicalize_answer(gold_answer)) {
        (Some(a), Some(b)) if a == b => 1.0,
        _ => 0.0,
    }
}

/// Anything that can produce a response for a question.
pub trait ResponseSampler: Sync {
    fn sample_response(&self, question: &Question, rng: &mut dyn RngCore) -> Result<Response, DomainError>;
}

/// Samples `group_size` responses and scores them.
pub fn build_group(
    question: &Question,
    group_size: usize,
    sampler: &dyn ResponseSampler,
    reward_spec: &RewardSpec,
    rng: &mut dyn RngCore,
) -> Result<RewardedGroup, DomainError> {
    if group_size < 2 {
        return Err(DomainError::InvalidGroup(format!("group size {group_size} < 2")));
    }
    reward_spec.validate()?;
    let mut responses = Vec::with_capacity(group_size);
    let mut rewards = Vec::with_capacity(group_size);
    let mut accuracies = Vec::with_capacity(group_size);
    for _ in 0..group_size {
        let response = sampler.sample_response(question, rng)?;
        let acc = verify_answer(&response.text, &question.gold_answer);
        rewards.push(reward_spec.reward(acc, response.len())?);
        accuracies.push(acc);
        responses.push(response);
    }
    RewardedGroup::new(question.clone(), responses, rewards, accuracies)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn q() -> Question {
        Question::new("q1", "3 + 4 mod 5", "2", 0, Source::Original).unwrap()
    }

    struct Fixed(&'static str);

    impl ResponseSampler for Fixed {
        fn sample_response(&self, _q: &Question, _rng: &mut dyn RngCore) -> Result<Response, DomainError> {
            Response::new(vec![1], self.0, vec![-0.5])
        }
    }

    struct Alternating(AtomicUsize);

    impl ResponseSampler for Alternating {
        fn sample_response(&self, q: &Question, _rng: &mut dyn RngCore) -> Result<Response, DomainError> {
            let n = self.0.fetch_add(1, Ordering::SeqCst);
            let text = if n.is_multiple_of(2) {
                q.gold_answer.clone()
            } else {
                "wrong".into()
            };
            Response::new(vec![1, 2], text, vec![-0.1, -0.2])
        }
    }

    struct Failing;

    impl ResponseSampler for Failing {
        fn sample_response(&self, _q: &Question, _rng: &mut dyn RngCore) -> Result<Response, DomainError> {
            Err(DomainError::Sampler("boom".into()))
        }
    }

    #[test]
    fn verify_examples() {
        assert_eq!(verify_answer("boxed{42}", "42"), 1.0);
        assert_eq!(verify_answer("\\boxed{42}", "42"), 1.0);
        assert_eq!(verify_answer("41", "42"), 0.0);
        assert_eq!(verify_answer("  042 ", "42"), 1.0);
        assert_eq!(verify_answer("000", "0"), 1.0);
        assert_eq!(verify_answer("", "0"), 0.0);
        assert_eq!(verify_answer("boxed{7", "7"), 0.0);
        assert_eq!(verify_answer("-07", "-7"), 1.0);
    }

    #[test]
    fn composite_examples() {
        let spec = RewardSpec::accuracy_plus_length(0.5, 10, 20).unwrap();
        assert_eq!(composite_reward(1.0, 10, &spec).unwrap(), 1.0);
        assert_eq!(composite_reward(1.0, 20, &spec).unwrap(), 0.5);
        assert_eq!(composite_reward(0.0, 15, &spec).unwrap(), -0.25);
        assert_eq!(composite_reward(1.0, 99, &spec).unwrap(), 0.5);
        assert_eq!(composite_reward(1.0, 3, &spec).unwrap(), 1.0);
    }

    #[test]
    fn composite_rejects_bad_limits() {
        assert!(matches!(
            RewardSpec::accuracy_plus_length(0.5, 20, 10),
            Err(DomainError::RewardConfig(_))
        ));
        let mut spec = RewardSpec::accuracy_plus_length(0.5, 10, 20).unwrap();
        spec.length_limit = 5;
        assert!(composite_reward(1.0, 7, &spec).is_err());
        assert!(composite_reward(1.0, 7, &RewardSpec::accuracy_only()).is_err());
    }

    #[test]
    fn build_group_with_stubs() {
        let mut rng = rand::rng();
        let spec = RewardSpec::accuracy_only();
        let g = build_group(&q(), 8, &Fixed("2"), &spec, &mut rng).unwrap();
        assert_eq!(g.rewards, vec![1.0; 8]);
        let g = build_group(&q(), 8, &Fixed("3"), &spec, &mut rng).unwrap();
        assert_eq!(g.rewards, vec![0.0; 8]);
        let g = build_group(&q(), 4, &Alternating(AtomicUsize::new(0)), &spec, &mut rng).unwrap();
        assert_eq!(g.rewards, vec![1.0, 0.0, 1.0, 0.0]);
        assert!(build_group(&q(), 1, &Fixed("2"), &spec, &mut rng).is_err());
        assert!(matches!(
            build_group(&q(), 4, &Failing, &spec, &mut rng),
            Err(DomainError::Sampler(_))
        ));
    }

    #[test]
    fn invariants_on_construction() {
        assert!(Question::new("x", "", "1", 0, Source::Original).is_err());
        assert!(Question::new("x", "1+1", "", 0, Source::Original).is_err());
        assert!(Response::new(vec![], "", vec![]).is_err());
        assert!(Response::new(vec![1, 2], "", vec![-1.0]).is_err());
        assert!(Response::new(vec![1], "", vec![0.5]).is_err());
        let r = Response::new(vec![1], "2", vec![-1.0]).unwrap();
        assert!(RewardedGroup::with_accuracy_rewards(q(), vec![r.clone()], vec![1.0]).is_err());
        assert!(RewardedGroup::with_accuracy_rewards(q(), vec![r.clone(), r], vec![1.0]).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let qs = vec![
            q(),
            Question::new("q2#term", "Définissez ...", "7", 2, Source::Term).unwrap(),
        ];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &qs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.ends_with('\n'));
        assert!(
            text.starts_with(r#"{"id":"q1","question":"3 + 4 mod 5","answer":"2","stratum":0,"source":"original"}"#)
        );
        assert_eq!(read_jsonl(&buf[..]).unwrap(), qs);
    }

    #[test]
    fn jsonl_reports_bad_line() {
        let data = b"{\"id\":\"a\",\"question\":\"1\",\"answer\":\"1\",\"stratum\":0,\"source\":\"original\"}\n{\"id\":\"b\"}\n";
        match read_jsonl(&data[..]) {
            Err(DomainError::Dataset { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn verify_is_canonical(n in 0u32..100_000, zeros in 0usize..4, pad in 0usize..3) {
                let raw = format!("{}{}{}{}", " ".repeat(pad), "0".repeat(zeros), n, " ".repeat(pad));
                let gold = n.to_string();
                prop_assert_eq!(verify_answer(&raw, &gold), 1.0);
                let boxed = format!("\\boxed{{{raw}}}");
                prop_assert_eq!(verify_answer(&boxed, &gold), 1.0);
                let canon = canonicalize_answer(&raw).unwrap();
                prop_assert_eq!(verify_answer(&canon, &canonicalize_answer(&gold).unwrap()), 1.0);
            }

            #[test]
            fn accuracy_only_rewards_are_binary(text in "[0-9 ]{0,6}", gold in "[0-9]{1,3}", len in 1usize..40) {
                let r = RewardSpec::accuracy_only().reward(verify_answer(&text, &gold), len).unwrap();
                prop_assert!(r == 0.0 || r == 1.0);
            }

            #[test]
            fn composite_in_range(acc in prop::bool::ANY, len in 0usize..64, cap in 0.0f64..2.0, thr in 0usize..20, extra in 0usize..20) {
                let spec = RewardSpec::accuracy_plus_length(cap, thr, thr + extra).unwrap();
                let r = composite_reward(if acc { 1.0 } else { 0.0 }, len, &spec).unwrap();
                prop_assert!(r >= -cap - 1e-15 && r <= 1.0);
            }
        }
    }
}
