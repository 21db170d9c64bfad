//! Multi-aspect question reformulation: prompt rendering, a chat-completions
//! client with retry, local constraint checks, the equivalence audit and
//! dataset augmentation with a persistent cache.
//!
//! Every reformulated record keeps the original gold answer untouched; only
//! the question text changes.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::domain::{DomainError, Question, Source};

pub const API_KEY_ENV: &str = "MATHFORGE_API_KEY";
pub const DEFAULT_MAX_RETRIES: u32 = 4;
pub const DEFAULT_PARALLELISM: usize = 4;
pub const WORD_DELTA_LIMIT: i64 = 100;

pub const REFORMULATION_TEMPLATE: &str = "I want you to act as an expert Math Question Rephraser.\n\
\n\
Your goal is to rephrase a given math question so it becomes more challenging for large AI models while remaining logically sound and fully comprehensible to humans. The rephrased question MUST yield exactly the same final answer as the original.\n\
\n\
You should complicate the given question using the following method:\n\
{instruction}\n\
\n\
You must strictly adhere to the following constraints:\n\
- The final answer MUST remain unchanged.\n\
- The rephrased question should be no more than 100 words longer than the given question.\n\
- Preserve the original interrogative verb (e.g., \u{201c}find\u{201d}, \u{201c}determine\u{201d}, \u{201c}compute\u{2026}\u{201d}, \u{201c}evaluate\u{201d}).\n\
- Use LaTeX for all mathematical expressions.\n\
- Output only the rephrased question (no hints, solutions, explanation, or commentary).\n\
\n\
#Given Question Start#\n\
{question}\n\
#Given Question End#";

pub const BACKGROUND_INSTRUCTION: &str = "- Add a story background that is not related to the core mathematical content of the given question, but seems to be related to the question.\n\
- If the given question already has such a background, change it to a new, complexer background.\n\
- Possible background themes include, but are not limited to, the following: history, culture, geography, nature, occupation, daily life, sports, art, science fiction, and adventure. Astronomy is explicitly excluded.\n\
- The background should be presented as natural parts of the question statement, ensuring the rephrased question is coherent and self-contained.";

pub const TERM_INSTRUCTION: &str = "- Invent a new, abstract mathematical term to define a concept that is central to the given question, and restate the entire question using this term.\n\
- The term should be presented as natural parts of the question statement, ensuring the rephrased question is coherent and self-contained.";

pub const SUBPROBLEM_INSTRUCTION: &str = "- Convert a key numerical condition of the given question which have a definite value into an independent sub-problem.\n\
- The sub-problem may belong to any branch of mathematics (e.g., algebra, geometry, number theory, combinatorics).\n\
- The sub-problem must be self-contained, have a unique solution, and its solution must yield exactly the value required for the original question.\n\
- The sub-problem should be presented as natural parts of the question statement, ensuring the rephrased question is coherent and self-contained.";

pub const AUDIT_TEMPLATE: &str = "You are an expert in mathematics and logic.\n\
\n\
Your task is to meticulously analyze and compare two versions of a mathematical problem: an \"Original Question\" and a \"Rewritten Question\". Your primary objective is to determine if these two questions are mathematically equivalent. For the purpose of this task, \"mathematically equivalent\" means that both questions, when solved correctly, will yield the identical final numerical answer or symbolic solution.\n\
\n\
Please structure your response as follows: 1. **Equivalence Verdict:** Start with a clear and unambiguous \"Yes\" or \"No\". 2. **Detailed Justification:** If they are equivalent, explain why the changes in wording, structure, or given information do not alter the underlying mathematical operations or the final result. If they are not equivalent, pinpoint the specific change in the rewritten question that alters the problem's mathematical core. Explain how this change leads to a different solution or answer.\n\
\n\
#Original Question Start#\n\
{question}\n\
#Original Question End#\n\
\n\
#Rewritten Question Start#\n\
{rewritten_question}\n\
#Rewritten Question End#";

#[derive(Debug, Error)]
pub enum MqrError {
    #[error("question text is empty")]
    EmptyQuestion,
    #[error("transport failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("request rejected: {0}")]
    Request(String),
    #[error("unusable reply: {0}")]
    Content(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("cache error: {0}")]
    Cache(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl MqrError {
    /// Transport failures are worth another run; everything else is not.
    pub fn is_retryable(&self) -> bool {
        matches!(self, MqrError::Transport { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aspect {
    Background,
    Term,
    Subproblem,
}

impl Aspect {
    pub const ALL: [Aspect; 3] = [Aspect::Background, Aspect::Term, Aspect::Subproblem];

    pub fn name(self) -> &'static str {
        match self {
            Aspect::Background => "background",
            Aspect::Term => "term",
            Aspect::Subproblem => "subproblem",
        }
    }

    pub fn instruction(self) -> &'static str {
        match self {
            Aspect::Background => BACKGROUND_INSTRUCTION,
            Aspect::Term => TERM_INSTRUCTION,
            Aspect::Subproblem => SUBPROBLEM_INSTRUCTION,
        }
    }

    pub fn source(self) -> Source {
        match self {
            Aspect::Background => Source::Background,
            Aspect::Term => Source::Term,
            Aspect::Subproblem => Source::Subproblem,
        }
    }

    pub fn from_source(source: Source) -> Option<Self> {
        match source {
            Source::Original => None,
            Source::Background => Some(Aspect::Background),
            Source::Term => Some(Aspect::Term),
            Source::Subproblem => Some(Aspect::Subproblem),
        }
    }
}

impl fmt::Display for Aspect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Aspect {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "background" => Ok(Aspect::Background),
            "term" => Ok(Aspect::Term),
            "subproblem" | "sub-problem" => Ok(Aspect::Subproblem),
            other => Err(format!(
                "unknown aspect {other:?} (expected background, term or subproblem)"
            )),
        }
    }
}

/// Substitutes `{name}` placeholders in one left-to-right pass, so text
/// spliced in is never rescanned.
fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len() + vars.iter().map(|(_, v)| v.len()).sum::<usize>());
    let mut rest = template;
    'outer: while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let tail = &rest[open..];
        for (name, value) in vars {
            let end = name.len() + 2;
            if tail.len() >= end && &tail[1..end - 1] == *name && tail.as_bytes()[end - 1] == b'}' {
                out.push_str(value);
                rest = &tail[end..];
                continue 'outer;
            }
        }
        out.push('{');
        rest = &tail[1..];
    }
    out.push_str(rest);
    out
}

pub fn render_prompt(question_text: &str, aspect: Aspect) -> Result<String, MqrError> {
    if question_text.trim().is_empty() {
        return Err(MqrError::EmptyQuestion);
    }
    Ok(fill(
        REFORMULATION_TEMPLATE,
        &[("instruction", aspect.instruction()), ("question", question_text)],
    ))
}

pub fn render_audit_prompt(original: &str, rewritten: &str) -> Result<String, MqrError> {
    if original.trim().is_empty() || rewritten.trim().is_empty() {
        return Err(MqrError::EmptyQuestion);
    }
    Ok(fill(
        AUDIT_TEMPLATE,
        &[("question", original), ("rewritten_question", rewritten)],
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub prompt: String,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendError {
    /// Timeouts, dropped connections, 429 and 5xx replies.
    Transient(String),
    Fatal(String),
}

/// One chat completion. Implemented by the HTTP backend and by any
/// `Fn(&ChatRequest) -> Result<String, BackendError>` closure.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError>;
}

impl<F> ChatBackend for F
where
    F: Fn(&ChatRequest) -> Result<String, BackendError> + Send + Sync,
{
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        self(request)
    }
}

/// OpenAI-compatible `POST {endpoint}/chat/completions`.
pub struct HttpChatBackend {
    url: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl fmt::Debug for HttpChatBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpChatBackend")
            .field("url", &self.url)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

#[derive(Deserialize)]
struct CompletionReply {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    message: CompletionMessage,
}

#[derive(Deserialize)]
struct CompletionMessage {
    content: Option<String>,
}

impl HttpChatBackend {
    pub fn new(endpoint: &str, api_key: Option<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url: format!("{}/chat/completions", endpoint.trim_end_matches('/')),
            api_key,
            agent,
        }
    }
}

impl ChatBackend for HttpChatBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let body = serde_json::json!({
            "model": request.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
        });
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| match e {
            ureq::Error::Timeout(_) | ureq::Error::Io(_) | ureq::Error::ConnectionFailed | ureq::Error::BodyStalled => {
                BackendError::Transient(e.to_string())
            }
            other => BackendError::Fatal(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(BackendError::Transient(format!("HTTP {status}")));
        }
        if status >= 400 {
            let detail = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(BackendError::Fatal(format!("HTTP {status}: {}", detail.trim())));
        }
        let reply: CompletionReply = resp
            .body_mut()
            .read_json()
            .map_err(|e| BackendError::Fatal(format!("malformed completion body: {e}")))?;
        reply
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Fatal("completion has no choices[0].message.content".into()))
    }
}

/// Connection settings for a live endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientConfig {
    pub endpoint: String,
    pub model: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub temperature: f64,
    /// Environment variable holding the bearer token.
    pub api_key_env: String,
    pub backoff_base_ms: u64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: String::new(),
            timeout_secs: 120.0,
            max_retries: DEFAULT_MAX_RETRIES,
            temperature: 1.0,
            api_key_env: API_KEY_ENV.into(),
            backoff_base_ms: 1000,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<(), MqrError> {
        if self.endpoint.is_empty() {
            return Err(MqrError::Config("endpoint is empty".into()));
        }
        if self.model.is_empty() {
            return Err(MqrError::Config("model is empty".into()));
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(MqrError::Config(format!(
                "timeout {} must be positive",
                self.timeout_secs
            )));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(MqrError::Config(format!(
                "temperature {} must be ≥ 0",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub content: String,
    pub attempts: u32,
}

/// A chat backend plus retry policy. Attempt `k` (1-based) that fails
/// transiently is followed by a sleep of `backoff_base · 2^(k−1)`.
pub struct ReformulatorClient {
    backend: Box<dyn ChatBackend>,
    pub model: String,
    pub temperature: f64,
    pub max_retries: u32,
    pub backoff_base: Duration,
    calls: AtomicUsize,
}

impl fmt::Debug for ReformulatorClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ReformulatorClient")
            .field("model", &self.model)
            .field("temperature", &self.temperature)
            .field("max_retries", &self.max_retries)
            .field("backoff_base", &self.backoff_base)
            .finish_non_exhaustive()
    }
}

impl ReformulatorClient {
    pub fn new(backend: impl ChatBackend + 'static, model: impl Into<String>) -> Self {
        Self {
            backend: Box::new(backend),
            model: model.into(),
            temperature: 1.0,
            max_retries: DEFAULT_MAX_RETRIES,
            backoff_base: Duration::from_secs(1),
            calls: AtomicUsize::new(0),
        }
    }

    /// HTTP client; the key is read from `config.api_key_env` if set.
    pub fn from_config(config: &ClientConfig) -> Result<Self, MqrError> {
        config.validate()?;
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        if api_key.is_none() {
            debug!("{} not set; sending requests without authorization", config.api_key_env);
        }
        let backend = HttpChatBackend::new(&config.endpoint, api_key, Duration::from_secs_f64(config.timeout_secs));
        Ok(Self {
            temperature: config.temperature,
            max_retries: config.max_retries,
            backoff_base: Duration::from_millis(config.backoff_base_ms),
            ..Self::new(backend, config.model.clone())
        })
    }

    pub fn with_retries(mut self, max_retries: u32, backoff_base: Duration) -> Self {
        self.max_retries = max_retries;
        self.backoff_base = backoff_base;
        self
    }

    /// Backend invocations so far, retries included.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn send(&self, prompt: &str) -> Result<Reply, MqrError> {
        let request = ChatRequest {
            model: self.model.clone(),
            prompt: prompt.to_string(),
            temperature: self.temperature,
        };
        let max_attempts = self.max_retries.saturating_add(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.calls.fetch_add(1, Ordering::SeqCst);
            match self.backend.complete(&request) {
                Ok(content) => {
                    return Ok(Reply {
                        content,
                        attempts: attempt,
                    })
                }
                Err(BackendError::Fatal(message)) => return Err(MqrError::Request(message)),
                Err(BackendError::Transient(message)) => {
                    if attempt >= max_attempts {
                        return Err(MqrError::Transport {
                            attempts: attempt,
                            message,
                        });
                    }
                    let delay = self.backoff_base.saturating_mul(1 << (attempt - 1).min(20));
                    warn!("attempt {attempt}/{max_attempts} failed ({message}); retrying in {delay:?}");
                    std::thread::sleep(delay);
                }
            }
        }
    }
}

/// Drops a surrounding Markdown code fence (with optional info string).
pub fn strip_code_fences(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else {
        return t;
    };
    let body = match rest.find('\n') {
        Some(i) => &rest[i + 1..],
        None => rest,
    };
    let body = body.trim_end();
    body.strip_suffix("```").unwrap_or(body).trim()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reformulation {
    pub text: String,
    pub attempts: u32,
}

pub fn reformulate(
    client: &ReformulatorClient,
    question: &Question,
    aspect: Aspect,
) -> Result<Reformulation, MqrError> {
    let prompt = render_prompt(&question.text, aspect)?;
    let reply = client.send(&prompt)?;
    let text = strip_code_fences(&reply.content);
    if text.is_empty() {
        return Err(MqrError::Content(format!(
            "empty reformulation for {} ({aspect})",
            question.id
        )));
    }
    Ok(Reformulation {
        text: text.to_string(),
        attempts: reply.attempts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckStatus {
    Pass,
    Flagged,
    Unchecked,
}

/// Advisory checks; nothing here rejects a reformulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub word_delta: i64,
    pub word_limit: CheckStatus,
    pub interrogative_verb: CheckStatus,
}

pub fn check_constraints(original: &str, rewritten: &str) -> ConstraintReport {
    let count = |s: &str| s.split_whitespace().count() as i64;
    let word_delta = count(rewritten) - count(original);
    ConstraintReport {
        word_delta,
        word_limit: if word_delta > WORD_DELTA_LIMIT {
            CheckStatus::Flagged
        } else {
            CheckStatus::Pass
        },
        interrogative_verb: CheckStatus::Unchecked,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Yes,
    No,
    Unaudited,
}

/// Byte spans of ASCII-alphanumeric words in `s`.
fn words(s: &str) -> impl Iterator<Item = (usize, &str)> {
    let bytes = s.as_bytes();
    let mut i = 0;
    std::iter::from_fn(move || {
        while i < bytes.len() && !bytes[i].is_ascii_alphanumeric() {
            i += 1;
        }
        if i >= bytes.len() {
            return None;
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_alphanumeric() {
            i += 1;
        }
        Some((start, &s[start..i]))
    })
}

fn verdict_word(w: &str) -> Option<Verdict> {
    if w.eq_ignore_ascii_case("yes") {
        Some(Verdict::Yes)
    } else if w.eq_ignore_ascii_case("no") {
        Some(Verdict::No)
    } else {
        None
    }
}

fn tidy_justification(rest: &str) -> String {
    rest.trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '.' | ',' | ':' | ';' | '*' | '-' | '!' | '"'))
        .trim_end()
        .to_string()
}

/// Reads an audit reply.
///
/// With an "Equivalence Verdict" header, the first standalone yes/no after it
/// (and before any "Detailed Justification" header) decides. Without one, the
/// reply's first word must be yes or no. Anything else is `Unaudited` and the
/// raw reply is kept as the justification.
pub fn parse_verdict(reply: &str) -> (Verdict, String) {
    const HEADER: &str = "equivalence verdict";
    const NEXT: &str = "detailed justification";
    let lower = reply.to_ascii_lowercase();
    if let Some(h) = lower.find(HEADER) {
        let start = h + HEADER.len();
        let end = lower[start..].find(NEXT).map_or(reply.len(), |i| start + i);
        for (offset, w) in words(&reply[start..end]) {
            if let Some(v) = verdict_word(w) {
                let after = start + offset + w.len();
                return (v, tidy_justification(&reply[after..]));
            }
        }
        return (Verdict::Unaudited, reply.to_string());
    }
    let first = words(reply).find(|(_, w)| !w.bytes().all(|b| b.is_ascii_digit()));
    match first.and_then(|(i, w)| verdict_word(w).map(|v| (v, i + w.len()))) {
        Some((v, after)) => (v, tidy_justification(&reply[after..])),
        None => (Verdict::Unaudited, reply.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Audit {
    pub verdict: Verdict,
    pub justification: String,
}

pub fn validate_equivalence(client: &ReformulatorClient, original: &str, rewritten: &str) -> Result<Audit, MqrError> {
    let prompt = render_audit_prompt(original, rewritten)?;
    let reply = client.send(&prompt)?;
    let (verdict, justification) = parse_verdict(&reply.content);
    Ok(Audit { verdict, justification })
}

/// Result of one (question, aspect) reformulation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectResult {
    pub text: String,
    pub constraints: ConstraintReport,
    pub verdict: Verdict,
    pub justification: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MqrRecord {
    pub original: Question,
    pub reformulations: BTreeMap<Aspect, AspectResult>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRow {
    pub id: String,
    pub aspect: Aspect,
    pub verdict: Verdict,
    pub word_delta: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AspectSummary {
    pub requested: usize,
    pub reformulated: usize,
    pub audited: usize,
    pub yes: usize,
    pub no: usize,
    pub accepted: usize,
    pub failed: usize,
    pub flagged: usize,
}

impl AspectSummary {
    /// Share of requested reformulations that made it into the output.
    pub fn acceptance_rate(&self) -> f64 {
        ratio(self.accepted, self.requested)
    }

    /// Share of audited reformulations with a parsed "yes".
    pub fn equivalence_rate(&self) -> f64 {
        ratio(self.yes, self.yes + self.no)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemFailure {
    pub id: String,
    pub aspect: Aspect,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub per_aspect: BTreeMap<Aspect, AspectSummary>,
    pub failures: Vec<ItemFailure>,
    pub client_calls: usize,
}

#[derive(Debug, Clone)]
pub struct AugmentConfig {
    pub aspects: Vec<Aspect>,
    pub audit: bool,
    /// Fraction of reformulations sent to the audit, chosen by a seeded hash
    /// of (id, aspect).
    pub audit_fraction: f64,
    pub audit_seed: u64,
    /// Keep reformulations the audit answered "no" for.
    pub keep_rejected: bool,
    pub parallelism: usize,
    pub cache_path: Option<PathBuf>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            aspects: Aspect::ALL.to_vec(),
            audit: true,
            audit_fraction: 1.0,
            audit_seed: 0,
            keep_rejected: false,
            parallelism: DEFAULT_PARALLELISM,
            cache_path: None,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), MqrError> {
        if self.aspects.is_empty() {
            return Err(MqrError::Config("no aspects requested".into()));
        }
        if self
            .aspects
            .iter()
            .enumerate()
            .any(|(i, a)| self.aspects[..i].contains(a))
        {
            return Err(MqrError::Config("duplicate aspect".into()));
        }
        if !(0.0..=1.0).contains(&self.audit_fraction) {
            return Err(MqrError::Config(format!(
                "audit_fraction {} outside [0, 1]",
                self.audit_fraction
            )));
        }
        if self.parallelism == 0 {
            return Err(MqrError::Config("parallelism must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AugmentOutput {
    pub records: Vec<MqrRecord>,
    /// Originals followed by their accepted reformulations, in input order.
    pub merged: Vec<Question>,
    pub audit_rows: Vec<AuditRow>,
    pub summary: RunSummary,
}

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn unit_hash(seed: u64, id: &str, aspect: Aspect) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    h.update([0]);
    h.update(aspect.name().as_bytes());
    let d = h.finalize();
    let x = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
    (x >> 11) as f64 / (1u64 << 53) as f64
}

pub fn reformulated_id(original_id: &str, aspect: Aspect) -> String {
    format!("{original_id}#{aspect}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct CacheEntry {
    text: String,
    audit: Option<Audit>,
}

/// Reformulations and audits keyed by (id, aspect, model, digest of the
/// question text). Saved by writing a temporary file and renaming it over
/// the old one.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReformulationCache {
    format_version: u32,
    entries: BTreeMap<String, CacheEntry>,
}

impl ReformulationCache {
    const FORMAT_VERSION: u32 = 1;

    pub fn key(question: &Question, aspect: Aspect, model: &str) -> String {
        let digest = sha256_hex(&[question.text.as_bytes()]);
        format!("{}\t{aspect}\t{model}\t{digest}", question.id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self, MqrError> {
        if !path.exists() {
            return Ok(Self {
                format_version: Self::FORMAT_VERSION,
                entries: BTreeMap::new(),
            });
        }
        let bytes = std::fs::read(path)?;
        let cache: Self =
            serde_json::from_slice(&bytes).map_err(|e| MqrError::Cache(format!("{}: {e}", path.display())))?;
        if cache.format_version != Self::FORMAT_VERSION {
            return Err(MqrError::Cache(format!(
                "{}: unsupported format version {}",
                path.display(),
                cache.format_version
            )));
        }
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<(), MqrError> {
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        serde_json::to_writer_pretty(&mut tmp, self).map_err(|e| MqrError::Cache(e.to_string()))?;
        tmp.write_all(b"\n")?;
        tmp.flush()?;
        tmp.persist(path).map_err(|e| MqrError::Io(e.error))?;
        Ok(())
    }
}

struct Item<'a> {
    question: &'a Question,
    aspect: Aspect,
    key: String,
    wants_audit: bool,
}

struct ItemOutcome {
    entry: Option<CacheEntry>,
    error: Option<MqrError>,
}

fn run_item(client: &ReformulatorClient, item: &Item<'_>, cached: Option<&CacheEntry>) -> ItemOutcome {
    let mut entry = match cached {
        Some(e) => e.clone(),
        None => match reformulate(client, item.question, item.aspect) {
            Ok(r) => CacheEntry {
                text: r.text,
                audit: None,
            },
            Err(e) => {
                return ItemOutcome {
                    entry: None,
                    error: Some(e),
                }
            }
        },
    };
    if item.wants_audit && entry.audit.is_none() {
        match validate_equivalence(client, &item.question.text, &entry.text) {
            Ok(a) => entry.audit = Some(a),
            Err(e) => {
                return ItemOutcome {
                    entry: Some(entry),
                    error: Some(e),
                }
            }
        }
    }
    ItemOutcome {
        entry: Some(entry),
        error: None,
    }
}

/// Reformulates every question along every requested aspect and merges the
/// accepted rewrites after their originals.
///
/// A failed client call drops that one item and is listed in the summary.
/// With a cache path, finished work is reused on the next run and the cache
/// is saved even when some items failed.
pub fn augment(
    dataset: &[Question],
    client: &ReformulatorClient,
    config: &AugmentConfig,
) -> Result<AugmentOutput, MqrError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(MqrError::Config("dataset is empty".into()));
    }
    let mut cache = match &config.cache_path {
        Some(p) => ReformulationCache::load(p)?,
        None => ReformulationCache {
            format_version: ReformulationCache::FORMAT_VERSION,
            entries: BTreeMap::new(),
        },
    };
    let calls_before = client.calls();

    let items: Vec<Item<'_>> = dataset
        .iter()
        .flat_map(|q| config.aspects.iter().map(move |&a| (q, a)))
        .map(|(question, aspect)| Item {
            question,
            aspect,
            key: ReformulationCache::key(question, aspect, &client.model),
            wants_audit: config.audit && unit_hash(config.audit_seed, &question.id, aspect) < config.audit_fraction,
        })
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism)
        .build()
        .map_err(|e| MqrError::Config(e.to_string()))?;
    let outcomes: Vec<ItemOutcome> = pool.install(|| {
        items
            .par_iter()
            .map(|item| run_item(client, item, cache.entries.get(&item.key)))
            .collect()
    });

    let mut summary = RunSummary::default();
    let mut records = Vec::with_capacity(dataset.len());
    let mut merged = Vec::with_capacity(dataset.len() * (1 + config.aspects.len()));
    let mut audit_rows = Vec::new();
    let mut outcomes = outcomes.into_iter();
    let mut items = items.iter();

    for question in dataset {
        merged.push(question.clone());
        let mut reformulations = BTreeMap::new();
        for _ in &config.aspects {
            let item = items.next().expect("one item per (question, aspect)");
            let outcome = outcomes.next().expect("one outcome per item");
            let stats = summary.per_aspect.entry(item.aspect).or_default();
            stats.requested += 1;
            if let Some(entry) = &outcome.entry {
                cache.entries.insert(item.key.clone(), entry.clone());
            }
            if let Some(err) = outcome.error {
                warn!("{} ({}) failed: {err}", question.id, item.aspect);
                stats.failed += 1;
                summary.failures.push(ItemFailure {
                    id: question.id.clone(),
                    aspect: item.aspect,
                    error: err.to_string(),
                });
                continue;
            }
            let entry = outcome.entry.expect("successful item has an entry");
            let constraints = check_constraints(&question.text, &entry.text);
            stats.reformulated += 1;
            if constraints.word_limit == CheckStatus::Flagged {
                stats.flagged += 1;
            }
            let audit = entry.audit.filter(|_| item.wants_audit);
            let (verdict, justification) = match audit {
                Some(a) => {
                    stats.audited += 1;
                    (a.verdict, a.justification)
                }
                None => (Verdict::Unaudited, String::new()),
            };
            match verdict {
                Verdict::Yes => stats.yes += 1,
                Verdict::No => stats.no += 1,
                Verdict::Unaudited => {}
            }
            if item.wants_audit {
                audit_rows.push(AuditRow {
                    id: question.id.clone(),
                    aspect: item.aspect,
                    verdict,
                    word_delta: constraints.word_delta,
                });
            }
            if verdict != Verdict::No || config.keep_rejected {
                stats.accepted += 1;
                merged.push(Question::new(
                    reformulated_id(&question.id, item.aspect),
                    entry.text.clone(),
                    question.gold_answer.clone(),
                    question.stratum,
                    item.aspect.source(),
                )?);
            }
            reformulations.insert(
                item.aspect,
                AspectResult {
                    text: entry.text,
                    constraints,
                    verdict,
                    justification,
                },
            );
        }
        records.push(MqrRecord {
            original: question.clone(),
            reformulations,
        });
    }
    summary.client_calls = client.calls() - calls_before;
    if let Some(p) = &config.cache_path {
        cache.save(p)?;
    }
    Ok(AugmentOutput {
        records,
        merged,
        audit_rows,
        summary,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub rows: Vec<AuditRow>,
    pub per_aspect: BTreeMap<Aspect, AspectSummary>,
    pub failures: Vec<ItemFailure>,
}

/// Audits up to `sample_per_aspect` reformulated records of an augmented
/// dataset against their originals, which must be present in the same file.
/// Reformulated records are matched to originals through the `orig#aspect`
/// id convention; the sample is a seeded hash order, so reruns pick the same
/// records.
pub fn validate_dataset(
    dataset: &[Question],
    client: &ReformulatorClient,
    sample_per_aspect: usize,
    seed: u64,
    parallelism: usize,
) -> Result<ValidationReport, MqrError> {
    if parallelism == 0 {
        return Err(MqrError::Config("parallelism must be ≥ 1".into()));
    }
    let originals: BTreeMap<&str, &Question> = dataset
        .iter()
        .filter(|q| q.source == Source::Original)
        .map(|q| (q.id.as_str(), q))
        .collect();
    let mut report = ValidationReport::default();
    let mut work: Vec<(Aspect, &Question, &Question)> = Vec::new();
    for aspect in Aspect::ALL {
        let mut candidates: Vec<(f64, &Question)> = dataset
            .iter()
            .filter(|q| Aspect::from_source(q.source) == Some(aspect))
            .map(|q| (unit_hash(seed, &q.id, aspect), q))
            .collect();
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.id.cmp(&b.1.id)));
        for (_, q) in candidates.into_iter().take(sample_per_aspect) {
            report.per_aspect.entry(aspect).or_default().requested += 1;
            let original = q.id.rsplit_once('#').and_then(|(orig, _)| originals.get(orig));
            match original {
                Some(o) => work.push((aspect, o, q)),
                None => {
                    report.per_aspect.entry(aspect).or_default().failed += 1;
                    report.failures.push(ItemFailure {
                        id: q.id.clone(),
                        aspect,
                        error: "original question not found in dataset".into(),
                    });
                }
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| MqrError::Config(e.to_string()))?;
    let audits: Vec<Result<Audit, MqrError>> = pool.install(|| {
        work.par_iter()
            .map(|(_, o, r)| validate_equivalence(client, &o.text, &r.text))
            .collect()
    });
    for ((aspect, original, rewritten), audit) in work.iter().zip(audits) {
        let stats = report.per_aspect.entry(*aspect).or_default();
        match audit {
            Ok(a) => {
                stats.audited += 1;
                match a.verdict {
                    Verdict::Yes => stats.yes += 1,
                    Verdict::No => stats.no += 1,
                    Verdict::Unaudited => {}
                }
                if a.verdict != Verdict::No {
                    stats.accepted += 1;
                }
                report.rows.push(AuditRow {
                    id: rewritten.id.clone(),
                    aspect: *aspect,
                    verdict: a.verdict,
                    word_delta: check_constraints(&original.text, &rewritten.text).word_delta,
                });
            }
            Err(e) => {
                stats.failed += 1;
                report.failures.push(ItemFailure {
                    id: rewritten.id.clone(),
                    aspect: *aspect,
                    error: e.to_string(),
                });
            }
        }
    }
    Ok(report)
}

pub fn write_audit_rows<W: Write>(mut out: W, rows: &[AuditRow]) -> std::io::Result<()> {
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
