//! Tabular autoregressive softmax policy.
//!
//! Each decoding step looks up a logit vector keyed by the question digest, the
//! position and a digest of the last two generated tokens. Missing keys act as
//! all-zero logits, so a fresh table is the uniform policy. Gradients of
//! `log π` are exact and sparse: `one_hot(token) − softmax(logits)` on the
//! logit vector of each visited context.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DomainError, Question, Response, ResponseSampler};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
/// Default cap on generated tokens, end token included.
pub const DEFAULT_MAX_LEN: usize = 16;
/// Digits `0..=9` plus an end-of-sequence token.
pub const DIGIT_VOCAB_SIZE: usize = 11;
pub const DIGIT_EOS: u32 = 10;

/// Number of previous tokens folded into a context key.
const PREFIX_WINDOW: usize = 2;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("token {token} outside vocabulary of size {vocab_size}")]
    TokenOutOfVocab { token: u32, vocab_size: usize },
    #[error("response longer than max_len {0}")]
    TooLong(usize),
    #[error("temperature {0} must be > 0")]
    BadTemperature(f64),
    #[error("invalid policy shape: {0}")]
    Shape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// 64-bit FNV-1a. Stable across platforms and toolchains, which keeps
/// checkpoints portable.
fn fnv1a(words: impl IntoIterator<Item = u32>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for w in words {
        for b in w.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ContextKey {
    pub question: u64,
    pub position: u32,
    pub prefix: u64,
}

impl ContextKey {
    pub fn new(question: &Question, prefix: &[u32]) -> Self {
        let tail = &prefix[prefix.len().saturating_sub(PREFIX_WINDOW)..];
        Self {
            question: question_digest(question),
            position: prefix.len() as u32,
            prefix: fnv1a(std::iter::once(tail.len() as u32).chain(tail.iter().copied())),
        }
    }
}

pub fn question_digest(question: &Question) -> u64 {
    fnv1a(question.prompt_tokens.iter().copied())
}

/// How the next token is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Sample { temperature: f64 },
    Greedy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    table: BTreeMap<ContextKey, Vec<f64>>,
    vocab_size: usize,
    max_len: usize,
    eos: Option<u32>,
}

/// Sparse gradient over logit vectors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolicyGradient {
    pub entries: BTreeMap<ContextKey, Vec<f64>>,
}

impl PolicyGradient {
    pub fn add(&mut self, key: ContextKey, coeff: f64, grad: &[f64]) {
        let slot = self.entries.entry(key).or_insert_with(|| vec![0.0; grad.len()]);
        for (s, g) in slot.iter_mut().zip(grad) {
            *s += coeff * g;
        }
    }

    pub fn get(&self, key: &ContextKey, index: usize) -> f64 {
        self.entries.get(key).map_or(0.0, |v| v[index])
    }

    pub fn is_zero(&self) -> bool {
        self.entries.values().flatten().all(|g| *g == 0.0)
    }

    pub fn l2_norm(&self) -> f64 {
        self.entries.values().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

impl PolicyParams {
    /// A uniform policy. `eos`, when given, ends generation early.
    pub fn new(vocab_size: usize, max_len: usize, eos: Option<u32>) -> Result<Self, PolicyError> {
        if vocab_size < 2 {
            return Err(PolicyError::Shape(format!("vocab_size {vocab_size} < 2")));
        }
        if max_len == 0 {
            return Err(PolicyError::Shape("max_len must be >= 1".into()));
        }
        if let Some(e) = eos {
            if e as usize >= vocab_size {
                return Err(PolicyError::Shape(format!("eos {e} outside vocabulary")));
            }
        }
        Ok(Self {
            table: BTreeMap::new(),
            vocab_size,
            max_len,
            eos,
        })
    }

    /// Digit vocabulary with an end token.
    pub fn digits(max_len: usize) -> Result<Self, PolicyError> {
        Self::new(DIGIT_VOCAB_SIZE, max_len, Some(DIGIT_EOS))
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn eos(&self) -> Option<u32> {
        self.eos
    }

    pub fn num_contexts(&self) -> usize {
        self.table.len()
    }

    pub fn logits(&self, key: &ContextKey) -> Vec<f64> {
        self.table
            .get(key)
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.vocab_size])
    }

    pub fn set_logits(&mut self, key: ContextKey, logits: Vec<f64>) -> Result<(), PolicyError> {
        if logits.len() != self.vocab_size {
            return Err(PolicyError::Shape(format!(
                "logit vector of length {} for vocab {}",
                logits.len(),
                self.vocab_size
            )));
        }
        self.table.insert(key, logits);
        Ok(())
    }

    pub fn logit(&self, key: &ContextKey, index: usize) -> f64 {
        self.table.get(key).map_or(0.0, |v| v[index])
    }

    pub fn set_logit(&mut self, key: ContextKey, index: usize, value: f64) {
        let vocab = self.vocab_size;
        self.table.entry(key).or_insert_with(|| vec![0.0; vocab])[index] = value;
    }

    /// Probabilities of the next token at `key`.
    pub fn distribution(&self, key: &ContextKey) -> Vec<f64> {
        log_softmax(&self.logits(key)).into_iter().map(f64::exp).collect()
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<(), PolicyError> {
        if tokens.len() > self.max_len {
            return Err(PolicyError::TooLong(self.max_len));
        }
        match tokens.iter().find(|t| **t as usize >= self.vocab_size) {
            Some(&token) => Err(PolicyError::TokenOutOfVocab {
                token,
                vocab_size: self.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Per-token `log π(o_t | q, o_<t)`.
    pub fn logprob(&self, question: &Question, tokens: &[u32]) -> Result<Vec<f64>, PolicyError> {
        self.check_tokens(tokens)?;
        Ok((0..tokens.len())
            .map(|t| {
                let key = ContextKey::new(question, &tokens[..t]);
                log_softmax(&self.logits(&key))[tokens[t] as usize]
            })
            .collect())
    }

    /// Per-token `∇ log π` as `(context, one_hot − softmax)` pairs.
    pub fn grad_logprob(
        &self,
        question: &Question,
        tokens: &[u32],
    ) -> Result<Vec<(ContextKey, Vec<f64>)>, PolicyError> {
        self.check_tokens(tokens)?;
        Ok((0..tokens.len())
            .map(|t| {
                let key = ContextKey::new(question, &tokens[..t]);
                let mut grad: Vec<f64> = self.distribution(&key).into_iter().map(|p| -p).collect();
                grad[tokens[t] as usize] += 1.0;
                (key, grad)
            })
            .collect())
    }

    /// Adds `Σ_t coeffs[t] · ∇ log π(o_t)` into `out`.
    pub fn accumulate_grad(
        &self,
        question: &Question,
        tokens: &[u32],
        coeffs: &[f64],
        out: &mut PolicyGradient,
    ) -> Result<(), PolicyError> {
        if coeffs.len() != tokens.len() {
            return Err(PolicyError::Shape(format!(
                "{} coefficients for {} tokens",
                coeffs.len(),
                tokens.len()
            )));
        }
        for ((key, grad), c) in self.grad_logprob(question, tokens)?.into_iter().zip(coeffs) {
            if *c != 0.0 {
                out.add(key, *c, &grad);
            }
        }
        Ok(())
    }

    /// `θ ← θ + step · g`.
    pub fn apply(&mut self, grad: &PolicyGradient, step: f64) {
        for (key, g) in &grad.entries {
            let vocab = self.vocab_size;
            let slot = self.table.entry(*key).or_insert_with(|| vec![0.0; vocab]);
            for (s, d) in slot.iter_mut().zip(g) {
                *s += step * d;
            }
        }
    }

    pub fn render(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .filter(|t| Some(**t) != self.eos)
            .map(|t| char::from_digit(*t, 10).unwrap_or('#'))
            .collect()
    }

    /// Generates one response. Recorded log-probabilities are always those of
    /// the untempered policy.
    pub fn sample(
        &self,
        question: &Question,
        decoding: Decoding,
        rng: &mut dyn RngCore,
    ) -> Result<Response, PolicyError> {
        if let Decoding::Sample { temperature } = decoding {
            if !(temperature > 0.0) {
                return Err(PolicyError::BadTemperature(temperature));
            }
        }
        let mut tokens = Vec::new();
        let mut logps = Vec::new();
        while tokens.len() < self.max_len {
            let key = ContextKey::new(question, &tokens);
            let logits = self.logits(&key);
            let logp = log_softmax(&logits);
            let token = match decoding {
                Decoding::Greedy => argmax(&logits),
                Decoding::Sample { temperature } => {
                    let scaled: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
                    let probs: Vec<f64> = log_softmax(&scaled).into_iter().map(f64::exp).collect();
                    categorical(&probs, rng.random::<f64>())
                }
            };
            tokens.push(token as u32);
            logps.push(logp[token]);
            if Some(token as u32) == self.eos {
                break;
            }
        }
        let text = self.render(&tokens);
        Response::new(tokens, text, logps).map_err(|e| PolicyError::Shape(e.to_string()))
    }

    /// Immutable deep copy, used as the sampling policy of a step.
    pub fn snapshot(&self) -> Snapshot {
        Snapshot(Arc::new(self.clone()))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            vocab_size: self.vocab_size,
            max_len: self.max_len,
            eos: self.eos,
            entries: self
                .table
                .iter()
                .map(|(k, v)| CheckpointEntry {
                    question: k.question,
                    position: k.position,
                    prefix: k.prefix,
                    logits: v.clone(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self, PolicyError> {
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(PolicyError::Checkpoint(format!(
                "unsupported format_version {}",
                ckpt.format_version
            )));
        }
        let mut params = Self::new(ckpt.vocab_size, ckpt.max_len, ckpt.eos)?;
        for e in ckpt.entries {
            let key = ContextKey {
                question: e.question,
                position: e.position,
                prefix: e.prefix,
            };
            params.set_logits(key, e.logits)?;
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let json = serde_json::to_string(&self.to_checkpoint()).expect("checkpoint serializes");
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        Self::from_checkpoint(ckpt)
    }
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn categorical(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the final cumulative sum.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

/// A frozen policy. Cloning shares the same immutable table.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot(Arc<PolicyParams>);

impl Snapshot {
    pub fn snapshot(&self) -> Snapshot {
        self.clone()
    }
}

impl std::ops::Deref for Snapshot {
    type Target = PolicyParams;

    fn deref(&self) -> &PolicyParams {
        &self.0
    }
}

/// Adapts a policy to the response sampler contract.
pub struct PolicySampler<'a> {
    pub policy: &'a PolicyParams,
    pub decoding: Decoding,
}

impl ResponseSampler for PolicySampler<'_> {
    fn sample_response(&self, question: &Question, rng: &mut dyn RngCore) -> Result<Response, DomainError> {
        self.policy
            .sample(question, self.decoding, rng)
            .map_err(|e| DomainError::Sampler(e.to_string()))
    }
}

/// On-disk parameter table with its header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub vocab_size: usize,
    pub max_len: usize,
    pub eos: Option<u32>,
    pub entries: Vec<CheckpointEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointEntry {
    pub question: u64,
    pub position: u32,
    pub prefix: u64,
    pub logits: Vec<f64>,
}
