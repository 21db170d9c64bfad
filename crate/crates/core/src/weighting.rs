//! Question validity, difficulty scores and difficulty-aware question weights.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default softmax temperature for question weights.
pub const DEFAULT_TEMPERATURE: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum WeightingError {
    #[error("temperature {0} must be > 0")]
    BadTemperature(f64),
    #[error("no valid questions to weight")]
    NoValidQuestions,
    #[error("difficulty score needs at least one reward")]
    EmptyRewards,
}

/// How a question's difficulty score is derived from its rewards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DifficultyMode {
    /// `D = −mean(r)`.
    MeanReward,
    /// `D = −mean(acc)`, or `−1` when no response is correct. Fed with the
    /// accuracy component only.
    AccuracyWithFloor,
}

/// A group is valid when its rewards are not all equal.
pub fn is_valid_group(rewards: &[f64]) -> bool {
    rewards.iter().any(|r| *r != rewards[0])
}

pub fn difficulty_score(rewards: &[f64], mode: DifficultyMode) -> Result<f64, WeightingError> {
    if rewards.is_empty() {
        return Err(WeightingError::EmptyRewards);
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    Ok(match mode {
        DifficultyMode::MeanReward => -mean,
        DifficultyMode::AccuracyWithFloor if mean == 0.0 => -1.0,
        DifficultyMode::AccuracyWithFloor => -mean,
    })
}

/// `λ_s = B_v · softmax(D/T)_s`. The weights sum to the number of scores.
pub fn dqw_weights(scores: &[f64], temperature: f64) -> Result<Vec<f64>, WeightingError> {
    if !(temperature > 0.0) {
        return Err(WeightingError::BadTemperature(temperature));
    }
    if scores.is_empty() {
        return Err(WeightingError::NoValidQuestions);
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|d| ((d - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    let b_valid = scores.len() as f64;
    Ok(exps.into_iter().map(|e| b_valid * e / total).collect())
}

/// Validity, difficulty and weights for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchWeighting {
    pub valid_mask: Vec<bool>,
    /// Difficulty of each valid question, in batch order.
    pub difficulty: Vec<f64>,
    /// Weight of each valid question, in batch order.
    pub lambdas: Vec<f64>,
    pub b_valid: usize,
    pub temperature: f64,
}

impl BatchWeighting {
    /// Weights a batch from per-question `(rewards, difficulty inputs)`.
    ///
    /// Validity is decided on `rewards`; the difficulty score is computed from
    /// the second slice, which is the accuracy component for the floor mode.
    pub fn compute<'a, I>(groups: I, mode: DifficultyMode, temperature: f64) -> Result<Self, WeightingError>
    where
        I: IntoIterator<Item = (&'a [f64], &'a [f64])>,
    {
        let mut valid_mask = Vec::new();
        let mut difficulty = Vec::new();
        for (rewards, difficulty_inputs) in groups {
            let valid = rewards.len() >= 2 && is_valid_group(rewards);
            valid_mask.push(valid);
            if valid {
                difficulty.push(difficulty_score(difficulty_inputs, mode)?);
            }
        }
        let lambdas = dqw_weights(&difficulty, temperature)?;
        Ok(Self {
            b_valid: difficulty.len(),
            valid_mask,
            difficulty,
            lambdas,
            temperature,
        })
    }

    /// Weight per batch position; `None` for invalid questions.
    pub fn per_question(&self) -> Vec<Option<f64>> {
        let mut lambdas = self.lambdas.iter();
        self.valid_mask
            .iter()
            .map(|v| if *v { lambdas.next().copied() } else { None })
            .collect()
    }
}
