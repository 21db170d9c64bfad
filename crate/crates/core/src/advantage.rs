//! Group-relative advantage estimators.
//!
//! Every estimator centres the rewards of one group on their mean. They differ
//! in the scale they divide by:
//!
//! * [`grae`]: population standard deviation. For binary rewards with accuracy
//!   `p` the total magnitude `Σ|Â|` is `2G√(p(1−p))`, so questions of moderate
//!   accuracy dominate the update.
//! * [`dgae`]: mean absolute deviation. `Σ|Â| = G` for every non-degenerate
//!   group, whatever the reward values.
//! * [`mean_centered`]: no scaling at all.
//!
//! A group whose rewards are all equal carries no relative signal. It yields an
//! all-zero vector flagged `valid = false` instead of an error, so the batch
//! layer can count valid questions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AdvantageError {
    #[error("group size {0} < 2")]
    GroupTooSmall(usize),
    #[error("accuracy {p} is not a multiple of 1/{group_size}")]
    NotAGridAccuracy { p: f64, group_size: usize },
    #[error("non-finite reward {0}")]
    NonFiniteReward(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Grae,
    Dgae,
    MeanCentered,
}

/// Standard-deviation flavour used by GRAE. Only the population form makes the
/// closed-form magnitude exact; the sample form exists for ablations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdKind {
    #[default]
    Population,
    Sample,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageVector {
    pub values: Vec<f64>,
    pub estimator: Estimator,
    pub valid: bool,
}

impl AdvantageVector {
    fn invalid(len: usize, estimator: Estimator) -> Self {
        Self {
            values: vec![0.0; len],
            estimator,
            valid: false,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl Estimator {
    pub fn compute(self, rewards: &[f64], std_kind: StdKind) -> Result<AdvantageVector, AdvantageError> {
        match self {
            Estimator::Grae => grae_with(rewards, std_kind),
            Estimator::Dgae => dgae(rewards),
            Estimator::MeanCentered => mean_centered(rewards),
        }
    }
}

fn check(rewards: &[f64]) -> Result<f64, AdvantageError> {
    if rewards.len() < 2 {
        return Err(AdvantageError::GroupTooSmall(rewards.len()));
    }
    if let Some(&bad) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(AdvantageError::NonFiniteReward(bad));
    }
    Ok(rewards.iter().sum::<f64>() / rewards.len() as f64)
}

fn degenerate(rewards: &[f64]) -> bool {
    rewards.iter().all(|r| *r == rewards[0])
}

/// Group relative advantage estimation with the population standard deviation.
pub fn grae(rewards: &[f64]) -> Result<AdvantageVector, AdvantageError> {
    grae_with(rewards, StdKind::Population)
}

pub fn grae_with(rewards: &[f64], std_kind: StdKind) -> Result<AdvantageVector, AdvantageError> {
    let mean = check(rewards)?;
    if degenerate(rewards) {
        return Ok(AdvantageVector::invalid(rewards.len(), Estimator::Grae));
    }
    let divisor = match std_kind {
        StdKind::Population => rewards.len() as f64,
        StdKind::Sample => (rewards.len() - 1) as f64,
    };
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / divisor;
    let std = var.sqrt();
    Ok(AdvantageVector {
        values: rewards.iter().map(|r| (r - mean) / std).collect(),
        estimator: Estimator::Grae,
        valid: true,
    })
}

/// Mean absolute deviation about the mean.
pub fn mean_absolute_deviation(rewards: &[f64]) -> f64 {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    rewards.iter().map(|r| (r - mean).abs()).sum::<f64>() / n
}

/// Difficulty-balanced group advantage estimation.
pub fn dgae(rewards: &[f64]) -> Result<AdvantageVector, AdvantageError> {
    let mean = check(rewards)?;
    if degenerate(rewards) {
        return Ok(AdvantageVector::invalid(rewards.len(), Estimator::Dgae));
    }
    let mad = rewards.iter().map(|r| (r - mean).abs()).sum::<f64>() / rewards.len() as f64;
    Ok(AdvantageVector {
        values: rewards.iter().map(|r| (r - mean) / mad).collect(),
        estimator: Estimator::Dgae,
        valid: true,
    })
}

pub fn mean_centered(rewards: &[f64]) -> Result<AdvantageVector, AdvantageError> {
    let mean = check(rewards)?;
    if degenerate(rewards) {
        return Ok(AdvantageVector::invalid(rewards.len(), Estimator::MeanCentered));
    }
    Ok(AdvantageVector {
        values: rewards.iter().map(|r| r - mean).collect(),
        estimator: Estimator::MeanCentered,
        valid: true,
    })
}

/// `Σ|Â|`, the unclipped update magnitude of one question.
pub fn total_update_magnitude(adv: &AdvantageVector) -> f64 {
    adv.values.iter().map(|a| a.abs()).sum()
}

/// `2G√(p(1−p))`, the GRAE magnitude for binary rewards at accuracy `p = k/G`.
pub fn grae_magnitude_closed_form(group_size: usize, p: f64) -> Result<f64, AdvantageError> {
    if group_size < 2 {
        return Err(AdvantageError::GroupTooSmall(group_size));
    }
    let k = p * group_size as f64;
    if !(0.0..=1.0).contains(&p) || (k - k.round()).abs() > 1e-9 {
        return Err(AdvantageError::NotAGridAccuracy { p, group_size });
    }
    Ok(2.0 * group_size as f64 * (p * (1.0 - p)).sqrt())
}
