//! Surrogate objectives for the GRPO family and their difficulty-aware hybrids.
//!
//! Every variant is a [`Recipe`]: an advantage estimator, optional question
//! weighting, a surrogate (token-clipped, sequence-clipped or plain
//! log-likelihood) and a normaliser. The loss is the negated objective.
//!
//! Gradients are assembled from the per-token derivative of the loss with
//! respect to `log π_θ(o_t)`, then pushed through the policy's score function.
//! For the clipped surrogates that derivative is `−w·Â·ratio/N` where the
//! unclipped branch is active and zero where the clipped constant wins, which
//! is the `sgn(Â)|Â|·detach(ratio)·∇log π` form of the GRPO policy gradient.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advantage::{total_update_magnitude, AdvantageError, AdvantageVector, Estimator, StdKind};
use crate::domain::{Question, RewardedGroup};
use crate::weighting::{BatchWeighting, DifficultyMode, WeightingError, DEFAULT_TEMPERATURE};

/// Importance ratios are capped here; the objective assumes ratios near one.
pub const RATIO_CAP: f64 = 1e6;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("group {index} has {found} responses, expected {expected}")]
    GroupSize {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("group {group}, response {response}: {message}")]
    LogProbShape {
        group: usize,
        response: usize,
        message: String,
    },
    #[error("length mismatch: {0} new vs {1} old log-probabilities")]
    LengthMismatch(usize, usize),
    #[error("invalid objective config: {0}")]
    Config(String),
    #[error(transparent)]
    Advantage(#[from] AdvantageError),
    #[error(transparent)]
    Weighting(#[from] WeightingError),
    #[error("score function: {0}")]
    Score(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Grpo,
    #[serde(rename = "dr-grpo", alias = "dr_grpo")]
    DrGrpo,
    Gpg,
    Dapo,
    Gspo,
    Dgpo,
    #[serde(rename = "gpg+dgpo", alias = "gpg_dgpo")]
    GpgDgpo,
    #[serde(rename = "dapo+dgpo", alias = "dapo_dgpo")]
    DapoDgpo,
    #[serde(rename = "gspo+dgpo", alias = "gspo_dgpo")]
    GspoDgpo,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Grpo,
        Variant::DrGrpo,
        Variant::Gpg,
        Variant::Dapo,
        Variant::Gspo,
        Variant::Dgpo,
        Variant::GpgDgpo,
        Variant::DapoDgpo,
        Variant::GspoDgpo,
    ];

    /// Command-line spelling.
    pub fn name(self) -> &'static str {
        match self {
            Variant::Grpo => "grpo",
            Variant::DrGrpo => "dr-grpo",
            Variant::Gpg => "gpg",
            Variant::Dapo => "dapo",
            Variant::Gspo => "gspo",
            Variant::Dgpo => "dgpo",
            Variant::GpgDgpo => "gpg+dgpo",
            Variant::DapoDgpo => "dapo+dgpo",
            Variant::GspoDgpo => "gspo+dgpo",
        }
    }

    pub fn uses_composite_reward(self) -> bool {
        matches!(self, Variant::Dapo | Variant::DapoDgpo)
    }

    pub fn recipe(self) -> Recipe {
        use Normalization::*;
        use Surrogate::*;
        let (estimator, weighting, surrogate, normalization) = match self {
            Variant::Grpo => (Estimator::Grae, None, TokenClip, AllTokens),
            Variant::DrGrpo => (Estimator::MeanCentered, None, TokenClip, FixedLength),
            Variant::Gpg => (Estimator::Grae, None, LogLikelihood, ValidTokens),
            Variant::Dapo => (Estimator::Grae, None, TokenClip, ValidTokens),
            Variant::Gspo => (Estimator::Grae, None, SequenceClip, AllSequences),
            Variant::Dgpo => (
                Estimator::Dgae,
                Some(DifficultyMode::MeanReward),
                TokenClip,
                ValidTokens,
            ),
            Variant::GpgDgpo => (
                Estimator::Dgae,
                Some(DifficultyMode::MeanReward),
                LogLikelihood,
                ValidTokens,
            ),
            Variant::DapoDgpo => (
                Estimator::Dgae,
                Some(DifficultyMode::AccuracyWithFloor),
                TokenClip,
                ValidTokens,
            ),
            Variant::GspoDgpo => (
                Estimator::Dgae,
                Some(DifficultyMode::MeanReward),
                SequenceClip,
                ValidSequences,
            ),
        };
        Recipe {
            estimator,
            weighting,
            surrogate,
            normalization,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
            let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
            format!("unknown algorithm {s:?}; expected one of {}", names.join(", "))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Surrogate {
    /// `min(I·Â, clip(I)·Â)` per token.
    TokenClip,
    /// `min(S·Â, clip(S)·Â)` per sequence with `S` the geometric-mean ratio.
    SequenceClip,
    /// `log π · Â` per token, no ratio.
    LogLikelihood,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    /// Tokens of every question in the batch.
    AllTokens,
    /// Tokens of valid questions only.
    ValidTokens,
    /// `B · G · max_completion_len`.
    FixedLength,
    /// `B · G` sequences.
    AllSequences,
    /// `B_v · G` sequences.
    ValidSequences,
}

impl Normalization {
    fn requires_valid(self) -> bool {
        matches!(self, Normalization::ValidTokens | Normalization::ValidSequences)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Recipe {
    pub estimator: Estimator,
    /// Difficulty-aware question weights, or `λ ≡ 1` when `None`.
    pub weighting: Option<DifficultyMode>,
    pub surrogate: Surrogate,
    pub normalization: Normalization,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub variant: Variant,
    pub eps_low: f64,
    pub eps_high: f64,
    pub temperature_t: f64,
    pub group_size_g: usize,
    pub std_kind: StdKind,
    /// Generation-length cap, used by the fixed normaliser.
    pub max_completion_len: usize,
}

impl ObjectiveConfig {
    pub fn for_variant(variant: Variant) -> Self {
        let eps_high = if variant.uses_composite_reward() { 0.28 } else { 0.2 };
        Self {
            variant,
            eps_low: 0.2,
            eps_high,
            temperature_t: DEFAULT_TEMPERATURE,
            group_size_g: crate::domain::DEFAULT_GROUP_SIZE,
            std_kind: StdKind::Population,
            max_completion_len: crate::policy::DEFAULT_MAX_LEN,
        }
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(0.0 < self.eps_low && self.eps_low <= self.eps_high && self.eps_high < 1.0) {
            return Err(ObjectiveError::Config(format!(
                "need 0 < eps_low <= eps_high < 1, got {} and {}",
                self.eps_low, self.eps_high
            )));
        }
        if !(self.temperature_t > 0.0) {
            return Err(ObjectiveError::Config(format!(
                "temperature {} must be > 0",
                self.temperature_t
            )));
        }
        if self.group_size_g < 2 {
            return Err(ObjectiveError::Config(format!("group size {} < 2", self.group_size_g)));
        }
        if self.max_completion_len == 0 {
            return Err(ObjectiveError::Config("max_completion_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// A rewarded group together with its log-probabilities under the current
/// policy, one vector per response.
#[derive(Debug, Clone)]
pub struct GroupEval<'a> {
    pub group: &'a RewardedGroup,
    pub logp_new: Vec<Vec<f64>>,
}

impl<'a> GroupEval<'a> {
    /// Current policy equal to the sampling policy.
    pub fn on_policy(group: &'a RewardedGroup) -> Self {
        Self {
            logp_new: group.responses.iter().map(|r| r.logp_old.clone()).collect(),
            group,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipReason {
    EmptyBatch,
    NoValidQuestions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    /// Negated objective.
    pub loss: f64,
    /// `λ_s · Σ_i |Â_si|` per question, zero for invalid ones.
    pub per_question_magnitude: Vec<f64>,
    /// Response tokens of valid questions.
    pub tokens_counted: usize,
    pub b_valid: usize,
    /// Denominator actually applied.
    pub normalizer: f64,
    pub valid_mask: Vec<bool>,
    /// Weight per question, `None` for invalid ones.
    pub lambdas: Vec<Option<f64>>,
    pub advantages: Vec<AdvantageVector>,
    pub skipped: Option<SkipReason>,
}

impl LossReport {
    pub fn is_skipped(&self) -> bool {
        self.skipped.is_some()
    }

    fn skip(reason: SkipReason, batch_len: usize, advantages: Vec<AdvantageVector>, valid_mask: Vec<bool>) -> Self {
        Self {
            loss: 0.0,
            per_question_magnitude: vec![0.0; batch_len],
            tokens_counted: 0,
            b_valid: 0,
            normalizer: 0.0,
            lambdas: vec![None; batch_len],
            valid_mask,
            advantages,
            skipped: Some(reason),
        }
    }
}

/// `exp(new − old)`, capped at [`RATIO_CAP`].
pub fn token_ratio(logp_new: f64, logp_old: f64) -> f64 {
    capped_exp(logp_new - logp_old)
}

fn capped_exp(x: f64) -> f64 {
    let r = x.exp();
    if r > RATIO_CAP || r.is_nan() {
        log::warn!("importance ratio exp({x}) capped at {RATIO_CAP}");
        RATIO_CAP
    } else {
        r
    }
}

/// Geometric mean of the token ratios of one sequence.
pub fn sequence_ratio(logp_new: &[f64], logp_old: &[f64]) -> Result<f64, ObjectiveError> {
    if logp_new.len() != logp_old.len() || logp_new.is_empty() {
        return Err(ObjectiveError::LengthMismatch(logp_new.len(), logp_old.len()));
    }
    let sum: f64 = logp_new.iter().zip(logp_old).map(|(n, o)| n - o).sum();
    Ok(capped_exp(sum / logp_new.len() as f64))
}

/// `min(ratio·A, clip(ratio, 1−eps_low, 1+eps_high)·A)`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps_low: f64, eps_high: f64) -> f64 {
    let clipped = ratio.clamp(1.0 - eps_low, 1.0 + eps_high);
    (ratio * advantage).min(clipped * advantage)
}

/// Whether the constant clipped branch is the one selected by the `min`.
fn clip_selected(ratio: f64, advantage: f64, eps_low: f64, eps_high: f64) -> bool {
    (advantage > 0.0 && ratio > 1.0 + eps_high) || (advantage < 0.0 && ratio < 1.0 - eps_low)
}

/// Differentiates `Σ_t coeffs[t] · log π(o_t)` with respect to the policy
/// parameters and adds the result into `out`.
pub trait ScoreFunction {
    type Gradient: Default;

    fn accumulate_score(
        &self,
        question: &Question,
        tokens: &[u32],
        coeffs: &[f64],
        out: &mut Self::Gradient,
    ) -> Result<(), String>;
}

impl ScoreFunction for crate::policy::PolicyParams {
    type Gradient = crate::policy::PolicyGradient;

    fn accumulate_score(
        &self,
        question: &Question,
        tokens: &[u32],
        coeffs: &[f64],
        out: &mut Self::Gradient,
    ) -> Result<(), String> {
        self.accumulate_grad(question, tokens, coeffs, out)
            .map_err(|e| e.to_string())
    }
}

struct Evaluation {
    report: LossReport,
    /// `∂loss/∂log π_new` per group, response and token.
    token_grads: Vec<Vec<Vec<f64>>>,
}

fn check_batch(batch: &[GroupEval<'_>], config: &ObjectiveConfig) -> Result<(), ObjectiveError> {
    config.validate()?;
    for (s, ge) in batch.iter().enumerate() {
        let g = ge.group.group_size();
        if g != config.group_size_g {
            return Err(ObjectiveError::GroupSize {
                index: s,
                expected: config.group_size_g,
                found: g,
            });
        }
        if ge.logp_new.len() != g {
            return Err(ObjectiveError::LogProbShape {
                group: s,
                response: ge.logp_new.len(),
                message: format!("{} log-prob vectors for {g} responses", ge.logp_new.len()),
            });
        }
        for (i, (lp, resp)) in ge.logp_new.iter().zip(&ge.group.responses).enumerate() {
            if lp.len() != resp.len() {
                return Err(ObjectiveError::LogProbShape {
                    group: s,
                    response: i,
                    message: format!("{} new log-probs for {} tokens", lp.len(), resp.len()),
                });
            }
            if lp.iter().any(|x| !x.is_finite()) {
                return Err(ObjectiveError::LogProbShape {
                    group: s,
                    response: i,
                    message: "non-finite log-probability".into(),
                });
            }
        }
    }
    Ok(())
}

fn evaluate(batch: &[GroupEval<'_>], config: &ObjectiveConfig, recipe: Recipe) -> Result<Evaluation, ObjectiveError> {
    check_batch(batch, config)?;
    let b = batch.len();
    let advantages = batch
        .iter()
        .map(|ge| recipe.estimator.compute(&ge.group.rewards, config.std_kind))
        .collect::<Result<Vec<_>, _>>()?;
    let valid_mask: Vec<bool> = advantages.iter().map(|a| a.valid).collect();
    let b_valid = valid_mask.iter().filter(|v| **v).count();
    let empty_grads = || {
        batch
            .iter()
            .map(|ge| ge.group.responses.iter().map(|r| vec![0.0; r.len()]).collect())
            .collect()
    };

    if b == 0 {
        return Ok(Evaluation {
            report: LossReport::skip(SkipReason::EmptyBatch, 0, advantages, valid_mask),
            token_grads: Vec::new(),
        });
    }
    if b_valid == 0 && (recipe.normalization.requires_valid() || recipe.weighting.is_some()) {
        log::info!("batch of {b} questions has no valid question; skipping");
        return Ok(Evaluation {
            report: LossReport::skip(SkipReason::NoValidQuestions, b, advantages, valid_mask),
            token_grads: empty_grads(),
        });
    }

    let lambdas: Vec<Option<f64>> = match recipe.weighting {
        Some(mode) => BatchWeighting::compute(
            batch.iter().map(|ge| {
                let inputs = match mode {
                    DifficultyMode::MeanReward => ge.group.rewards.as_slice(),
                    DifficultyMode::AccuracyWithFloor => ge.group.accuracies.as_slice(),
                };
                (ge.group.rewards.as_slice(), inputs)
            }),
            mode,
            config.temperature_t,
        )?
        .per_question(),
        None => valid_mask.iter().map(|v| v.then_some(1.0)).collect(),
    };

    let g = config.group_size_g as f64;
    let tokens_all: usize = batch.iter().map(|ge| ge.group.token_count()).sum();
    let tokens_valid: usize = batch
        .iter()
        .zip(&valid_mask)
        .filter(|(_, v)| **v)
        .map(|(ge, _)| ge.group.token_count())
        .sum();
    let normalizer = match recipe.normalization {
        Normalization::AllTokens => tokens_all as f64,
        Normalization::ValidTokens => tokens_valid as f64,
        Normalization::FixedLength => b as f64 * g * config.max_completion_len as f64,
        Normalization::AllSequences => b as f64 * g,
        Normalization::ValidSequences => b_valid as f64 * g,
    };

    let (el, eh) = (config.eps_low, config.eps_high);
    let mut objective_sum = 0.0;
    let mut per_question_magnitude = Vec::with_capacity(b);
    let mut token_grads = Vec::with_capacity(b);
    for ((ge, adv), lambda) in batch.iter().zip(&advantages).zip(&lambdas) {
        let Some(weight) = *lambda else {
            per_question_magnitude.push(0.0);
            token_grads.push(ge.group.responses.iter().map(|r| vec![0.0; r.len()]).collect());
            continue;
        };
        let weighted = recipe.weighting.is_some();
        per_question_magnitude.push(if weighted {
            weight * total_update_magnitude(adv)
        } else {
            total_update_magnitude(adv)
        });

        let mut group_sum = 0.0;
        let mut group_grads = Vec::with_capacity(ge.group.group_size());
        for ((resp, lp_new), &a) in ge.group.responses.iter().zip(&ge.logp_new).zip(&adv.values) {
            let mut response_sum = 0.0;
            let mut grads = vec![0.0; resp.len()];
            match recipe.surrogate {
                Surrogate::TokenClip => {
                    for (t, (n, o)) in lp_new.iter().zip(&resp.logp_old).enumerate() {
                        let ratio = token_ratio(*n, *o);
                        response_sum += clipped_surrogate(ratio, a, el, eh);
                        if ratio < RATIO_CAP && !clip_selected(ratio, a, el, eh) {
                            grads[t] = a * ratio;
                        }
                    }
                }
                Surrogate::LogLikelihood => {
                    for (t, n) in lp_new.iter().enumerate() {
                        response_sum += n * a;
                        grads[t] = a;
                    }
                }
                Surrogate::SequenceClip => {
                    let ratio = sequence_ratio(lp_new, &resp.logp_old)?;
                    response_sum = clipped_surrogate(ratio, a, el, eh);
                    if ratio < RATIO_CAP && !clip_selected(ratio, a, el, eh) {
                        let per_token = a * ratio / resp.len() as f64;
                        grads.iter_mut().for_each(|d| *d = per_token);
                    }
                }
            }
            group_sum += response_sum;
            group_grads.push(grads);
        }
        if weighted {
            group_sum *= weight;
        }
        objective_sum += group_sum;

        // d(loss)/d(log π) = −w · d(objective term)/d(log π) / N
        let scale = if weighted { weight } else { 1.0 };
        for grads in &mut group_grads {
            for d in grads.iter_mut() {
                *d = -scale * *d / normalizer;
            }
        }
        token_grads.push(group_grads);
    }

    let loss = -(objective_sum / normalizer);
    Ok(Evaluation {
        report: LossReport {
            loss,
            per_question_magnitude,
            tokens_counted: tokens_valid,
            b_valid,
            normalizer,
            valid_mask,
            lambdas,
            advantages,
            skipped: None,
        },
        token_grads,
    })
}

/// Loss of the configured variant on a batch.
pub fn assemble_loss(batch: &[GroupEval<'_>], config: &ObjectiveConfig) -> Result<LossReport, ObjectiveError> {
    assemble_loss_with(batch, config, config.variant.recipe())
}

/// Loss under an explicit recipe, for ablations that swap one ingredient.
pub fn assemble_loss_with(
    batch: &[GroupEval<'_>],
    config: &ObjectiveConfig,
    recipe: Recipe,
) -> Result<LossReport, ObjectiveError> {
    Ok(evaluate(batch, config, recipe)?.report)
}

/// `∂loss/∂log π_new` for every token of every response.
pub fn token_loss_gradients(
    batch: &[GroupEval<'_>],
    config: &ObjectiveConfig,
) -> Result<Vec<Vec<Vec<f64>>>, ObjectiveError> {
    Ok(evaluate(batch, config, config.variant.recipe())?.token_grads)
}

/// Loss and its exact gradient with respect to the policy parameters. The
/// `logp_new` in `batch` must come from `policy`.
pub fn assemble_gradient<S: ScoreFunction>(
    batch: &[GroupEval<'_>],
    config: &ObjectiveConfig,
    policy: &S,
) -> Result<(LossReport, S::Gradient), ObjectiveError> {
    assemble_gradient_with(batch, config, config.variant.recipe(), policy)
}

pub fn assemble_gradient_with<S: ScoreFunction>(
    batch: &[GroupEval<'_>],
    config: &ObjectiveConfig,
    recipe: Recipe,
    policy: &S,
) -> Result<(LossReport, S::Gradient), ObjectiveError> {
    let eval = evaluate(batch, config, recipe)?;
    let mut grad = S::Gradient::default();
    for (ge, group_grads) in batch.iter().zip(&eval.token_grads) {
        for (resp, coeffs) in ge.group.responses.iter().zip(group_grads) {
            if coeffs.iter().all(|c| *c == 0.0) {
                continue;
            }
            policy
                .accumulate_score(&ge.group.question, &resp.tokens, coeffs, &mut grad)
                .map_err(ObjectiveError::Score)?;
        }
    }
    Ok((eval.report, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Response, Source};

    fn question(id: &str) -> Question {
        Question::new(id, format!("question {id}"), "1", 0, Source::Original).unwrap()
    }

    fn group(id: &str, rewards: &[f64], len: usize) -> RewardedGroup {
        let responses = rewards
            .iter()
            .map(|_| Response::new(vec![0; len], "x", vec![-1.0; len]).unwrap())
            .collect();
        RewardedGroup::with_accuracy_rewards(question(id), responses, rewards.to_vec()).unwrap()
    }

    fn cfg(variant: Variant, g: usize) -> ObjectiveConfig {
        ObjectiveConfig {
            group_size_g: g,
            ..ObjectiveConfig::for_variant(variant)
        }
    }

    #[test]
    fn ratio_examples() {
        assert_eq!(token_ratio(-2.0, -2.0), 1.0);
        assert!((token_ratio(-1.0, -2.0) - std::f64::consts::E).abs() < 1e-15);
        assert!((token_ratio(-2.0, -1.0) - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(token_ratio(0.0, -1000.0), RATIO_CAP);
    }

    #[test]
    fn sequence_ratio_examples() {
        assert_eq!(sequence_ratio(&[-1.0, -2.0], &[-1.0, -2.0]).unwrap(), 1.0);
        let l2 = 2f64.ln();
        assert!((sequence_ratio(&[l2 - 1.0, l2 - 3.0], &[-1.0, -3.0]).unwrap() - 2.0).abs() < 1e-15);
        assert!((sequence_ratio(&[4f64.ln() - 1.0, -1.0], &[-1.0, -1.0]).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(
            sequence_ratio(&[0.0], &[0.0, 0.0]),
            Err(ObjectiveError::LengthMismatch(1, 2))
        ));
        assert!(sequence_ratio(&[], &[]).is_err());
    }

    #[test]
    fn clip_examples() {
        assert!((clipped_surrogate(1.5, 1.0, 0.2, 0.2) - 1.2).abs() < 1e-15);
        assert!((clipped_surrogate(0.5, -1.0, 0.2, 0.2) + 0.8).abs() < 1e-15);
        for a in [-2.5, 0.0, 0.7] {
            assert_eq!(clipped_surrogate(1.0, a, 0.1, 0.3), a);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = ObjectiveConfig::for_variant(Variant::Dgpo);
        assert!(c.validate().is_ok());
        c.eps_low = 0.3;
        assert!(c.validate().is_err());
        let mut c = ObjectiveConfig::for_variant(Variant::Dgpo);
        c.temperature_t = 0.0;
        assert!(c.validate().is_err());
        let c = ObjectiveConfig::for_variant(Variant::DapoDgpo);
        assert_eq!((c.eps_low, c.eps_high), (0.2, 0.28));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("gspo_dgpo".parse::<Variant>().unwrap(), Variant::GspoDgpo);
        assert!("ppo".parse::<Variant>().is_err());
    }

    #[test]
    fn dgpo_equal_lengths_cancel() {
        let g = group("a", &[1.0, 0.0], 3);
        let batch = [GroupEval::on_policy(&g)];
        let r = assemble_loss(&batch, &cfg(Variant::Dgpo, 2)).unwrap();
        assert_eq!(r.loss, 0.0);
        assert_eq!(r.advantages[0].values, vec![1.0, -1.0]);
        assert_eq!(r.lambdas, vec![Some(1.0)]);
        assert_eq!(r.tokens_counted, 6);
    }

    #[test]
    fn uniform_batch_is_skipped() {
        let a = group("a", &[1.0; 4], 2);
        let b = group("b", &[0.0; 4], 2);
        let batch = [GroupEval::on_policy(&a), GroupEval::on_policy(&b)];
        for v in [
            Variant::Dgpo,
            Variant::Gpg,
            Variant::Dapo,
            Variant::GpgDgpo,
            Variant::DapoDgpo,
            Variant::GspoDgpo,
        ] {
            let r = assemble_loss(&batch, &cfg(v, 4)).unwrap();
            assert_eq!(r.skipped, Some(SkipReason::NoValidQuestions), "{v}");
            assert_eq!(r.per_question_magnitude, vec![0.0, 0.0]);
        }
        // Variants that average over all questions report a zero loss instead.
        for v in [Variant::Grpo, Variant::DrGrpo, Variant::Gspo] {
            let r = assemble_loss(&batch, &cfg(v, 4)).unwrap();
            assert!(!r.is_skipped());
            assert_eq!(r.loss, 0.0);
        }
        let r = assemble_loss(&[], &cfg(Variant::Grpo, 4)).unwrap();
        assert_eq!(r.skipped, Some(SkipReason::EmptyBatch));
    }

    #[test]
    fn group_size_mismatch_is_an_error() {
        let a = group("a", &[1.0, 0.0, 0.0], 2);
        let batch = [GroupEval::on_policy(&a)];
        assert!(matches!(
            assemble_loss(&batch, &cfg(Variant::Dgpo, 4)),
            Err(ObjectiveError::GroupSize {
                expected: 4,
                found: 3,
                ..
            })
        ));
        let mut bad = GroupEval::on_policy(&a);
        bad.logp_new[1].pop();
        assert!(matches!(
            assemble_loss(&[bad], &cfg(Variant::Dgpo, 3)),
            Err(ObjectiveError::LogProbShape { response: 1, .. })
        ));
    }

    #[test]
    fn magnitudes_follow_closed_forms() {
        let groups: Vec<_> = (1..8)
            .map(|k| {
                let r: Vec<f64> = (0..8).map(|i| if i < k { 1.0 } else { 0.0 }).collect();
                group(&k.to_string(), &r, 2)
            })
            .collect();
        let batch: Vec<_> = groups.iter().map(GroupEval::on_policy).collect();
        let mut c = cfg(Variant::Dgpo, 8);
        c.temperature_t = 1e300;
        let r = assemble_loss(&batch, &c).unwrap();
        for m in &r.per_question_magnitude {
            assert!((m - 8.0).abs() < 1e-9);
        }
        let r = assemble_loss(&batch, &cfg(Variant::Grpo, 8)).unwrap();
        for (k, m) in (1..8).zip(&r.per_question_magnitude) {
            let p = k as f64 / 8.0;
            assert!((m - 16.0 * (p * (1.0 - p)).sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn clipped_token_gets_no_gradient() {
        // One response above the upper clip with Â > 0, one inside the band.
        let g = group("a", &[1.0, 0.0], 1);
        let mut ge = GroupEval::on_policy(&g);
        ge.logp_new[0][0] = -1.0 + (1.0f64 + 0.2 + 0.1).ln();
        let c = cfg(Variant::Dgpo, 2);
        let grads = token_loss_gradients(&[ge.clone()], &c).unwrap();
        assert_eq!(grads[0][0], vec![0.0]);
        // Â = −1 at ratio 1: d loss / d log π = −λ·Â·1/N = 1/2
        assert_eq!(grads[0][1], vec![0.5]);

        ge.logp_new[0][0] = -1.0 + 1.1f64.ln();
        let grads = token_loss_gradients(&[ge], &c).unwrap();
        assert!((grads[0][0][0] + 1.1 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn gpg_loss_is_negative_log_likelihood_weighted() {
        let g = group("a", &[1.0, 0.0], 2);
        let ge = GroupEval::on_policy(&g);
        let r = assemble_loss(&[ge], &cfg(Variant::Gpg, 2)).unwrap();
        // Â = ±1, log π = −1 everywhere: Σ −log π · Â = 2·1 − 2·1 = 0
        assert_eq!(r.loss, 0.0);

        let g = group("b", &[1.0, 0.0, 0.0, 0.0], 1);
        let ge = GroupEval::on_policy(&g);
        let r = assemble_loss(&[ge], &cfg(Variant::GpgDgpo, 4)).unwrap();
        // Σ −(−1)·Â = Σ Â = 0 again; shift one log-prob to break symmetry.
        assert!(r.loss.abs() < 1e-15);
        let mut ge = GroupEval::on_policy(&g);
        ge.logp_new[0][0] = -0.5;
        let r = assemble_loss(&[ge], &cfg(Variant::GpgDgpo, 4)).unwrap();
        // (1/4)·[−(−0.5)·2 − (−1)·(−2/3)·3] = (1/4)·(1 − 2) = −0.25
        assert!((r.loss + 0.25).abs() < 1e-15);
    }

    #[test]
    fn dr_grpo_uses_fixed_normaliser() {
        let g = group("a", &[1.0, 0.0], 3);
        let mut ge = GroupEval::on_policy(&g);
        ge.logp_new[0] = vec![-1.0 + 1.1f64.ln(); 3];
        let mut c = cfg(Variant::DrGrpo, 2);
        c.max_completion_len = 10;
        let r = assemble_loss(&[ge], &c).unwrap();
        assert_eq!(r.normalizer, 20.0);
        // Â = [0.5, −0.5]; Σ = 3·1.1·0.5 − 3·0.5
        assert!((r.loss + (1.65 - 1.5) / 20.0).abs() < 1e-15);
    }

    #[test]
    fn dapo_dgpo_floors_zero_accuracy() {
        // Composite rewards differ, accuracy all zero: valid with D = −1.
        let responses: Vec<_> = (0..2)
            .map(|_| Response::new(vec![0], "x", vec![-1.0]).unwrap())
            .collect();
        let floor = RewardedGroup::new(question("f"), responses.clone(), vec![0.0, -0.5], vec![0.0, 0.0]).unwrap();
        let easy = RewardedGroup::new(question("e"), responses, vec![1.0, 0.0], vec![1.0, 0.0]).unwrap();
        let batch = [GroupEval::on_policy(&floor), GroupEval::on_policy(&easy)];
        let r = assemble_loss(&batch, &cfg(Variant::DapoDgpo, 2)).unwrap();
        assert_eq!(r.b_valid, 2);
        let l_floor = r.lambdas[0].unwrap();
        let l_easy = r.lambdas[1].unwrap();
        // D = −1 vs −0.5: the floored question gets the smaller weight.
        assert!(l_floor < l_easy);
        assert!((l_floor + l_easy - 2.0).abs() < 1e-12);
        let r = assemble_loss(&batch, &cfg(Variant::Dgpo, 2)).unwrap();
        // Plain DGPO scores the composite mean: D = 0.25 vs −0.5.
        assert!(r.lambdas[0].unwrap() > r.lambdas[1].unwrap());
    }
}
