//! Numerical checks behind `check-theorems` and `gradcheck`: the closed-form
//! update magnitudes of the two estimators, and central finite differences
//! against the analytic policy gradient of every variant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::advantage::{dgae, grae, grae_magnitude_closed_form, total_update_magnitude, AdvantageError};
use crate::domain::{DomainError, Question, Response, RewardSpec, RewardedGroup, Source};
use crate::objective::{
    assemble_gradient, assemble_loss, sequence_ratio, token_ratio, GroupEval, ObjectiveConfig, ObjectiveError,
    Surrogate, Variant,
};
use crate::policy::{ContextKey, PolicyError, PolicyGradient, PolicyParams};

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error(transparent)]
    Advantage(#[from] AdvantageError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("invalid check configuration: {0}")]
    Config(String),
}

/// One `(G, k)` cell of the binary-reward grid, `k` correct out of `G`.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoremRow {
    pub group_size: usize,
    pub correct: usize,
    pub p: f64,
    pub grae_magnitude: f64,
    pub closed_form: f64,
    pub dgae_magnitude: f64,
}

impl TheoremRow {
    pub fn grae_error(&self) -> f64 {
        (self.grae_magnitude - self.closed_form).abs()
    }

    pub fn dgae_error(&self) -> f64 {
        (self.dgae_magnitude - self.group_size as f64).abs()
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.grae_error() <= tol && self.dgae_error() <= tol
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoremReport {
    pub rows: Vec<TheoremRow>,
    /// Group sizes whose grid maximum of the GRAE magnitude is not at `k = G/2`.
    pub misplaced_maxima: Vec<usize>,
    pub tolerance: f64,
}

impl TheoremReport {
    pub fn passes(&self) -> bool {
        self.misplaced_maxima.is_empty() && self.rows.iter().all(|r| r.passes(self.tolerance))
    }
}

/// Sweeps every `G` in `2..=gmax` and every `k` in `1..G`.
pub fn check_theorems(gmax: usize, tolerance: f64) -> Result<TheoremReport, VerifyError> {
    if gmax < 2 {
        return Err(VerifyError::Config(format!("gmax {gmax} < 2")));
    }
    let mut rows = Vec::new();
    let mut misplaced_maxima = Vec::new();
    for g in 2..=gmax {
        let start = rows.len();
        for k in 1..g {
            let rewards: Vec<f64> = (0..g).map(|i| if i < k { 1.0 } else { 0.0 }).collect();
            let p = k as f64 / g as f64;
            rows.push(TheoremRow {
                group_size: g,
                correct: k,
                p,
                grae_magnitude: total_update_magnitude(&grae(&rewards)?),
                closed_form: grae_magnitude_closed_form(g, p)?,
                dgae_magnitude: total_update_magnitude(&dgae(&rewards)?),
            });
        }
        let cells = &rows[start..];
        let best = cells.iter().map(|r| r.grae_magnitude).fold(f64::NEG_INFINITY, f64::max);
        // For odd G the two cells nearest p = 1/2 tie.
        let at_half = cells
            .iter()
            .filter(|r| (2 * r.correct).abs_diff(g) <= 1)
            .any(|r| best - r.grae_magnitude <= tolerance);
        if !at_half {
            misplaced_maxima.push(g);
        }
    }
    Ok(TheoremReport {
        rows,
        misplaced_maxima,
        tolerance,
    })
}

/// A small batch drawn for a gradient check, with the policy whose gradient
/// is checked.
#[derive(Debug, Clone)]
pub struct ToyBatch {
    pub params: PolicyParams,
    pub groups: Vec<RewardedGroup>,
    pub config: ObjectiveConfig,
}

const TOY_VOCAB: usize = 5;
const TOY_MAX_LEN: usize = 4;
const TOY_QUESTIONS: usize = 3;
const TOY_GROUP: usize = 4;
/// Batches with an importance ratio this close to a clip boundary are
/// redrawn, since the surrogate has a kink there.
const KINK_MARGIN: f64 = 1e-3;

impl ToyBatch {
    /// Draws a policy, an old policy near it, and rewarded groups sampled
    /// from the old one. Rewards are binary, or accuracy plus a length
    /// penalty for the composite-reward variants.
    pub fn random(variant: Variant, rng: &mut ChaCha8Rng) -> Result<Self, VerifyError> {
        let config = ObjectiveConfig {
            group_size_g: TOY_GROUP,
            max_completion_len: TOY_MAX_LEN,
            ..ObjectiveConfig::for_variant(variant)
        };
        let reward_spec = RewardSpec::accuracy_plus_length(0.5, 2, TOY_MAX_LEN)?;
        let mut params = PolicyParams::new(TOY_VOCAB, TOY_MAX_LEN, None)?;
        let mut old = params.clone();
        let mut groups = Vec::with_capacity(TOY_QUESTIONS);
        for qi in 0..TOY_QUESTIONS {
            let question = Question::new(
                format!("gc{qi}"),
                format!("toy question {qi}"),
                "0",
                0,
                Source::Original,
            )?;
            let mut responses = Vec::with_capacity(TOY_GROUP);
            let mut accuracies = Vec::with_capacity(TOY_GROUP);
            for _ in 0..TOY_GROUP {
                let len = rng.random_range(1..=TOY_MAX_LEN);
                let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..TOY_VOCAB as u32)).collect();
                for t in 0..len {
                    let key = ContextKey::new(&question, &tokens[..t]);
                    if params.logits(&key).iter().all(|l| *l == 0.0) {
                        let logits: Vec<f64> = (0..TOY_VOCAB).map(|_| rng.random_range(-1.5..1.5)).collect();
                        let shifted: Vec<f64> = logits.iter().map(|l| l + rng.random_range(-0.15..0.15)).collect();
                        params.set_logits(key, logits)?;
                        old.set_logits(key, shifted)?;
                    }
                }
                let logp_old = old.logprob(&question, &tokens)?;
                responses.push(Response::new(tokens, "", logp_old)?);
                accuracies.push(if rng.random_bool(0.5) { 1.0 } else { 0.0 });
            }
            let rewards = if variant.uses_composite_reward() {
                responses
                    .iter()
                    .zip(&accuracies)
                    .map(|(r, a)| reward_spec.reward(*a, r.len()))
                    .collect::<Result<Vec<_>, _>>()?
            } else {
                accuracies.clone()
            };
            groups.push(RewardedGroup::new(question, responses, rewards, accuracies)?);
        }
        Ok(Self { params, groups, config })
    }

    fn logp_new(&self, params: &PolicyParams) -> Result<Vec<Vec<Vec<f64>>>, VerifyError> {
        self.groups
            .iter()
            .map(|g| {
                g.responses
                    .iter()
                    .map(|r| params.logprob(&g.question, &r.tokens).map_err(VerifyError::from))
                    .collect()
            })
            .collect()
    }

    pub fn loss(&self, params: &PolicyParams) -> Result<f64, VerifyError> {
        let logps = self.logp_new(params)?;
        let batch: Vec<GroupEval<'_>> = self
            .groups
            .iter()
            .zip(logps)
            .map(|(group, logp_new)| GroupEval { group, logp_new })
            .collect();
        Ok(assemble_loss(&batch, &self.config)?.loss)
    }

    pub fn analytic_gradient(&self) -> Result<PolicyGradient, VerifyError> {
        let logps = self.logp_new(&self.params)?;
        let batch: Vec<GroupEval<'_>> = self
            .groups
            .iter()
            .zip(logps)
            .map(|(group, logp_new)| GroupEval { group, logp_new })
            .collect();
        Ok(assemble_gradient(&batch, &self.config, &self.params)?.1)
    }

    fn near_kink(&self) -> Result<bool, VerifyError> {
        let lo = 1.0 - self.config.eps_low;
        let hi = 1.0 + self.config.eps_high;
        let close = |r: f64| (r - lo).abs() < KINK_MARGIN || (r - hi).abs() < KINK_MARGIN;
        let surrogate = self.config.variant.recipe().surrogate;
        for (group, logps) in self.groups.iter().zip(self.logp_new(&self.params)?) {
            for (resp, new) in group.responses.iter().zip(&logps) {
                let hit = match surrogate {
                    Surrogate::TokenClip => new.iter().zip(&resp.logp_old).any(|(n, o)| close(token_ratio(*n, *o))),
                    Surrogate::SequenceClip => close(sequence_ratio(new, &resp.logp_old)?),
                    Surrogate::LogLikelihood => false,
                };
                if hit {
                    return Ok(true);
                }
            }
        }
        Ok(false)
    }

    /// Every logit of every context the batch touches.
    pub fn coordinates(&self) -> Vec<(ContextKey, usize)> {
        let mut keys: Vec<ContextKey> = Vec::new();
        for g in &self.groups {
            for r in &g.responses {
                for t in 0..r.tokens.len() {
                    keys.push(ContextKey::new(&g.question, &r.tokens[..t]));
                }
            }
        }
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .flat_map(|k| (0..TOY_VOCAB).map(move |i| (k, i)))
            .collect()
    }

    /// Central differences of the loss, one per coordinate.
    pub fn numeric_gradient(&self, step: f64) -> Result<Vec<f64>, VerifyError> {
        let mut p = self.params.clone();
        self.coordinates()
            .into_iter()
            .map(|(key, i)| {
                let x = p.logit(&key, i);
                p.set_logit(key, i, x + step);
                let up = self.loss(&p)?;
                p.set_logit(key, i, x - step);
                let down = self.loss(&p)?;
                p.set_logit(key, i, x);
                Ok((up - down) / (2.0 * step))
            })
            .collect()
    }
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or the absolute gap when both are below
/// `1e-12`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckResult {
    pub variant: Variant,
    pub trials: usize,
    pub max_relative_error: f64,
    pub failures: usize,
    /// Trials whose batch had no valid question, so both gradients are zero.
    pub zero_trials: usize,
}

impl GradcheckResult {
    pub fn passes(&self) -> bool {
        self.failures == 0
    }
}

/// Runs `trials` seeded random batches for one variant.
pub fn gradcheck_variant(
    variant: Variant,
    trials: usize,
    step: f64,
    tolerance: f64,
    seed: u64,
) -> Result<GradcheckResult, VerifyError> {
    if !(step > 0.0) || !(tolerance > 0.0) {
        return Err(VerifyError::Config("step and tolerance must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(Variant::ALL.iter().position(|v| *v == variant).unwrap_or(0) as u64);
    let mut result = GradcheckResult {
        variant,
        trials,
        max_relative_error: 0.0,
        failures: 0,
        zero_trials: 0,
    };
    for _ in 0..trials {
        let batch = loop {
            let b = ToyBatch::random(variant, &mut rng)?;
            if !b.near_kink()? {
                break b;
            }
        };
        let grad = batch.analytic_gradient()?;
        let coords = batch.coordinates();
        let analytic: Vec<f64> = coords.iter().map(|(k, i)| grad.get(k, *i)).collect();
        let numeric = batch.numeric_gradient(step)?;
        let err = relative_error(&analytic, &numeric);
        if grad.is_zero() {
            result.zero_trials += 1;
        }
        result.max_relative_error = result.max_relative_error.max(err);
        if !(err <= tolerance) {
            result.failures += 1;
        }
    }
    Ok(result)
}
