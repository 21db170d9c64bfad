//! The training loop: sample a batch, roll out groups from a frozen copy of the
//! policy, score, weight, differentiate and take one gradient step.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advantage::StdKind;
use crate::domain::{
    build_group, DomainError, Question, ResponseSampler, RewardSpec, RewardedGroup, DEFAULT_GROUP_SIZE,
};
use crate::objective::{assemble_gradient, GroupEval, LossReport, ObjectiveConfig, ObjectiveError, Variant};
use crate::policy::{Decoding, PolicyError, PolicyParams, PolicySampler, DEFAULT_MAX_LEN};
use crate::weighting::DEFAULT_TEMPERATURE;

pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_LEARNING_RATE: f64 = 100.0;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("metrics output: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: ObjectiveConfig,
    pub batch_size_b: usize,
    pub group_size_g: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub seed: u64,
    pub reward_spec: RewardSpec,
    /// Generation cap of the toy policy, end token included.
    pub max_len: usize,
    pub sampling_temperature: f64,
    pub dataset: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

/// Reward used by a variant when none is configured: the composite reward for
/// the DAPO objectives, plain accuracy otherwise.
pub fn default_reward_spec(variant: Variant, max_len: usize) -> RewardSpec {
    if variant.uses_composite_reward() {
        RewardSpec::accuracy_plus_length(1.0, max_len * 3 / 4, max_len).expect("threshold below limit")
    } else {
        RewardSpec::accuracy_only()
    }
}

impl TrainConfig {
    pub fn for_variant(variant: Variant) -> Self {
        Self {
            objective: ObjectiveConfig::for_variant(variant),
            batch_size_b: DEFAULT_BATCH_SIZE,
            group_size_g: DEFAULT_GROUP_SIZE,
            learning_rate: DEFAULT_LEARNING_RATE,
            steps: 500,
            seed: 0,
            reward_spec: default_reward_spec(variant, DEFAULT_MAX_LEN),
            max_len: DEFAULT_MAX_LEN,
            sampling_temperature: 1.0,
            dataset: None,
            metrics: None,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.objective.validate()?;
        self.reward_spec.validate()?;
        if self.batch_size_b == 0 {
            return Err(TrainError::Config("batch_size_b must be >= 1".into()));
        }
        if self.steps == 0 {
            return Err(TrainError::Config("steps must be >= 1".into()));
        }
        if self.objective.group_size_g != self.group_size_g {
            return Err(TrainError::Config(format!(
                "objective group size {} differs from group_size_g {}",
                self.objective.group_size_g, self.group_size_g
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config(format!(
                "learning rate {} must be > 0",
                self.learning_rate
            )));
        }
        if !(self.sampling_temperature > 0.0) {
            return Err(TrainError::Config("sampling temperature must be > 0".into()));
        }
        if self.max_len == 0 {
            return Err(TrainError::Config("max_len must be >= 1".into()));
        }
        Ok(())
    }
}

/// The JSON config file. Every field is optional; missing ones take the
/// defaults of the chosen algorithm.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfigFile {
    pub algo: Option<Variant>,
    pub batch_size_b: Option<usize>,
    pub group_size_g: Option<usize>,
    pub learning_rate: Option<f64>,
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub eps_low: Option<f64>,
    pub eps_high: Option<f64>,
    pub temperature_t: Option<f64>,
    pub std_kind: Option<StdKind>,
    pub reward_spec: Option<RewardSpec>,
    pub max_len: Option<usize>,
    pub sampling_temperature: Option<f64>,
    pub dataset: Option<PathBuf>,
    pub metrics: Option<PathBuf>,
}

impl TrainConfigFile {
    pub fn resolve(&self) -> TrainConfig {
        let variant = self.algo.unwrap_or(Variant::Dgpo);
        let mut c = TrainConfig::for_variant(variant);
        if let Some(v) = self.max_len {
            c.max_len = v;
            c.reward_spec = default_reward_spec(variant, v);
        }
        c.objective.max_completion_len = c.max_len;
        if let Some(v) = self.group_size_g {
            c.group_size_g = v;
            c.objective.group_size_g = v;
        }
        c.batch_size_b = self.batch_size_b.unwrap_or(c.batch_size_b);
        c.learning_rate = self.learning_rate.unwrap_or(c.learning_rate);
        c.steps = self.steps.unwrap_or(c.steps);
        c.seed = self.seed.unwrap_or(c.seed);
        c.objective.eps_low = self.eps_low.unwrap_or(c.objective.eps_low);
        c.objective.eps_high = self.eps_high.unwrap_or(c.objective.eps_high);
        c.objective.temperature_t = self.temperature_t.unwrap_or(DEFAULT_TEMPERATURE);
        c.objective.std_kind = self.std_kind.unwrap_or_default();
        if let Some(r) = self.reward_spec {
            c.reward_spec = r;
        }
        c.sampling_temperature = self.sampling_temperature.unwrap_or(c.sampling_temperature);
        c.dataset = self.dataset.clone();
        c.metrics = self.metrics.clone();
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_len: f64,
    pub b_valid: usize,
    pub loss: f64,
    pub skipped: bool,
    /// Accuracy over every response of the stratum's questions in the batch.
    pub accuracy: BTreeMap<u32, f64>,
    /// Accuracy restricted to the stratum's valid questions, the population
    /// `lambda` is averaged over.
    pub valid_accuracy: BTreeMap<u32, f64>,
    /// Geometric mean weight over the stratum's valid questions, so it orders
    /// strata by their mean difficulty.
    pub lambda: BTreeMap<u32, f64>,
}

impl StepMetrics {
    fn from_batch(step: usize, groups: &[RewardedGroup], report: &LossReport) -> Self {
        let responses = groups.iter().map(|g| g.group_size()).sum::<usize>() as f64;
        let mean_reward = groups.iter().flat_map(|g| &g.rewards).sum::<f64>() / responses;
        let mean_len = groups.iter().map(|g| g.token_count()).sum::<usize>() as f64 / responses;

        let mut acc: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
        let mut vacc: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
        let mut lam: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
        for ((g, lambda), valid) in groups.iter().zip(&report.lambdas).zip(&report.valid_mask) {
            let correct = g.accuracies.iter().sum::<f64>();
            let a = acc.entry(g.question.stratum).or_default();
            a.0 += correct;
            a.1 += g.group_size();
            if let (Some(l), false) = (lambda, report.is_skipped()) {
                let e = lam.entry(g.question.stratum).or_default();
                e.0 += l.ln();
                e.1 += 1;
            }
            if *valid {
                let v = vacc.entry(g.question.stratum).or_default();
                v.0 += correct;
                v.1 += g.group_size();
            }
        }
        let mean = |m: BTreeMap<u32, (f64, usize)>| m.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
        Self {
            step,
            mean_reward,
            mean_len,
            b_valid: report.b_valid,
            loss: report.loss,
            skipped: report.is_skipped(),
            accuracy: mean(acc),
            valid_accuracy: mean(vacc),
            lambda: mean(lam).into_iter().map(|(k, v): (u32, f64)| (k, v.exp())).collect(),
        }
    }
}

/// Writes the metrics CSV, one flushed row per step.
pub struct MetricsWriter<W: Write> {
    out: W,
    strata: Vec<u32>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W, strata: &[u32]) -> std::io::Result<Self> {
        let mut header = String::from("step,mean_reward,mean_len,b_valid,loss");
        for s in strata {
            header.push_str(&format!(",acc_s{s}"));
        }
        for s in strata {
            header.push_str(&format!(",vacc_s{s}"));
        }
        for s in strata {
            header.push_str(&format!(",lambda_s{s}"));
        }
        writeln!(out, "{header}")?;
        out.flush()?;
        Ok(Self {
            out,
            strata: strata.to_vec(),
        })
    }

    pub fn write(&mut self, m: &StepMetrics) -> std::io::Result<()> {
        let mut row = format!("{},{},{},{},{}", m.step, m.mean_reward, m.mean_len, m.b_valid, m.loss);
        let cell = |v: Option<&f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for s in &self.strata {
            row.push(',');
            row.push_str(&cell(m.accuracy.get(s)));
        }
        for s in &self.strata {
            row.push(',');
            row.push_str(&cell(m.valid_accuracy.get(s)));
        }
        for s in &self.strata {
            row.push(',');
            row.push_str(&cell(m.lambda.get(s)));
        }
        writeln!(self.out, "{row}")?;
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

pub fn dataset_strata(dataset: &[Question]) -> Vec<u32> {
    dataset
        .iter()
        .map(|q| q.stratum)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// splitmix64 over the inputs, for independent per-rollout streams.
fn derive_seed(parts: &[u64]) -> u64 {
    let mut z = 0x9e37_79b9_7f4a_7c15u64;
    for p in parts {
        z ^= p
            .wrapping_add(0x9e37_79b9_7f4a_7c15)
            .wrapping_add(z << 6)
            .wrapping_add(z >> 2);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
    }
    z
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PolicyParams,
    pub metrics: Vec<StepMetrics>,
}

/// One step from an explicit sampler; used by [`train`] and by tests that
/// drive the loop with stub samplers.
pub fn train_step(
    config: &TrainConfig,
    step: usize,
    dataset: &[Question],
    params: &mut PolicyParams,
    sampler: &dyn ResponseSampler,
) -> Result<StepMetrics, TrainError> {
    let mut batch_rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, step as u64, 0]));
    let picks: Vec<usize> = (0..config.batch_size_b)
        .map(|_| batch_rng.random_range(0..dataset.len()))
        .collect();

    let groups = picks
        .par_iter()
        .enumerate()
        .map(|(s, &qi)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[config.seed, step as u64, 1, s as u64]));
            build_group(
                &dataset[qi],
                config.group_size_g,
                sampler,
                &config.reward_spec,
                &mut rng,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;

    let batch = groups
        .iter()
        .map(|g| {
            let logp_new = g
                .responses
                .iter()
                .map(|r| params.logprob(&g.question, &r.tokens))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(GroupEval { group: g, logp_new })
        })
        .collect::<Result<Vec<_>, PolicyError>>()?;

    let (report, grad) = assemble_gradient(&batch, &config.objective, &*params)?;
    if report.is_skipped() {
        log::info!("step {step}: no valid question in batch, update skipped");
    } else {
        params.apply(&grad, -config.learning_rate);
    }
    Ok(StepMetrics::from_batch(step, &groups, &report))
}

/// Trains a fresh digit policy. `on_step` sees every metrics row as soon as it
/// is produced.
pub fn train(
    config: &TrainConfig,
    dataset: &[Question],
    mut on_step: impl FnMut(&StepMetrics) -> std::io::Result<()>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut params = PolicyParams::digits(config.max_len)?;
    let mut metrics = Vec::with_capacity(config.steps);
    let decoding = Decoding::Sample {
        temperature: config.sampling_temperature,
    };
    for step in 1..=config.steps {
        let old = params.snapshot();
        let sampler = PolicySampler { policy: &old, decoding };
        let m = train_step(config, step, dataset, &mut params, &sampler)?;
        on_step(&m)?;
        metrics.push(m);
    }
    Ok(TrainOutcome { params, metrics })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: BTreeMap<u32, f64>,
    pub overall_accuracy: f64,
    pub mean_len: f64,
}

pub fn evaluate_with(
    sampler: &dyn ResponseSampler,
    dataset: &[Question],
    samples_per_question: usize,
    seed: u64,
) -> Result<EvalReport, TrainError> {
    if samples_per_question == 0 {
        return Err(TrainError::Config("samples_per_question must be >= 1".into()));
    }
    let per_question = dataset
        .par_iter()
        .enumerate()
        .map(|(i, q)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, i as u64, 2]));
            let mut correct = 0.0;
            let mut len = 0usize;
            for _ in 0..samples_per_question {
                let r = sampler.sample_response(q, &mut rng)?;
                correct += crate::domain::verify_answer(&r.text, &q.gold_answer);
                len += r.len();
            }
            Ok((q.stratum, correct, len))
        })
        .collect::<Result<Vec<_>, DomainError>>()?;

    let mut by_stratum: BTreeMap<u32, (f64, usize)> = BTreeMap::new();
    let (mut correct, mut tokens) = (0.0, 0usize);
    for (s, c, l) in per_question {
        let e = by_stratum.entry(s).or_default();
        e.0 += c;
        e.1 += samples_per_question;
        correct += c;
        tokens += l;
    }
    let n = (dataset.len() * samples_per_question).max(1) as f64;
    Ok(EvalReport {
        accuracy: by_stratum.into_iter().map(|(k, (c, n))| (k, c / n as f64)).collect(),
        overall_accuracy: correct / n,
        mean_len: tokens as f64 / n,
    })
}

/// Greedy decoding unless `decoding` says otherwise.
pub fn evaluate(
    params: &PolicyParams,
    dataset: &[Question],
    samples_per_question: usize,
    decoding: Decoding,
    seed: u64,
) -> Result<EvalReport, TrainError> {
    evaluate_with(
        &PolicySampler {
            policy: params,
            decoding,
        },
        dataset,
        samples_per_question,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Response, Source};
    use crate::tasks::{make_dataset, StratumSpec, TaskSpec};
    use rand::RngCore;

    struct Oracle;

    impl ResponseSampler for Oracle {
        fn sample_response(&self, q: &Question, _rng: &mut dyn RngCore) -> Result<Response, DomainError> {
            let d: u32 = q.gold_answer.parse().unwrap();
            Response::new(
                vec![d, crate::policy::DIGIT_EOS],
                q.gold_answer.clone(),
                vec![-0.1, -0.1],
            )
        }
    }

    fn data(strata: &[(u32, usize, usize)]) -> Vec<Question> {
        make_dataset(&TaskSpec {
            modulus: 10,
            strata: strata
                .iter()
                .map(|&(stratum, operand_count, sample_count)| StratumSpec {
                    stratum,
                    operand_count,
                    sample_count,
                })
                .collect(),
            seed: 3,
        })
        .unwrap()
    }

    #[test]
    fn one_step_one_row() {
        let ds = data(&[(0, 2, 10)]);
        let mut c = TrainConfig::for_variant(Variant::Dgpo);
        c.steps = 1;
        c.batch_size_b = 4;
        let mut rows = Vec::new();
        let out = train(&c, &ds, |m| {
            rows.push(m.clone());
            Ok(())
        })
        .unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(out.metrics, rows);
    }

    #[test]
    fn oracle_sampler_step_is_skipped_and_params_untouched() {
        let ds = data(&[(0, 2, 10)]);
        let c = TrainConfig::for_variant(Variant::Dgpo);
        let mut params = PolicyParams::digits(c.max_len).unwrap();
        let before = params.clone();
        let m = train_step(&c, 1, &ds, &mut params, &Oracle).unwrap();
        assert!(m.skipped);
        assert_eq!(m.b_valid, 0);
        assert_eq!(m.mean_reward, 1.0);
        assert_eq!(params, before);
    }

    #[test]
    fn evaluation_oracles() {
        let ds = data(&[(0, 1, 40), (1, 3, 40)]);
        let r = evaluate_with(&Oracle, &ds, 3, 0).unwrap();
        assert!(r.accuracy.values().all(|a| *a == 1.0));

        // Uniform single-token guesser over ten digits.
        let guesser = PolicyParams::new(10, 1, None).unwrap();
        let before = guesser.clone();
        let n = 400 * 10;
        let ds = data(&[(0, 2, 400)]);
        let r = evaluate(&guesser, &ds, 10, Decoding::Sample { temperature: 1.0 }, 1).unwrap();
        let sigma = (0.1 * 0.9 / n as f64).sqrt();
        assert!((r.overall_accuracy - 0.1).abs() < 3.0 * sigma, "{}", r.overall_accuracy);
        assert_eq!(guesser, before);
        assert_eq!(r.mean_len, 1.0);
        assert!(evaluate(&guesser, &ds, 0, Decoding::Greedy, 0).is_err());
    }

    #[test]
    fn uniform_accuracy_does_not_grow_with_operands() {
        let ds = data(&[(0, 1, 1000), (1, 2, 1000), (2, 4, 1000)]);
        let uniform = PolicyParams::digits(4).unwrap();
        let r = evaluate(&uniform, &ds, 4, Decoding::Sample { temperature: 1.0 }, 9).unwrap();
        let acc: Vec<f64> = r.accuracy.values().copied().collect();
        let n = 4000.0;
        for w in acc.windows(2) {
            let p = (w[0] + w[1]) / 2.0;
            let sigma = (2.0 * p * (1.0 - p) / n).sqrt();
            assert!(w[1] <= w[0] + 3.0 * sigma, "{acc:?}");
        }
    }

    #[test]
    fn metrics_csv_layout() {
        let mut w = MetricsWriter::new(Vec::new(), &[0, 2]).unwrap();
        let m = StepMetrics {
            step: 1,
            mean_reward: 0.5,
            mean_len: 2.25,
            b_valid: 3,
            loss: -0.125,
            skipped: false,
            accuracy: [(0, 0.75), (2, 0.25)].into_iter().collect(),
            valid_accuracy: [(2, 0.5)].into_iter().collect(),
            lambda: [(2, 1.1)].into_iter().collect(),
        };
        w.write(&m).unwrap();
        let text = String::from_utf8(w.into_inner()).unwrap();
        assert_eq!(
            text,
            "step,mean_reward,mean_len,b_valid,loss,acc_s0,acc_s2,vacc_s0,vacc_s2,lambda_s0,lambda_s2\n1,0.5,2.25,3,-0.125,0.75,0.25,,0.5,,1.1\n"
        );
    }

    #[test]
    fn config_file_defaults_follow_algorithm() {
        let f: TrainConfigFile = serde_json::from_str(r#"{"algo":"dapo_dgpo","steps":3}"#).unwrap();
        let c = f.resolve();
        assert_eq!(c.objective.variant, Variant::DapoDgpo);
        assert_eq!(c.objective.eps_high, 0.28);
        assert_eq!(c.steps, 3);
        assert_eq!(c.reward_spec.kind, crate::domain::RewardKind::AccuracyPlusLength);
        assert!(c.validate().is_ok());
        assert!(serde_json::from_str::<TrainConfigFile>(r#"{"stepz":3}"#).is_err());

        let c = TrainConfigFile {
            group_size_g: Some(4),
            ..Default::default()
        }
        .resolve();
        assert_eq!(c.objective.group_size_g, 4);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn stratum_lambda_skips_invalid_questions() {
        let q = Question::new("a", "1 mod 2", "1", 5, Source::Original).unwrap();
        let resp = Response::new(vec![1], "1", vec![-0.5]).unwrap();
        let g = RewardedGroup::with_accuracy_rewards(q, vec![resp.clone(), resp], vec![1.0, 1.0]).unwrap();
        let c = ObjectiveConfig {
            group_size_g: 2,
            ..ObjectiveConfig::for_variant(Variant::Dgpo)
        };
        let report = crate::objective::assemble_loss(&[GroupEval::on_policy(&g)], &c).unwrap();
        let m = StepMetrics::from_batch(1, &[g], &report);
        assert_eq!(m.accuracy[&5], 1.0);
        assert!(m.valid_accuracy.is_empty());
        assert!(m.lambda.is_empty());
    }
}
