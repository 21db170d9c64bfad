//! `mathforge` subcommands. [`run`] parses arguments, dispatches and returns
//! the process exit code.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mathforge::domain::{load_dataset, save_dataset, DomainError};
use mathforge::mqr::{
    augment, validate_dataset, write_audit_rows, Aspect, AugmentConfig, ClientConfig, MqrError, ReformulatorClient,
    Verdict,
};
use mathforge::objective::Variant;
use mathforge::policy::{Decoding, PolicyError, PolicyParams};
use mathforge::tasks::{make_dataset, TaskSpec};
use mathforge::trainer::{dataset_strata, evaluate, train, MetricsWriter, TrainConfigFile, TrainError};
use mathforge::verify::{check_theorems, gradcheck_variant};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFICATION: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "mathforge",
    version,
    about = "Difficulty-aware group policy optimization on a toy task, plus question reformulation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the toy policy and write per-step metrics
    Train(TrainArgs),
    /// Measure accuracy of a saved policy
    Eval(EvalArgs),
    /// Generate a synthetic dataset from a task spec
    GenData(GenDataArgs),
    /// Check the closed-form update magnitudes of the advantage estimators
    CheckTheorems(CheckTheoremsArgs),
    /// Compare analytic and finite-difference gradients for each objective
    Gradcheck(GradcheckArgs),
    /// Reformulate a dataset through a chat-completions endpoint
    #[command(after_help = "The bearer token is read from MATHFORGE_API_KEY when set.")]
    MqrAugment(MqrAugmentArgs),
    /// Audit a sample of reformulated records for answer equivalence
    #[command(after_help = "The bearer token is read from MATHFORGE_API_KEY when set.")]
    MqrValidate(MqrValidateArgs),
    /// Convert a metrics CSV into long-format plot data
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON training config; every field is optional
    #[arg(long)]
    pub config: PathBuf,
    /// Algorithm, overriding the config
    #[arg(long, value_parser = parse_variant)]
    pub algo: Option<Variant>,
    /// Seed, overriding the config
    #[arg(long)]
    pub seed: Option<u64>,
    /// Optimization steps, overriding the config
    #[arg(long)]
    pub steps: Option<usize>,
    /// Dataset JSONL, overriding the config
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Metrics CSV, overriding the config
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Where to save the trained policy
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Policy checkpoint written by train
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset JSONL
    #[arg(long)]
    pub dataset: PathBuf,
    /// Responses sampled per question
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    /// Sampling temperature; greedy decoding when omitted
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Sampling seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Task spec JSON: {"modulus", "strata": [{"stratum", "operand_count", "sample_count"}], "seed"}
    #[arg(long)]
    pub spec: PathBuf,
    /// Output dataset JSONL
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CheckTheoremsArgs {
    /// Largest group size swept
    #[arg(long, default_value_t = 16)]
    pub gmax: usize,
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Comma-separated algorithm names, or "all"
    #[arg(long, default_value = "all")]
    pub variants: String,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Relative error tolerance
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EndpointArgs {
    /// Base URL; requests go to {endpoint}/chat/completions
    #[arg(long)]
    pub endpoint: String,
    /// Model name sent with each request
    #[arg(long)]
    pub model: String,
    /// Request timeout in seconds
    #[arg(long, default_value_t = 120.0)]
    pub timeout: f64,
    /// Retries after the first attempt
    #[arg(long, default_value_t = mathforge::mqr::DEFAULT_MAX_RETRIES)]
    pub max_retries: u32,
    /// First backoff delay in milliseconds, doubled on each retry
    #[arg(long, default_value_t = 1000)]
    pub backoff_ms: u64,
    /// Sampling temperature sent with each request
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    /// Requests in flight
    #[arg(long, default_value_t = mathforge::mqr::DEFAULT_PARALLELISM)]
    pub parallelism: usize,
}

impl EndpointArgs {
    fn client_config(&self) -> ClientConfig {
        ClientConfig {
            endpoint: self.endpoint.clone(),
            model: self.model.clone(),
            timeout_secs: self.timeout,
            max_retries: self.max_retries,
            temperature: self.temperature,
            backoff_base_ms: self.backoff_ms,
            ..ClientConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct MqrAugmentArgs {
    /// Dataset JSONL to reformulate
    #[arg(long)]
    pub input: PathBuf,
    /// Merged dataset JSONL: originals plus accepted reformulations
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated subset of background,term,subproblem
    #[arg(long, default_value = "background,term,subproblem")]
    pub aspects: String,
    #[command(flatten)]
    pub endpoint: EndpointArgs,
    /// Skip the equivalence audit
    #[arg(long)]
    pub no_audit: bool,
    /// Share of reformulations audited
    #[arg(long, default_value_t = 1.0)]
    pub audit_fraction: f64,
    /// Seed choosing which reformulations are audited
    #[arg(long, default_value_t = 0)]
    pub audit_seed: u64,
    /// Keep reformulations the audit rejected
    #[arg(long)]
    pub keep_rejected: bool,
    /// Audit rows as JSONL
    #[arg(long)]
    pub audit_out: Option<PathBuf>,
    /// Reformulation cache; reruns reuse finished work
    #[arg(long)]
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MqrValidateArgs {
    /// Augmented dataset JSONL
    #[arg(long)]
    pub input: PathBuf,
    /// Records audited per aspect
    #[arg(long, default_value_t = 100)]
    pub sample: usize,
    /// Seed choosing the audited sample
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub endpoint: EndpointArgs,
    /// Audit rows as JSONL
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Metrics CSV written by train
    #[arg(long)]
    pub metrics: PathBuf,
    /// Long-format CSV: step,series,value
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse::<Variant>().map_err(|e| e.to_string())
}

/// A failed command and the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn io(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: message.into(),
        }
    }

    fn verification(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VERIFICATION,
            message: message.into(),
        }
    }
}

fn with_path(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::io(format!("{}: {e}", path.display()))
}

fn domain_failure(path: &Path, e: DomainError) -> Failure {
    match e {
        DomainError::Io(_) | DomainError::Dataset { .. } => Failure::io(format!("{}: {e}", path.display())),
        other => Failure::usage(other.to_string()),
    }
}

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::Io(_) | TrainError::Domain(DomainError::Io(_)) | TrainError::Policy(PolicyError::Io(_)) => {
            Failure::io(e.to_string())
        }
        other => Failure::usage(other.to_string()),
    }
}

fn mqr_failure(e: MqrError) -> Failure {
    match e {
        MqrError::Config(_) | MqrError::EmptyQuestion => Failure::usage(e.to_string()),
        _ => Failure::io(e.to_string()),
    }
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>, Failure>
where
    T::Err: std::fmt::Display,
{
    raw.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            s.trim()
                .parse::<T>()
                .map_err(|e| Failure::usage(format!("{what}: {e}")))
        })
        .collect()
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(with_path(path))
}

fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&args.config).map_err(with_path(&args.config))?;
    let mut file: TrainConfigFile =
        serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", args.config.display())))?;
    if args.algo.is_some() {
        file.algo = args.algo;
    }
    file.seed = args.seed.or(file.seed);
    file.steps = args.steps.or(file.steps);
    if args.dataset.is_some() {
        file.dataset = args.dataset.clone();
    }
    if args.metrics.is_some() {
        file.metrics = args.metrics.clone();
    }
    let config = file.resolve();
    config.validate().map_err(|e| Failure::usage(e.to_string()))?;
    let dataset_path = config
        .dataset
        .clone()
        .ok_or_else(|| Failure::usage("no dataset: set \"dataset\" in the config or pass --dataset"))?;
    let dataset = load_dataset(&dataset_path).map_err(|e| domain_failure(&dataset_path, e))?;

    let mut writer = match &config.metrics {
        Some(p) => Some(MetricsWriter::new(create(p)?, &dataset_strata(&dataset)).map_err(with_path(p))?),
        None => None,
    };
    let outcome = train(&config, &dataset, |m| {
        if m.step % 50 == 0 {
            log::info!(
                "step {}: mean reward {:.3}, b_valid {}",
                m.step,
                m.mean_reward,
                m.b_valid
            );
        }
        match writer.as_mut() {
            Some(w) => w.write(m),
            None => Ok(()),
        }
    })
    .map_err(train_failure)?;

    if let Some(p) = &args.checkpoint {
        outcome
            .params
            .save(p)
            .map_err(|e| Failure::io(format!("{}: {e}", p.display())))?;
    }
    let last = outcome.metrics.last().expect("at least one step");
    let first_hit = outcome.metrics.iter().find(|m| m.mean_reward >= 0.9).map(|m| m.step);
    let summary = serde_json::json!({
        "algo": config.objective.variant.name(),
        "steps": last.step,
        "final_mean_reward": last.mean_reward,
        "final_mean_len": last.mean_len,
        "first_step_reward_at_least_0.9": first_hit,
        "skipped_steps": outcome.metrics.iter().filter(|m| m.skipped).count(),
    });
    writeln!(out, "{summary}").map_err(|e| Failure::io(e.to_string()))
}

fn cmd_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let params = PolicyParams::load(&args.checkpoint).map_err(|e| match e {
        PolicyError::Io(_) => Failure::io(format!("{}: {e}", args.checkpoint.display())),
        other => Failure::usage(format!("{}: {other}", args.checkpoint.display())),
    })?;
    let dataset = load_dataset(&args.dataset).map_err(|e| domain_failure(&args.dataset, e))?;
    let decoding = match args.temperature {
        Some(temperature) => Decoding::Sample { temperature },
        None => Decoding::Greedy,
    };
    let report = evaluate(&params, &dataset, args.samples, decoding, args.seed).map_err(train_failure)?;
    let per_stratum: serde_json::Map<String, serde_json::Value> = report
        .accuracy
        .iter()
        .map(|(s, a)| (s.to_string(), (*a).into()))
        .collect();
    let summary = serde_json::json!({
        "overall_accuracy": report.overall_accuracy,
        "accuracy": per_stratum,
        "mean_len": report.mean_len,
    });
    writeln!(out, "{summary}").map_err(|e| Failure::io(e.to_string()))
}

fn cmd_gen_data(args: &GenDataArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&args.spec).map_err(with_path(&args.spec))?;
    let spec: TaskSpec =
        serde_json::from_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", args.spec.display())))?;
    let questions = make_dataset(&spec).map_err(|e| Failure::usage(e.to_string()))?;
    save_dataset(&args.out, &questions).map_err(|e| domain_failure(&args.out, e))?;
    writeln!(out, "wrote {} questions to {}", questions.len(), args.out.display())
        .map_err(|e| Failure::io(e.to_string()))
}

fn cmd_check_theorems(args: &CheckTheoremsArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let report = check_theorems(args.gmax, args.tol).map_err(|e| Failure::usage(e.to_string()))?;
    let io = |e: std::io::Error| Failure::io(e.to_string());
    writeln!(
        out,
        "{:>3} {:>3} {:>8} {:>14} {:>14} {:>10} {:>14} {:>10}  status",
        "G", "k", "p", "sum|A_GR|", "2G*sqrt(pq)", "err", "sum|A_DG|", "err"
    )
    .map_err(io)?;
    for r in &report.rows {
        writeln!(
            out,
            "{:>3} {:>3} {:>8.5} {:>14.10} {:>14.10} {:>10.2e} {:>14.10} {:>10.2e}  {}",
            r.group_size,
            r.correct,
            r.p,
            r.grae_magnitude,
            r.closed_form,
            r.grae_error(),
            r.dgae_magnitude,
            r.dgae_error(),
            if r.passes(report.tolerance) { "pass" } else { "FAIL" }
        )
        .map_err(io)?;
    }
    if !report.misplaced_maxima.is_empty() {
        writeln!(
            out,
            "GRAE maximum not at p = 1/2 for G in {:?}",
            report.misplaced_maxima
        )
        .map_err(io)?;
    }
    let failed = report.rows.iter().filter(|r| !r.passes(report.tolerance)).count();
    writeln!(
        out,
        "{} rows, {failed} failed, tolerance {:e}",
        report.rows.len(),
        report.tolerance
    )
    .map_err(io)?;
    if report.passes() {
        Ok(())
    } else {
        Err(Failure::verification("theorem check failed"))
    }
}

fn cmd_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let variants = if args.variants.trim() == "all" {
        Variant::ALL.to_vec()
    } else {
        parse_list::<Variant>(&args.variants, "--variants")?
    };
    if variants.is_empty() {
        return Err(Failure::usage("--variants is empty"));
    }
    let io = |e: std::io::Error| Failure::io(e.to_string());
    writeln!(
        out,
        "{:<10} {:>7} {:>14} {:>9}  status",
        "variant", "trials", "max rel err", "failures"
    )
    .map_err(io)?;
    let mut all_pass = true;
    for v in variants {
        let r = gradcheck_variant(v, args.trials, args.step, args.tol, args.seed)
            .map_err(|e| Failure::usage(e.to_string()))?;
        all_pass &= r.passes();
        writeln!(
            out,
            "{:<10} {:>7} {:>14.3e} {:>9}  {}",
            v.name(),
            r.trials,
            r.max_relative_error,
            r.failures,
            if r.passes() { "pass" } else { "FAIL" }
        )
        .map_err(io)?;
    }
    if all_pass {
        Ok(())
    } else {
        Err(Failure::verification("gradient check failed"))
    }
}

fn build_client(args: &EndpointArgs) -> Result<ReformulatorClient, Failure> {
    ReformulatorClient::from_config(&args.client_config()).map_err(mqr_failure)
}

fn cmd_mqr_augment(args: &MqrAugmentArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let aspects = parse_list::<Aspect>(&args.aspects, "--aspects")?;
    let config = AugmentConfig {
        aspects,
        audit: !args.no_audit,
        audit_fraction: args.audit_fraction,
        audit_seed: args.audit_seed,
        keep_rejected: args.keep_rejected,
        parallelism: args.endpoint.parallelism,
        cache_path: args.cache.clone(),
    };
    config.validate().map_err(mqr_failure)?;
    let client = build_client(&args.endpoint)?;
    let dataset = load_dataset(&args.input).map_err(|e| domain_failure(&args.input, e))?;
    let result = augment(&dataset, &client, &config).map_err(mqr_failure)?;
    save_dataset(&args.out, &result.merged).map_err(|e| domain_failure(&args.out, e))?;
    if let Some(p) = &args.audit_out {
        write_audit_rows(create(p)?, &result.audit_rows).map_err(with_path(p))?;
    }
    let summary = serde_json::json!({
        "input": dataset.len(),
        "output": result.merged.len(),
        "client_calls": result.summary.client_calls,
        "failures": result.summary.failures,
        "per_aspect": result.summary.per_aspect.iter().map(|(a, s)| (a.name().to_string(), serde_json::json!({
            "requested": s.requested,
            "accepted": s.accepted,
            "acceptance_rate": s.acceptance_rate(),
            "audited": s.audited,
            "equivalence_rate": s.equivalence_rate(),
            "failed": s.failed,
            "word_limit_flagged": s.flagged,
        }))).collect::<serde_json::Map<_, _>>(),
    });
    writeln!(out, "{summary}").map_err(|e| Failure::io(e.to_string()))?;
    let requested: usize = result.summary.per_aspect.values().map(|s| s.requested).sum();
    if requested > 0 && result.summary.failures.len() == requested {
        return Err(Failure::io("every reformulation request failed"));
    }
    Ok(())
}

fn cmd_mqr_validate(args: &MqrValidateArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let client = build_client(&args.endpoint)?;
    let dataset = load_dataset(&args.input).map_err(|e| domain_failure(&args.input, e))?;
    let report =
        validate_dataset(&dataset, &client, args.sample, args.seed, args.endpoint.parallelism).map_err(mqr_failure)?;
    if let Some(p) = &args.out {
        write_audit_rows(create(p)?, &report.rows).map_err(with_path(p))?;
    }
    let io = |e: std::io::Error| Failure::io(e.to_string());
    writeln!(
        out,
        "{:<11} {:>7} {:>5} {:>4} {:>10} {:>7} {:>12}",
        "aspect", "audited", "yes", "no", "unparsed", "failed", "equivalence"
    )
    .map_err(io)?;
    for (aspect, s) in &report.per_aspect {
        writeln!(
            out,
            "{:<11} {:>7} {:>5} {:>4} {:>10} {:>7} {:>11.1}%",
            aspect.name(),
            s.audited,
            s.yes,
            s.no,
            s.audited - s.yes - s.no,
            s.failed,
            100.0 * s.equivalence_rate()
        )
        .map_err(io)?;
    }
    for f in &report.failures {
        writeln!(out, "failed {} ({}): {}", f.id, f.aspect, f.error).map_err(io)?;
    }
    if report.rows.iter().any(|r| r.verdict == Verdict::No) {
        return Err(Failure::verification("audit found non-equivalent reformulations"));
    }
    if !report.failures.is_empty() && report.rows.is_empty() {
        return Err(Failure::io("no record could be audited"));
    }
    Ok(())
}

fn cmd_report(args: &ReportArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let mut reader =
        csv::Reader::from_path(&args.metrics).map_err(|e| Failure::io(format!("{}: {e}", args.metrics.display())))?;
    let headers = reader.headers().map_err(|e| Failure::io(e.to_string()))?.clone();
    if headers.get(0) != Some("step") {
        return Err(Failure::usage(format!(
            "{}: first column must be \"step\"",
            args.metrics.display()
        )));
    }
    let mut writer =
        csv::Writer::from_path(&args.out).map_err(|e| Failure::io(format!("{}: {e}", args.out.display())))?;
    writer
        .write_record(["step", "series", "value"])
        .map_err(|e| Failure::io(e.to_string()))?;
    let mut rows = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| Failure::io(format!("{}: {e}", args.metrics.display())))?;
        let step = &record[0];
        for (name, value) in headers.iter().zip(record.iter()).skip(1) {
            if value.is_empty() {
                continue;
            }
            writer
                .write_record([step, name, value])
                .map_err(|e| Failure::io(e.to_string()))?;
            rows += 1;
        }
    }
    writer.flush().map_err(with_path(&args.out))?;
    writeln!(out, "wrote {rows} points to {}", args.out.display()).map_err(|e| Failure::io(e.to_string()))
}

pub fn dispatch(cli: &Cli, out: &mut dyn Write) -> Result<(), Failure> {
    match &cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::GenData(a) => cmd_gen_data(a, out),
        Command::CheckTheorems(a) => cmd_check_theorems(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::MqrAugment(a) => cmd_mqr_augment(a, out),
        Command::MqrValidate(a) => cmd_mqr_validate(a, out),
        Command::Report(a) => cmd_report(a, out),
    }
}

/// Parses `argv` (program name first), runs the command and returns its exit
/// code. Help and version requests print to `out` and succeed.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    match dispatch(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            if f.code == EXIT_USAGE {
                let _ = writeln!(err, "\nFor more information, try '--help'.");
            }
            f.code
        }
    }
}
