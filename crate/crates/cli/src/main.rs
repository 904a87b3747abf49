//! `asr-fairness`: score recognition output, test subgroup WER gaps, and
//! rerun the synthetic experiments.

mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use asr_fairness::dataset::{load_corpus, summarize, LoadOptions};
use asr_fairness::glm::{fit_glm, ModelSpec};
use asr_fairness::glmm::{fit_glmm, MixedModelSpec, DEFAULT_NODES};
use asr_fairness::inference::{
    baseline_ratio_with, lrt, model_ratio, BootstrapOptions, DEFAULT_LEVEL, DEFAULT_REPLICATES,
};
use asr_fairness::simulation::{
    run_experiment, ConfoundingConfig, ExperimentConfig, Method, SimConfig, SpeakerEffectConfig,
};
use asr_fairness::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

use report::{
    AnalysisConfig, AnalysisReport, Coefficient, MethodResult, SimulationReport, WerReport,
    SCHEMA_VERSION,
};

const SEED_ENV: &str = "ASR_FAIRNESS_SEED";

#[derive(Parser, Debug)]
#[command(name = "asr-fairness", version, about = "WER fairness analysis with mixed-effects Poisson regression")]
struct Cli {
    /// Worker threads (0 = one per core). Never changes results.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Corpus WER per group.
    Wer(WerArgs),
    /// Ratio of WERs between two groups, with interval and likelihood-ratio test.
    Analyze(AnalyzeArgs),
    /// Rerun the confounding or speaker-effect experiment.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OutputFormat {
    Table,
    Json,
}

#[derive(Args, Debug)]
struct InputArgs {
    /// JSON Lines or CSV file of utterance records.
    input: PathBuf,
    /// Record field holding the group label.
    #[arg(long, default_value = "group")]
    factor: String,
    /// Compare tokens exactly instead of lowercasing.
    #[arg(long)]
    no_normalize: bool,
}

impl InputArgs {
    fn options(&self, reference: Option<String>) -> LoadOptions {
        LoadOptions {
            group_field: self.factor.clone(),
            normalize: !self.no_normalize,
            reference_level: reference,
            ..Default::default()
        }
    }
}

#[derive(Args, Debug)]
struct OutputArgs {
    /// Also write the JSON report to this file.
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// What to print on stdout.
    #[arg(long, value_enum, default_value_t = OutputFormat::Table)]
    format: OutputFormat,
}

#[derive(Args, Debug)]
struct WerArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Group whose WER is the numerator.
    #[arg(long)]
    case: String,
    /// Group whose WER is the denominator.
    #[arg(long)]
    control: String,
    /// Reference level of the factor in model fits (default: first seen).
    #[arg(long)]
    reference: Option<String>,
    /// Methods to run, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "glmm")]
    method: Vec<Method>,
    /// Covariate columns to adjust for (`cov_0`, `cov_1`, ...).
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    /// Quadrature nodes for the mixed model.
    #[arg(long, default_value_t = DEFAULT_NODES)]
    nodes: usize,
    /// Bootstrap replicates for the baseline.
    #[arg(long, default_value_t = DEFAULT_REPLICATES)]
    bootstrap: usize,
    /// Confidence level of intervals.
    #[arg(long, default_value_t = DEFAULT_LEVEL)]
    level: f64,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    out: OutputArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Experiment {
    Confounding,
    Speaker,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long, value_enum)]
    experiment: Experiment,
    /// Utterances per group.
    #[arg(long, default_value_t = 5000)]
    n_per_group: usize,
    /// Reference words per utterance.
    #[arg(long, default_value_t = 10)]
    words: u64,
    /// Baseline utterance WER, `exp(μ)`.
    #[arg(long, default_value_t = 0.05)]
    base_wer: f64,
    /// Confounder log-effect.
    #[arg(long, default_value_t = 0.1)]
    theta: f64,
    /// Confounder frequency in the case group.
    #[arg(long, default_value_t = 0.5)]
    p_case: f64,
    /// Confounder frequency in the control group.
    #[arg(long, default_value_t = 0.5)]
    p_control: f64,
    /// Speakers per group.
    #[arg(long, default_value_t = 100)]
    speakers: usize,
    /// Standard deviation of speaker log-effects.
    #[arg(long, default_value_t = 0.2)]
    sigma: f64,
    /// Methods to compare (default: baseline plus the experiment's model).
    #[arg(long, value_delimiter = ',')]
    methods: Vec<Method>,
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    #[arg(long, default_value_t = DEFAULT_REPLICATES)]
    bootstrap: usize,
    #[arg(long, default_value_t = DEFAULT_NODES)]
    nodes: usize,
    #[arg(long, default_value_t = DEFAULT_LEVEL)]
    level: f64,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    seed: u64,
    /// Per-replication records as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[command(flatten)]
    out: OutputArgs,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_convergence_failure() {
            3
        } else {
            match e {
                Error::DimensionMismatch(_)
                | Error::ZeroFittedRate(_)
                | Error::NotNested(_)
                | Error::MismatchedCorpora => 4,
                _ => 2,
            }
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn internal(message: impl Into<String>) -> Failure {
    Failure {
        code: 4,
        message: message.into(),
    }
}

fn context(what: &str) -> impl Fn(Error) -> Failure + '_ {
    move |e| {
        let mut f = Failure::from(e);
        f.message = format!("{what}: {}", f.message);
        f
    }
}

fn emit<T: serde::Serialize>(report: &T, table: String, out: &OutputArgs) -> Result<(), Failure> {
    let json = serde_json::to_string_pretty(report).map_err(|e| internal(e.to_string()))? + "\n";
    if let Some(path) = &out.output {
        std::fs::write(path, &json)
            .map_err(|e| internal(format!("cannot write {}: {e}", path.display())))?;
    }
    match out.format {
        OutputFormat::Json => print!("{json}"),
        OutputFormat::Table => print!("{table}"),
    }
    Ok(())
}

fn display_path(p: &Path) -> String {
    p.display().to_string()
}

fn cmd_wer(args: &WerArgs) -> Result<(), Failure> {
    let loaded = load_corpus(&args.input.input, &args.input.options(None)).map_err(context("loading corpus"))?;
    let counts = loaded.counts.iter().fold((0, 0, 0), |(i, d, s), c| {
        (i + c.insertions, d + c.deletions, s + c.substitutions)
    });
    let report = WerReport {
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        input: display_path(&args.input.input),
        factor: args.input.factor.clone(),
        normalize: !args.input.no_normalize,
        summary: summarize(&loaded.corpus),
        insertions: counts.0,
        deletions: counts.1,
        substitutions: counts.2,
        excluded: loaded.excluded.len(),
    };
    emit(&report, report::render_wer(&report), &args.out)
}

fn cmd_analyze(args: &AnalyzeArgs) -> Result<(), Failure> {
    let loaded = load_corpus(&args.input.input, &args.input.options(args.reference.clone()))
        .map_err(context("loading corpus"))?;
    let corpus = &loaded.corpus;
    for level in [&args.case, &args.control] {
        corpus.factor().resolve(level)?;
    }
    let mut methods = args.method.clone();
    methods.dedup();
    let fixed = ModelSpec::factor_only().with_covariates(args.covariates.clone());
    let reduced = fixed.clone().without_factor();
    let mut results = Vec::new();
    for &method in &methods {
        let result = match method {
            Method::Baseline => {
                let options = BootstrapOptions {
                    replicates: args.bootstrap,
                    level: args.level,
                    seed: args.seed,
                };
                MethodResult::baseline(
                    baseline_ratio_with(corpus, &args.case, &args.control, &options)
                        .map_err(context("baseline"))?,
                )
            }
            Method::Glm => {
                let fit = fit_glm(corpus, &fixed).map_err(context("fitting Poisson regression"))?;
                let ratio = model_ratio(&fit, &args.case, &args.control, args.level)?;
                let test = fit_glm(corpus, &reduced)
                    .map_err(context("fitting reduced Poisson regression"))
                    .and_then(|r| lrt(&fit, &r).map_err(Failure::from))?;
                MethodResult {
                    method,
                    ratio,
                    lrt: Some(test),
                    coefficients: Some(Coefficient::table(&fit.layout.names, &fit.coefficients, &fit.standard_errors())),
                    log_likelihood: Some(fit.log_likelihood),
                    sigma: None,
                    boundary: None,
                    conditional_modes: None,
                }
            }
            Method::Glmm => {
                let fit = fit_glmm(corpus, &MixedModelSpec::new(fixed.clone()), args.nodes)
                    .map_err(context("fitting mixed-effects Poisson regression"))?;
                let ratio = model_ratio(&fit, &args.case, &args.control, args.level)?;
                let test = fit_glmm(corpus, &MixedModelSpec::new(reduced.clone()), args.nodes)
                    .map_err(context("fitting reduced mixed-effects model"))
                    .and_then(|r| lrt(&fit, &r).map_err(Failure::from))?;
                MethodResult {
                    method,
                    ratio,
                    lrt: Some(test),
                    coefficients: Some(Coefficient::table(
                        &fit.layout.names,
                        &fit.fixed_coefficients,
                        &fit.standard_errors(),
                    )),
                    log_likelihood: Some(fit.log_marginal_likelihood),
                    sigma: Some(fit.sigma),
                    boundary: Some(fit.boundary),
                    conditional_modes: Some(fit.conditional_modes),
                }
            }
        };
        results.push(result);
    }
    let report = AnalysisReport {
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed: args.seed,
        config: AnalysisConfig {
            input: display_path(&args.input.input),
            factor: args.input.factor.clone(),
            normalize: !args.input.no_normalize,
            case: args.case.clone(),
            control: args.control.clone(),
            reference: corpus.factor().levels()[corpus.factor().reference_level()].clone(),
            methods,
            covariates: args.covariates.clone(),
            nodes: args.nodes,
            bootstrap: args.bootstrap,
            level: args.level,
            seed: args.seed,
        },
        corpus: summarize(corpus),
        excluded: loaded.excluded.len(),
        results,
    };
    emit(&report, report::render_analysis(&report), &args.out)
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), Failure> {
    if !(args.base_wer > 0.0) {
        return Err(Error::InvalidConfig(format!("--base-wer must be positive, got {}", args.base_wer)).into());
    }
    let base_mu = args.base_wer.ln();
    let experiment = match args.experiment {
        Experiment::Confounding => ExperimentConfig::Confounding(ConfoundingConfig {
            n_per_group: args.n_per_group,
            words_per_utt: args.words,
            base_mu,
            theta: args.theta,
            p_case: args.p_case,
            p_control: args.p_control,
        }),
        Experiment::Speaker => ExperimentConfig::Speaker(SpeakerEffectConfig {
            n_speakers_per_group: args.speakers,
            n_per_group: args.n_per_group,
            words_per_utt: args.words,
            base_mu,
            sigma: args.sigma,
        }),
    };
    let methods = if args.methods.is_empty() {
        SimConfig::default_methods(&experiment)
    } else {
        args.methods.clone()
    };
    let mut config = SimConfig::new(experiment, methods, args.reps, args.seed);
    config.bootstrap_replicates = args.bootstrap;
    config.nodes = args.nodes;
    config.level = args.level;
    let result = run_experiment(&config).map_err(context("simulation"))?;
    if let Some(path) = &args.csv {
        let file = std::fs::File::create(path)
            .map_err(|e| internal(format!("cannot write {}: {e}", path.display())))?;
        result.write_csv(file)?;
    }
    let report = SimulationReport {
        schema_version: SCHEMA_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        report: result,
    };
    emit(&report, report::render_simulation(&report), &args.out)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| internal(format!("cannot start worker pool: {e}")))?;
    match &cli.command {
        Command::Wer(a) => cmd_wer(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Simulate(a) => cmd_simulate(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
