//! Synthetic experiments: a confounded two-group design and a design with
//! Gaussian per-speaker effects, both with a true WER ratio of 1, plus a
//! harness that applies each analysis method over many replications.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::dataset::{Corpus, GroupFactor, Utterance};
use crate::error::{Error, Result};
use crate::glm::{fit_glm, ModelSpec};
use crate::glmm::{fit_glmm, MixedModelSpec, DEFAULT_NODES};
use crate::inference::{
    baseline_ratio_with, model_ratio, BootstrapOptions, RatioEstimate, DEFAULT_LEVEL,
    DEFAULT_REPLICATES,
};
use crate::rng::StreamRng;

pub const CONTROL: &str = "control";
pub const CASE: &str = "case";
pub const CONFOUNDER: &str = "confounder";
const GROUP_FACTOR: &str = "group";

fn two_groups() -> GroupFactor {
    GroupFactor::new(GROUP_FACTOR, vec![CONTROL.into(), CASE.into()], 0)
        .expect("two distinct levels")
}

/// Utterance error rate `N·exp(μ + θ·z)` with `z ~ Bernoulli(p_group)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfoundingConfig {
    pub n_per_group: usize,
    pub words_per_utt: u64,
    pub base_mu: f64,
    pub theta: f64,
    pub p_case: f64,
    pub p_control: f64,
}

impl Default for ConfoundingConfig {
    fn default() -> Self {
        Self {
            n_per_group: 5000,
            words_per_utt: 10,
            base_mu: 0.05f64.ln(),
            theta: 0.1,
            p_case: 0.5,
            p_control: 0.5,
        }
    }
}

impl ConfoundingConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_case", self.p_case), ("p_control", self.p_control)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.n_per_group == 0 {
            return Err(Error::InvalidConfig("n_per_group must be at least 1".into()));
        }
        if self.words_per_utt == 0 {
            return Err(Error::InvalidConfig("words_per_utt must be at least 1".into()));
        }
        if !self.base_mu.is_finite() || !self.theta.is_finite() {
            return Err(Error::InvalidConfig("base_mu and theta must be finite".into()));
        }
        Ok(())
    }

    /// Expected corpus WER of a group with confounding rate `p`.
    pub fn expected_wer(&self, p: f64) -> f64 {
        self.base_mu.exp() * (1.0 - p + p * self.theta.exp())
    }
}

/// `I` speakers per group with effects `r_i ~ N(0, σ²)`, each reading the
/// same number of utterances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerEffectConfig {
    pub n_speakers_per_group: usize,
    pub n_per_group: usize,
    pub words_per_utt: u64,
    pub base_mu: f64,
    pub sigma: f64,
}

impl Default for SpeakerEffectConfig {
    fn default() -> Self {
        Self {
            n_speakers_per_group: 100,
            n_per_group: 5000,
            words_per_utt: 10,
            base_mu: 0.05f64.ln(),
            sigma: 0.2,
        }
    }
}

impl SpeakerEffectConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_speakers_per_group == 0 || self.n_per_group == 0 {
            return Err(Error::InvalidConfig(
                "speaker and utterance counts must be at least 1".into(),
            ));
        }
        if !self.n_per_group.is_multiple_of(self.n_speakers_per_group) {
            return Err(Error::InvalidConfig(format!(
                "{} utterances cannot be split evenly across {} speakers",
                self.n_per_group, self.n_speakers_per_group
            )));
        }
        if self.words_per_utt == 0 {
            return Err(Error::InvalidConfig("words_per_utt must be at least 1".into()));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() || !self.base_mu.is_finite() {
            return Err(Error::InvalidConfig(
                "sigma must be finite and non-negative, base_mu finite".into(),
            ));
        }
        Ok(())
    }

    pub fn utterances_per_speaker(&self) -> usize {
        self.n_per_group / self.n_speakers_per_group
    }

    /// Marginal expected WER under log-normal mixing.
    pub fn expected_wer(&self) -> f64 {
        (self.base_mu + 0.5 * self.sigma * self.sigma).exp()
    }
}

/// Confounded two-group corpus. Each utterance has its own speaker and
/// carries its confounder draw as the covariate `confounder`.
pub fn gen_confounding(config: &ConfoundingConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let master = StreamRng::from_seed(seed);
    let n = config.words_per_utt;
    let mut utterances = Vec::with_capacity(2 * config.n_per_group);
    for (level, label, p) in [(0, CONTROL, config.p_control), (1, CASE, config.p_case)] {
        let mut rng = master.fork(level as u64);
        for k in 0..config.n_per_group {
            let z = rng.bernoulli(p);
            let shift = if z { config.theta } else { 0.0 };
            let errors = rng.poisson(n as f64 * (config.base_mu + shift).exp());
            let id = format!("{label}-{k:05}");
            utterances.push(Utterance {
                speaker: id.clone(),
                id,
                level,
                errors,
                ref_words: n,
                covariates: vec![if z { 1.0 } else { 0.0 }],
            });
        }
    }
    Corpus::new(two_groups(), vec![CONFOUNDER.into()], utterances)
}

/// A speaker-effect corpus together with the effects that generated it.
#[derive(Debug, Clone)]
pub struct SpeakerCorpus {
    pub corpus: Corpus,
    pub true_effects: BTreeMap<String, f64>,
}

pub fn gen_speaker_effect(config: &SpeakerEffectConfig, seed: u64) -> Result<SpeakerCorpus> {
    config.validate()?;
    let master = StreamRng::from_seed(seed);
    let n = config.words_per_utt;
    let per_speaker = config.utterances_per_speaker();
    let mut utterances = Vec::with_capacity(2 * config.n_per_group);
    let mut true_effects = BTreeMap::new();
    for (level, label) in [(0usize, CONTROL), (1, CASE)] {
        let group = master.fork(level as u64);
        for i in 0..config.n_speakers_per_group {
            let mut rng = group.fork(i as u64);
            let effect = config.sigma * rng.standard_normal();
            let speaker = format!("{label}-spk{i:04}");
            let rate = n as f64 * (config.base_mu + effect).exp();
            for j in 0..per_speaker {
                utterances.push(Utterance {
                    id: format!("{speaker}-{j:04}"),
                    speaker: speaker.clone(),
                    level,
                    errors: rng.poisson(rate),
                    ref_words: n,
                    covariates: vec![],
                });
            }
            true_effects.insert(speaker, effect);
        }
    }
    Ok(SpeakerCorpus {
        corpus: Corpus::new(two_groups(), vec![], utterances)?,
        true_effects,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "kebab-case")]
pub enum ExperimentConfig {
    Confounding(ConfoundingConfig),
    Speaker(SpeakerEffectConfig),
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Confounding(c) => c.validate(),
            Self::Speaker(c) => c.validate(),
        }
    }

    pub fn generate(&self, seed: u64) -> Result<Corpus> {
        match self {
            Self::Confounding(c) => gen_confounding(c, seed),
            Self::Speaker(c) => Ok(gen_speaker_effect(c, seed)?.corpus),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Baseline,
    Glm,
    Glmm,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Baseline, Method::Glm, Method::Glmm];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::Glm => "glm",
            Self::Glmm => "glmm",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "glm" => Ok(Self::Glm),
            "glmm" => Ok(Self::Glmm),
            other => Err(Error::InvalidConfig(format!(
                "unknown method {other:?} (expected baseline, glm or glmm)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    #[serde(flatten)]
    pub experiment: ExperimentConfig,
    pub methods: Vec<Method>,
    pub replications: usize,
    pub seed: u64,
    pub bootstrap_replicates: usize,
    pub nodes: usize,
    pub level: f64,
}

impl SimConfig {
    pub fn new(experiment: ExperimentConfig, methods: Vec<Method>, replications: usize, seed: u64) -> Self {
        Self {
            experiment,
            methods,
            replications,
            seed,
            bootstrap_replicates: DEFAULT_REPLICATES,
            nodes: DEFAULT_NODES,
            level: DEFAULT_LEVEL,
        }
    }

    /// Baseline plus the model that matches the experiment's generator.
    pub fn default_methods(experiment: &ExperimentConfig) -> Vec<Method> {
        match experiment {
            ExperimentConfig::Confounding(_) => vec![Method::Baseline, Method::Glm],
            ExperimentConfig::Speaker(_) => vec![Method::Baseline, Method::Glmm],
        }
    }
}

/// Outcome of one method on one replication. On failure only `error` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub replication: usize,
    pub method: Method,
    pub ratio: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub significant: Option<bool>,
    /// Estimated speaker standard deviation, mixed model only.
    pub sigma: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    /// Mean ratio over replications where the method succeeded.
    pub mean_ratio: Option<f64>,
    /// Fraction of successful replications whose interval excludes 1.
    pub fp_rate: Option<f64>,
    pub completed: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub config: SimConfig,
    pub replications: usize,
    pub seed: u64,
    pub mean_ratio_baseline: Option<f64>,
    pub fp_rate_baseline: Option<f64>,
    /// The mixed model when it was run, otherwise the fixed-effects model.
    pub model_method: Option<Method>,
    pub mean_ratio_model: Option<f64>,
    pub fp_rate_model: Option<f64>,
    pub failures: usize,
    pub methods: Vec<MethodSummary>,
    pub records: Vec<ReplicationRecord>,
}

impl SimReport {
    pub fn summary(&self, method: Method) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == method)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidConfig(format!("cannot serialize report: {e}")))
    }

    /// Per-replication records as CSV.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let io = |e: csv::Error| Error::InvalidConfig(format!("cannot write CSV: {e}"));
        out.write_record([
            "replication",
            "method",
            "ratio",
            "ci_low",
            "ci_high",
            "significant",
            "sigma",
            "error",
        ])
        .map_err(io)?;
        let num = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.records {
            out.write_record([
                r.replication.to_string(),
                r.method.to_string(),
                num(r.ratio),
                num(r.ci_low),
                num(r.ci_high),
                r.significant.map(|b| b.to_string()).unwrap_or_default(),
                num(r.sigma),
                r.error.clone().unwrap_or_default(),
            ])
            .map_err(io)?;
        }
        out.flush()
            .map_err(|e| Error::InvalidConfig(format!("cannot write CSV: {e}")))
    }
}

fn apply_method(
    method: Method,
    corpus: &Corpus,
    config: &SimConfig,
    bootstrap_seed: u64,
) -> Result<(RatioEstimate, Option<f64>)> {
    let fixed = ModelSpec::factor_only().with_covariates(corpus.covariate_names().to_vec());
    match method {
        Method::Baseline => {
            let options = BootstrapOptions {
                replicates: config.bootstrap_replicates,
                level: config.level,
                seed: bootstrap_seed,
            };
            Ok((baseline_ratio_with(corpus, CASE, CONTROL, &options)?, None))
        }
        Method::Glm => {
            let fit = fit_glm(corpus, &fixed)?;
            Ok((model_ratio(&fit, CASE, CONTROL, config.level)?, None))
        }
        Method::Glmm => {
            let fit = fit_glmm(corpus, &MixedModelSpec::new(fixed), config.nodes)?;
            Ok((model_ratio(&fit, CASE, CONTROL, config.level)?, Some(fit.sigma)))
        }
    }
}

fn run_replication(config: &SimConfig, master: &StreamRng, replication: usize) -> Vec<ReplicationRecord> {
    let stream = master.fork(replication as u64);
    let data_seed = stream.fork(0).next_u64();
    let bootstrap_seed = stream.fork(1).next_u64();
    let failed = |method, e: &Error| ReplicationRecord {
        replication,
        method,
        ratio: None,
        ci_low: None,
        ci_high: None,
        significant: None,
        sigma: None,
        error: Some(e.to_string()),
    };
    let corpus = match config.experiment.generate(data_seed) {
        Ok(c) => c,
        Err(e) => return config.methods.iter().map(|&m| failed(m, &e)).collect(),
    };
    config
        .methods
        .iter()
        .map(|&method| match apply_method(method, &corpus, config, bootstrap_seed) {
            Ok((est, sigma)) => ReplicationRecord {
                replication,
                method,
                ratio: Some(est.ratio),
                ci_low: Some(est.ci_low),
                ci_high: Some(est.ci_high),
                significant: Some(est.significant()),
                sigma,
                error: None,
            },
            Err(e) => failed(method, &e),
        })
        .collect()
}

#[cfg(feature = "parallel")]
fn run_all(config: &SimConfig, master: &StreamRng) -> Vec<Vec<ReplicationRecord>> {
    use rayon::prelude::*;
    (0..config.replications)
        .into_par_iter()
        .map(|r| run_replication(config, master, r))
        .collect()
}

#[cfg(not(feature = "parallel"))]
fn run_all(config: &SimConfig, master: &StreamRng) -> Vec<Vec<ReplicationRecord>> {
    (0..config.replications)
        .map(|r| run_replication(config, master, r))
        .collect()
}

fn summarize(method: Method, records: &[ReplicationRecord]) -> MethodSummary {
    let mine: Vec<&ReplicationRecord> = records.iter().filter(|r| r.method == method).collect();
    let ok: Vec<&ReplicationRecord> = mine.iter().copied().filter(|r| r.error.is_none()).collect();
    let completed = ok.len();
    let (mean_ratio, fp_rate) = if completed == 0 {
        (None, None)
    } else {
        let sum: f64 = ok.iter().filter_map(|r| r.ratio).sum();
        let hits = ok.iter().filter(|r| r.significant == Some(true)).count();
        (
            Some(sum / completed as f64),
            Some(hits as f64 / completed as f64),
        )
    };
    MethodSummary {
        method,
        mean_ratio,
        fp_rate,
        completed,
        failures: mine.len() - completed,
    }
}

/// Runs every method on `replications` generated corpora. Replication `k`
/// draws from its own stream forked from the seed, so the report does not
/// depend on scheduling. Per-method failures are recorded, not raised.
pub fn run_experiment(config: &SimConfig) -> Result<SimReport> {
    config.experiment.validate()?;
    if config.replications == 0 {
        return Err(Error::InvalidConfig("replications must be at least 1".into()));
    }
    if config.methods.is_empty() {
        return Err(Error::InvalidConfig("no methods selected".into()));
    }
    if config.nodes == 0 {
        return Err(Error::InvalidConfig("quadrature needs at least one node".into()));
    }
    if !(config.level > 0.0 && config.level < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "confidence level must be in (0, 1), got {}",
            config.level
        )));
    }
    let mut methods = config.methods.clone();
    methods.sort();
    methods.dedup();
    let config = SimConfig {
        methods,
        ..config.clone()
    };
    let master = StreamRng::from_seed(config.seed);
    let records: Vec<ReplicationRecord> = run_all(&config, &master).into_iter().flatten().collect();
    let summaries: Vec<MethodSummary> = config.methods.iter().map(|&m| summarize(m, &records)).collect();
    let find = |m: Method| summaries.iter().find(|s| s.method == m);
    let model_method = [Method::Glmm, Method::Glm]
        .into_iter()
        .find(|&m| config.methods.contains(&m));
    let baseline = find(Method::Baseline);
    let model = model_method.and_then(find);
    Ok(SimReport {
        replications: config.replications,
        seed: config.seed,
        mean_ratio_baseline: baseline.and_then(|s| s.mean_ratio),
        fp_rate_baseline: baseline.and_then(|s| s.fp_rate),
        model_method,
        mean_ratio_model: model.and_then(|s| s.mean_ratio),
        fp_rate_model: model.and_then(|s| s.fp_rate),
        failures: summaries.iter().map(|s| s.failures).sum(),
        methods: summaries,
        records,
        config,
    })
}
