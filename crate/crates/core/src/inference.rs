//! Group-ratio estimates with confidence intervals, and likelihood-ratio
//! tests for the group factor.

use serde::{Deserialize, Serialize};

use crate::dataset::Corpus;
use crate::error::{Error, Result};
use crate::glm::{DesignLayout, FittedGlm, ModelSpec};
use crate::glmm::FittedGlmm;
use crate::rng::StreamRng;
use crate::special::{chi_square_sf, normal_quantile};

pub const DEFAULT_LEVEL: f64 = 0.95;
pub const DEFAULT_REPLICATES: usize = 1000;
pub const MIN_REPLICATES: usize = 100;
/// Redraw cap per bootstrap replicate and group.
pub const MAX_REDRAWS: usize = 1000;
/// Negative LRT statistics down to this are rounding and clamp to 0.
pub const LRT_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatioMethod {
    BootstrapPercentile,
    WaldLogScale,
}

/// WER ratio of a case level over a control level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioEstimate {
    pub ratio: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub level: f64,
    pub method: RatioMethod,
    /// Set when a percentile interval fails to cover its own point estimate.
    pub flagged: bool,
    /// Bootstrap resamples redrawn because a group had no errors.
    #[serde(default)]
    pub redraws: u64,
}

impl RatioEstimate {
    /// The interval excludes 1, the significance rule used throughout.
    pub fn significant(&self) -> bool {
        self.ci_low > 1.0 || self.ci_high < 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub significant_at_05: bool,
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "confidence level must be in (0, 1), got {level}"
        )))
    }
}

/// Type-7 sample quantile of sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapOptions {
    pub replicates: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        Self {
            replicates: DEFAULT_REPLICATES,
            level: DEFAULT_LEVEL,
            seed: 0,
        }
    }
}

/// (errors, words) per utterance of one level, in corpus order.
fn level_rows(corpus: &Corpus, level: usize) -> Vec<(u64, u64)> {
    corpus
        .utterances()
        .iter()
        .filter(|u| u.level == level)
        .map(|u| (u.errors, u.ref_words))
        .collect()
}

/// One utterance-level resample of a group; `(Σ errors, Σ words, redraws)`.
/// Resamples without errors are redrawn from the same stream.
fn resample(rows: &[(u64, u64)], rng: &mut StreamRng) -> Result<(u64, u64, u64)> {
    let n = rows.len() as u64;
    for redraws in 0..=MAX_REDRAWS {
        let (mut e, mut w) = (0u64, 0u64);
        for _ in 0..n {
            let (ei, wi) = rows[rng.below(n) as usize];
            e += ei;
            w += wi;
        }
        if e > 0 && w > 0 {
            return Ok((e, w, redraws as u64));
        }
    }
    Err(Error::DegenerateBootstrap {
        redraws: MAX_REDRAWS,
    })
}

#[cfg(feature = "parallel")]
fn map_replicates<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_replicates<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Empirical WER ratio with a percentile bootstrap interval. Utterances are
/// resampled with replacement independently within each group.
pub fn baseline_ratio(
    corpus: &Corpus,
    case_level: &str,
    control_level: &str,
    replicates: usize,
    seed: u64,
) -> Result<RatioEstimate> {
    baseline_ratio_with(
        corpus,
        case_level,
        control_level,
        &BootstrapOptions {
            replicates,
            seed,
            ..Default::default()
        },
    )
}

pub fn baseline_ratio_with(
    corpus: &Corpus,
    case_level: &str,
    control_level: &str,
    options: &BootstrapOptions,
) -> Result<RatioEstimate> {
    if options.replicates < MIN_REPLICATES {
        return Err(Error::InvalidConfig(format!(
            "bootstrap needs at least {MIN_REPLICATES} replicates, got {}",
            options.replicates
        )));
    }
    check_level(options.level)?;
    let factor = corpus.factor();
    let case = factor.resolve(case_level)?;
    let control = factor.resolve(control_level)?;
    let case_rows = level_rows(corpus, case);
    let control_rows = level_rows(corpus, control);
    let totals = |rows: &[(u64, u64)]| {
        rows.iter()
            .fold((0u64, 0u64), |(e, w), &(ei, wi)| (e + ei, w + wi))
    };
    let (case_e, case_w) = totals(&case_rows);
    let (control_e, control_w) = totals(&control_rows);
    if control_e == 0 {
        return Err(Error::InfiniteRatio);
    }
    if case_e == 0 {
        // Every resample of the case group would be degenerate.
        return Err(Error::DegenerateBootstrap { redraws: 0 });
    }
    let ratio = (case_e as f64 / case_w as f64) / (control_e as f64 / control_w as f64);

    // Streams are keyed by level index, not by role, so swapping case and
    // control reuses the same resamples.
    let master = StreamRng::from_seed(options.seed);
    let draws = map_replicates(options.replicates, |rep| -> Result<(f64, u64)> {
        let stream = master.fork(rep as u64);
        let (ce, cw, cr) = resample(&case_rows, &mut stream.fork(case as u64))?;
        let (ke, kw, kr) = resample(&control_rows, &mut stream.fork(control as u64))?;
        let log_ratio = (ce as f64 / cw as f64).ln() - (ke as f64 / kw as f64).ln();
        Ok((log_ratio, cr + kr))
    });
    let mut log_ratios = Vec::with_capacity(options.replicates);
    let mut redraws = 0;
    for d in draws {
        let (lr, r) = d?;
        log_ratios.push(lr);
        redraws += r;
    }
    let alpha = 1.0 - options.level;
    let mut negated: Vec<f64> = log_ratios.iter().map(|x| -x).collect();
    log_ratios.sort_by(f64::total_cmp);
    negated.sort_by(f64::total_cmp);
    // The upper endpoint is taken as the negated lower quantile of the
    // negated sample, which keeps swapped intervals exact mirror images.
    let ci_low = quantile_sorted(&log_ratios, alpha / 2.0).exp();
    let ci_high = (-quantile_sorted(&negated, alpha / 2.0)).exp();
    Ok(RatioEstimate {
        ratio,
        ci_low,
        ci_high,
        level: options.level,
        method: RatioMethod::BootstrapPercentile,
        flagged: !(ci_low <= ratio && ratio <= ci_high),
        redraws,
    })
}

/// Model family of a fit, as far as nesting and LRTs care.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelFamily {
    Poisson,
    PoissonRandomIntercept { nodes: usize },
}

/// What the inference routines need from a fitted model.
pub trait FixedEffectsFit {
    fn family(&self) -> ModelFamily;
    fn fixed_spec(&self) -> &ModelSpec;
    fn layout(&self) -> &DesignLayout;
    fn fixed_coefficients(&self) -> &[f64];
    fn fixed_covariance(&self) -> &[Vec<f64>];
    fn maximized_log_likelihood(&self) -> f64;
    fn is_converged(&self) -> bool;
    fn fingerprint(&self) -> u64;
}

impl FixedEffectsFit for FittedGlm {
    fn family(&self) -> ModelFamily {
        ModelFamily::Poisson
    }
    fn fixed_spec(&self) -> &ModelSpec {
        &self.spec
    }
    fn layout(&self) -> &DesignLayout {
        &self.layout
    }
    fn fixed_coefficients(&self) -> &[f64] {
        &self.coefficients
    }
    fn fixed_covariance(&self) -> &[Vec<f64>] {
        &self.covariance
    }
    fn maximized_log_likelihood(&self) -> f64 {
        self.log_likelihood
    }
    fn is_converged(&self) -> bool {
        self.converged
    }
    fn fingerprint(&self) -> u64 {
        self.corpus_fingerprint
    }
}

impl FixedEffectsFit for FittedGlmm {
    fn family(&self) -> ModelFamily {
        ModelFamily::PoissonRandomIntercept {
            nodes: self.quadrature_nodes,
        }
    }
    fn fixed_spec(&self) -> &ModelSpec {
        &self.spec.fixed
    }
    fn layout(&self) -> &DesignLayout {
        &self.layout
    }
    fn fixed_coefficients(&self) -> &[f64] {
        &self.fixed_coefficients
    }
    fn fixed_covariance(&self) -> &[Vec<f64>] {
        &self.fixed_covariance
    }
    fn maximized_log_likelihood(&self) -> f64 {
        self.log_marginal_likelihood
    }
    fn is_converged(&self) -> bool {
        self.converged
    }
    fn fingerprint(&self) -> u64 {
        self.corpus_fingerprint
    }
}

fn level_of(layout: &DesignLayout, label: &str) -> Result<usize> {
    layout
        .factor_levels
        .iter()
        .position(|l| l == label)
        .ok_or_else(|| Error::UnknownLevel(label.to_owned()))
}

/// `exp(μ̂_case − μ̂_control)` with a Wald interval computed on the log
/// scale from the fixed-effect covariance.
pub fn model_ratio<F: FixedEffectsFit + ?Sized>(
    fit: &F,
    case_level: &str,
    control_level: &str,
    level: f64,
) -> Result<RatioEstimate> {
    if !fit.is_converged() {
        return Err(Error::NotConverged);
    }
    check_level(level)?;
    let layout = fit.layout();
    let case = level_of(layout, case_level)?;
    let control = level_of(layout, control_level)?;
    if !fit.fixed_spec().include_factor && case != control {
        return Err(Error::InvalidConfig(
            "model does not include the group factor".into(),
        ));
    }
    let beta = fit.fixed_coefficients();
    let cov = fit.fixed_covariance();
    let coef = |col: Option<usize>| col.map_or(0.0, |c| beta[c]);
    let var = |a: Option<usize>, b: Option<usize>| match (a, b) {
        (Some(i), Some(j)) => cov[i][j],
        _ => 0.0,
    };
    let (cc, kc) = (layout.level_columns[case], layout.level_columns[control]);
    let log_ratio = coef(cc) - coef(kc);
    let variance = (var(cc, cc) + var(kc, kc) - 2.0 * var(cc, kc)).max(0.0);
    let half_width = normal_quantile(0.5 + level / 2.0) * variance.sqrt();
    let (ratio, ci_low, ci_high) = if case == control {
        (1.0, 1.0, 1.0)
    } else {
        (
            log_ratio.exp(),
            (log_ratio - half_width).exp(),
            (log_ratio + half_width).exp(),
        )
    };
    Ok(RatioEstimate {
        ratio,
        ci_low,
        ci_high,
        level,
        method: RatioMethod::WaldLogScale,
        flagged: false,
        redraws: 0,
    })
}

/// Likelihood-ratio test of `reduced` against `full`.
pub fn lrt<F: FixedEffectsFit + ?Sized, R: FixedEffectsFit + ?Sized>(
    full: &F,
    reduced: &R,
) -> Result<TestResult> {
    if !full.is_converged() || !reduced.is_converged() {
        return Err(Error::NotConverged);
    }
    if full.family() != reduced.family() {
        return Err(Error::NotNested(format!(
            "different model families ({:?} vs {:?})",
            full.family(),
            reduced.family()
        )));
    }
    if !reduced.fixed_spec().is_nested_in(full.fixed_spec()) {
        return Err(Error::NotNested(
            "reduced model has terms the full model lacks".into(),
        ));
    }
    if full.fingerprint() != reduced.fingerprint() {
        return Err(Error::MismatchedCorpora);
    }
    let p_full = full.fixed_coefficients().len();
    let p_reduced = reduced.fixed_coefficients().len();
    let df = p_full.checked_sub(p_reduced).ok_or_else(|| {
        Error::NotNested("reduced model has more parameters than the full model".into())
    })?;
    let raw = 2.0 * (full.maximized_log_likelihood() - reduced.maximized_log_likelihood());
    if raw < -LRT_SLACK * full.maximized_log_likelihood().abs().max(1.0) {
        return Err(Error::NotConverged);
    }
    let statistic = raw.max(0.0);
    let p_value = chi_square_sf(statistic, df);
    Ok(TestResult {
        statistic,
        df,
        p_value,
        significant_at_05: p_value < 0.05,
    })
}
