//! Poisson regression with a Gaussian random intercept per speaker.
//!
//! For speaker `i` and utterance `j`:
//!
//! ```text
//! r_i ~ N(0, σ²)
//! C_ij | r_i ~ Poisson(λ_ij),   ln λ_ij = ln N_ij + x_ijᵀβ + r_i
//! ```
//!
//! The marginal likelihood of a speaker block is a one-dimensional integral
//! over `r_i`, computed by adaptive Gauss-Hermite quadrature: the rule is
//! centred at the block's conditional mode and scaled by the curvature
//! there. One node is the Laplace approximation.
//!
//! Within a block only three data summaries matter for a given `β`:
//! `S = Σ C_j`, `A = Σ C_j (ln N_j + x_jᵀβ)` and `B = Σ N_j exp(x_jᵀβ)`,
//! so the joint log-density in `r` is
//! `h(r) = A + S r − B eʳ − Σ ln C_j! − r²/(2σ²) − ½ ln(2πσ²)`.
//! The outer fit maximizes the sum of block log-marginals over `(β, ln σ)`
//! by projected BFGS, with the analytic gradient carried through the
//! dependence of the mode and curvature on the parameters.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::f64::consts::{LN_2, SQRT_2};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{Corpus, Utterance};
use crate::error::{Error, Result};
use crate::glm::{self, content_cmp, corpus_fingerprint, matrix_to_rows, DesignLayout, ModelSpec};
use crate::optim::{self, BfgsOptions};
use crate::quadrature::GaussHermite;
use crate::special::{ln_factorial, log_sum_exp};

pub const DEFAULT_NODES: usize = 15;
/// `σ` below this is reported as the boundary estimate `σ̂ = 0`.
pub const SIGMA_FLOOR: f64 = 1e-6;
pub const MAX_OUTER_EVALUATIONS: usize = 200;
pub const MODE_TOLERANCE: f64 = 1e-10;
pub const MAX_MODE_ITERATIONS: usize = 100;
const INITIAL_SIGMA_MIN: f64 = 0.05;
const INITIAL_SIGMA_MAX: f64 = 3.0;
const OUTER_GRADIENT_TOLERANCE: f64 = 1e-6;
const POLISH_GRADIENT_TOLERANCE: f64 = 1e-8;
const HESSIAN_STEP: f64 = 1e-5;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Fixed-effect terms plus one random intercept per speaker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixedModelSpec {
    pub fixed: ModelSpec,
}

impl MixedModelSpec {
    pub fn new(fixed: ModelSpec) -> Self {
        Self { fixed }
    }
}

impl Default for MixedModelSpec {
    fn default() -> Self {
        Self::new(ModelSpec::factor_only())
    }
}

/// Gauss-Hermite rule with `ln w_k + x_k²` precomputed, which is the
/// log-weight against a unit (not Gaussian) weight function.
#[derive(Debug, Clone)]
struct AdaptiveRule {
    nodes: Vec<f64>,
    log_weights: Vec<f64>,
}

impl AdaptiveRule {
    fn new(n: usize) -> Self {
        let gh = GaussHermite::new(n);
        Self {
            log_weights: gh
                .nodes()
                .iter()
                .zip(gh.weights())
                .map(|(x, w)| w.ln() + x * x)
                .collect(),
            nodes: gh.nodes().to_vec(),
        }
    }
}

/// Maximizer of `S r − B eʳ − r·precision/2·r`, i.e. the root of
/// `f(r) = S − B eʳ − precision·r`.
///
/// `f` is concave and decreasing, so Newton started to the right of the root
/// approaches it monotonically from the right. The start is `0` when
/// `f(0) < 0`, otherwise the upper bound `min(S/precision, ln(S/B))`.
fn find_mode(s: f64, b: f64, precision: f64) -> Result<f64> {
    let f = |r: f64| s - b * r.exp() - precision * r;
    let f0 = s - b;
    let mut r = if f0 > 0.0 {
        (s / precision).min((s / b).ln())
    } else {
        0.0
    };
    for _ in 0..MAX_MODE_ITERATIONS {
        let fr = f(r);
        let slope = b * r.exp() + precision;
        let step = fr / slope;
        r += step;
        if step.abs() <= 1e-15 * r.abs().max(1.0) {
            if f(r).abs() <= MODE_TOLERANCE.max(1e-15 * s.max(b)) {
                return Ok(r);
            }
            break;
        }
    }
    Err(Error::ModeNotFound {
        iterations: MAX_MODE_ITERATIONS,
    })
}

/// Per-block sufficient statistics at a given `β`.
#[derive(Debug, Clone, Copy)]
struct BlockStats {
    /// `Σ C_j`
    s: f64,
    /// `Σ C_j (ln N_j + x_jᵀβ)`
    a: f64,
    /// `Σ N_j exp(x_jᵀβ)`
    b: f64,
    /// `Σ ln C_j!`
    k: f64,
}

fn block_value(stats: BlockStats, sigma: f64, rule: &AdaptiveRule) -> Result<f64> {
    let BlockStats { s, a, b, k } = stats;
    if sigma == 0.0 {
        return Ok(a - b - k);
    }
    let precision = 1.0 / (sigma * sigma);
    let mode = find_mode(s, b, precision)?;
    let curvature = b * mode.exp() + precision;
    let tau = curvature.sqrt().recip();
    let terms: Vec<f64> = rule
        .nodes
        .iter()
        .zip(&rule.log_weights)
        .map(|(&x, &lw)| {
            let u = mode + SQRT_2 * tau * x;
            lw + s * u - b * u.exp() - 0.5 * precision * u * u
        })
        .collect();
    Ok(0.5 * LN_2 + tau.ln() + a - k - 0.5 * LN_2PI - sigma.ln() + log_sum_exp(&terms))
}

/// Block log-marginal and its derivatives. The `β`-gradient always has the
/// form `Σ C_j x_j + coef_b · ∂B/∂β`, so only the scalar `coef_b` is
/// returned, together with the derivative in `ln σ`.
fn block_value_and_derivatives(
    stats: BlockStats,
    log_sigma: f64,
    rule: &AdaptiveRule,
) -> Result<(f64, f64, f64)> {
    let BlockStats { s, a, b, k } = stats;
    let precision = (-2.0 * log_sigma).exp();
    let mode = find_mode(s, b, precision)?;
    let b_exp_mode = b * mode.exp();
    let curvature = b_exp_mode + precision;
    let tau = curvature.sqrt().recip();

    // Implicit derivatives of the mode and of ln τ; the β-parts are
    // multiples of ∂B/∂β.
    let mode_b = -mode.exp() / curvature;
    let curvature_b = mode.exp() + b_exp_mode * mode_b;
    let log_tau_b = -0.5 * curvature_b / curvature;
    let mode_rho = 2.0 * mode * precision / curvature;
    let curvature_rho = b_exp_mode * mode_rho - 2.0 * precision;
    let log_tau_rho = -0.5 * curvature_rho / curvature;

    let n = rule.nodes.len();
    let mut terms = Vec::with_capacity(n);
    let mut points = Vec::with_capacity(n);
    for (&x, &lw) in rule.nodes.iter().zip(&rule.log_weights) {
        let u = mode + SQRT_2 * tau * x;
        let eu = u.exp();
        terms.push(lw + s * u - b * eu - 0.5 * precision * u * u);
        points.push((x, u, eu));
    }
    let lse = log_sum_exp(&terms);
    let value = 0.5 * LN_2 + tau.ln() + a - k - 0.5 * LN_2PI - log_sigma + lse;

    let mut coef_b = log_tau_b;
    let mut d_rho = log_tau_rho;
    for (&t, &(x, u, eu)) in terms.iter().zip(&points) {
        let weight = (t - lse).exp();
        let slope = s - b * eu - precision * u;
        let spread = SQRT_2 * x * tau;
        coef_b += weight * (-eu + slope * (mode_b + spread * log_tau_b));
        d_rho += weight * (precision * u * u - 1.0 + slope * (mode_rho + spread * log_tau_rho));
    }
    Ok((value, coef_b, d_rho))
}

/// The utterances of one speaker in design form.
#[derive(Debug, Clone)]
pub struct SpeakerBlock {
    p: usize,
    x: Vec<f64>,
    offsets: Vec<f64>,
    total_count: f64,
    count_offset: f64,
    count_x: Vec<f64>,
    ln_factorial_sum: f64,
}

impl SpeakerBlock {
    /// Block from explicit design rows, error counts and reference lengths.
    pub fn new(design_rows: &[Vec<f64>], counts: &[u64], ref_words: &[u64]) -> Result<Self> {
        let n = design_rows.len();
        if counts.len() != n || ref_words.len() != n {
            return Err(Error::DimensionMismatch(
                "design rows, counts and ref_words differ in length".into(),
            ));
        }
        if n == 0 {
            return Err(Error::InvalidUtterance("empty speaker block".into()));
        }
        let p = design_rows[0].len();
        if design_rows.iter().any(|r| r.len() != p) {
            return Err(Error::DimensionMismatch("ragged design rows".into()));
        }
        if ref_words.contains(&0) {
            return Err(Error::InvalidUtterance("empty reference in block".into()));
        }
        let x: Vec<f64> = design_rows.iter().flatten().copied().collect();
        Ok(Self::assemble(p, x, counts, ref_words))
    }

    fn from_utterances(layout: &DesignLayout, rows: &[&Utterance]) -> Self {
        let p = layout.n_params();
        let mut x = vec![0.0; rows.len() * p];
        for (u, row) in rows.iter().zip(x.chunks_mut(p)) {
            layout.fill_row(u, row);
        }
        let counts: Vec<u64> = rows.iter().map(|u| u.errors).collect();
        let words: Vec<u64> = rows.iter().map(|u| u.ref_words).collect();
        Self::assemble(p, x, &counts, &words)
    }

    fn assemble(p: usize, x: Vec<f64>, counts: &[u64], ref_words: &[u64]) -> Self {
        let offsets: Vec<f64> = ref_words.iter().map(|&w| (w as f64).ln()).collect();
        let mut count_x = vec![0.0; p];
        for (row, &c) in x.chunks(p).zip(counts) {
            for (acc, v) in count_x.iter_mut().zip(row) {
                *acc += c as f64 * v;
            }
        }
        Self {
            p,
            total_count: counts.iter().map(|&c| c as f64).sum(),
            count_offset: counts.iter().zip(&offsets).map(|(&c, o)| c as f64 * o).sum(),
            ln_factorial_sum: counts.iter().map(|&c| ln_factorial(c)).sum(),
            count_x,
            offsets,
            x,
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn n_params(&self) -> usize {
        self.p
    }

    fn stats(&self, beta: &[f64], mut d_b: Option<&mut [f64]>) -> BlockStats {
        let mut b = 0.0;
        for (row, &o) in self.x.chunks(self.p).zip(&self.offsets) {
            let eta: f64 = row.iter().zip(beta).map(|(x, c)| x * c).sum();
            let e = (o + eta).exp();
            b += e;
            if let Some(d) = d_b.as_deref_mut() {
                for (acc, v) in d.iter_mut().zip(row) {
                    *acc += e * v;
                }
            }
        }
        let a = self.count_offset
            + self.count_x.iter().zip(beta).map(|(x, c)| x * c).sum::<f64>();
        BlockStats {
            s: self.total_count,
            a,
            b,
            k: self.ln_factorial_sum,
        }
    }
}

/// `ln ∫ Π_j Poisson(C_j | λ_j(r)) N(r | 0, σ²) dr` for one speaker by
/// adaptive Gauss-Hermite quadrature with `nodes` points. `sigma = 0` gives
/// the plain Poisson log-likelihood of the block.
pub fn speaker_marginal_loglik(
    block: &SpeakerBlock,
    beta: &[f64],
    sigma: f64,
    nodes: usize,
) -> Result<f64> {
    if beta.len() != block.p {
        return Err(Error::DimensionMismatch(format!(
            "{} coefficients for a block with {} design columns",
            beta.len(),
            block.p
        )));
    }
    if nodes == 0 {
        return Err(Error::InvalidConfig("quadrature needs at least one node".into()));
    }
    if !(sigma >= 0.0) {
        return Err(Error::InvalidConfig(format!("sigma must be non-negative, got {sigma}")));
    }
    block_value(block.stats(beta, None), sigma, &AdaptiveRule::new(nodes))
}

/// Marginal log-likelihood of a corpus as a function of `(β, ln σ)`, with
/// speaker blocks held in a canonical content order.
#[derive(Debug, Clone)]
pub struct GlmmObjective {
    layout: DesignLayout,
    blocks: Vec<SpeakerBlock>,
    speakers: Vec<String>,
    rule: AdaptiveRule,
    nodes: usize,
    n_obs: usize,
}

fn rows_cmp(a: &[&Utterance], b: &[&Utterance]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| content_cmp(x, y))
        .find(|o| o.is_ne())
        .unwrap_or_else(|| a.len().cmp(&b.len()))
}

impl GlmmObjective {
    pub fn new(corpus: &Corpus, spec: &MixedModelSpec, nodes: usize) -> Result<Self> {
        if nodes == 0 {
            return Err(Error::InvalidConfig("quadrature needs at least one node".into()));
        }
        if corpus.is_empty() {
            return Err(Error::InvalidUtterance("corpus has no utterances".into()));
        }
        let layout = DesignLayout::new(corpus, &spec.fixed)?;
        let mut by_speaker: HashMap<&str, Vec<&Utterance>> = HashMap::new();
        for u in corpus.utterances() {
            by_speaker.entry(u.speaker.as_str()).or_default().push(u);
        }
        let mut grouped: Vec<(&str, Vec<&Utterance>)> = corpus
            .speakers()
            .into_iter()
            .map(|s| {
                let mut rows = by_speaker.remove(s).unwrap_or_default();
                rows.sort_by(|a, b| content_cmp(a, b));
                (s, rows)
            })
            .collect();
        // Blocks with equal content contribute identically, so ordering by
        // content alone makes every sum independent of input order and of
        // speaker labels.
        grouped.sort_by(|a, b| rows_cmp(&a.1, &b.1));
        let blocks = grouped
            .iter()
            .map(|(_, rows)| SpeakerBlock::from_utterances(&layout, rows))
            .collect();
        Ok(Self {
            speakers: grouped.iter().map(|(s, _)| (*s).to_owned()).collect(),
            blocks,
            layout,
            rule: AdaptiveRule::new(nodes),
            nodes,
            n_obs: corpus.len(),
        })
    }

    pub fn layout(&self) -> &DesignLayout {
        &self.layout
    }

    pub fn n_fixed(&self) -> usize {
        self.layout.n_params()
    }

    pub fn n_speakers(&self) -> usize {
        self.blocks.len()
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn log_marginal_likelihood(&self, beta: &[f64], sigma: f64) -> Result<f64> {
        let mut total = 0.0;
        for block in &self.blocks {
            total += block_value(block.stats(beta, None), sigma, &self.rule)?;
        }
        Ok(total)
    }

    /// Value and gradient in `θ = (β, ln σ)`.
    pub fn value_and_gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let p = self.n_fixed();
        let (beta, log_sigma) = (&theta[..p], theta[p]);
        let mut total = 0.0;
        let mut grad = vec![0.0; p + 1];
        let mut d_b = vec![0.0; p];
        for block in &self.blocks {
            d_b.fill(0.0);
            let stats = block.stats(beta, Some(&mut d_b));
            let (value, coef_b, d_rho) = block_value_and_derivatives(stats, log_sigma, &self.rule)?;
            total += value;
            for j in 0..p {
                grad[j] += block.count_x[j] + coef_b * d_b[j];
            }
            grad[p] += d_rho;
        }
        Ok((total, grad))
    }

    /// Central-difference Hessian of the log-likelihood in `θ`, built from
    /// the analytic gradient.
    pub fn hessian(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        let n = theta.len();
        let mut h = DMatrix::zeros(n, n);
        let mut probe = theta.to_vec();
        for i in 0..n {
            let step = HESSIAN_STEP * theta[i].abs().max(1.0);
            probe[i] = theta[i] + step;
            let (_, gp) = self.value_and_gradient(&probe)?;
            probe[i] = theta[i] - step;
            let (_, gm) = self.value_and_gradient(&probe)?;
            probe[i] = theta[i];
            for j in 0..n {
                h[(j, i)] = (gp[j] - gm[j]) / (2.0 * step);
            }
        }
        Ok((&h + h.transpose()) * 0.5)
    }

    /// `∂ℓ/∂σ²` at `σ = 0`: `½ Σ_i [(S_i − B_i)² − S_i]`. At the plain
    /// Poisson optimum a non-positive value means `σ̂ = 0` is a local maximum.
    pub fn boundary_score(&self, beta: &[f64]) -> f64 {
        self.blocks
            .iter()
            .map(|block| {
                let st = block.stats(beta, None);
                0.5 * ((st.s - st.b).powi(2) - st.s)
            })
            .sum()
    }

    /// Conditional mode of each speaker's random effect, keyed by speaker.
    pub fn conditional_modes(&self, beta: &[f64], sigma: f64) -> Result<BTreeMap<String, f64>> {
        self.blocks
            .iter()
            .zip(&self.speakers)
            .map(|(block, speaker)| {
                let mode = if sigma == 0.0 {
                    0.0
                } else {
                    let st = block.stats(beta, None);
                    find_mode(st.s, st.b, 1.0 / (sigma * sigma))?
                };
                Ok((speaker.clone(), mode))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedGlmm {
    pub spec: MixedModelSpec,
    pub layout: DesignLayout,
    pub fixed_coefficients: Vec<f64>,
    /// Random-intercept standard deviation; exactly 0 on the boundary.
    pub sigma: f64,
    pub boundary: bool,
    pub log_marginal_likelihood: f64,
    /// Covariance of the fixed effects, row-major `p × p`.
    pub fixed_covariance: Vec<Vec<f64>>,
    /// Standard error of `ln σ̂`; absent on the boundary.
    pub log_sigma_se: Option<f64>,
    pub conditional_modes: BTreeMap<String, f64>,
    pub quadrature_nodes: usize,
    pub converged: bool,
    pub evaluations: usize,
    pub n_obs: usize,
    pub n_speakers: usize,
    pub corpus_fingerprint: u64,
}

impl FittedGlmm {
    pub fn n_fixed(&self) -> usize {
        self.fixed_coefficients.len()
    }

    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.n_fixed())
            .map(|i| self.fixed_covariance[i][i].max(0.0).sqrt())
            .collect()
    }
}

fn inverse_or_diagonal(h: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(chol) = h.clone().cholesky() {
        return chol.inverse();
    }
    let n = h.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0 / h[(i, i)].abs().max(1e-8)
        } else {
            0.0
        }
    })
}

/// Marginal maximum-likelihood fit with `nodes`-point adaptive quadrature.
///
/// Warm-starts from the fixed-effects fit, with `σ` starting at the square
/// root of the excess Pearson dispersion (clamped to `[0.05, 3]`). When the
/// optimum sits on `σ = 0` the result is the fixed-effects fit itself with
/// `boundary = true`.
pub fn fit_glmm(corpus: &Corpus, spec: &MixedModelSpec, nodes: usize) -> Result<FittedGlmm> {
    corpus
        .check_speaker_level_factor()
        .map_err(|_| Error::FactorNotSpeakerLevel)?;
    let objective = GlmmObjective::new(corpus, spec, nodes)?;
    if objective.n_speakers() < 2 {
        return Err(Error::TooFewSpeakers(objective.n_speakers()));
    }
    let glm_fit = glm::fit_glm(corpus, &spec.fixed)?;
    let p = objective.n_fixed();
    let fingerprint = corpus_fingerprint(corpus);

    let boundary_fit = |evaluations: usize| -> Result<FittedGlmm> {
        Ok(FittedGlmm {
            spec: spec.clone(),
            layout: objective.layout.clone(),
            fixed_coefficients: glm_fit.coefficients.clone(),
            sigma: 0.0,
            boundary: true,
            log_marginal_likelihood: glm_fit.log_likelihood,
            fixed_covariance: glm_fit.covariance.clone(),
            log_sigma_se: None,
            conditional_modes: objective.conditional_modes(&glm_fit.coefficients, 0.0)?,
            quadrature_nodes: nodes,
            converged: true,
            evaluations,
            n_obs: objective.n_obs,
            n_speakers: objective.n_speakers(),
            corpus_fingerprint: fingerprint,
        })
    };

    let dispersion = glm::dispersion(&glm_fit, corpus).unwrap_or(1.0);
    let sigma0 = (dispersion - 1.0)
        .max(0.0)
        .sqrt()
        .clamp(INITIAL_SIGMA_MIN, INITIAL_SIGMA_MAX);
    let mut theta0 = glm_fit.coefficients.clone();
    theta0.push(sigma0.ln());
    let boundary_score = objective.boundary_score(&glm_fit.coefficients);

    let negative = |theta: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (v, g) = objective.value_and_gradient(theta)?;
        Ok((-v, g.into_iter().map(|x| -x).collect()))
    };
    let hessian0 = -objective.hessian(&theta0)?;
    let mut lower = vec![f64::NEG_INFINITY; p + 1];
    lower[p] = SIGMA_FLOOR.ln();
    let outcome = optim::minimize(
        negative,
        &theta0,
        &lower,
        inverse_or_diagonal(&hessian0),
        &BfgsOptions {
            gradient_tolerance: OUTER_GRADIENT_TOLERANCE,
            max_evaluations: MAX_OUTER_EVALUATIONS,
            ..Default::default()
        },
    )?;

    let interior_ll = -outcome.value;
    let interior_sigma = outcome.x[p].exp();
    let gain = interior_ll - glm_fit.log_likelihood;
    let at_boundary = interior_sigma <= SIGMA_FLOOR * (1.0 + 1e-9)
        || gain <= 1e-9 * glm_fit.log_likelihood.abs().max(1.0)
        || (boundary_score <= 0.0 && gain < 1e-6);
    if at_boundary {
        return boundary_fit(outcome.evaluations);
    }
    if !outcome.converged {
        return Err(Error::MixedModelNotConverged {
            evaluations: outcome.evaluations,
        });
    }

    // Newton polish on the finite-difference Hessian; this also supplies the
    // observed information for the covariance.
    let mut theta = outcome.x.clone();
    let (mut ll, mut grad) = objective.value_and_gradient(&theta)?;
    let mut information = -objective.hessian(&theta)?;
    for _ in 0..8 {
        if grad.iter().fold(0.0f64, |m, g| m.max(g.abs())) <= POLISH_GRADIENT_TOLERANCE {
            break;
        }
        let Some(chol) = information.clone().cholesky() else {
            break;
        };
        let step = chol.solve(&DVector::from_column_slice(&grad));
        let mut t = 1.0;
        let mut improved = false;
        let norm = |g: &[f64]| g.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        while t > 1e-4 {
            let candidate: Vec<f64> = theta.iter().zip(step.iter()).map(|(a, d)| a + t * d).collect();
            let (cll, cgrad) = objective.value_and_gradient(&candidate)?;
            // Close to the optimum the change in ℓ is below its rounding
            // noise, so a shrinking score also counts as progress.
            let noise = 1e-12 * ll.abs().max(1.0);
            if cll > ll || (cll >= ll - noise && norm(&cgrad) < norm(&grad)) {
                theta = candidate;
                ll = cll;
                grad = cgrad;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
        information = -objective.hessian(&theta)?;
    }

    let covariance = match information.clone().cholesky() {
        Some(chol) => chol.inverse(),
        None => {
            return Err(Error::NonIdentifiableDesign(
                "observed information of the mixed model is not positive definite".into(),
            ))
        }
    };
    let fixed_cov = covariance.view((0, 0), (p, p)).into_owned();
    let sigma = theta[p].exp();
    let beta = theta[..p].to_vec();
    Ok(FittedGlmm {
        spec: spec.clone(),
        layout: objective.layout.clone(),
        conditional_modes: objective.conditional_modes(&beta, sigma)?,
        fixed_coefficients: beta,
        sigma,
        boundary: false,
        log_marginal_likelihood: ll,
        fixed_covariance: matrix_to_rows(&fixed_cov),
        log_sigma_se: Some(covariance[(p, p)].max(0.0).sqrt()),
        quadrature_nodes: nodes,
        converged: true,
        evaluations: outcome.evaluations,
        n_obs: objective.n_obs,
        n_speakers: objective.n_speakers(),
        corpus_fingerprint: fingerprint,
    })
}

/// Conditional modes of the speaker effects under a fitted model.
pub fn conditional_modes(fit: &FittedGlmm, corpus: &Corpus) -> Result<BTreeMap<String, f64>> {
    if !fit.converged {
        return Err(Error::NotConverged);
    }
    let objective = GlmmObjective::new(corpus, &fit.spec, fit.quadrature_nodes)?;
    if objective.layout != fit.layout {
        return Err(Error::DimensionMismatch(
            "corpus does not match the fitted design".into(),
        ));
    }
    objective.conditional_modes(&fit.fixed_coefficients, fit.sigma)
}
