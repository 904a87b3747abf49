//! Fixed-effects Poisson regression with a log link and `ln(ref_words)`
//! offset.
//!
//! The linear predictor for utterance `s` is
//! `ln λ_s = ln N_s + μ_{level(s)} + θᵀ x_s`, with the factor dummy-coded
//! against the corpus reference level. Fitting is Newton-Raphson on the full
//! log-likelihood (equivalently IRLS, the log link being canonical), so the
//! observed and expected information coincide.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{Corpus, Utterance};
use crate::error::{Error, Result};
use crate::special::ln_factorial;

pub const GRADIENT_TOLERANCE: f64 = 1e-8;
pub const RELATIVE_LOGLIK_TOLERANCE: f64 = 1e-10;
pub const MAX_ITERATIONS: usize = 100;
/// Smallest singular value of the column-normalized design, relative to
/// the largest, below which the design counts as rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Which terms enter the linear predictor. The offset is always present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub include_intercept: bool,
    pub include_factor: bool,
    pub covariates: Vec<String>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self::factor_only()
    }
}

impl ModelSpec {
    pub fn intercept_only() -> Self {
        Self {
            include_intercept: true,
            include_factor: false,
            covariates: Vec::new(),
        }
    }

    pub fn factor_only() -> Self {
        Self {
            include_intercept: true,
            include_factor: true,
            covariates: Vec::new(),
        }
    }

    pub fn with_covariates<I, S>(mut self, names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.covariates.extend(names.into_iter().map(Into::into));
        self
    }

    pub fn without_factor(mut self) -> Self {
        self.include_factor = false;
        self
    }

    /// Every term of `self` is also a term of `other`.
    pub fn is_nested_in(&self, other: &ModelSpec) -> bool {
        (!self.include_intercept || other.include_intercept)
            && (!self.include_factor || other.include_factor)
            && self.covariates.iter().all(|c| other.covariates.contains(c))
    }
}

/// Column layout of the design matrix for one corpus and spec.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignLayout {
    pub names: Vec<String>,
    /// Column of each factor level; `None` for the reference level (or when
    /// the factor is absent).
    pub level_columns: Vec<Option<usize>>,
    pub factor_levels: Vec<String>,
    intercept_column: Option<usize>,
    covariate_columns: Vec<usize>,
}

impl DesignLayout {
    pub fn new(corpus: &Corpus, spec: &ModelSpec) -> Result<Self> {
        let factor = corpus.factor();
        let mut names = Vec::new();
        let intercept_column = spec.include_intercept.then(|| {
            names.push("(intercept)".to_owned());
            0
        });
        let mut level_columns = vec![None; factor.len()];
        if spec.include_factor {
            for (level, label) in factor.levels().iter().enumerate() {
                if spec.include_intercept && level == factor.reference_level() {
                    continue;
                }
                level_columns[level] = Some(names.len());
                names.push(format!("{}[{}]", factor.name(), label));
            }
        }
        let mut covariate_columns = Vec::with_capacity(spec.covariates.len());
        for name in &spec.covariates {
            if names.iter().any(|n| n == name) {
                return Err(Error::NonIdentifiableDesign(format!(
                    "covariate {name:?} listed twice"
                )));
            }
            covariate_columns.push(corpus.covariate_index(name)?);
            names.push(name.clone());
        }
        if names.is_empty() {
            return Err(Error::NonIdentifiableDesign("model has no terms".into()));
        }
        Ok(Self {
            names,
            level_columns,
            factor_levels: factor.levels().to_vec(),
            intercept_column,
            covariate_columns,
        })
    }

    pub fn n_params(&self) -> usize {
        self.names.len()
    }

    pub fn intercept_column(&self) -> Option<usize> {
        self.intercept_column
    }

    pub(crate) fn fill_row(&self, u: &Utterance, row: &mut [f64]) {
        row.fill(0.0);
        if let Some(c) = self.intercept_column {
            row[c] = 1.0;
        }
        if let Some(c) = self.level_columns[u.level] {
            row[c] = 1.0;
        }
        let start = self.names.len() - self.covariate_columns.len();
        for (k, &ci) in self.covariate_columns.iter().enumerate() {
            row[start + k] = u.covariates[ci];
        }
    }
}

/// Total order on an utterance's modeling content (level, counts,
/// covariates). Rows that compare equal contribute identically.
pub(crate) fn content_cmp(a: &Utterance, b: &Utterance) -> Ordering {
    a.level
        .cmp(&b.level)
        .then(a.errors.cmp(&b.errors))
        .then(a.ref_words.cmp(&b.ref_words))
        .then_with(|| {
            a.covariates
                .iter()
                .zip(&b.covariates)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
}

/// Order-independent content hash of a corpus.
pub fn corpus_fingerprint(corpus: &Corpus) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    let mut row_hashes: Vec<u64> = corpus
        .utterances()
        .iter()
        .map(|u| {
            let mut h = mix(u.level as u64 ^ 0x51);
            h = mix(h ^ u.errors);
            h = mix(h ^ u.ref_words.rotate_left(17));
            for &x in &u.covariates {
                h = mix(h ^ x.to_bits());
            }
            for b in u.speaker.bytes() {
                h = mix(h ^ b as u64);
            }
            h
        })
        .collect();
    row_hashes.sort_unstable();
    row_hashes
        .into_iter()
        .fold(mix(corpus.len() as u64), |acc, h| mix(acc ^ h))
}

/// Poisson log-likelihood, score and information for one corpus and spec,
/// with rows held in canonical content order.
#[derive(Debug, Clone)]
pub struct GlmObjective {
    layout: DesignLayout,
    p: usize,
    /// Row-major `n × p`.
    x: Vec<f64>,
    counts: Vec<f64>,
    offsets: Vec<f64>,
    ln_factorial_sum: f64,
}

impl GlmObjective {
    pub fn new(corpus: &Corpus, spec: &ModelSpec) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::InvalidUtterance("corpus has no utterances".into()));
        }
        let layout = DesignLayout::new(corpus, spec)?;
        let mut rows: Vec<&Utterance> = corpus.utterances().iter().collect();
        rows.sort_by(|a, b| content_cmp(a, b));
        Ok(Self::from_rows(layout, &rows))
    }

    pub(crate) fn from_rows(layout: DesignLayout, rows: &[&Utterance]) -> Self {
        let p = layout.n_params();
        let mut x = vec![0.0; rows.len() * p];
        for (u, row) in rows.iter().zip(x.chunks_mut(p)) {
            layout.fill_row(u, row);
        }
        Self {
            p,
            x,
            counts: rows.iter().map(|u| u.errors as f64).collect(),
            offsets: rows.iter().map(|u| (u.ref_words as f64).ln()).collect(),
            ln_factorial_sum: rows.iter().map(|u| ln_factorial(u.errors)).sum(),
            layout,
        }
    }

    pub fn layout(&self) -> &DesignLayout {
        &self.layout
    }

    pub fn n_params(&self) -> usize {
        self.p
    }

    pub fn n_obs(&self) -> usize {
        self.counts.len()
    }

    fn eta(&self, row: usize, beta: &[f64]) -> f64 {
        self.x[row * self.p..(row + 1) * self.p]
            .iter()
            .zip(beta)
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Fitted means `λ_s = N_s exp(x_s β)` in canonical row order.
    pub fn fitted_rates(&self, beta: &[f64]) -> Vec<f64> {
        (0..self.n_obs())
            .map(|i| (self.offsets[i] + self.eta(i, beta)).exp())
            .collect()
    }

    pub fn log_likelihood(&self, beta: &[f64]) -> f64 {
        let mut ll = -self.ln_factorial_sum;
        for i in 0..self.n_obs() {
            let lin = self.offsets[i] + self.eta(i, beta);
            ll += self.counts[i] * lin - lin.exp();
        }
        ll
    }

    pub fn gradient(&self, beta: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.p];
        for i in 0..self.n_obs() {
            let resid = self.counts[i] - (self.offsets[i] + self.eta(i, beta)).exp();
            for (gk, xk) in g.iter_mut().zip(&self.x[i * self.p..(i + 1) * self.p]) {
                *gk += resid * xk;
            }
        }
        g
    }

    /// Log-likelihood, gradient and information `Xᵀ diag(λ) X` in one pass.
    fn evaluate(&self, beta: &[f64]) -> (f64, DVector<f64>, DMatrix<f64>) {
        let p = self.p;
        let mut ll = -self.ln_factorial_sum;
        let mut g = DVector::zeros(p);
        let mut info = DMatrix::zeros(p, p);
        for i in 0..self.n_obs() {
            let row = &self.x[i * p..(i + 1) * p];
            let lin = self.offsets[i] + self.eta(i, beta);
            let mu = lin.exp();
            ll += self.counts[i] * lin - mu;
            let resid = self.counts[i] - mu;
            for a in 0..p {
                g[a] += resid * row[a];
                let wa = mu * row[a];
                for b in 0..=a {
                    info[(a, b)] += wa * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                info[(b, a)] = info[(a, b)];
            }
        }
        (ll, g, info)
    }

    pub fn information(&self, beta: &[f64]) -> DMatrix<f64> {
        self.evaluate(beta).2
    }

    /// Errors when the column-normalized design is numerically rank deficient.
    pub fn check_rank(&self) -> Result<()> {
        let n = self.n_obs();
        let p = self.p;
        if n < p {
            return Err(Error::NonIdentifiableDesign(format!(
                "{p} parameters but only {n} observations"
            )));
        }
        let mut gram = DMatrix::<f64>::zeros(p, p);
        for row in self.x.chunks(p) {
            for a in 0..p {
                for b in 0..=a {
                    gram[(a, b)] += row[a] * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                gram[(b, a)] = gram[(a, b)];
            }
        }
        let scale: Vec<f64> = (0..p).map(|a| gram[(a, a)].sqrt()).collect();
        if let Some(a) = scale.iter().position(|&s| s == 0.0) {
            return Err(Error::NonIdentifiableDesign(format!(
                "column {:?} is identically zero",
                self.layout.names[a]
            )));
        }
        let normalized = DMatrix::from_fn(p, p, |a, b| gram[(a, b)] / (scale[a] * scale[b]));
        // Eigenvalues of the normalized Gram matrix are the squared singular
        // values of the normalized design.
        let eig = normalized.symmetric_eigenvalues();
        let max = eig.max();
        let min = eig.min().max(0.0);
        if (min / max).sqrt() < RANK_TOLERANCE {
            return Err(Error::NonIdentifiableDesign(format!(
                "design columns {:?} are collinear (condition number {:.3e})",
                self.layout.names,
                (max / min).sqrt()
            )));
        }
        Ok(())
    }

    fn initial_beta(&self) -> Vec<f64> {
        let total_c: f64 = self.counts.iter().sum();
        let total_n: f64 = self.offsets.iter().map(|o| o.exp()).sum();
        let base = if total_c > 0.0 { (total_c / total_n).ln() } else { 0.0 };
        let mut beta = vec![0.0; self.p];
        match self.layout.intercept_column {
            Some(c) => beta[c] = base,
            // Cell-means coding: every level column acts as an intercept.
            None => {
                for c in self.layout.level_columns.iter().flatten() {
                    beta[*c] = base;
                }
            }
        }
        beta
    }
}

fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedGlm {
    pub spec: ModelSpec,
    pub layout: DesignLayout,
    pub coefficients: Vec<f64>,
    pub log_likelihood: f64,
    /// Inverse observed information, row-major `p × p`.
    pub covariance: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
    pub n_obs: usize,
    pub corpus_fingerprint: u64,
}

impl FittedGlm {
    pub fn n_params(&self) -> usize {
        self.coefficients.len()
    }

    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.n_params())
            .map(|i| self.covariance[i][i].max(0.0).sqrt())
            .collect()
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        let p = self.n_params();
        DMatrix::from_fn(p, p, |a, b| self.covariance[a][b])
    }
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|a| (0..m.ncols()).map(|b| m[(a, b)]).collect())
        .collect()
}

/// Maximum-likelihood fit by Newton-Raphson with step halving.
///
/// Starts from zero coefficients with the intercept at `ln(ΣC/ΣN)`.
/// Converged means gradient max-norm `≤ 1e-8` and relative log-likelihood
/// change `≤ 1e-10` within 100 iterations.
pub fn fit_glm(corpus: &Corpus, spec: &ModelSpec) -> Result<FittedGlm> {
    let objective = GlmObjective::new(corpus, spec)?;
    objective.check_rank()?;
    let fingerprint = corpus_fingerprint(corpus);

    let mut beta = DVector::from_vec(objective.initial_beta());
    let (mut ll, mut grad, mut info) = objective.evaluate(beta.as_slice());
    let mut previous_ll: Option<f64> = None;
    let mut iterations = 0;
    let converged = loop {
        let small_gradient = max_abs(&grad) <= GRADIENT_TOLERANCE;
        let stable = previous_ll
            .is_none_or(|prev| (ll - prev).abs() <= RELATIVE_LOGLIK_TOLERANCE * ll.abs().max(1.0));
        if small_gradient && stable {
            break true;
        }
        if iterations >= MAX_ITERATIONS {
            break false;
        }
        iterations += 1;
        let Some(chol) = info.clone().cholesky() else {
            return Err(Error::NonIdentifiableDesign(
                "information matrix is not positive definite".into(),
            ));
        };
        let step = chol.solve(&grad);
        let mut t = 1.0;
        let (mut next_ll, mut next_grad, mut next_info);
        loop {
            let candidate = &beta + &step * t;
            (next_ll, next_grad, next_info) = objective.evaluate(candidate.as_slice());
            if next_ll.is_finite() && next_ll >= ll - 1e-12 * ll.abs().max(1.0) {
                beta = candidate;
                break;
            }
            t *= 0.5;
            if t < 1e-10 {
                beta = candidate;
                break;
            }
        }
        previous_ll = Some(ll);
        ll = next_ll;
        grad = next_grad;
        info = next_info;
    };
    if converged {
        // Newton converges quadratically, so one more step from a converged
        // point takes the coefficients to rounding level.
        if let Some(chol) = info.clone().cholesky() {
            let candidate = &beta + chol.solve(&grad);
            let (next_ll, next_grad, next_info) = objective.evaluate(candidate.as_slice());
            if next_ll.is_finite() && max_abs(&next_grad) < max_abs(&grad) {
                (beta, ll, grad, info) = (candidate, next_ll, next_grad, next_info);
            }
        }
    }

    let covariance = match info.clone().cholesky() {
        Some(chol) => chol.inverse(),
        None => {
            return Err(Error::NonIdentifiableDesign(
                "information matrix is singular at the optimum".into(),
            ))
        }
    };
    let fitted = FittedGlm {
        spec: spec.clone(),
        layout: objective.layout.clone(),
        coefficients: beta.as_slice().to_vec(),
        log_likelihood: ll,
        covariance: matrix_to_rows(&covariance),
        iterations,
        converged,
        n_obs: objective.n_obs(),
        corpus_fingerprint: fingerprint,
    };
    if !converged {
        return Err(Error::FailedToConverge {
            iterations,
            gradient_norm: max_abs(&grad),
            last: Some(Box::new(fitted)),
        });
    }
    Ok(fitted)
}

fn objective_for(fit: &FittedGlm, corpus: &Corpus) -> Result<GlmObjective> {
    let objective = GlmObjective::new(corpus, &fit.spec)?;
    if objective.layout != fit.layout {
        return Err(Error::DimensionMismatch(format!(
            "fit has columns {:?}, corpus yields {:?}",
            fit.layout.names, objective.layout.names
        )));
    }
    Ok(objective)
}

/// Exact Poisson log-likelihood of `corpus` under the fitted coefficients,
/// including the `-ln C!` terms.
pub fn log_likelihood(fit: &FittedGlm, corpus: &Corpus) -> Result<f64> {
    Ok(objective_for(fit, corpus)?.log_likelihood(&fit.coefficients))
}

/// Pearson `Σ (C - λ̂)² / λ̂` over residual degrees of freedom. Values well
/// above 1 indicate overdispersion.
pub fn dispersion(fit: &FittedGlm, corpus: &Corpus) -> Result<f64> {
    let objective = objective_for(fit, corpus)?;
    let rates = objective.fitted_rates(&fit.coefficients);
    let df = objective.n_obs().saturating_sub(objective.n_params());
    if df == 0 {
        return Err(Error::DimensionMismatch(
            "no residual degrees of freedom".into(),
        ));
    }
    let mut pearson = 0.0;
    for (i, (&c, &rate)) in objective.counts.iter().zip(&rates).enumerate() {
        if rate <= 0.0 {
            return Err(Error::ZeroFittedRate(i));
        }
        pearson += (c - rate).powi(2) / rate;
    }
    Ok(pearson / df as f64)
}
