//! WebAssembly bindings behind `www/index.html`. Each export takes plain
//! values and returns a JSON string; the `*_json` functions hold the logic
//! so native tests can call them without a JS host.

use asr_fairness::alignment::{align, tokenize};
use asr_fairness::glmm::{speaker_marginal_loglik, SpeakerBlock};
use asr_fairness::simulation::{run_experiment, ConfoundingConfig, ExperimentConfig, Method, SimConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct Score {
    insertions: u64,
    deletions: u64,
    substitutions: u64,
    ref_words: u64,
    wer: Option<f64>,
}

pub fn score_json(reference: &str, hypothesis: &str) -> Result<String, String> {
    let counts = align(&tokenize(reference, true), &tokenize(hypothesis, true));
    let wer = (counts.ref_words > 0).then(|| counts.total() as f64 / counts.ref_words as f64);
    let score = Score {
        insertions: counts.insertions,
        deletions: counts.deletions,
        substitutions: counts.substitutions,
        ref_words: counts.ref_words,
        wer,
    };
    serde_json::to_string(&score).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct MethodRow {
    method: Method,
    mean_ratio: Option<f64>,
    fp_rate: Option<f64>,
    completed: usize,
}

pub fn simulate_json(
    p_case: f64,
    p_control: f64,
    n_per_group: usize,
    reps: usize,
    seed: u64,
) -> Result<String, String> {
    let experiment = ExperimentConfig::Confounding(ConfoundingConfig {
        p_case,
        p_control,
        n_per_group,
        ..Default::default()
    });
    let mut config = SimConfig::new(experiment, vec![Method::Baseline, Method::Glm], reps, seed);
    // Keeps a run in the browser under a few seconds.
    config.bootstrap_replicates = 200;
    let report = run_experiment(&config).map_err(|e| e.to_string())?;
    let rows: Vec<MethodRow> = report
        .methods
        .iter()
        .map(|s| MethodRow {
            method: s.method,
            mean_ratio: s.mean_ratio,
            fp_rate: s.fp_rate,
            completed: s.completed,
        })
        .collect();
    serde_json::to_string(&rows).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Curve {
    sigma: Vec<f64>,
    laplace: Vec<f64>,
    quadrature: Vec<f64>,
}

fn parse_counts(text: &str) -> Result<Vec<u64>, String> {
    text.split([',', ' '])
        .filter(|s| !s.is_empty())
        .map(|s| s.trim().parse().map_err(|_| format!("not a count: {s:?}")))
        .collect()
}

/// Marginal log-likelihood of one speaker over a σ grid, by the 1-node
/// (Laplace) rule and by 15-node adaptive quadrature.
pub fn marginal_curve_json(errors: &str, words: &str, base_wer: f64, points: usize) -> Result<String, String> {
    let errors = parse_counts(errors)?;
    let words = parse_counts(words)?;
    if errors.len() != words.len() {
        return Err(format!("{} error counts but {} word counts", errors.len(), words.len()));
    }
    if !(base_wer > 0.0) {
        return Err("base WER must be positive".into());
    }
    let block = SpeakerBlock::new(&vec![vec![1.0]; errors.len()], &errors, &words).map_err(|e| e.to_string())?;
    let beta = [base_wer.ln()];
    let points = points.clamp(2, 400);
    let mut curve = Curve { sigma: vec![], laplace: vec![], quadrature: vec![] };
    for k in 0..points {
        let sigma = 2.0 * k as f64 / (points - 1) as f64;
        let at = |nodes| speaker_marginal_loglik(&block, &beta, sigma, nodes).map_err(|e| e.to_string());
        curve.sigma.push(sigma);
        curve.laplace.push(at(1)?);
        curve.quadrature.push(at(15)?);
    }
    serde_json::to_string(&curve).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn score(reference: &str, hypothesis: &str) -> Result<String, JsError> {
    score_json(reference, hypothesis).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn simulate(p_case: f64, p_control: f64, n_per_group: usize, reps: usize, seed: u64) -> Result<String, JsError> {
    simulate_json(p_case, p_control, n_per_group, reps, seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn marginal_curve(errors: &str, words: &str, base_wer: f64, points: usize) -> Result<String, JsError> {
    marginal_curve_json(errors, words, base_wer, points).map_err(|e| JsError::new(&e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    #[test]
    fn score_counts_edits() {
        let v: Value = serde_json::from_str(&score_json("turn the lights off", "turn lights of").unwrap()).unwrap();
        assert_eq!(v["deletions"], 1);
        assert_eq!(v["substitutions"], 1);
        assert_eq!(v["wer"], 0.5);
        let empty: Value = serde_json::from_str(&score_json("", "uh").unwrap()).unwrap();
        assert!(empty["wer"].is_null());
    }

    #[test]
    fn simulate_reports_both_methods() {
        let v: Value = serde_json::from_str(&simulate_json(0.9, 0.1, 300, 2, 1).unwrap()).unwrap();
        let rows = v.as_array().unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0]["method"], "baseline");
        assert_eq!(rows[1]["completed"], 2);
        assert!(simulate_json(1.5, 0.1, 300, 2, 1).is_err());
    }

    #[test]
    fn curve_starts_at_poisson_and_rules_agree_at_zero() {
        let v: Value = serde_json::from_str(&marginal_curve_json("1, 0, 2", "10 8 12", 0.05, 5).unwrap()).unwrap();
        let q = v["quadrature"].as_array().unwrap();
        let l = v["laplace"].as_array().unwrap();
        assert_eq!(q.len(), 5);
        assert_eq!(q[0], l[0]);
        assert!(marginal_curve_json("1,2", "3", 0.05, 5).is_err());
        assert!(marginal_curve_json("x", "3", 0.05, 5).is_err());
    }
}
