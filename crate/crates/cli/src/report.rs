//! Report documents and their plain-text renderings. Tables are drawn from
//! the report values only, never recomputed.

use std::collections::BTreeMap;
use std::fmt::Write;

use asr_fairness::dataset::CorpusSummary;
use asr_fairness::inference::{RatioEstimate, TestResult};
use asr_fairness::simulation::{Method, SimReport};
use serde::Serialize;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize)]
pub struct WerReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub input: String,
    pub factor: String,
    pub normalize: bool,
    pub summary: CorpusSummary,
    pub insertions: u64,
    pub deletions: u64,
    pub substitutions: u64,
    /// Records dropped for an empty reference.
    pub excluded: usize,
}

#[derive(Debug, Serialize)]
pub struct AnalysisConfig {
    pub input: String,
    pub factor: String,
    pub normalize: bool,
    pub case: String,
    pub control: String,
    pub reference: String,
    pub methods: Vec<Method>,
    pub covariates: Vec<String>,
    pub nodes: usize,
    pub bootstrap: usize,
    pub level: f64,
    pub seed: u64,
}

#[derive(Debug, Serialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
}

impl Coefficient {
    pub fn table(names: &[String], estimates: &[f64], errors: &[f64]) -> Vec<Self> {
        names
            .iter()
            .zip(estimates)
            .zip(errors)
            .map(|((n, &estimate), &std_error)| Coefficient {
                name: n.clone(),
                estimate,
                std_error,
            })
            .collect()
    }
}

#[derive(Debug, Serialize)]
pub struct MethodResult {
    pub method: Method,
    pub ratio: RatioEstimate,
    /// Test of the group factor against the model without it.
    pub lrt: Option<TestResult>,
    pub coefficients: Option<Vec<Coefficient>>,
    pub log_likelihood: Option<f64>,
    pub sigma: Option<f64>,
    pub boundary: Option<bool>,
    pub conditional_modes: Option<BTreeMap<String, f64>>,
}

impl MethodResult {
    pub fn baseline(ratio: RatioEstimate) -> Self {
        Self {
            method: Method::Baseline,
            ratio,
            lrt: None,
            coefficients: None,
            log_likelihood: None,
            sigma: None,
            boundary: None,
            conditional_modes: None,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct AnalysisReport {
    pub schema_version: u32,
    pub tool_version: String,
    pub seed: u64,
    pub config: AnalysisConfig,
    pub corpus: CorpusSummary,
    pub excluded: usize,
    pub results: Vec<MethodResult>,
}

#[derive(Debug, Serialize)]
pub struct SimulationReport {
    pub schema_version: u32,
    pub tool_version: String,
    #[serde(flatten)]
    pub report: SimReport,
}

fn summary_table(out: &mut String, summary: &CorpusSummary) {
    let _ = writeln!(
        out,
        "{:<16} {:>10} {:>9} {:>9} {:>8} {:>8}",
        summary.factor, "utterances", "speakers", "words", "errors", "WER"
    );
    for row in summary.levels.iter().chain(std::iter::once(&summary.total)) {
        let _ = writeln!(
            out,
            "{:<16} {:>10} {:>9} {:>9} {:>8} {:>8.4}",
            row.level, row.utterances, row.speakers, row.words, row.errors, row.wer
        );
    }
}

pub fn render_wer(r: &WerReport) -> String {
    let mut out = String::new();
    summary_table(&mut out, &r.summary);
    let _ = writeln!(
        out,
        "\ninsertions {}  deletions {}  substitutions {}",
        r.insertions, r.deletions, r.substitutions
    );
    let _ = writeln!(out, "excluded (empty reference): {}", r.excluded);
    out
}

fn ci(r: &RatioEstimate) -> String {
    format!("{:.3} ({:.3}, {:.3})", r.ratio, r.ci_low, r.ci_high)
}

pub fn render_analysis(r: &AnalysisReport) -> String {
    let mut out = String::new();
    summary_table(&mut out, &r.corpus);
    if r.excluded > 0 {
        let _ = writeln!(out, "excluded (empty reference): {}", r.excluded);
    }
    let _ = writeln!(
        out,
        "\nWER ratio {} / {}, {:.0}% interval",
        r.config.case,
        r.config.control,
        100.0 * r.config.level
    );
    let _ = writeln!(out, "{:<10} {:<30} {:>12} {:>10}", "method", "ratio (CI)", "LRT stat", "p-value");
    for m in &r.results {
        let (stat, p) = m
            .lrt
            .as_ref()
            .map(|t| (format!("{:.3}", t.statistic), format!("{:.4}", t.p_value)))
            .unwrap_or_else(|| ("-".into(), "-".into()));
        let flag = if m.ratio.significant() { " *" } else { "" };
        let _ = writeln!(out, "{:<10} {:<30} {:>12} {:>10}", m.method, ci(&m.ratio) + flag, stat, p);
    }
    for m in &r.results {
        if let Some(coefs) = &m.coefficients {
            let _ = writeln!(out, "\n{} coefficients", m.method);
            for c in coefs {
                let _ = writeln!(out, "  {:<28} {:>10.4} {:>10.4}", c.name, c.estimate, c.std_error);
            }
            if let Some(s) = m.sigma {
                let note = if m.boundary == Some(true) { " (boundary)" } else { "" };
                let _ = writeln!(out, "  {:<28} {:>10.4}{note}", "speaker sd", s);
            }
        }
    }
    out
}

pub fn render_simulation(r: &SimulationReport) -> String {
    let mut out = String::new();
    let rep = &r.report;
    let _ = writeln!(out, "{} replications, seed {}", rep.replications, rep.seed);
    let _ = writeln!(
        out,
        "{:<10} {:>11} {:>16} {:>10} {:>8}",
        "method", "mean ratio", "false positive", "completed", "failed"
    );
    for s in &rep.methods {
        let mean = s.mean_ratio.map_or("-".into(), |v| format!("{v:.3}"));
        let fp = s.fp_rate.map_or("-".into(), |v| format!("{:.1}%", 100.0 * v));
        let _ = writeln!(
            out,
            "{:<10} {:>11} {:>16} {:>10} {:>8}",
            s.method, mean, fp, s.completed, s.failures
        );
    }
    out
}
