use asr_fairness::dataset::{Corpus, GroupFactor, Utterance};
use asr_fairness::glm::{fit_glm, ModelSpec};
use asr_fairness::inference::{baseline_ratio, lrt, model_ratio, RatioEstimate, RatioMethod};
use asr_fairness::rng::StreamRng;
use asr_fairness::special::chi_square_sf;
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn three_level_corpus(seed: u64, n: usize) -> Corpus {
    let mut rng = StreamRng::from_seed(seed);
    let factor = GroupFactor::new("dialect", vec!["north".into(), "south".into(), "west".into()], 0).unwrap();
    let utts = (0..n)
        .map(|i| {
            let level = i % 3;
            let words = 3 + rng.below(20);
            let x = rng.standard_normal();
            Utterance {
                id: format!("u{i}"),
                speaker: format!("s{i}"),
                level,
                errors: rng.poisson(words as f64 * (-2.0 + 0.15 * level as f64 + 0.2 * x).exp()),
                ref_words: words,
                covariates: vec![x],
            }
        })
        .collect();
    Corpus::new(factor, vec!["x".into()], utts).unwrap()
}

fn empirical_wer(c: &Corpus, level: usize) -> f64 {
    let (e, w) = c
        .utterances()
        .iter()
        .filter(|u| u.level == level)
        .fold((0u64, 0u64), |(e, w), u| (e + u.errors, w + u.ref_words));
    e as f64 / w as f64
}

#[test]
fn chi_square_tail_matches_reference_implementation() {
    for df in 1..=20usize {
        let reference = ChiSquared::new(df as f64).unwrap();
        for &x in &[0.01, 0.5, 1.0, 2.5, 3.84, 7.0, 15.0, 30.0, 60.0] {
            let ours = chi_square_sf(x, df);
            let theirs = reference.sf(x);
            assert!((ours - theirs).abs() <= 1e-10, "df={df} x={x}: {ours} vs {theirs}");
        }
    }
}

#[test]
fn factor_only_glm_reproduces_empirical_ratio() {
    let c = three_level_corpus(4, 300);
    let fit = fit_glm(&c, &ModelSpec::factor_only()).unwrap();
    let base = baseline_ratio(&c, "west", "south", 200, 1).unwrap();
    let model = model_ratio(&fit, "west", "south", 0.95).unwrap();
    let empirical = empirical_wer(&c, 2) / empirical_wer(&c, 1);
    assert!((model.ratio - base.ratio).abs() <= 1e-10);
    assert!((base.ratio - empirical).abs() <= 1e-15 * empirical);
    assert_eq!(model.method, RatioMethod::WaldLogScale);
    assert!(model.ci_low <= model.ratio && model.ratio <= model.ci_high);
}

#[test]
fn baseline_is_bit_reproducible() {
    let c = three_level_corpus(6, 150);
    let a = baseline_ratio(&c, "south", "north", 300, 99).unwrap();
    let b = baseline_ratio(&c, "south", "north", 300, 99).unwrap();
    assert_eq!(a, b);
    let other = baseline_ratio(&c, "south", "north", 300, 100).unwrap();
    assert_eq!(a.ratio, other.ratio);
    assert_ne!((a.ci_low, a.ci_high), (other.ci_low, other.ci_high));
}

#[test]
fn swapping_roles_inverts_the_estimate() {
    let c = three_level_corpus(7, 240);
    let fwd = baseline_ratio(&c, "south", "north", 500, 5).unwrap();
    let back = baseline_ratio(&c, "north", "south", 500, 5).unwrap();
    assert!((fwd.ratio * back.ratio - 1.0).abs() < 1e-14);
    assert!((fwd.ci_low * back.ci_high - 1.0).abs() < 1e-14);
    assert!((fwd.ci_high * back.ci_low - 1.0).abs() < 1e-14);
}

#[test]
fn model_ratio_ignores_reference_level() {
    let c = three_level_corpus(8, 300);
    let spec = ModelSpec::factor_only().with_covariates(["x"]);
    let a = fit_glm(&c, &spec).unwrap();
    for reference in ["south", "west"] {
        let b = fit_glm(&c.with_reference_level(reference).unwrap(), &spec).unwrap();
        for (case, control) in [("west", "south"), ("south", "north"), ("north", "west")] {
            let ra = model_ratio(&a, case, control, 0.95).unwrap();
            let rb = model_ratio(&b, case, control, 0.95).unwrap();
            assert!((ra.ratio - rb.ratio).abs() < 1e-8 * ra.ratio);
            assert!((ra.ci_low - rb.ci_low).abs() < 1e-7 * ra.ratio);
            assert!((ra.ci_high - rb.ci_high).abs() < 1e-7 * ra.ratio);
        }
    }
}

#[test]
fn lrt_counts_parameters() {
    let c = three_level_corpus(9, 300);
    let full = fit_glm(&c, &ModelSpec::factor_only().with_covariates(["x"])).unwrap();
    let reduced = fit_glm(&c, &ModelSpec::intercept_only().with_covariates(["x"])).unwrap();
    let t = lrt(&full, &reduced).unwrap();
    assert_eq!(t.df, 2);
    assert!(t.statistic >= 0.0 && (0.0..=1.0).contains(&t.p_value));
    assert_eq!(t.significant_at_05, t.p_value < 0.05);
}

#[test]
fn lrt_rejection_rate_under_null_is_nominal() {
    // 400 null corpora: the rejection count must fall in the exact binomial
    // 99% interval around 5%, which is [10, 32] for n = 400.
    let rejections = (0..400)
        .filter(|&s| {
            let mut rng = StreamRng::from_seed(5000 + s);
            let factor = GroupFactor::new("g", vec!["a".into(), "b".into()], 0).unwrap();
            let utts = (0..200)
                .map(|i| Utterance {
                    id: format!("{i}"),
                    speaker: format!("{i}"),
                    level: i % 2,
                    errors: rng.poisson(0.5),
                    ref_words: 10,
                    covariates: vec![],
                })
                .collect();
            let c = Corpus::new(factor, vec![], utts).unwrap();
            let full = fit_glm(&c, &ModelSpec::factor_only()).unwrap();
            let reduced = fit_glm(&c, &ModelSpec::intercept_only()).unwrap();
            lrt(&full, &reduced).unwrap().significant_at_05
        })
        .count();
    assert!((10..=32).contains(&rejections), "{rejections} rejections");
}

#[test]
fn published_format_fixture() {
    // The ratio/interval rendering used for the real-data tables.
    let est = RatioEstimate {
        ratio: 0.86,
        ci_low: 0.76,
        ci_high: 0.97,
        level: 0.95,
        method: RatioMethod::BootstrapPercentile,
        flagged: false,
        redraws: 0,
    };
    assert_eq!(format!("{:.2} ({:.2}, {:.2})", est.ratio, est.ci_low, est.ci_high), "0.86 (0.76, 0.97)");
    assert!(est.significant());
    let json = serde_json::to_value(&est).unwrap();
    assert_eq!(json["method"], "bootstrap-percentile");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn wald_interval_covers_point(seed in 0u64..5000) {
        let c = three_level_corpus(seed, 90);
        if let Ok(fit) = fit_glm(&c, &ModelSpec::factor_only()) {
            let r = model_ratio(&fit, "south", "west", 0.9).unwrap();
            prop_assert!(r.ci_low <= r.ratio && r.ratio <= r.ci_high);
            prop_assert!(r.ratio > 0.0);
        }
    }

    #[test]
    fn lrt_statistic_is_never_negative(seed in 0u64..5000) {
        let c = three_level_corpus(seed, 60);
        if let (Ok(full), Ok(reduced)) = (
            fit_glm(&c, &ModelSpec::factor_only().with_covariates(["x"])),
            fit_glm(&c, &ModelSpec::factor_only()),
        ) {
            let t = lrt(&full, &reduced).unwrap();
            prop_assert!(t.statistic >= 0.0);
            prop_assert!((0.0..=1.0).contains(&t.p_value));
        }
    }
}
