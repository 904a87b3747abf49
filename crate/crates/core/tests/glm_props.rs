use asr_fairness::dataset::{Corpus, GroupFactor, Utterance};
use asr_fairness::glm::{dispersion, fit_glm, log_likelihood, GlmObjective, ModelSpec};
use asr_fairness::rng::StreamRng;
use asr_fairness::simulation::{gen_confounding, ConfoundingConfig};
use asr_fairness::special::ln_factorial;
use proptest::prelude::*;

fn random_corpus(seed: u64, n: usize, levels: usize) -> Corpus {
    let mut rng = StreamRng::from_seed(seed);
    let labels = (0..levels).map(|l| format!("g{l}")).collect();
    let factor = GroupFactor::new("grp", labels, 0).unwrap();
    let utts = (0..n)
        .map(|i| {
            let level = i % levels;
            let words = 1 + rng.below(25);
            let x = rng.normal(0.0, 1.0);
            let rate = words as f64 * (-2.5 + 0.2 * level as f64 + 0.3 * x).exp();
            Utterance {
                id: format!("u{i}"),
                speaker: format!("s{i}"),
                level,
                errors: rng.poisson(rate),
                ref_words: words,
                covariates: vec![x],
            }
        })
        .collect();
    Corpus::new(factor, vec!["x".into()], utts).unwrap()
}

/// Poisson log-likelihood written out directly from the rows.
fn oracle_loglik(corpus: &Corpus, rate_of: impl Fn(&Utterance) -> f64) -> f64 {
    corpus
        .utterances()
        .iter()
        .map(|u| {
            let lambda = u.ref_words as f64 * rate_of(u);
            u.errors as f64 * lambda.ln() - lambda - ln_factorial(u.errors)
        })
        .sum()
}

#[test]
fn loglik_matches_direct_sum() {
    let c = random_corpus(1, 80, 3);
    let spec = ModelSpec::factor_only().with_covariates(["x"]);
    let fit = fit_glm(&c, &spec).unwrap();
    let b = &fit.coefficients;
    let direct = oracle_loglik(&c, |u| {
        let level = if u.level == 0 { 0.0 } else { b[u.level] };
        (b[0] + level + b[3] * u.covariates[0]).exp()
    });
    assert!((fit.log_likelihood - direct).abs() < 1e-9 * direct.abs());
    assert_eq!(log_likelihood(&fit, &c).unwrap(), fit.log_likelihood);
}

#[test]
fn fitted_point_is_a_local_maximum() {
    let c = random_corpus(2, 120, 2);
    let spec = ModelSpec::factor_only().with_covariates(["x"]);
    let fit = fit_glm(&c, &spec).unwrap();
    let obj = GlmObjective::new(&c, &spec).unwrap();
    let best = obj.log_likelihood(&fit.coefficients);
    let mut rng = StreamRng::from_seed(9);
    for _ in 0..50 {
        let nudged: Vec<f64> = fit.coefficients.iter().map(|b| b + 1e-3 * rng.standard_normal()).collect();
        assert!(obj.log_likelihood(&nudged) < best);
    }
}

#[test]
fn grid_search_recovers_confounder_effect() {
    // Grid refinement over a 100-utterance subsample, against the
    // log-likelihood written out by hand.
    let full = gen_confounding(&ConfoundingConfig::default(), 17).unwrap();
    let rows: Vec<Utterance> = full.utterances().iter().step_by(100).cloned().collect();
    let sub = Corpus::new(full.factor().clone(), full.covariate_names().to_vec(), rows).unwrap();
    let spec = ModelSpec::factor_only().with_covariates(["confounder"]);
    let fit = fit_glm(&sub, &spec).unwrap();
    let ll = |b: &[f64; 3]| {
        oracle_loglik(&sub, |u| (b[0] + b[1] * u.level as f64 + b[2] * u.covariates[0]).exp())
    };
    let mut best = [(0.05f64).ln(), 0.0, 0.0];
    let mut width = 2.0;
    for _ in 0..60 {
        let mut improved = best;
        let mut improved_ll = ll(&best);
        for i in 0..3 {
            for k in -10..=10 {
                let mut cand = best;
                cand[i] += width * k as f64 / 10.0;
                let v = ll(&cand);
                if v > improved_ll {
                    improved_ll = v;
                    improved = cand;
                }
            }
        }
        if improved == best {
            width *= 0.5;
        }
        best = improved;
    }
    for (a, b) in fit.coefficients.iter().zip(&best) {
        assert!((a - b).abs() < 1e-4, "{:?} vs {:?}", fit.coefficients, best);
    }

    let fit_all = fit_glm(&full, &spec).unwrap();
    assert!((fit_all.coefficients[1].exp() - 1.0).abs() < 0.1);
    assert!((fit_all.coefficients[2] - 0.1).abs() < 0.1);
}

#[test]
fn dispersion_near_one_for_poisson_data() {
    // The Pearson statistic over n − p has mean 1 and sd about √(2/n) for
    // Poisson data; the average over 20 corpora sits well inside ±0.05.
    let mean: f64 = (0..20)
        .map(|s| {
            let c = random_corpus(100 + s, 2000, 2);
            let fit = fit_glm(&c, &ModelSpec::factor_only().with_covariates(["x"])).unwrap();
            dispersion(&fit, &c).unwrap()
        })
        .sum::<f64>()
        / 20.0;
    assert!((mean - 1.0).abs() < 0.05, "mean dispersion {mean}");
}

#[test]
fn nested_models_order_likelihoods() {
    let c = random_corpus(5, 200, 3);
    let small = fit_glm(&c, &ModelSpec::intercept_only()).unwrap();
    let mid = fit_glm(&c, &ModelSpec::factor_only()).unwrap();
    let big = fit_glm(&c, &ModelSpec::factor_only().with_covariates(["x"])).unwrap();
    assert!(small.log_likelihood <= mid.log_likelihood + 1e-9);
    assert!(mid.log_likelihood <= big.log_likelihood + 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn intercept_only_is_pooled_rate(seed in 0u64..10_000, n in 2usize..60) {
        let c = random_corpus(seed, n, 2);
        let errors: u64 = c.utterances().iter().map(|u| u.errors).sum();
        prop_assume!(errors > 0);
        let words: u64 = c.utterances().iter().map(|u| u.ref_words).sum();
        let fit = fit_glm(&c, &ModelSpec::intercept_only()).unwrap();
        let pooled = errors as f64 / words as f64;
        prop_assert!((fit.coefficients[0].exp() - pooled).abs() <= 1e-10 * pooled.max(1.0));
    }

    #[test]
    fn gradient_matches_central_differences(seed in 0u64..10_000) {
        let c = random_corpus(seed, 40, 3);
        let spec = ModelSpec::factor_only().with_covariates(["x"]);
        let obj = GlmObjective::new(&c, &spec).unwrap();
        let mut rng = StreamRng::from_seed(seed ^ 0xabc);
        let beta: Vec<f64> = (0..obj.n_params()).map(|_| rng.normal(-1.0, 0.5)).collect();
        let g = obj.gradient(&beta);
        for i in 0..beta.len() {
            let h = 1e-5;
            let mut up = beta.clone();
            up[i] += h;
            let mut down = beta.clone();
            down[i] -= h;
            let fd = (obj.log_likelihood(&up) - obj.log_likelihood(&down)) / (2.0 * h);
            prop_assert!((g[i] - fd).abs() <= 1e-4 * g[i].abs().max(1.0), "{} vs {}", g[i], fd);
        }
    }

    #[test]
    fn rescaling_exposure_moves_only_the_intercept(seed in 0u64..10_000, scale in 2u64..6) {
        let c = random_corpus(seed, 60, 2);
        let scaled_rows: Vec<Utterance> = c
            .utterances()
            .iter()
            .map(|u| Utterance { ref_words: u.ref_words * scale, ..u.clone() })
            .collect();
        let scaled = Corpus::new(c.factor().clone(), c.covariate_names().to_vec(), scaled_rows).unwrap();
        let spec = ModelSpec::factor_only().with_covariates(["x"]);
        let (Ok(a), Ok(b)) = (fit_glm(&c, &spec), fit_glm(&scaled, &spec)) else {
            return Ok(());
        };
        prop_assert!((b.coefficients[0] - (a.coefficients[0] - (scale as f64).ln())).abs() < 1e-8);
        prop_assert!((b.coefficients[1].exp() - a.coefficients[1].exp()).abs() < 1e-8);
        prop_assert!((b.coefficients[2] - a.coefficients[2]).abs() < 1e-8);
    }

    #[test]
    fn row_order_does_not_change_the_fit(seed in 0u64..10_000) {
        let c = random_corpus(seed, 50, 3);
        let mut rows = c.utterances().to_vec();
        let mut rng = StreamRng::from_seed(seed);
        for i in (1..rows.len()).rev() {
            rows.swap(i, rng.below(i as u64 + 1) as usize);
        }
        let shuffled = Corpus::new(c.factor().clone(), c.covariate_names().to_vec(), rows).unwrap();
        let spec = ModelSpec::factor_only().with_covariates(["x"]);
        let a = fit_glm(&c, &spec);
        let b = fit_glm(&shuffled, &spec);
        if let (Ok(a), Ok(b)) = (a, b) {
            prop_assert_eq!(a.coefficients, b.coefficients);
            prop_assert_eq!(a.log_likelihood.to_bits(), b.log_likelihood.to_bits());
        }
    }
}
