use proptest::prelude::*;

use hajek::covadj::{fit_adjusted, IndividualData, IndividualObs};
use hajek::estimators::{fixed_effects, hajek as hajek_fit, horvitz_thompson, ikn};
use hajek::experiment::{kish_ess, observe, sate, ExperimentData, PotentialRow, PotentialTable, StratumLayout};
use hajek::inference::{score_ci, score_test, std_normal_quantile, wald_ci, Df};
use hajek::linalg::{wls, Collinearity, Design};
use hajek::randomize::{assign_within_strata, count_assignments, enumerate_assignments, Seed};
use hajek::simulate::{estimator_comparison_on, osnap_impute_constant_total, replicate_pairs, Mode, OSNAP_SITE_EFFECT};
use hajek::variance::{gamma_all, nu_small, nu_small_alt, variance_estimate, Policy};
use hajek::datasets;

const CAP: u128 = 1 << 20;

fn unit() -> impl Strategy<Value = (f64, f64, f64)> {
    (0.5f64..50.0, -5.0f64..5.0, -5.0f64..5.0)
}

/// Strata of 2 to 6 units with arbitrary weights and potential outcomes.
fn table() -> impl Strategy<Value = PotentialTable> {
    prop::collection::vec(prop::collection::vec(unit(), 2..=6), 1..=4).prop_map(|strata| {
        let rows = strata
            .iter()
            .enumerate()
            .flat_map(|(b, units)| {
                units
                    .iter()
                    .enumerate()
                    .map(move |(j, &(w, y0, y1))| PotentialRow::new(format!("s{b}"), format!("c{j}"), w, y0, y1))
            })
            .collect();
        PotentialTable::new(rows).unwrap()
    })
}

/// Pairs whose two units share one weight.
fn equal_weight_pairs() -> impl Strategy<Value = PotentialTable> {
    prop::collection::vec((0.5f64..50.0, -5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 1..=6).prop_map(
        |pairs| {
            let rows = pairs
                .iter()
                .enumerate()
                .flat_map(|(b, &(w, a0, a1, b0, b1))| {
                    [
                        PotentialRow::new(format!("p{b}"), "u0", w, a0, a1),
                        PotentialRow::new(format!("p{b}"), "u1", w, b0, b1),
                    ]
                })
                .collect();
            PotentialTable::new(rows).unwrap()
        },
    )
}

/// Treats `1 + (b mod (n − 1))` units of stratum `b`.
fn layouts(t: &PotentialTable) -> Vec<StratumLayout> {
    t.layouts(|b, n| 1 + b % (n - 1)).unwrap()
}

fn observed(t: &PotentialTable, seed: u64) -> ExperimentData {
    let l = layouts(t);
    observe(t, &assign_within_strata(&l, Seed(seed), 0)).unwrap()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn sate_rescale_invariant(t in table(), c in 0.01f64..100.0) {
        let a = sate(&t).unwrap();
        let b = sate(&t.rescaled(c)).unwrap();
        prop_assert!(rel(a.tau, b.tau) < 1e-12);
        prop_assert!(rel(a.rho1, b.rho1) < 1e-12);
    }

    #[test]
    fn kish_at_most_n(t in table(), seed in any::<u64>()) {
        let d = observed(&t, seed);
        let n = d.n_units() as f64;
        prop_assert!(kish_ess(&d).unwrap() <= n * (1.0 + 1e-12));
        let flat = observe(&t.rescaled(1.0), &assign_within_strata(&layouts(&t), Seed(seed), 0)).unwrap();
        prop_assert_eq!(flat, d);
    }

    #[test]
    fn kish_equals_n_for_equal_weights(n in 2usize..30, w in 0.1f64..100.0) {
        let rows = (0..n).map(|i| PotentialRow::new("s", format!("c{i}"), w, 0.0, 1.0)).collect();
        let t = PotentialTable::new(rows).unwrap();
        let d = observed(&t, 1);
        prop_assert!((kish_ess(&d).unwrap() - n as f64).abs() < 1e-9);
    }

    #[test]
    fn equal_weight_pairs_agree(t in equal_weight_pairs()) {
        let l = t.balanced_layouts().unwrap();
        for z in enumerate_assignments(&l, CAP).unwrap() {
            let d = observe(&t, &z).unwrap();
            let h = hajek_fit(&d).unwrap().tau_hat;
            prop_assert!(rel(h, ikn(&d).unwrap()) < 1e-10);
            prop_assert!(rel(h, fixed_effects(&d).unwrap()) < 1e-10);
        }
    }

    #[test]
    fn hajek_is_wls_coefficient(t in table(), seed in any::<u64>()) {
        let d = observed(&t, seed);
        let mut x = Design::new(2);
        let mut y = Vec::new();
        let mut w = Vec::new();
        for (i, u) in d.units().iter().enumerate() {
            x.push_row(&[1.0, if u.treated { 1.0 } else { 0.0 }]);
            y.push(u.y);
            w.push(u.weight / d.pi_observed(i));
        }
        let fit = wls(&x, &y, &w, Collinearity::Fail).unwrap();
        prop_assert!(rel(fit.coef[1], hajek_fit(&d).unwrap().tau_hat) < 1e-10);
    }

    #[test]
    fn horvitz_thompson_unbiased(t in table()) {
        let l = layouts(&t);
        let (mut sum, mut count) = (0.0, 0.0);
        for z in enumerate_assignments(&l, CAP).unwrap() {
            sum += horvitz_thompson(&observe(&t, &z).unwrap()).unwrap();
            count += 1.0;
        }
        prop_assert!((sum / count - sate(&t).unwrap().tau).abs() < 1e-12);
    }

    #[test]
    fn estimators_rescale_invariant(t in table(), seed in any::<u64>(), c in 0.01f64..100.0) {
        let d = observed(&t, seed);
        let e = d.rescaled(c).unwrap();
        prop_assert!(rel(hajek_fit(&d).unwrap().tau_hat, hajek_fit(&e).unwrap().tau_hat) < 1e-10);
        prop_assert!(rel(ikn(&d).unwrap(), ikn(&e).unwrap()) < 1e-10);
        prop_assert!(rel(fixed_effects(&d).unwrap(), fixed_effects(&e).unwrap()) < 1e-10);
        prop_assert!(rel(horvitz_thompson(&d).unwrap(), horvitz_thompson(&e).unwrap()) < 1e-10);
    }

    #[test]
    fn nu_small_nonnegative_with_singleton(a in -1e3f64..1e3, rest in prop::collection::vec(-1e3f64..1e3, 1..10), flip in any::<bool>()) {
        let single = [a];
        let v = if flip { nu_small(&single, &rest) } else { nu_small(&rest, &single) };
        prop_assert!(v >= 0.0);
    }

    #[test]
    fn nu_small_forms_agree(t in prop::collection::vec(-1e3f64..1e3, 1..10), c in prop::collection::vec(-1e3f64..1e3, 1..10)) {
        let a = nu_small(&t, &c);
        let b = nu_small_alt(&t, &c);
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(b.abs()) || a == b, "{a} vs {b}");
    }

    #[test]
    fn auto_variance_nonnegative(t in table(), seed in any::<u64>()) {
        let d = observed(&t, seed);
        let h = hajek_fit(&d).unwrap();
        let v = variance_estimate(&d, h.rho1_hat, h.rho0_hat, Policy::Auto).unwrap();
        // the small-stratum form is a difference of O(γ²) terms evaluated
        // with ~32 digits, so its sign is only resolved down to ~1e-30·Σγ²
        let g2: f64 = gamma_all(&d, h.rho1_hat, h.rho0_hat).iter().map(|g| g * g).sum();
        let floor = 1e-24 * g2;
        prop_assert!(v.v_hat >= -floor / d.total_weight().powi(2), "{}", v.v_hat);
        prop_assert!(v.per_stratum.iter().all(|s| s.nu >= -floor));
    }

    #[test]
    fn score_ci_duality(t in table(), seed in any::<u64>(), alpha in 0.01f64..0.3) {
        let d = observed(&t, seed);
        let ci = score_ci(&d, alpha).unwrap();
        let z = std_normal_quantile(1.0 - alpha / 2.0).unwrap();
        for bound in [ci.lo, ci.hi] {
            if bound.is_finite() {
                let s = score_test(&d, bound, alpha).unwrap().statistic;
                prop_assert!((s - z).abs() < 1e-6, "|t| at {bound} is {s}, want {z}");
            }
        }
        if ci.lo.is_finite() && ci.hi.is_finite() && !ci.flags.non_interval_region {
            for f in [0.1, 0.5, 0.9] {
                let inner = ci.lo + f * (ci.hi - ci.lo);
                prop_assert!(!score_test(&d, inner, alpha).unwrap().reject);
            }
        }
    }

    #[test]
    fn score_invariances(t in table(), seed in any::<u64>(), c in 0.01f64..100.0, shift in -10.0f64..10.0, tau0 in -3.0f64..3.0) {
        let d = observed(&t, seed);
        let base = score_test(&d, tau0, 0.05).unwrap().statistic;
        let scaled = score_test(&d.rescaled(c).unwrap(), tau0, 0.05).unwrap().statistic;
        let moved = score_test(&d.shifted(shift).unwrap(), tau0, 0.05).unwrap().statistic;
        prop_assert!(rel(base, scaled) < 1e-8);
        prop_assert!(rel(base, moved) < 1e-8);
    }

    #[test]
    fn p_values_monotone(t in table(), seed in any::<u64>()) {
        let d = observed(&t, seed);
        let mut tests: Vec<_> = (-40..=40).map(|k| score_test(&d, k as f64 * 0.1, 0.05).unwrap()).collect();
        prop_assert!(tests.iter().all(|r| (0.0..=1.0).contains(&r.p_value)));
        tests.sort_by(|a, b| a.statistic.total_cmp(&b.statistic));
        prop_assert!(tests.windows(2).all(|w| w[1].p_value <= w[0].p_value));
    }

    #[test]
    fn affine_covariates_leave_estimate(seed in any::<u64>(), a in prop::array::uniform4(-3.0f64..3.0), c in prop::array::uniform2(-10.0f64..10.0)) {
        let det = a[0] * a[3] - a[1] * a[2];
        prop_assume!(det.abs() > 0.1);
        let d = individual(seed, false);
        let moved: Vec<IndividualObs> = d
            .records()
            .iter()
            .map(|r| IndividualObs {
                x: vec![a[0] * r.x[0] + a[1] * r.x[1] + c[0], a[2] * r.x[0] + a[3] * r.x[1] + c[1]],
                ..r.clone()
            })
            .collect();
        let e = IndividualData::new(moved).unwrap();
        prop_assert!(rel(fit_adjusted(&d).unwrap().tau_adj, fit_adjusted(&e).unwrap().tau_adj) < 1e-8);
    }

    #[test]
    fn dropped_covariate_changes_nothing(seed in any::<u64>()) {
        let d = individual(seed, true);
        let fit = fit_adjusted(&d).unwrap();
        prop_assert_eq!(&fit.dropped, &vec![2]);
        prop_assert_eq!(fit.beta_hat[2], 0.0);
        let kept = fit_adjusted(&d.select_covariates(&[0, 1]).unwrap()).unwrap();
        prop_assert!((kept.tau_adj - fit.tau_adj).abs() < 1e-10);
    }

    #[test]
    fn enumeration_is_uniform(t in table()) {
        let l = layouts(&t);
        let mut hits = vec![0u128; t.n_units()];
        let mut total = 0u128;
        for z in enumerate_assignments(&l, CAP).unwrap() {
            total += 1;
            for (h, &on) in hits.iter_mut().zip(z.as_slice()) {
                *h += u128::from(on);
            }
        }
        prop_assert_eq!(total, count_assignments(&l));
        for s in &l {
            for &i in &s.members {
                // hits/total == n1/n exactly, compared in integers
                prop_assert_eq!(hits[i] * s.n() as u128, total * s.n_treated as u128);
            }
        }
    }

    #[test]
    fn metric_identities(t in table(), seed in any::<u64>()) {
        let l = layouts(&t);
        let s = estimator_comparison_on(&t, &l, Seed(seed), Mode::Mc, 200).unwrap();
        for m in &s.estimators {
            prop_assert!((m.rmse * m.rmse - (m.bias * m.bias + m.sd * m.sd)).abs() <= 1e-9 * m.rmse.powi(2).max(1e-12));
        }
    }
}

/// Clustered individuals in four strata with two covariates; with `collinear`
/// a third covariate is an affine function of the first.
fn individual(seed: u64, collinear: bool) -> IndividualData {
    use hajek::randomize::{sample_normal, uniform01};
    let mut rng = Seed(seed).stream(0, 7);
    let mut records = Vec::new();
    for b in 0..4 {
        let clusters = 2 + b;
        for j in 0..clusters {
            let treated = j < clusters / 2;
            let m = 1 + (uniform01(&mut rng) * 5.0) as usize;
            for _ in 0..m {
                let x0 = sample_normal(0.0, 1.0, &mut rng).unwrap();
                let x1 = sample_normal(0.0, 1.0, &mut rng).unwrap();
                let y = x0 - 0.5 * x1 + sample_normal(if treated { 1.0 } else { 0.0 }, 1.0, &mut rng).unwrap();
                let w = 0.5 + uniform01(&mut rng);
                let mut x = vec![x0, x1];
                if collinear {
                    x.push(2.0 * x0 + 1.0);
                }
                records.push(IndividualObs::new(format!("s{b}"), format!("c{j}"), w, treated, y, x));
            }
        }
    }
    IndividualData::new(records).unwrap()
}

#[test]
fn wald_and_score_agree_on_many_pairs() {
    use hajek::simulate::{gen_population, AssignmentDesign, DgpConfig, EffectModel};
    for seed in 0..8u64 {
        let config = DgpConfig {
            n_strata: 200,
            stratum_size: 2,
            size_matched: true,
            effect_model: EffectModel::Constant { value: 5.0 },
            assignment: AssignmentDesign::Balanced,
            seed,
        };
        let t = gen_population(&config).unwrap();
        let l = config.layouts(&t).unwrap();
        let d = observe(&t, &assign_within_strata(&l, Seed(seed), 0)).unwrap();
        let se = {
            let h = hajek_fit(&d).unwrap();
            variance_estimate(&d, h.rho1_hat, h.rho0_hat, Policy::Auto).unwrap().se
        };
        let s = score_ci(&d, 0.05).unwrap();
        let w = wald_ci(&d, 0.05, Df::Normal).unwrap();
        assert!((s.lo - w.lo).abs() < 0.5 * se, "seed {seed}: lo {} vs {}", s.lo, w.lo);
        assert!((s.hi - w.hi).abs() < 0.5 * se, "seed {seed}: hi {} vs {}", s.hi, w.hi);
    }
}

#[test]
fn mc_allocation_passes_chi_square() {
    let rows = (0..5).map(|i| PotentialRow::new("s", format!("c{i}"), 1.0, 0.0, 0.0)).collect();
    let t = PotentialTable::new(rows).unwrap();
    let l = t.layouts(|_, _| 2).unwrap();
    let draws = 100_000u64;
    let mut counts = std::collections::BTreeMap::<String, u64>::new();
    for r in 0..draws {
        *counts.entry(assign_within_strata(&l, Seed(99), r).bits()).or_default() += 1;
    }
    assert_eq!(counts.len(), 10);
    let expected = draws as f64 / 10.0;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 0.999 quantile of chi-square with 9 degrees of freedom
    assert!(chi2 < 27.877, "chi2 = {chi2}");
}

#[test]
fn exact_and_mc_agree() {
    let t = osnap_impute_constant_total(&datasets::osnap(), OSNAP_SITE_EFFECT).unwrap();
    let l = t.balanced_layouts().unwrap();
    let exact = estimator_comparison_on(&t, &l, Seed(5), Mode::Exact, 0).unwrap();
    let mc = estimator_comparison_on(&t, &l, Seed(5), Mode::Mc, 20_000).unwrap();
    for (e, m) in exact.estimators.iter().zip(&mc.estimators) {
        assert!((e.mean - m.mean).abs() < 4.0 * m.mc_se, "{}: {} vs {} (se {})", e.name, e.mean, m.mean, m.mc_se);
    }
}

#[test]
fn replication_keeps_pair_biases() {
    let t = osnap_impute_constant_total(&datasets::osnap(), OSNAP_SITE_EFFECT).unwrap();
    let one = estimator_comparison_on(&t, &t.balanced_layouts().unwrap(), Seed(1), Mode::Exact, 0).unwrap();
    let t2 = replicate_pairs(&t, 2).unwrap();
    let two = estimator_comparison_on(&t2, &t2.balanced_layouts().unwrap(), Seed(1), Mode::Exact, 0).unwrap();
    for name in ["ikn", "fe"] {
        let (a, b) = (one.estimator(name).unwrap(), two.estimator(name).unwrap());
        assert!((a.bias - b.bias).abs() < 1e-12, "{name}: {} vs {}", a.bias, b.bias);
        assert!((b.sd * 2f64.sqrt() - a.sd).abs() < 1e-12, "{name} sd");
    }
    let (a, b) = (one.estimator("ha").unwrap(), two.estimator("ha").unwrap());
    assert!(b.bias.abs() < a.bias.abs());
    assert!(one.estimator("ht").unwrap().bias.abs() < 1e-12);
}

#[test]
fn simulation_is_frozen() {
    use hajek::simulate::{run_config, RunConfig};
    let text = r#"
seed = 3
n_mc = 300

[[scenario]]
name = "pairs"
study = "variance"
n_strata = 20
stratum_size = 2
effect_model = { model = "alpha_beta", alpha = 1.0, beta = 0.5 }
"#;
    let config = RunConfig::from_toml(text).unwrap();
    let a = run_config(&config).unwrap();
    let b = run_config(&config).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    for r in &a.results {
        for i in &r.summary.intervals {
            assert!((0.0..=1.0).contains(&i.coverage));
        }
    }
}

#[test]
fn adjusted_design_null_and_variance_comparison() {
    use hajek::simulate::{run_adjusted_study, ClusterDesignConfig};
    // no systematic effect: the true null is the SATE, whose individual
    // effects are the imputation residuals
    let config = ClusterDesignConfig {
        effect: 0.0,
        seed: 20_240_501,
        ..Default::default()
    };
    let s = run_adjusted_study(&config, Mode::Mc, 10_000).unwrap();
    let rejection = 1.0 - s.interval("score_adj").unwrap().coverage;
    assert!(rejection <= 0.06, "rejection rate {rejection}");
    let below = s.comparisons.iter().find(|c| c.name == "v_adj<hc2_adj").unwrap().fraction;
    assert!(below >= 0.9, "v_adj < hc2_adj in {below}");
}
