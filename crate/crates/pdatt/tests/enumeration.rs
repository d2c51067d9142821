//! Exact oracle checks on enumerable discrete populations.
//!
//! The populations have a binary covariate and rational cell
//! probabilities, so a finite sample can realize every atom in exact
//! proportion. Saturated working models then recover the population
//! functions exactly and every estimator can be compared against direct
//! enumeration of its estimand.

use pdatt::panel::{EstimandSpec, PanelSample, TreatmentPath};
use pdatt::{
    aggregate_second_period, estimate_dr, estimate_ipw, estimate_naive_prepost, estimate_or,
    estimate_robust, estimate_robust_improved, estimate_weak_mar_ipw, partial_id_bounds,
};

/// One population atom: a covariate value, a path, observability, an
/// outcome value, and its exact probability (as count / total).
#[derive(Clone, Copy, Debug)]
struct Atom {
    x1: f64,
    d1: u8,
    d2: u8,
    s: u8,
    dy: f64,
    count: usize,
}

struct EnumPop {
    atoms: Vec<Atom>,
    total: usize,
}

impl EnumPop {
    fn prob(&self, a: &Atom) -> f64 {
        a.count as f64 / self.total as f64
    }

    /// E[g(atom)] by enumeration.
    fn expect(&self, g: impl Fn(&Atom) -> f64) -> f64 {
        self.atoms.iter().map(|a| self.prob(a) * g(a)).sum()
    }

    /// Brute-force PDATT: E[m_d(X) - m_00(X) | D = d].
    fn brute_pdatt(&self, d: TreatmentPath, m: &dyn Fn(TreatmentPath, f64) -> f64) -> f64 {
        let num = self.expect(|a| {
            if a.d1 == d.d1 && a.d2 == d.d2 {
                m(d, a.x1) - m(TreatmentPath::NEVER, a.x1)
            } else {
                0.0
            }
        });
        let den = self.expect(|a| f64::from(a.d1 == d.d1 && a.d2 == d.d2));
        num / den
    }

    fn to_sample(&self, with_y2: bool) -> PanelSample {
        let n: usize = self.atoms.iter().map(|a| a.count).sum();
        assert_eq!(n, self.total);
        let mut dy = Vec::with_capacity(n);
        let mut s = Vec::with_capacity(n);
        let mut d1 = Vec::with_capacity(n);
        let mut d2 = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(2 * n);
        for a in &self.atoms {
            for _ in 0..a.count {
                dy.push(a.dy);
                s.push(a.s);
                d1.push(a.d1);
                d2.push(a.d2);
                x.push(1.0);
                x.push(a.x1);
            }
        }
        let y2 = with_y2.then(|| dy.clone());
        PanelSample::from_columns(
            dy,
            s,
            d1,
            d2,
            x,
            2,
            vec!["const".into(), "x1".into()],
            y2,
        )
        .unwrap()
    }
}

/// True model functions of the base MAR population.
struct TrueModels;

impl TrueModels {
    fn m(d: TreatmentPath, x1: f64) -> f64 {
        match (d.d1, d.d2) {
            (0, 0) => 1.0 + x1,
            (1, 0) => 2.0 + 2.0 * x1,
            (0, 1) => 3.0 - x1,
            (1, 1) => 5.0 + 3.0 * x1,
            _ => unreachable!(),
        }
    }

    fn p_d2(x1: f64) -> f64 {
        if x1 > 0.5 {
            0.75
        } else {
            0.5
        }
    }

    fn p_d1_given(d2: u8, x1: f64) -> f64 {
        match (d2, x1 > 0.5) {
            (0, false) => 0.25,
            (0, true) => 0.5,
            (1, false) => 0.5,
            (1, true) => 0.75,
            _ => unreachable!(),
        }
    }

    fn q(d2: u8, x1: f64) -> f64 {
        match (d2, x1 > 0.5) {
            (0, false) => 0.5,
            (0, true) => 0.75,
            (1, false) => 0.75,
            (1, true) => 0.5,
            _ => unreachable!(),
        }
    }
}

/// Build the base population with exact multiplicities over 256 units
/// per x1 cell scale (total 4096 rows keeps every atom integral).
fn base_pop() -> EnumPop {
    let scale = 4096usize; // 2 * 4 * 4 * 2 * 4 * 16
    let mut atoms = Vec::new();
    for &x1 in &[0.0f64, 1.0] {
        let px = 0.5;
        for d2 in [0u8, 1u8] {
            let pd2 = if d2 == 1 { TrueModels::p_d2(x1) } else { 1.0 - TrueModels::p_d2(x1) };
            for d1 in [0u8, 1u8] {
                let pd1 = if d1 == 1 {
                    TrueModels::p_d1_given(d2, x1)
                } else {
                    1.0 - TrueModels::p_d1_given(d2, x1)
                };
                let m = TrueModels::m(TreatmentPath::new(d1, d2), x1);
                for &dy in &[m - 1.0, m + 1.0] {
                    for sv in [0u8, 1u8] {
                        let ps = if sv == 1 {
                            TrueModels::q(d2, x1)
                        } else {
                            1.0 - TrueModels::q(d2, x1)
                        };
                        let prob = px * pd2 * pd1 * 0.5 * ps;
                        let count_f = prob * scale as f64;
                        let count = count_f.round() as usize;
                        assert!(
                            (count_f - count as f64).abs() < 1e-9,
                            "atom probability {prob} is not exact at scale {scale}"
                        );
                        if count > 0 {
                            atoms.push(Atom { x1, d1, d2, s: sv, dy, count });
                        }
                    }
                }
            }
        }
    }
    EnumPop { atoms, total: scale }
}

fn specs() -> Vec<EstimandSpec> {
    TreatmentPath::TARGETS
        .iter()
        .map(|&d| EstimandSpec::new(d).unwrap())
        .collect()
}

#[test]
fn estimators_match_brute_force_under_saturation() {
    let pop = base_pop();
    let sample = pop.to_sample(false);
    for spec in specs() {
        let brute = pop.brute_pdatt(spec.d, &TrueModels::m);
        let r = estimate_robust(&sample, spec).unwrap();
        let or = estimate_or(&sample, spec).unwrap();
        let ipw = estimate_ipw(&sample, spec).unwrap();
        let dr = estimate_dr(&sample, spec).unwrap();
        for (name, est) in [("R", &r), ("OR", &or), ("IPW", &ipw), ("DR", &dr)] {
            assert!(
                (est.tau_hat - brute).abs() < 1e-10,
                "{name} at {}: {} vs brute {brute}",
                spec.d,
                est.tau_hat
            );
        }
    }
}

#[test]
fn improved_estimator_matches_brute_force_under_saturation() {
    let pop = base_pop();
    let sample = pop.to_sample(false);
    for spec in specs() {
        let brute = pop.brute_pdatt(spec.d, &TrueModels::m);
        let imp = estimate_robust_improved(&sample, spec).unwrap();
        assert!(
            (imp.tau_hat - brute).abs() < 1e-8,
            "improved at {}: {} vs brute {brute}",
            spec.d,
            imp.tau_hat
        );
    }
}

/// Population model functions used to evaluate the estimands by direct
/// enumeration (allowing deliberate corruption of one model).
struct PopModels<'a> {
    mu: &'a dyn Fn(TreatmentPath, f64) -> f64,
    pi_d1_given: &'a dyn Fn(u8, f64) -> f64,
    pi_d2: &'a dyn Fn(f64) -> f64,
    phi: &'a dyn Fn(u8, f64) -> f64,
}

/// The six decomposition terms (I)..(VI) of the robust estimand.
fn decomposition_terms(pop: &EnumPop, spec: EstimandSpec, m: &PopModels) -> [f64; 6] {
    let d = spec.d;
    let dp = TreatmentPath::NEVER;
    let pi_path = |path: TreatmentPath, x1: f64| -> f64 {
        let p2 = if path.d2 == 1 { (m.pi_d2)(x1) } else { 1.0 - (m.pi_d2)(x1) };
        let p1 = if path.d1 == 1 {
            (m.pi_d1_given)(path.d2, x1)
        } else {
            1.0 - (m.pi_d1_given)(path.d2, x1)
        };
        p1 * p2
    };

    let u1 = |a: &Atom| -> f64 {
        if a.s == 1 && a.d1 == d.d1 && a.d2 == d.d2 {
            1.0 / (m.phi)(d.d2, a.x1)
        } else {
            0.0
        }
    };
    let u2 = |a: &Atom| -> f64 {
        if a.s == 1 && a.d1 == dp.d1 && a.d2 == dp.d2 {
            pi_path(d, a.x1) / ((m.phi)(dp.d2, a.x1) * pi_path(dp, a.x1))
        } else {
            0.0
        }
    };
    let u3 = |a: &Atom| -> f64 {
        if a.d2 == d.d2 {
            let p1 = if d.d1 == 1 {
                (m.pi_d1_given)(d.d2, a.x1)
            } else {
                1.0 - (m.pi_d1_given)(d.d2, a.x1)
            };
            p1
        } else {
            0.0
        }
    };
    let u4 = |a: &Atom| -> f64 {
        if a.s == 1 && a.d2 == d.d2 {
            u3(a) / (m.phi)(d.d2, a.x1)
        } else {
            0.0
        }
    };

    let e1 = pop.expect(&u1);
    let e2 = pop.expect(&u2);
    let e3 = pop.expect(&u3);
    let e4 = pop.expect(&u4);
    let mu_dp = |x1: f64| (m.mu)(dp, x1);
    let gap = |x1: f64| (m.mu)(d, x1) - (m.mu)(dp, x1);

    [
        pop.expect(|a| u1(a) * a.dy) / e1,
        pop.expect(|a| u1(a) * mu_dp(a.x1)) / e1,
        pop.expect(|a| u2(a) * a.dy) / e2,
        pop.expect(|a| u2(a) * mu_dp(a.x1)) / e2,
        pop.expect(|a| u3(a) * gap(a.x1)) / e3,
        pop.expect(|a| u4(a) * gap(a.x1)) / e4,
    ]
}

fn pop_robust(pop: &EnumPop, spec: EstimandSpec, m: &PopModels) -> f64 {
    let t = decomposition_terms(pop, spec, m);
    t[0] - t[1] - t[2] + t[3] + t[4] - t[5]
}

fn pop_or(pop: &EnumPop, spec: EstimandSpec, m: &PopModels) -> f64 {
    let t = decomposition_terms(pop, spec, m);
    t[0] - t[1]
}

fn pop_ipw(pop: &EnumPop, spec: EstimandSpec, m: &PopModels) -> f64 {
    let t = decomposition_terms(pop, spec, m);
    t[0] - t[2]
}

fn pop_dr(pop: &EnumPop, spec: EstimandSpec, m: &PopModels) -> f64 {
    let t = decomposition_terms(pop, spec, m);
    t[0] - t[1] - t[2] + t[3]
}

fn true_models() -> PopModels<'static> {
    PopModels {
        mu: &TrueModels::m,
        pi_d1_given: &TrueModels::p_d1_given,
        pi_d2: &TrueModels::p_d2,
        phi: &TrueModels::q,
    }
}

// wrong-but-valid replacements
fn wrong_mu(d: TreatmentPath, x1: f64) -> f64 {
    0.3 * x1 - 0.2 * (d.d1 as f64) + 0.1 * (d.d2 as f64)
}
fn wrong_p_d1_given(d2: u8, x1: f64) -> f64 {
    0.35 + 0.1 * (d2 as f64) + 0.2 * x1
}
fn wrong_p_d2(x1: f64) -> f64 {
    0.6 - 0.15 * x1
}
fn wrong_q(d2: u8, x1: f64) -> f64 {
    0.55 + 0.1 * (d2 as f64) - 0.15 * x1
}

#[test]
fn robust_estimand_tolerates_any_single_corruption() {
    let pop = base_pop();
    for spec in specs() {
        let brute = pop.brute_pdatt(spec.d, &TrueModels::m);

        let corrupt_m = PopModels { phi: &wrong_q, ..true_models() };
        let corrupt_p = PopModels {
            pi_d1_given: &wrong_p_d1_given,
            pi_d2: &wrong_p_d2,
            ..true_models()
        };
        let corrupt_o = PopModels { mu: &wrong_mu, ..true_models() };

        for (name, models) in
            [("missing", &corrupt_m), ("propensity", &corrupt_p), ("outcome", &corrupt_o)]
        {
            let val = pop_robust(&pop, spec, models);
            assert!(
                (val - brute).abs() < 1e-10,
                "robust with corrupted {name} model at {}: {val} vs {brute}",
                spec.d
            );
        }

        // adjusted OR/IPW/DR fail when the missingness model is wrong
        let m = PopModels { phi: &wrong_q, ..true_models() };
        for (name, val) in [
            ("OR", pop_or(&pop, spec, &m)),
            ("IPW", pop_ipw(&pop, spec, &m)),
            ("DR", pop_dr(&pop, spec, &m)),
        ] {
            assert!(
                (val - brute).abs() >= 1e-3,
                "{name} at {} should be biased under a wrong missingness model: {val} vs {brute}",
                spec.d
            );
        }
    }
}

#[test]
fn decomposition_identities() {
    let pop = base_pop();
    for spec in specs() {
        // propensity and outcome true, missingness corrupted:
        // (I) - (II) = (VI) and (III) - (IV) = 0
        let m = PopModels { phi: &wrong_q, ..true_models() };
        let t = decomposition_terms(&pop, spec, &m);
        assert!(
            (t[0] - t[1] - t[5]).abs() < 1e-12,
            "(I)-(II)-(VI) = {} at {}",
            t[0] - t[1] - t[5],
            spec.d
        );
        assert!((t[2] - t[3]).abs() < 1e-12, "(III)-(IV) = {} at {}", t[2] - t[3], spec.d);

        // missingness true, both others corrupted: (V) = (VI)
        let m = PopModels {
            mu: &wrong_mu,
            pi_d1_given: &wrong_p_d1_given,
            pi_d2: &wrong_p_d2,
            ..true_models()
        };
        let t = decomposition_terms(&pop, spec, &m);
        assert!((t[4] - t[5]).abs() < 1e-12, "(V)-(VI) = {} at {}", t[4] - t[5], spec.d);
    }
}

/// Like the base population but with the final-period treatment assigned
/// independently of the covariate. The weighted-average identity for the
/// pre/post contrast aggregates its tau_(10)(00) term over the D2 = 1
/// covariate distribution, so it is exact when that distribution matches
/// the D2 = 0 one.
fn equal_d2_measure_pop() -> EnumPop {
    let scale = 2048usize;
    let mut atoms = Vec::new();
    for &x1 in &[0.0f64, 1.0] {
        for d2 in [0u8, 1u8] {
            let pd2 = 0.5;
            for d1 in [0u8, 1u8] {
                let pd1 = if d1 == 1 {
                    TrueModels::p_d1_given(d2, x1)
                } else {
                    1.0 - TrueModels::p_d1_given(d2, x1)
                };
                let m = TrueModels::m(TreatmentPath::new(d1, d2), x1);
                for &dy in &[m - 1.0, m + 1.0] {
                    for sv in [0u8, 1u8] {
                        let ps = if sv == 1 {
                            TrueModels::q(d2, x1)
                        } else {
                            1.0 - TrueModels::q(d2, x1)
                        };
                        let count =
                            (0.5 * pd2 * pd1 * 0.5 * ps * scale as f64).round() as usize;
                        if count > 0 {
                            atoms.push(Atom { x1, d1, d2, s: sv, dy, count });
                        }
                    }
                }
            }
        }
    }
    EnumPop { atoms, total: scale }
}

#[test]
fn naive_prepost_matches_weighted_average_identity() {
    let pop = equal_d2_measure_pop();
    let sample = pop.to_sample(false);
    let naive = estimate_naive_prepost(&sample, 0.95).unwrap();

    // brute force of the right-hand side:
    // tau_1100 P(D1=1|D2=1) + tau_0100 P(D1=0|D2=1) - tau_1000 P(D1=1|D2=0)
    let t11 = pop.brute_pdatt(TreatmentPath::new(1, 1), &TrueModels::m);
    let t01 = pop.brute_pdatt(TreatmentPath::new(0, 1), &TrueModels::m);
    let t10 = pop.brute_pdatt(TreatmentPath::new(1, 0), &TrueModels::m);
    let p11 = pop.expect(|a| f64::from(a.d1 == 1 && a.d2 == 1))
        / pop.expect(|a| f64::from(a.d2 == 1));
    let p10 = pop.expect(|a| f64::from(a.d1 == 1 && a.d2 == 0))
        / pop.expect(|a| f64::from(a.d2 == 0));
    let rhs = t11 * p11 + t01 * (1.0 - p11) - t10 * p10;
    assert!(
        (naive.tau_hat - rhs).abs() < 1e-10,
        "naive {} vs weighted-average identity {rhs}",
        naive.tau_hat
    );
}

#[test]
fn naive_prepost_identifies_full_path_effect_when_d1_equals_d2() {
    // degenerate population with no dropouts or late adopters
    let scale = 1024usize;
    let mut atoms = Vec::new();
    for &x1 in &[0.0f64, 1.0] {
        for d2 in [0u8, 1u8] {
            let pd2 = if d2 == 1 { TrueModels::p_d2(x1) } else { 1.0 - TrueModels::p_d2(x1) };
            let d1 = d2;
            let m = TrueModels::m(TreatmentPath::new(d1, d2), x1);
            for &dy in &[m - 1.0, m + 1.0] {
                let prob = 0.5 * pd2 * 0.5;
                let count = (prob * scale as f64).round() as usize;
                atoms.push(Atom { x1, d1, d2, s: 1, dy, count });
            }
        }
    }
    let pop = EnumPop { atoms, total: scale };
    let sample = pop.to_sample(false);
    let naive = estimate_naive_prepost(&sample, 0.95).unwrap();
    let t11 = pop.brute_pdatt(TreatmentPath::new(1, 1), &TrueModels::m);
    assert!(
        (naive.tau_hat - t11).abs() < 1e-10,
        "naive {} should equal tau_(11)(00) = {t11}",
        naive.tau_hat
    );
}

#[test]
fn aggregate_second_period_matches_enumeration() {
    let pop = base_pop();
    let sample = pop.to_sample(false);
    let results: Vec<_> = specs()
        .into_iter()
        .map(|spec| estimate_robust(&sample, spec).unwrap())
        .collect();
    let agg = aggregate_second_period(&results, &sample).unwrap();

    let t11 = pop.brute_pdatt(TreatmentPath::new(1, 1), &TrueModels::m);
    let t01 = pop.brute_pdatt(TreatmentPath::new(0, 1), &TrueModels::m);
    let p11 = pop.expect(|a| f64::from(a.d1 == 1 && a.d2 == 1))
        / pop.expect(|a| f64::from(a.d2 == 1));
    let brute = t11 * p11 + t01 * (1.0 - p11);
    assert!((agg - brute).abs() < 1e-10, "aggregate {agg} vs brute {brute}");
}

#[test]
fn complete_case_dr_is_unbiased_when_missingness_ignores_covariates() {
    // q constant within each D2 group: the selection-bias term vanishes
    let scale = 4096usize;
    let mut atoms = Vec::new();
    for &x1 in &[0.0f64, 1.0] {
        for d2 in [0u8, 1u8] {
            let pd2 = if d2 == 1 { TrueModels::p_d2(x1) } else { 1.0 - TrueModels::p_d2(x1) };
            for d1 in [0u8, 1u8] {
                let pd1 = if d1 == 1 {
                    TrueModels::p_d1_given(d2, x1)
                } else {
                    1.0 - TrueModels::p_d1_given(d2, x1)
                };
                let m = TrueModels::m(TreatmentPath::new(d1, d2), x1);
                for &dy in &[m - 1.0, m + 1.0] {
                    for sv in [0u8, 1u8] {
                        let q = if d2 == 1 { 0.75 } else { 0.5 };
                        let ps = if sv == 1 { q } else { 1.0 - q };
                        let count = (0.5 * pd2 * pd1 * 0.5 * ps * scale as f64).round() as usize;
                        if count > 0 {
                            atoms.push(Atom { x1, d1, d2, s: sv, dy, count });
                        }
                    }
                }
            }
        }
    }
    let pop = EnumPop { atoms, total: scale };
    let sample = pop.to_sample(false);
    for spec in specs() {
        let brute = pop.brute_pdatt(spec.d, &TrueModels::m);
        let cc = pdatt::estimate_cc(&sample, spec, pdatt::Method::CcDr).unwrap();
        assert!(
            (cc.tau_hat - brute).abs() < 1e-10,
            "CC-DR at {}: {} vs {brute}",
            spec.d,
            cc.tau_hat
        );
    }
}

#[test]
fn bounds_sandwich_the_second_period_mix() {
    // monotone treatment response: m_10 >= m_00 pointwise in the base pop
    let pop = base_pop();
    let sample = pop.to_sample(true); // y2 = dy (y0 = 0)
    let y_min = sample.y2().unwrap().iter().cloned().fold(f64::INFINITY, f64::min);
    let bounds = partial_id_bounds(&sample, y_min).unwrap();

    let t11 = pop.brute_pdatt(TreatmentPath::new(1, 1), &TrueModels::m);
    let t01 = pop.brute_pdatt(TreatmentPath::new(0, 1), &TrueModels::m);
    let p11 = pop.expect(|a| f64::from(a.d1 == 1 && a.d2 == 1))
        / pop.expect(|a| f64::from(a.d2 == 1));
    let target = t11 * p11 + t01 * (1.0 - p11);

    assert!(bounds.lower <= bounds.upper);
    assert!(
        bounds.lower - 1e-10 <= target && target <= bounds.upper + 1e-10,
        "target {target} outside [{}, {}]",
        bounds.lower,
        bounds.upper
    );
}

// ---------------------------------------------------------------------
// Population where observability depends on the outcome change
// ---------------------------------------------------------------------

/// Outcome-dependent missingness: dy in {0, 4}, mixture weight varies by
/// (x1, d2) but not d1, and q depends on (d2, dy) through an exact logit
/// in (x, dy). Plain MAR fails; the d1-free outcome keeps the S=1
/// propensity fits consistent.
fn weak_mar_pop() -> EnumPop {
    let scale = 4096usize;
    let r_hi = |x1: f64, d2: u8| (1.0 + x1 + 2.0 * d2 as f64 + x1 * d2 as f64) / 8.0;
    let q = |d2: u8, dy: f64| match (d2, dy > 2.0) {
        (1, false) => 0.5,
        (1, true) => 0.75,
        (0, false) => 0.75,
        (0, true) => 0.5,
        _ => unreachable!(),
    };
    let mut atoms = Vec::new();
    for &x1 in &[0.0f64, 1.0] {
        for d2 in [0u8, 1u8] {
            let pd2 = if d2 == 1 { TrueModels::p_d2(x1) } else { 1.0 - TrueModels::p_d2(x1) };
            for d1 in [0u8, 1u8] {
                let pd1 = if d1 == 1 {
                    TrueModels::p_d1_given(d2, x1)
                } else {
                    1.0 - TrueModels::p_d1_given(d2, x1)
                };
                for &dy in &[0.0f64, 4.0] {
                    let pdy = if dy > 2.0 { r_hi(x1, d2) } else { 1.0 - r_hi(x1, d2) };
                    for sv in [0u8, 1u8] {
                        let ps = if sv == 1 { q(d2, dy) } else { 1.0 - q(d2, dy) };
                        let prob = 0.5 * pd2 * pd1 * pdy * ps;
                        let count_f = prob * scale as f64;
                        let count = count_f.round() as usize;
                        assert!((count_f - count as f64).abs() < 1e-9);
                        if count > 0 {
                            atoms.push(Atom { x1, d1, d2, s: sv, dy, count });
                        }
                    }
                }
            }
        }
    }
    EnumPop { atoms, total: scale }
}

fn weak_mar_m(d: TreatmentPath, x1: f64) -> f64 {
    let r = (1.0 + x1 + 2.0 * d.d2 as f64 + x1 * d.d2 as f64) / 8.0;
    4.0 * r
}

#[test]
fn weak_mar_ipw_matches_lemma_enumeration() {
    let pop = weak_mar_pop();
    let sample = pop.to_sample(false);

    for d in [TreatmentPath::new(1, 1), TreatmentPath::new(0, 1)] {
        let spec = EstimandSpec::new(d).unwrap();
        let brute = pop.brute_pdatt(d, &weak_mar_m);

        // brute force of the Lemma's population formula with true q and p
        let q = |d2: u8, dy: f64| match (d2, dy > 2.0) {
            (1, false) => 0.5,
            (1, true) => 0.75,
            (0, false) => 0.75,
            (0, true) => 0.5,
            _ => unreachable!(),
        };
        let pi_path = |path: TreatmentPath, x1: f64| -> f64 {
            let p2 = if path.d2 == 1 { TrueModels::p_d2(x1) } else { 1.0 - TrueModels::p_d2(x1) };
            let p1 = if path.d1 == 1 {
                TrueModels::p_d1_given(path.d2, x1)
            } else {
                1.0 - TrueModels::p_d1_given(path.d2, x1)
            };
            p1 * p2
        };
        let num1 = pop.expect(|a| {
            if a.s == 1 && a.d1 == d.d1 && a.d2 == d.d2 {
                a.dy / q(a.d2, a.dy)
            } else {
                0.0
            }
        });
        let num2 = pop.expect(|a| {
            if a.s == 1 && a.d1 == 0 && a.d2 == 0 {
                pi_path(d, a.x1) / pi_path(TreatmentPath::NEVER, a.x1) * a.dy / q(a.d2, a.dy)
            } else {
                0.0
            }
        });
        let e_pd = pop.expect(|a| pi_path(d, a.x1));
        let lemma = (num1 - num2) / e_pd;
        assert!(
            (lemma - brute).abs() < 1e-10,
            "lemma enumeration {lemma} vs brute {brute} at {d}"
        );

        let est = estimate_weak_mar_ipw(&sample, spec).unwrap();
        assert!(
            (est.tau_hat - lemma).abs() < 1e-10,
            "weak-MAR estimator {} vs lemma {lemma} at {d}",
            est.tau_hat
        );

        // plain IPW is biased here because missingness depends on dy
        let ipw = estimate_ipw(&sample, spec).unwrap();
        assert!(
            (ipw.tau_hat - brute).abs() > 1e-3,
            "plain IPW should be biased at {d}: {} vs {brute}",
            ipw.tau_hat
        );
    }
}

#[test]
fn weak_mar_ipw_reduces_to_ipw_without_outcome_dependence() {
    // in the base population q does not depend on dy, so the extended
    // logit recovers the same probabilities and both estimators coincide
    let pop = base_pop();
    let sample = pop.to_sample(false);
    for spec in specs() {
        let a = estimate_weak_mar_ipw(&sample, spec).unwrap();
        let b = estimate_ipw(&sample, spec).unwrap();
        assert!(
            (a.tau_hat - b.tau_hat).abs() < 1e-10,
            "weak-MAR {} vs IPW {} at {}",
            a.tau_hat,
            b.tau_hat,
            spec.d
        );
    }
}
