//! Point estimators for path-dependent treatment effects: the robust
//! estimator, its outcome-regression / inverse-probability-weighting /
//! doubly-robust reductions, complete-case counterparts, the naive
//! pre/post contrast, a weighted estimator valid when missingness may
//! depend on the outcome change, and partial-identification bounds.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::first_stage::{
    clamp_prob, fit_logit_design, fit_nuisances, fit_nuisances_complete_case,
    fit_nuisances_subset, fit_ols, influence_ingredients, ExtendedDesign, LogitFit, NuisanceSet,
    NuisanceRequirements, SEPARATION_BOUND,
};
use crate::inference;
use crate::panel::{EstimandSpec, PanelSample, TreatmentPath};
use crate::stats::{logistic, mean, sum, z_critical};

/// Estimator tags, matching the labels used in result tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    R,
    Or,
    Ipw,
    Dr,
    CcOr,
    CcIpw,
    CcDr,
    Naive,
    WeakMarIpw,
    RImproved,
}

impl Method {
    pub const ALL: [Method; 10] = [
        Method::R,
        Method::Or,
        Method::Ipw,
        Method::Dr,
        Method::CcOr,
        Method::CcIpw,
        Method::CcDr,
        Method::Naive,
        Method::WeakMarIpw,
        Method::RImproved,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            Method::R => "R",
            Method::Or => "OR",
            Method::Ipw => "IPW",
            Method::Dr => "DR",
            Method::CcOr => "CC-OR",
            Method::CcIpw => "CC-IPW",
            Method::CcDr => "CC-DR",
            Method::Naive => "NAIVE",
            Method::WeakMarIpw => "WEAK-MAR-IPW",
            Method::RImproved => "R-IMPROVED",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .find(|m| m.tag().eq_ignore_ascii_case(s.trim()))
            .copied()
            .ok_or_else(|| Error::Validation(format!("unknown estimator tag '{s}'")))
    }
}

/// Normalized weights for one estimand (Hajek form: each averages to one
/// over the sample).
#[derive(Debug, Clone)]
pub struct WeightSet {
    pub w1: Vec<f64>,
    pub w2: Vec<f64>,
    pub w3: Vec<f64>,
    pub w4: Vec<f64>,
    /// The four sample means used for self-normalization.
    pub raw_denominators: [f64; 4],
    /// Largest normalized weight across the four vectors.
    pub max_weight: f64,
    /// Smallest raw probability encountered at a divisor site before
    /// clamping (overlap diagnostic).
    pub min_divisor_prob: f64,
}

impl WeightSet {
    /// Number of observations carrying positive weight in each group.
    pub fn n_effective(&self) -> [usize; 4] {
        [
            self.w1.iter().filter(|&&w| w > 0.0).count(),
            self.w2.iter().filter(|&&w| w > 0.0).count(),
            self.w3.iter().filter(|&&w| w > 0.0).count(),
            self.w4.iter().filter(|&&w| w > 0.0).count(),
        ]
    }
}

/// Estimated weights for the robust estimator and its reductions.
pub fn compute_weights(sample: &PanelSample, nus: &NuisanceSet) -> Result<WeightSet> {
    let n = sample.n();
    let spec = nus.spec;
    let d = spec.d;
    let phi_d2 = nus.phi_d2_fitted(n)?;
    let phi_d2p = nus.phi_d2p_fitted(n)?;

    let mut u1 = vec![0.0; n];
    let mut u2 = vec![0.0; n];
    let mut u3 = vec![0.0; n];
    let mut u4 = vec![0.0; n];
    let mut min_div = f64::INFINITY;

    for i in 0..n {
        let on_d2 = sample.d2()[i] == d.d2;
        let s1 = sample.s()[i] == 1;

        if sample.s_on_path(i, d) {
            let p = phi_d2[i];
            min_div = min_div.min(p);
            u1[i] = 1.0 / clamp_prob(p);
        }
        if sample.s_on_path(i, TreatmentPath::NEVER) {
            let p_phi = phi_d2p[i];
            let pi_d = nus.pi_d_at(i)?;
            let pi_dp = nus.pi_dp_at(i)?;
            min_div = min_div.min(p_phi).min(pi_dp);
            u2[i] = pi_d / (clamp_prob(p_phi) * clamp_prob(pi_dp));
        }
        if on_d2 {
            let pi1 = nus.pi_d1gd2()?.fitted[i];
            u3[i] = pi1;
            if s1 {
                let p = phi_d2[i];
                min_div = min_div.min(p);
                u4[i] = pi1 / clamp_prob(p);
            }
        }
    }

    let d1 = mean(&u1);
    let d2m = mean(&u2);
    let d3 = mean(&u3);
    let d4 = mean(&u4);
    for (name, den) in [("w1", d1), ("w2", d2m), ("w3", d3), ("w4", d4)] {
        if !(den > 0.0) {
            return Err(Error::EmptyCell(format!(
                "weight group {name} has zero normalization mean for target path {d}"
            )));
        }
    }
    let mut max_w: f64 = 0.0;
    let normalize = |u: &mut Vec<f64>, den: f64, max_w: &mut f64| {
        for v in u.iter_mut() {
            *v /= den;
            if *v > *max_w {
                *max_w = *v;
            }
        }
    };
    normalize(&mut u1, d1, &mut max_w);
    normalize(&mut u2, d2m, &mut max_w);
    normalize(&mut u3, d3, &mut max_w);
    normalize(&mut u4, d4, &mut max_w);

    Ok(WeightSet {
        w1: u1,
        w2: u2,
        w3: u3,
        w4: u4,
        raw_denominators: [d1, d2m, d3, d4],
        max_weight: max_w,
        min_divisor_prob: if min_div.is_finite() { min_div } else { 1.0 },
    })
}

/// A point estimate with influence-function inference.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateResult {
    pub method: Method,
    pub spec: EstimandSpec,
    pub tau_hat: f64,
    pub se: f64,
    pub ci: (f64, f64),
    /// Observations with positive weight in groups w1..w4 (zeros where a
    /// group is not used by the method).
    pub n_effective: [usize; 4],
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Diagnostics {
    pub max_weight: f64,
    pub min_divisor_prob: f64,
    pub first_stage_iterations: Vec<(String, usize)>,
    pub notes: Vec<String>,
}

impl Diagnostics {
    fn from_weights(w: &WeightSet, nus: &NuisanceSet) -> Self {
        Diagnostics {
            max_weight: w.max_weight,
            min_divisor_prob: w.min_divisor_prob,
            first_stage_iterations: nus.iteration_counts(),
            notes: Vec::new(),
        }
    }
}

/// Centered residual pieces shared by the estimators:
/// a = delta_y - mu_d'(x), b = mu_d(x) - mu_d'(x).
pub(crate) fn residual_pieces(
    sample: &PanelSample,
    nus: &NuisanceSet,
    need_b: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = sample.n();
    let mu_dp = &nus.mu_dp()?.fitted;
    let a: Vec<f64> = (0..n).map(|i| sample.delta_y()[i] - mu_dp[i]).collect();
    let b = if need_b {
        let mu_d = &nus.mu_d()?.fitted;
        (0..n).map(|i| mu_d[i] - mu_dp[i]).collect()
    } else {
        Vec::new()
    };
    Ok((a, b))
}

/// tau_hat for the robust estimator given fitted nuisances and weights.
pub fn robust_point(sample: &PanelSample, nus: &NuisanceSet, w: &WeightSet) -> Result<f64> {
    let (a, b) = residual_pieces(sample, nus, true)?;
    let n = sample.n() as f64;
    let first = sum((0..sample.n()).map(|i| (w.w1[i] - w.w2[i]) * a[i])) / n;
    let second = sum((0..sample.n()).map(|i| (w.w3[i] - w.w4[i]) * b[i])) / n;
    Ok(first + second)
}

pub fn or_point(sample: &PanelSample, nus: &NuisanceSet, w: &WeightSet) -> Result<f64> {
    let (a, _) = residual_pieces(sample, nus, false)?;
    Ok(sum((0..sample.n()).map(|i| w.w1[i] * a[i])) / sample.n() as f64)
}

pub fn ipw_point(sample: &PanelSample, w: &WeightSet) -> f64 {
    let dy = sample.delta_y();
    sum((0..sample.n()).map(|i| (w.w1[i] - w.w2[i]) * dy[i])) / sample.n() as f64
}

pub fn dr_point(sample: &PanelSample, nus: &NuisanceSet, w: &WeightSet) -> Result<f64> {
    let (a, _) = residual_pieces(sample, nus, false)?;
    Ok(sum((0..sample.n()).map(|i| (w.w1[i] - w.w2[i]) * a[i])) / sample.n() as f64)
}

fn finish(
    sample: &PanelSample,
    nus: &NuisanceSet,
    w: &WeightSet,
    method: Method,
    tau_hat: f64,
) -> Result<EstimateResult> {
    let ingredients = influence_ingredients(sample, nus)?;
    let flavor = match method {
        Method::R => inference::Flavor::Robust,
        Method::Or | Method::CcOr => inference::Flavor::Or,
        Method::Ipw | Method::CcIpw => inference::Flavor::Ipw,
        Method::Dr | Method::CcDr => inference::Flavor::Dr,
        _ => return Err(Error::Validation("unsupported method in finish".into())),
    };
    let iv = inference::influence_for(sample, nus, w, tau_hat, &ingredients, flavor, method)?;
    let var = inference::variance_from(&iv);
    let ci = inference::confidence_interval(tau_hat, &var, nus.spec.level);
    let mut n_eff = w.n_effective();
    match flavor {
        inference::Flavor::Or => {
            n_eff[1] = 0;
            n_eff[2] = 0;
            n_eff[3] = 0;
        }
        inference::Flavor::Ipw | inference::Flavor::Dr => {
            n_eff[2] = 0;
            n_eff[3] = 0;
        }
        inference::Flavor::Robust => {}
    }
    Ok(EstimateResult {
        method,
        spec: nus.spec,
        tau_hat,
        se: var.se,
        ci,
        n_effective: n_eff,
        diagnostics: Diagnostics::from_weights(w, nus),
    })
}

/// The robust estimator with fitted nuisances supplied by the caller.
pub fn estimate_robust_with(sample: &PanelSample, nus: &NuisanceSet) -> Result<EstimateResult> {
    let w = compute_weights(sample, nus)?;
    let tau = robust_point(sample, nus, &w)?;
    finish(sample, nus, &w, Method::R, tau)
}

/// Robust PDATT estimator: fits all working models, forms the weighted
/// contrast, and fills in influence-function inference.
pub fn estimate_robust(sample: &PanelSample, spec: EstimandSpec) -> Result<EstimateResult> {
    let nus = fit_nuisances(sample, spec)?;
    estimate_robust_with(sample, &nus)
}

pub fn estimate_or_with(sample: &PanelSample, nus: &NuisanceSet) -> Result<EstimateResult> {
    let w = compute_weights_or(sample, nus)?;
    let tau = or_point(sample, nus, &w)?;
    finish(sample, nus, &w, if nus.complete_case { Method::CcOr } else { Method::Or }, tau)
}

pub fn estimate_or(sample: &PanelSample, spec: EstimandSpec) -> Result<EstimateResult> {
    let nus = fit_nuisances_subset(sample, spec, NuisanceRequirements::OR)?;
    estimate_or_with(sample, &nus)
}

pub fn estimate_ipw_with(sample: &PanelSample, nus: &NuisanceSet) -> Result<EstimateResult> {
    let w = compute_weights(sample, nus)?;
    let tau = ipw_point(sample, &w);
    finish(sample, nus, &w, if nus.complete_case { Method::CcIpw } else { Method::Ipw }, tau)
}

pub fn estimate_ipw(sample: &PanelSample, spec: EstimandSpec) -> Result<EstimateResult> {
    let nus = fit_nuisances_subset(sample, spec, NuisanceRequirements::IPW)?;
    estimate_ipw_with(sample, &nus)
}

pub fn estimate_dr_with(sample: &PanelSample, nus: &NuisanceSet) -> Result<EstimateResult> {
    let w = compute_weights(sample, nus)?;
    let tau = dr_point(sample, nus, &w)?;
    finish(sample, nus, &w, if nus.complete_case { Method::CcDr } else { Method::Dr }, tau)
}

pub fn estimate_dr(sample: &PanelSample, spec: EstimandSpec) -> Result<EstimateResult> {
    let nus = fit_nuisances_subset(sample, spec, NuisanceRequirements::DR)?;
    estimate_dr_with(sample, &nus)
}

/// OR only uses the w1 group; the other groups need propensity fits the
/// OR path deliberately skips, so they are built as zeros.
fn compute_weights_or(sample: &PanelSample, nus: &NuisanceSet) -> Result<WeightSet> {
    let n = sample.n();
    let d = nus.spec.d;
    let phi_d2 = nus.phi_d2_fitted(n)?;
    let mut u1 = vec![0.0; n];
    let mut min_div = f64::INFINITY;
    for i in 0..n {
        if sample.s_on_path(i, d) {
            let p = phi_d2[i];
            min_div = min_div.min(p);
            u1[i] = 1.0 / clamp_prob(p);
        }
    }
    let den = mean(&u1);
    if !(den > 0.0) {
        return Err(Error::EmptyCell(format!(
            "weight group w1 has zero normalization mean for target path {d}"
        )));
    }
    let mut max_w: f64 = 0.0;
    for v in u1.iter_mut() {
        *v /= den;
        max_w = max_w.max(*v);
    }
    Ok(WeightSet {
        w1: u1,
        w2: vec![0.0; n],
        w3: vec![0.0; n],
        w4: vec![0.0; n],
        raw_denominators: [den, 0.0, 0.0, 0.0],
        max_weight: max_w,
        min_divisor_prob: if min_div.is_finite() { min_div } else { 1.0 },
    })
}

/// Complete-case flavors: restrict to s = 1, refit the propensity and
/// outcome models on that subsample, set the missingness probability to
/// one, and apply the corresponding adjusted formula.
pub fn estimate_cc(
    sample: &PanelSample,
    spec: EstimandSpec,
    flavor: Method,
) -> Result<EstimateResult> {
    let cc = sample.complete_cases()?;
    match flavor {
        Method::CcOr => {
            let nus = fit_nuisances_complete_case(&cc, spec, NuisanceRequirements::OR)?;
            estimate_or_with(&cc, &nus)
        }
        Method::CcIpw => {
            let nus = fit_nuisances_complete_case(&cc, spec, NuisanceRequirements::IPW)?;
            estimate_ipw_with(&cc, &nus)
        }
        Method::CcDr => {
            let nus = fit_nuisances_complete_case(&cc, spec, NuisanceRequirements::DR)?;
            estimate_dr_with(&cc, &nus)
        }
        other => Err(Error::Validation(format!("{other} is not a complete-case flavor"))),
    }
}

/// Within-group regressions used by the pre/post contrast and the bounds.
fn d2_group_fits(sample: &PanelSample, y: &[f64]) -> Result<(crate::first_stage::OlsFit, crate::first_stage::OlsFit)> {
    let n = sample.n();
    let mask1: Vec<bool> = (0..n).map(|i| sample.d2()[i] == 1).collect();
    let mask0: Vec<bool> = (0..n).map(|i| sample.d2()[i] == 0).collect();
    if !mask1.iter().any(|&b| b) {
        return Err(Error::EmptyCell("{D2=1}".into()));
    }
    if !mask0.iter().any(|&b| b) {
        return Err(Error::EmptyCell("{D2=0}".into()));
    }
    let fit1 = fit_ols(y, sample, &mask1, "outcome regression on {D2=1}")?;
    let fit0 = fit_ols(y, sample, &mask0, "outcome regression on {D2=0}")?;
    Ok((fit1, fit0))
}

/// Naive pre/post contrast that ignores the middle-period treatment:
/// regression-adjusted difference of outcome-change means across the
/// final-period treatment groups, averaged over the D2 = 1 group.
pub fn estimate_naive_prepost(sample: &PanelSample, level: f64) -> Result<EstimateResult> {
    let n = sample.n();
    let (fit1, fit0) = d2_group_fits(sample, sample.delta_y())?;
    let p_d2 = mean(&sample.d2().iter().map(|&d| d as f64).collect::<Vec<_>>());
    let tau = sum((0..n).map(|i| sample.d2()[i] as f64 * (fit1.fitted[i] - fit0.fitted[i])))
        / (n as f64 * p_d2);

    // influence function: [D2 (contrast - tau) + E_n[D2 x]'(b1 - b0)] / E_n[D2]
    let k = sample.k();
    let mut mean_d2x = vec![0.0; k];
    for i in 0..n {
        if sample.d2()[i] == 1 {
            for j in 0..k {
                mean_d2x[j] += sample.row(i)[j];
            }
        }
    }
    for v in mean_d2x.iter_mut() {
        *v /= n as f64;
    }
    let b1 = crate::first_stage::influence_ingredients_ols(sample, &fit1, sample.delta_y())?;
    let b0 = crate::first_stage::influence_ingredients_ols(sample, &fit0, sample.delta_y())?;
    let mut xi = vec![0.0; n];
    for i in 0..n {
        let lead = sample.d2()[i] as f64 * (fit1.fitted[i] - fit0.fitted[i] - tau);
        let adj: f64 = (0..k)
            .map(|j| mean_d2x[j] * (b1.row(i)[j] - b0.row(i)[j]))
            .sum();
        xi[i] = (lead + adj) / p_d2;
    }
    let omega = sum(xi.iter().map(|v| v * v)) / n as f64;
    let se = (omega / n as f64).sqrt();
    let z = z_critical(level);
    let spec = EstimandSpec::with_level(TreatmentPath::new(1, 1), level)?;
    Ok(EstimateResult {
        method: Method::Naive,
        spec,
        tau_hat: tau,
        se,
        ci: (tau - z * se, tau + z * se),
        n_effective: [0, 0, 0, 0],
        diagnostics: Diagnostics {
            notes: vec![
                "pre/post contrast over D2 groups; identifies a non-convex mix of path effects"
                    .into(),
            ],
            ..Default::default()
        },
    })
}

/// Partial-identification bounds for the D2 = 1 group's second-period
/// treatment effect mix under monotone treatment response and a known
/// outcome floor.
#[derive(Debug, Clone, Serialize)]
pub struct BoundsResult {
    pub lower: f64,
    pub upper: f64,
    pub y_min: f64,
}

pub fn partial_id_bounds(sample: &PanelSample, y_min: f64) -> Result<BoundsResult> {
    let y2 = sample
        .y2()
        .ok_or_else(|| Error::Validation("bounds need the raw final-period outcome; map y2 in the schema".into()))?;
    let n = sample.n();
    let (fit1, fit0) = d2_group_fits(sample, sample.delta_y())?;
    let p_d2 = mean(&sample.d2().iter().map(|&d| d as f64).collect::<Vec<_>>());
    let lower = sum((0..n).map(|i| sample.d2()[i] as f64 * (fit1.fitted[i] - fit0.fitted[i])))
        / (n as f64 * p_d2);

    // E[Y2 | D2=0, X] aggregated over the D2=1 covariate distribution
    let mask0: Vec<bool> = (0..n).map(|i| sample.d2()[i] == 0).collect();
    let y2_fit0 = fit_ols(y2, sample, &mask0, "y2 regression on {D2=0}")?;
    let mean_y2_ctrl = sum((0..n).map(|i| sample.d2()[i] as f64 * y2_fit0.fitted[i]))
        / (n as f64 * p_d2);

    let upper = lower + mean_y2_ctrl - y_min;
    if upper < lower {
        return Err(Error::Numerical(format!(
            "upper bound {upper} below lower bound {lower}: y_min = {y_min} exceeds the adjusted control outcome mean"
        )));
    }
    Ok(BoundsResult { lower, upper, y_min })
}

/// Weighted average effect of receiving the second-period treatment,
/// combining the (1,1) and (0,1) path estimates with model-based
/// conditional path shares.
pub fn aggregate_second_period(
    results: &[EstimateResult],
    sample: &PanelSample,
) -> Result<f64> {
    let tau11 = results
        .iter()
        .find(|r| r.spec.d == TreatmentPath::new(1, 1))
        .ok_or_else(|| Error::Validation("aggregate needs an estimate for path (1,1)".into()))?
        .tau_hat;
    let tau01 = results
        .iter()
        .find(|r| r.spec.d == TreatmentPath::new(0, 1))
        .ok_or_else(|| Error::Validation("aggregate needs an estimate for path (0,1)".into()))?
        .tau_hat;

    let n = sample.n();
    let mask: Vec<bool> = (0..n).map(|i| sample.s()[i] == 1 && sample.d2()[i] == 1).collect();
    if !mask.iter().any(|&b| b) {
        return Err(Error::EmptyCell("{S=1, D2=1}".into()));
    }
    let y: Vec<u8> = (0..n).map(|i| u8::from(sample.d1(i) == Some(1))).collect();
    let fit = crate::first_stage::fit_logit(&y, sample, &mask, "pi_1|1 for aggregation")?;
    // model-based share averaged over the D2 = 1 subsample
    let d2_rows: Vec<usize> = (0..n).filter(|&i| sample.d2()[i] == 1).collect();
    let p = sum(d2_rows.iter().map(|&i| fit.fitted[i])) / d2_rows.len() as f64;
    Ok(tau11 * p + tau01 * (1.0 - p))
}

/// Missingness model in (covariates, outcome change), fitted per D2 group.
/// Used when observability may depend on the outcome change itself.
fn fit_q_extended(sample: &PanelSample, d2: u8) -> Result<LogitFit> {
    let n = sample.n();
    let mask: Vec<bool> = (0..n).map(|i| sample.d2()[i] == d2).collect();
    let m = mask.iter().filter(|&&b| b).count();
    if m == 0 {
        return Err(Error::EmptyCell(format!("{{D2={d2}}}")));
    }
    let design = ExtendedDesign { sample, extra: sample.delta_y() };
    let all_observed = (0..n).all(|i| !mask[i] || sample.s()[i] == 1);
    if all_observed {
        let k = sample.k() + 1;
        let mut coef = vec![0.0; k];
        coef[0] = SEPARATION_BOUND;
        return Ok(LogitFit {
            coef,
            fitted: vec![logistic(SEPARATION_BOUND); n],
            subsample_mask: mask,
            converged: true,
            iterations: 0,
            neg_hessian: nalgebra::DMatrix::identity(k, k),
        });
    }
    fit_logit_design(sample.s(), &design, &mask, &format!("q on {{D2={d2}}} in (X, dY)"))
}

/// Inverse probability weighting that stays valid when observability
/// depends on the outcome change: the missingness model is a logit in
/// (X, delta_y) per D2 group, and both weighted means are self-normalized.
pub fn estimate_weak_mar_ipw(sample: &PanelSample, spec: EstimandSpec) -> Result<EstimateResult> {
    let n = sample.n();
    let d = spec.d;
    let nus = fit_nuisances_subset(sample, spec, NuisanceRequirements::IPW)?;
    let q1 = fit_q_extended(sample, 1).map_err(|e| e.in_nuisance("q_d2=1"))?;
    let q0 = fit_q_extended(sample, 0).map_err(|e| e.in_nuisance("q_d2=0"))?;
    let q_at = |i: usize| if sample.d2()[i] == 1 { q1.fitted[i] } else { q0.fitted[i] };

    let mut u1 = vec![0.0; n];
    let mut u2 = vec![0.0; n];
    let mut min_div = f64::INFINITY;
    for i in 0..n {
        if sample.s_on_path(i, d) {
            let q = q_at(i);
            min_div = min_div.min(q);
            u1[i] = 1.0 / clamp_prob(q);
        }
        if sample.s_on_path(i, TreatmentPath::NEVER) {
            let q = q_at(i);
            let pi_d = nus.pi_d_at(i)?;
            let pi_dp = nus.pi_dp_at(i)?;
            min_div = min_div.min(q).min(pi_dp);
            u2[i] = pi_d / (clamp_prob(q) * clamp_prob(pi_dp));
        }
    }
    let den1 = mean(&u1);
    let den2 = mean(&u2);
    if !(den1 > 0.0) || !(den2 > 0.0) {
        return Err(Error::EmptyCell(format!(
            "weak-MAR weights degenerate for target path {d}"
        )));
    }
    let w1: Vec<f64> = u1.iter().map(|v| v / den1).collect();
    let w2: Vec<f64> = u2.iter().map(|v| v / den2).collect();
    let dy = sample.delta_y();
    let tau = sum((0..n).map(|i| (w1[i] - w2[i]) * dy[i])) / n as f64;

    let iv = inference::influence_weak_mar(sample, &nus, &q1, &q0, &w1, &w2)?;
    let var = inference::variance_from(&iv);
    let ci = inference::confidence_interval(tau, &var, spec.level);
    let max_w = w1.iter().chain(w2.iter()).fold(0.0f64, |a, &b| a.max(b));
    let n_eff = [
        w1.iter().filter(|&&w| w > 0.0).count(),
        w2.iter().filter(|&&w| w > 0.0).count(),
        0,
        0,
    ];
    Ok(EstimateResult {
        method: Method::WeakMarIpw,
        spec,
        tau_hat: tau,
        se: var.se,
        ci,
        n_effective: n_eff,
        diagnostics: Diagnostics {
            max_weight: max_w,
            min_divisor_prob: if min_div.is_finite() { min_div } else { 1.0 },
            first_stage_iterations: vec![
                ("q_d2=1".into(), q1.iterations),
                ("q_d2=0".into(), q0.iterations),
            ],
            notes: vec!["missingness model includes delta_y".into()],
        },
    })
}

/// Dispatch an estimator by tag.
pub fn estimate(
    sample: &PanelSample,
    spec: EstimandSpec,
    method: Method,
) -> Result<EstimateResult> {
    match method {
        Method::R => estimate_robust(sample, spec),
        Method::Or => estimate_or(sample, spec),
        Method::Ipw => estimate_ipw(sample, spec),
        Method::Dr => estimate_dr(sample, spec),
        Method::CcOr | Method::CcIpw | Method::CcDr => estimate_cc(sample, spec, method),
        Method::Naive => estimate_naive_prepost(sample, spec.level),
        Method::WeakMarIpw => estimate_weak_mar_ipw(sample, spec),
        Method::RImproved => inference::estimate_robust_improved(sample, spec),
    }
}
