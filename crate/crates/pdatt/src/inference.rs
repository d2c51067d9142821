//! Influence-function inference for the PDATT estimators: the estimated
//! asymptotic variance from the full first-stage-corrected influence
//! function, reduced variants for the OR/IPW/DR estimators, the
//! efficiency-bound estimate built from true nuisance functions, normal
//! confidence intervals, and a stepwise estimator whose first stages are
//! chosen to switch off the leading estimation effects.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::estimators::{Diagnostics, EstimateResult, Method, WeightSet};
use crate::first_stage::{
    clamp_prob, fit_logit, influence_ingredients, logit_influence_design, ExtendedDesign,
    InfluenceIngredients, LogitFit, NuisanceSet, RowMat, COEF_TOL, MAX_HALVINGS, MAX_ITER,
    SCORE_TOL, SEPARATION_BOUND,
};
use crate::linalg::least_squares_drop_collinear;
use crate::panel::{EstimandSpec, PanelSample, TreatmentPath};
use crate::stats::{logistic, mean, sum, z_critical};

/// Which estimator's influence function to assemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flavor {
    Robust,
    Or,
    Ipw,
    Dr,
}

/// Per-observation influence values for one estimate.
#[derive(Debug, Clone)]
pub struct InfluenceVector {
    pub xi: Vec<f64>,
    /// The weight-level component (no first-stage correction terms).
    pub psi: Vec<f64>,
    pub method: Method,
    /// Estimated mean of each first-stage correction block.
    pub components: BTreeMap<String, Vec<f64>>,
}

/// Estimated asymptotic variance and standard error.
#[derive(Debug, Clone, Copy)]
pub struct VarianceResult {
    /// omega_hat = E_n[xi^2] (variance on the sqrt(n) scale).
    pub omega_hat: f64,
    pub se: f64,
    /// Efficiency-bound estimate, when one was computed.
    pub seb_hat: Option<f64>,
}

pub fn variance_from(iv: &InfluenceVector) -> VarianceResult {
    let n = iv.xi.len() as f64;
    let omega = sum(iv.xi.iter().map(|v| v * v)) / n;
    VarianceResult { omega_hat: omega, se: (omega / n).sqrt(), seb_hat: None }
}

/// tau_hat ± z_{(1-level)/2} * se.
pub fn confidence_interval(tau_hat: f64, var: &VarianceResult, level: f64) -> (f64, f64) {
    let z = z_critical(level);
    (tau_hat - z * var.se, tau_hat + z * var.se)
}

/// The weight-level influence component psi shared by all flavors.
/// `a` is delta_y - mu_d' (or delta_y when no outcome model is used) and
/// `b` is mu_d - mu_d' (empty unless the robust flavor).
fn psi_vector(w: &WeightSet, a: &[f64], b: &[f64], flavor: Flavor) -> (Vec<f64>, [f64; 4]) {
    let n = a.len();
    let nf = n as f64;
    let c1 = sum((0..n).map(|i| w.w1[i] * a[i])) / nf;
    let c2 = sum((0..n).map(|i| w.w2[i] * a[i])) / nf;
    let (c3, c4) = if flavor == Flavor::Robust {
        (
            sum((0..n).map(|i| w.w3[i] * b[i])) / nf,
            sum((0..n).map(|i| w.w4[i] * b[i])) / nf,
        )
    } else {
        (0.0, 0.0)
    };
    let mut psi = vec![0.0; n];
    for i in 0..n {
        psi[i] = match flavor {
            Flavor::Or => w.w1[i] * (a[i] - c1),
            Flavor::Ipw | Flavor::Dr => w.w1[i] * (a[i] - c1) - w.w2[i] * (a[i] - c2),
            Flavor::Robust => {
                w.w1[i] * (a[i] - c1) - w.w2[i] * (a[i] - c2) + w.w3[i] * (b[i] - c3)
                    - w.w4[i] * (b[i] - c4)
            }
        };
    }
    (psi, [c1, c2, c3, c4])
}

/// Mean over all rows of `w_i * (1 - lam_i) * x_i * r_i` (a k-vector).
fn weighted_block_mean(
    sample: &PanelSample,
    w: &[f64],
    lam: Option<&[f64]>,
    r: &[f64],
    center: f64,
) -> Vec<f64> {
    let n = sample.n();
    let k = sample.k();
    let mut acc = vec![0.0; k];
    for i in 0..n {
        if w[i] == 0.0 {
            continue;
        }
        let factor = match lam {
            Some(l) => w[i] * (1.0 - l[i]) * (r[i] - center),
            None => w[i] * (r[i] - center),
        };
        let row = sample.row(i);
        for j in 0..k {
            acc[j] += factor * row[j];
        }
    }
    for v in acc.iter_mut() {
        *v /= n as f64;
    }
    acc
}

fn add_correction(xi: &mut [f64], b: &RowMat, psi_bar: &[f64], sign: f64) {
    for i in 0..xi.len() {
        let row = b.row(i);
        let mut acc = 0.0;
        for j in 0..psi_bar.len() {
            acc += row[j] * psi_bar[j];
        }
        xi[i] += sign * acc;
    }
}

/// Assemble the influence function xi for the requested flavor, with
/// every population expectation replaced by a full-sample mean.
pub fn influence_for(
    sample: &PanelSample,
    nus: &NuisanceSet,
    w: &WeightSet,
    _tau_hat: f64,
    ingredients: &InfluenceIngredients,
    flavor: Flavor,
    method: Method,
) -> Result<InfluenceVector> {
    let n = sample.n();
    let k = sample.k();
    let dy = sample.delta_y();

    let (a, b): (Vec<f64>, Vec<f64>) = match flavor {
        Flavor::Ipw => (dy.to_vec(), Vec::new()),
        Flavor::Or | Flavor::Dr => {
            let mu_dp = &nus.mu_dp()?.fitted;
            ((0..n).map(|i| dy[i] - mu_dp[i]).collect(), Vec::new())
        }
        Flavor::Robust => {
            let mu_dp = &nus.mu_dp()?.fitted;
            let mu_d = &nus.mu_d()?.fitted;
            (
                (0..n).map(|i| dy[i] - mu_dp[i]).collect(),
                (0..n).map(|i| mu_d[i] - mu_dp[i]).collect(),
            )
        }
    };

    let (psi, c) = psi_vector(w, &a, &b, flavor);
    let [c1, c2, c3, c4] = c;
    let mut xi = psi.clone();
    let mut components: BTreeMap<String, Vec<f64>> = BTreeMap::new();

    let ones = vec![1.0; n];
    let w1w2: Vec<f64> = (0..n).map(|i| w.w1[i] - w.w2[i]).collect();
    let w34: Vec<f64> = (0..n).map(|i| w.w3[i] - w.w4[i]).collect();

    // beta blocks (linear outcome model: mu-dot = x)
    match flavor {
        Flavor::Robust => {
            if let Some(bm) = &ingredients.b_beta_d {
                let psi_bar = weighted_block_mean(sample, &w34, None, &ones, 0.0);
                add_correction(&mut xi, bm, &psi_bar, 1.0);
                components.insert("Psi_beta_d".into(), psi_bar);
            }
            if let Some(bm) = &ingredients.b_beta_dp {
                let both: Vec<f64> = (0..n).map(|i| w1w2[i] + w34[i]).collect();
                let psi_bar = weighted_block_mean(sample, &both, None, &ones, 0.0);
                add_correction(&mut xi, bm, &psi_bar, -1.0);
                components.insert("Psi_beta_dp".into(), psi_bar);
            }
        }
        Flavor::Dr => {
            if let Some(bm) = &ingredients.b_beta_dp {
                let psi_bar = weighted_block_mean(sample, &w1w2, None, &ones, 0.0);
                add_correction(&mut xi, bm, &psi_bar, -1.0);
                components.insert("Psi_beta_dp".into(), psi_bar);
            }
        }
        Flavor::Or => {
            if let Some(bm) = &ingredients.b_beta_dp {
                let psi_bar = weighted_block_mean(sample, &w.w1, None, &ones, 0.0);
                add_correction(&mut xi, bm, &psi_bar, -1.0);
                components.insert("Psi_beta_dp".into(), psi_bar);
            }
        }
        Flavor::Ipw => {}
    }

    // gamma blocks (propensity models), absent for the OR flavor
    if flavor != Flavor::Or {
        if let (Some(bm), Ok(fit)) = (&ingredients.b_gamma_d1gd2, nus.pi_d1gd2()) {
            let lam = &fit.fitted;
            let mut psi_bar = weighted_block_mean(sample, &w.w2, Some(lam), &a, c2);
            if flavor == Flavor::Robust {
                let from_w3 = weighted_block_mean(sample, &w.w3, Some(lam), &b, c3);
                let from_w4 = weighted_block_mean(sample, &w.w4, Some(lam), &b, c4);
                for j in 0..k {
                    psi_bar[j] += -from_w3[j] + from_w4[j];
                }
            }
            add_correction(&mut xi, bm, &psi_bar, -1.0);
            components.insert("Psi_gamma_d1gd2".into(), psi_bar);
        }
        // The marginal D2 propensity cancels from the w2 ratio when the
        // target path has d2 = 0, so its block is zero there.
        if nus.spec.d.d2 == 1 {
            if let (Some(bm), Ok(fit)) = (&ingredients.b_gamma_d2, nus.pi_d2()) {
                let psi_bar = weighted_block_mean(sample, &w.w2, Some(&fit.fitted), &a, c2);
                add_correction(&mut xi, bm, &psi_bar, -1.0);
                components.insert("Psi_gamma_d2".into(), psi_bar);
            }
        }
        if let (Some(bm), Ok(fit)) = (&ingredients.b_gamma_d1pgd2p, nus.pi_d1pgd2p()) {
            let mut psi_bar = weighted_block_mean(sample, &w.w2, Some(&fit.fitted), &a, c2);
            for v in psi_bar.iter_mut() {
                *v = -*v;
            }
            add_correction(&mut xi, bm, &psi_bar, -1.0);
            components.insert("Psi_gamma_dp".into(), psi_bar);
        }
    }

    // delta blocks (missingness models), absent in complete-case mode
    if !nus.complete_case {
        if let (Some(bm), Some(fit)) = (&ingredients.b_delta_d2, &nus.phi_d2) {
            let lam = &fit.fitted;
            let mut psi_bar = weighted_block_mean(sample, &w.w1, Some(lam), &a, c1);
            for v in psi_bar.iter_mut() {
                *v = -*v;
            }
            if flavor == Flavor::Robust {
                let from_w4 = weighted_block_mean(sample, &w.w4, Some(lam), &b, c4);
                for j in 0..k {
                    psi_bar[j] += from_w4[j];
                }
            }
            add_correction(&mut xi, bm, &psi_bar, 1.0);
            components.insert("Psi_delta_d2".into(), psi_bar);
        }
        if flavor != Flavor::Or {
            if let (Some(bm), Some(fit)) = (&ingredients.b_delta_d2p, &nus.phi_d2p) {
                let mut psi_bar = weighted_block_mean(sample, &w.w2, Some(&fit.fitted), &a, c2);
                for v in psi_bar.iter_mut() {
                    *v = -*v;
                }
                add_correction(&mut xi, bm, &psi_bar, -1.0);
                components.insert("Psi_delta_d2p".into(), psi_bar);
            }
        }
    }

    Ok(InfluenceVector { xi, psi, method, components })
}

/// Influence function for the robust estimator.
pub fn influence_robust(
    sample: &PanelSample,
    nus: &NuisanceSet,
    w: &WeightSet,
    tau_hat: f64,
    ingredients: &InfluenceIngredients,
) -> Result<InfluenceVector> {
    influence_for(sample, nus, w, tau_hat, ingredients, Flavor::Robust, Method::R)
}

/// Influence function for a reduced flavor.
pub fn influence_reduced(
    sample: &PanelSample,
    nus: &NuisanceSet,
    w: &WeightSet,
    tau_hat: f64,
    ingredients: &InfluenceIngredients,
    flavor: Flavor,
) -> Result<InfluenceVector> {
    let method = match flavor {
        Flavor::Or => Method::Or,
        Flavor::Ipw => Method::Ipw,
        Flavor::Dr => Method::Dr,
        Flavor::Robust => Method::R,
    };
    influence_for(sample, nus, w, tau_hat, ingredients, flavor, method)
}

/// True nuisance values per observation, as supplied by a simulation (or,
/// with an explicit caveat, by fitted models in applications).
#[derive(Debug, Clone, Copy)]
pub struct TrueNuisanceValues<'a> {
    pub m_d: &'a [f64],
    pub m_dp: &'a [f64],
    /// P(D1 = d1 | D2 = d2, X) for the target path.
    pub p_d1gd2: &'a [f64],
    /// P(D1 = 0 | D2 = 0, X).
    pub p_d1pgd2p: &'a [f64],
    /// P(D2 = 1 | X).
    pub p_d2_1: &'a [f64],
    /// P(S = 1 | D2 = d2, X) for the target path's d2 group.
    pub q_d2: &'a [f64],
    /// P(S = 1 | D2 = 0, X).
    pub q_d2p: &'a [f64],
}

/// Efficiency-bound estimate E_n[F^2], with the efficient influence
/// function built from the supplied true functions and target value.
pub fn seb_estimate(
    sample: &PanelSample,
    truth: &TrueNuisanceValues<'_>,
    spec: EstimandSpec,
    tau: f64,
) -> Result<f64> {
    let n = sample.n();
    for arr in [
        truth.m_d,
        truth.m_dp,
        truth.p_d1gd2,
        truth.p_d1pgd2p,
        truth.p_d2_1,
        truth.q_d2,
        truth.q_d2p,
    ] {
        if arr.len() != n {
            return Err(Error::Validation("true nuisance arrays must have length n".into()));
        }
    }
    let d = spec.d;
    let mut u1 = vec![0.0; n];
    let mut u2 = vec![0.0; n];
    let mut u3 = vec![0.0; n];
    let mut u4 = vec![0.0; n];
    for i in 0..n {
        let p2 = if d.d2 == 1 { truth.p_d2_1[i] } else { 1.0 - truth.p_d2_1[i] };
        let p_d = truth.p_d1gd2[i] * p2;
        let p_dp = truth.p_d1pgd2p[i] * (1.0 - truth.p_d2_1[i]);
        if sample.s_on_path(i, d) {
            u1[i] = 1.0 / clamp_prob(truth.q_d2[i]);
        }
        if sample.s_on_path(i, TreatmentPath::NEVER) {
            u2[i] = p_d / (clamp_prob(truth.q_d2p[i]) * clamp_prob(p_dp));
        }
        if sample.d2()[i] == d.d2 {
            u3[i] = truth.p_d1gd2[i];
            if sample.s()[i] == 1 {
                u4[i] = truth.p_d1gd2[i] / clamp_prob(truth.q_d2[i]);
            }
        }
    }
    let d1 = mean(&u1);
    let d2m = mean(&u2);
    let d3 = mean(&u3);
    let d4 = mean(&u4);
    if !(d1 > 0.0 && d2m > 0.0 && d3 > 0.0 && d4 > 0.0) {
        return Err(Error::EmptyCell("efficiency bound weights degenerate".into()));
    }
    let dy = sample.delta_y();
    let mut acc = 0.0;
    for i in 0..n {
        let w1 = u1[i] / d1;
        let w2 = u2[i] / d2m;
        let w3 = u3[i] / d3;
        let w4 = u4[i] / d4;
        let f = w1 * (dy[i] - truth.m_dp[i] - tau) - w2 * (dy[i] - truth.m_dp[i])
            + (w3 - w4) * (truth.m_d[i] - truth.m_dp[i] - tau);
        acc += f * f;
    }
    Ok(acc / n as f64)
}

/// Influence function for the weighting estimator whose missingness model
/// includes the outcome change (fitted per D2 group on (X, delta_y)).
pub(crate) fn influence_weak_mar(
    sample: &PanelSample,
    nus: &NuisanceSet,
    q1: &LogitFit,
    q0: &LogitFit,
    w1: &[f64],
    w2: &[f64],
) -> Result<InfluenceVector> {
    let n = sample.n();
    let k = sample.k();
    let dy = sample.delta_y();
    let d2_spec = nus.spec.d.d2;

    let nf = n as f64;
    let c1 = sum((0..n).map(|i| w1[i] * dy[i])) / nf;
    let c2 = sum((0..n).map(|i| w2[i] * dy[i])) / nf;
    let mut psi = vec![0.0; n];
    for i in 0..n {
        psi[i] = w1[i] * (dy[i] - c1) - w2[i] * (dy[i] - c2);
    }
    let mut xi = psi.clone();
    let mut components = BTreeMap::new();

    // propensity blocks, as in the plain weighting estimator
    let ingredients = influence_ingredients(sample, nus)?;
    let a: Vec<f64> = dy.to_vec();
    if let (Some(bm), Ok(fit)) = (&ingredients.b_gamma_d1gd2, nus.pi_d1gd2()) {
        let psi_bar = weighted_block_mean(sample, w2, Some(&fit.fitted), &a, c2);
        add_correction(&mut xi, bm, &psi_bar, -1.0);
        components.insert("Psi_gamma_d1gd2".into(), psi_bar);
    }
    if d2_spec == 1 {
        if let (Some(bm), Ok(fit)) = (&ingredients.b_gamma_d2, nus.pi_d2()) {
            let psi_bar = weighted_block_mean(sample, w2, Some(&fit.fitted), &a, c2);
            add_correction(&mut xi, bm, &psi_bar, -1.0);
            components.insert("Psi_gamma_d2".into(), psi_bar);
        }
    }
    if let (Some(bm), Ok(fit)) = (&ingredients.b_gamma_d1pgd2p, nus.pi_d1pgd2p()) {
        let mut psi_bar = weighted_block_mean(sample, w2, Some(&fit.fitted), &a, c2);
        for v in psi_bar.iter_mut() {
            *v = -*v;
        }
        add_correction(&mut xi, bm, &psi_bar, -1.0);
        components.insert("Psi_gamma_dp".into(), psi_bar);
    }

    // q-model blocks on the extended design (x, delta_y)
    let design = ExtendedDesign { sample, extra: dy };
    let q_for = |d2: u8| if d2 == 1 { q1 } else { q0 };
    let q_spec = q_for(d2_spec);
    let q_ctrl = q_for(0);
    let b_spec = logit_influence_design(&design, q_spec, |i| sample.s()[i] as f64, "b_q_d2")?;
    let b_ctrl = logit_influence_design(&design, q_ctrl, |i| sample.s()[i] as f64, "b_q_d2p")?;

    let ext_block_mean = |wv: &[f64], fit: &LogitFit, center: f64| -> Vec<f64> {
        let mut acc = vec![0.0; k + 1];
        for i in 0..n {
            if wv[i] == 0.0 {
                continue;
            }
            let factor = wv[i] * (1.0 - fit.fitted[i]) * (dy[i] - center);
            let row = sample.row(i);
            for j in 0..k {
                acc[j] += factor * row[j];
            }
            acc[k] += factor * dy[i];
        }
        for v in acc.iter_mut() {
            *v /= nf;
        }
        acc
    };

    // Psi_q_d2 = -E[w1 (1-q) x~ (dY - c1)]; enters with sign +1
    let mut psi_q = ext_block_mean(w1, q_spec, c1);
    for v in psi_q.iter_mut() {
        *v = -*v;
    }
    add_correction(&mut xi, &b_spec, &psi_q, 1.0);
    components.insert("Psi_q_d2".into(), psi_q);

    // Psi_q_d2' = -E[w2 (1-q') x~ (dY - c2)]; enters with sign -1
    let mut psi_qp = ext_block_mean(w2, q_ctrl, c2);
    for v in psi_qp.iter_mut() {
        *v = -*v;
    }
    add_correction(&mut xi, &b_ctrl, &psi_qp, -1.0);
    components.insert("Psi_q_d2p".into(), psi_qp);

    Ok(InfluenceVector { xi, psi, method: Method::WeakMarIpw, components })
}

// ---------------------------------------------------------------------
// Stepwise inference-robust estimator
// ---------------------------------------------------------------------

/// Newton maximization with step-halving for smooth concave objectives.
/// `eval` returns (value, gradient, negative Hessian), all on the mean
/// scale of the fitting cell.
fn newton_maximize(
    start: DVector<f64>,
    context: &str,
    eval: impl Fn(&DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>),
) -> Result<(DVector<f64>, usize)> {
    let mut coef = start;
    let (mut val, mut grad, mut neg_hess) = eval(&coef);
    let mut trace = Vec::new();

    for iter in 0..MAX_ITER {
        let max_score = grad.amax();
        trace.push(max_score);
        let step = neg_hess.clone().cholesky().map(|c| c.solve(&grad)).ok_or_else(|| {
            Error::Singular { context: format!("{context}: Newton Hessian"), columns: vec![] }
        })?;
        let mut t = 1.0;
        let mut accepted = false;
        let mut cand = coef.clone();
        let mut cand_val = val;
        let mut cand_grad = grad.clone();
        let mut cand_hess = neg_hess.clone();
        for _ in 0..=MAX_HALVINGS {
            cand = &coef + &step * t;
            let (v, g, h) = eval(&cand);
            if v.is_finite() && v >= val {
                cand_val = v;
                cand_grad = g;
                cand_hess = h;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(Error::NonConvergence {
                context: context.to_string(),
                iterations: iter + 1,
                separation: false,
                trace,
            });
        }
        let delta = (&cand - &coef).amax();
        let rel_change = delta / (1.0 + coef.amax());
        coef = cand;
        val = cand_val;
        grad = cand_grad;
        neg_hess = cand_hess;

        if coef.amax() > SEPARATION_BOUND {
            return Err(Error::NonConvergence {
                context: context.to_string(),
                iterations: iter + 1,
                separation: true,
                trace,
            });
        }
        if grad.amax() < SCORE_TOL && rel_change < COEF_TOL {
            return Ok((coef, iter + 1));
        }
    }
    Err(Error::NonConvergence {
        context: context.to_string(),
        iterations: MAX_ITER,
        separation: false,
        trace,
    })
}

fn pinned_observed_coef(k: usize) -> Vec<f64> {
    let mut coef = vec![0.0; k];
    coef[0] = SEPARATION_BOUND;
    coef
}

/// The stepwise estimator: standard logits for the propensities, tilted
/// objectives for the two missingness fits (whose first-order conditions
/// force the weighted covariate balance E_n[(w1-w2)x] = E_n[(w3-w4)x] = 0),
/// augmented least-squares outcome fits, and the simplified variance
/// E_n[psi^2].
pub fn estimate_robust_improved(
    sample: &PanelSample,
    spec: EstimandSpec,
) -> Result<EstimateResult> {
    let n = sample.n();
    let k = sample.k();
    let d = spec.d;
    let dy = sample.delta_y();
    let mut iterations: Vec<(String, usize)> = Vec::new();

    // 1-3: standard logits for the conditional and marginal propensities
    let mask_s1d2: Vec<bool> = (0..n).map(|i| sample.s()[i] == 1 && sample.d2()[i] == d.d2).collect();
    let y_d1: Vec<u8> = (0..n).map(|i| u8::from(sample.d1(i) == Some(d.d1))).collect();
    let pi_d1gd2 = fit_logit(&y_d1, sample, &mask_s1d2, "pi_d1|d2 (stepwise)")
        .map_err(|e| e.in_nuisance("pi_d1|d2"))?;

    let mask_s1d2p: Vec<bool> = (0..n).map(|i| sample.s()[i] == 1 && sample.d2()[i] == 0).collect();
    let y_d1p: Vec<u8> = (0..n).map(|i| u8::from(sample.d1(i) == Some(0))).collect();
    let pi_d1pgd2p = fit_logit(&y_d1p, sample, &mask_s1d2p, "pi_d1'|d2' (stepwise)")
        .map_err(|e| e.in_nuisance("pi_d1'|d2'"))?;

    let y_d2ind: Vec<u8> = (0..n).map(|i| u8::from(sample.d2()[i] == d.d2)).collect();
    let pi_d2ind = fit_logit(&y_d2ind, sample, &vec![true; n], "pi_d2 indicator (stepwise)")
        .map_err(|e| e.in_nuisance("pi_d2"))?;
    iterations.push(("pi_d1|d2".into(), pi_d1gd2.iterations));
    iterations.push(("pi_d1'|d2'".into(), pi_d1pgd2p.iterations));
    iterations.push(("pi_d2".into(), pi_d2ind.iterations));

    // odds of the marginal D2 model; cancels when d2 = d2' = 0
    let odds: Vec<f64> = (0..n)
        .map(|i| {
            if d.d2 == 1 {
                let p = pi_d2ind.fitted[i];
                p / clamp_prob(1.0 - p)
            } else {
                1.0
            }
        })
        .collect();
    let ratio: Vec<f64> = (0..n)
        .map(|i| pi_d1gd2.fitted[i] / clamp_prob(pi_d1pgd2p.fitted[i]) * odds[i])
        .collect();

    // 4: tilted missingness fit for the d2 group
    let cell_d2: Vec<usize> = (0..n).filter(|&i| sample.d2()[i] == d.d2).collect();
    if cell_d2.is_empty() {
        return Err(Error::EmptyCell(format!("{{D2={}}}", d.d2)).in_nuisance("delta_d2"));
    }
    let all_observed_d2 = cell_d2.iter().all(|&i| sample.s()[i] == 1);
    let (delta_d2, it_d2) = if all_observed_d2 {
        (pinned_observed_coef(k), 0)
    } else {
        let mask: Vec<bool> = (0..n).map(|i| sample.d2()[i] == d.d2).collect();
        let warm = fit_logit(sample.s(), sample, &mask, "phi_d2 warm start")
            .map_err(|e| e.in_nuisance("delta_d2 warm start"))?;
        let minv = 1.0 / cell_d2.len() as f64;
        let eval = |beta: &DVector<f64>| {
            let mut val = 0.0;
            let mut grad = DVector::zeros(k);
            let mut hess = DMatrix::zeros(k, k);
            for &i in &cell_d2 {
                let row = sample.row(i);
                let z: f64 = row.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
                let pi1 = pi_d1gd2.fitted[i];
                let s = sample.s()[i] as f64;
                let e = (-z).exp();
                val += pi1 * ((s - 1.0) * z - s * e);
                let gfac = pi1 * ((s - 1.0) + s * e);
                let hfac = pi1 * s * e;
                for a in 0..k {
                    grad[a] += gfac * row[a];
                    for b in a..k {
                        hess[(a, b)] += hfac * row[a] * row[b];
                    }
                }
            }
            val *= minv;
            grad *= minv;
            for a in 0..k {
                for b in a..k {
                    hess[(a, b)] *= minv;
                    hess[(b, a)] = hess[(a, b)];
                }
            }
            (val, grad, hess)
        };
        let (coef, iters) =
            newton_maximize(DVector::from_vec(warm.coef.clone()), "delta_d2 tilt", eval)?;
        (coef.iter().copied().collect(), iters)
    };
    iterations.push(("delta_d2 tilt".into(), it_d2));
    let phi_d2_fitted: Vec<f64> = (0..n)
        .map(|i| logistic(sample.row(i).iter().zip(&delta_d2).map(|(a, b)| a * b).sum()))
        .collect();

    // 5: tilted missingness fit for the d2' group
    let cell_s1: Vec<usize> = (0..n).filter(|&i| sample.s()[i] == 1).collect();
    let cell_d2p: Vec<usize> = (0..n).filter(|&i| sample.d2()[i] == 0).collect();
    if cell_d2p.is_empty() {
        return Err(Error::EmptyCell("{D2=0}".into()).in_nuisance("delta_d2'"));
    }
    let all_observed_d2p = cell_d2p.iter().all(|&i| sample.s()[i] == 1);
    let (delta_d2p, it_d2p) = if all_observed_d2p {
        (pinned_observed_coef(k), 0)
    } else {
        let mask: Vec<bool> = (0..n).map(|i| sample.d2()[i] == 0).collect();
        let warm = fit_logit(sample.s(), sample, &mask, "phi_d2' warm start")
            .map_err(|e| e.in_nuisance("delta_d2' warm start"))?;
        let minv = 1.0 / cell_s1.len() as f64;
        let eval = |beta: &DVector<f64>| {
            let mut val = 0.0;
            let mut grad = DVector::zeros(k);
            let mut hess = DMatrix::zeros(k, k);
            for &i in &cell_s1 {
                let row = sample.row(i);
                let z: f64 = row.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
                let on_dp = sample.s_on_path(i, TreatmentPath::NEVER);
                let on_d = sample.s_on_path(i, d);
                let mut gfac = 0.0;
                if on_dp {
                    let e = (-z).exp();
                    val += ratio[i] * (z - e);
                    gfac += ratio[i] * (1.0 + e);
                    let hfac = ratio[i] * e;
                    for a in 0..k {
                        for b in a..k {
                            hess[(a, b)] += hfac * row[a] * row[b];
                        }
                    }
                }
                if on_d {
                    let inv_phi = 1.0 / clamp_prob(phi_d2_fitted[i]);
                    val -= inv_phi * z;
                    gfac -= inv_phi;
                }
                if gfac != 0.0 {
                    for a in 0..k {
                        grad[a] += gfac * row[a];
                    }
                }
            }
            val *= minv;
            grad *= minv;
            for a in 0..k {
                for b in a..k {
                    hess[(a, b)] *= minv;
                    hess[(b, a)] = hess[(a, b)];
                }
            }
            (val, grad, hess)
        };
        let (coef, iters) =
            newton_maximize(DVector::from_vec(warm.coef.clone()), "delta_d2' tilt", eval)?;
        (coef.iter().copied().collect(), iters)
    };
    iterations.push(("delta_d2' tilt".into(), it_d2p));
    let phi_d2p_fitted: Vec<f64> = (0..n)
        .map(|i| logistic(sample.row(i).iter().zip(&delta_d2p).map(|(a, b)| a * b).sum()))
        .collect();

    // weights from the tilted fits
    let mut u1 = vec![0.0; n];
    let mut u2 = vec![0.0; n];
    let mut u3 = vec![0.0; n];
    let mut u4 = vec![0.0; n];
    let mut min_div = f64::INFINITY;
    for i in 0..n {
        if sample.s_on_path(i, d) {
            min_div = min_div.min(phi_d2_fitted[i]);
            u1[i] = 1.0 / clamp_prob(phi_d2_fitted[i]);
        }
        if sample.s_on_path(i, TreatmentPath::NEVER) {
            min_div = min_div.min(phi_d2p_fitted[i]);
            u2[i] = ratio[i] / clamp_prob(phi_d2p_fitted[i]);
        }
        if sample.d2()[i] == d.d2 {
            u3[i] = pi_d1gd2.fitted[i];
            if sample.s()[i] == 1 {
                u4[i] = pi_d1gd2.fitted[i] / clamp_prob(phi_d2_fitted[i]);
            }
        }
    }
    let dens = [mean(&u1), mean(&u2), mean(&u3), mean(&u4)];
    for (j, name) in ["w1", "w2", "w3", "w4"].iter().enumerate() {
        if !(dens[j] > 0.0) {
            return Err(Error::EmptyCell(format!("weight group {name} degenerate (stepwise)")));
        }
    }
    let w1: Vec<f64> = u1.iter().map(|v| v / dens[0]).collect();
    let w2: Vec<f64> = u2.iter().map(|v| v / dens[1]).collect();
    let w3: Vec<f64> = u3.iter().map(|v| v / dens[2]).collect();
    let w4: Vec<f64> = u4.iter().map(|v| v / dens[3]).collect();

    // 6: augmented least squares for the comparison-path outcome model,
    // fitted on {S=1, D=d'}; weight columns that vanish there are dropped.
    let mul = |a: &[f64], b: &dyn Fn(usize) -> f64| -> Vec<f64> {
        (0..n).map(|i| a[i] * b(i)).collect()
    };
    let col = |j: usize| -> Vec<f64> { (0..n).map(|i| sample.row(i)[j]).collect() };
    let x_cols: Vec<Vec<f64>> = (0..k).map(col).collect();

    let build_design = |blocks: &[Vec<f64>]| -> Vec<Vec<f64>> {
        // first block is the unit scale for the plain covariates
        let mut cols = Vec::with_capacity(blocks.len() * k);
        for scale in blocks {
            for xj in &x_cols {
                cols.push(mul(scale, &|i| xj[i]));
            }
        }
        cols
    };

    let ones_col = vec![1.0; n];
    let design_dp = build_design(&[
        ones_col.clone(),
        w2.clone(),
        mul(&w2, &|i| pi_d1gd2.fitted[i]),
        mul(&w2, &|i| pi_d1pgd2p.fitted[i]),
        w1.clone(),
        mul(&w1, &|i| phi_d2_fitted[i]),
    ]);
    let mask_dp: Vec<bool> = (0..n).map(|i| sample.s_on_path(i, TreatmentPath::NEVER)).collect();
    let (coef_dp, _) = restricted_ls(&design_dp, dy, &mask_dp, "beta_d' (stepwise)")?;
    let mu_dp: Vec<f64> = (0..n)
        .map(|i| design_dp.iter().zip(&coef_dp).map(|(c, b)| c[i] * b).sum())
        .collect();

    // 7: augmented least squares for the target-path outcome model on
    // {S=1, D=d}.
    let w34: Vec<f64> = (0..n).map(|i| w3[i] - w4[i]).collect();
    let design_d = build_design(&[
        ones_col,
        mul(&w34, &|i| pi_d1gd2.fitted[i]),
        w3.clone(),
        w4.clone(),
        mul(&w4, &|i| phi_d2_fitted[i]),
    ]);
    let mask_d: Vec<bool> = (0..n).map(|i| sample.s_on_path(i, d)).collect();
    let (coef_d, _) = restricted_ls(&design_d, dy, &mask_d, "beta_d (stepwise)")?;
    let mu_d: Vec<f64> = (0..n)
        .map(|i| design_d.iter().zip(&coef_d).map(|(c, b)| c[i] * b).sum())
        .collect();

    // point estimate and simplified variance E_n[psi^2]
    let a: Vec<f64> = (0..n).map(|i| dy[i] - mu_dp[i]).collect();
    let b: Vec<f64> = (0..n).map(|i| mu_d[i] - mu_dp[i]).collect();
    let nf = n as f64;
    let tau = sum((0..n).map(|i| (w1[i] - w2[i]) * a[i])) / nf
        + sum((0..n).map(|i| w34[i] * b[i])) / nf;

    let wset = WeightSet {
        w1,
        w2,
        w3,
        w4,
        raw_denominators: dens,
        max_weight: 0.0,
        min_divisor_prob: if min_div.is_finite() { min_div } else { 1.0 },
    };
    let (psi, _) = psi_vector(&wset, &a, &b, Flavor::Robust);
    let omega = sum(psi.iter().map(|v| v * v)) / nf;
    let se = (omega / nf).sqrt();
    let z = z_critical(spec.level);
    let max_w = wset
        .w1
        .iter()
        .chain(&wset.w2)
        .chain(&wset.w3)
        .chain(&wset.w4)
        .fold(0.0f64, |acc, &v| acc.max(v));

    Ok(EstimateResult {
        method: Method::RImproved,
        spec,
        tau_hat: tau,
        se,
        ci: (tau - z * se, tau + z * se),
        n_effective: wset.n_effective(),
        diagnostics: Diagnostics {
            max_weight: max_w,
            min_divisor_prob: wset.min_divisor_prob,
            first_stage_iterations: iterations,
            notes: vec!["simplified variance E_n[psi^2]".into()],
        },
    })
}

/// Least squares restricted to masked rows; collinear (or vanished)
/// columns are dropped and get coefficient zero.
fn restricted_ls(
    columns: &[Vec<f64>],
    y: &[f64],
    mask: &[bool],
    context: &str,
) -> Result<(Vec<f64>, Vec<usize>)> {
    let idx: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
    if idx.is_empty() {
        return Err(Error::EmptyCell(format!("{context}: empty fitting cell")));
    }
    let sub_cols: Vec<Vec<f64>> =
        columns.iter().map(|c| idx.iter().map(|&i| c[i]).collect()).collect();
    let sub_y: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    least_squares_drop_collinear(&sub_cols, &sub_y)
        .map_err(|e| e.in_nuisance(context))
}

/// Variance result with an efficiency-bound attachment.
pub fn variance_with_seb(iv: &InfluenceVector, seb: f64) -> VarianceResult {
    let mut v = variance_from(iv);
    v.seb_hat = Some(seb);
    v
}

/// Compute E_n[psi^2] for externally supplied weights and residual
/// pieces; this is the simplified variance used by the stepwise
/// estimator, exposed for identity checks.
pub fn psi_squared_mean(w: &WeightSet, a: &[f64], b: &[f64]) -> f64 {
    let (psi, _) = psi_vector(w, a, b, Flavor::Robust);
    sum(psi.iter().map(|v| v * v)) / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confidence_interval_matches_reported_numbers() {
        // CI arithmetic check: tau = -0.176, se = 0.066, level 0.95
        let var = VarianceResult { omega_hat: 0.0, se: 0.066, seb_hat: None };
        let (lo, hi) = confidence_interval(-0.176, &var, 0.95);
        assert!((lo - (-0.30535)).abs() < 5e-4, "lo = {lo}");
        assert!((hi - (-0.04664)).abs() < 5e-4, "hi = {hi}");
        // rounded to three decimals these are [-0.305, -0.047]
        assert_eq!(format!("{lo:.3}"), "-0.305");
        assert_eq!(format!("{hi:.3}"), "-0.047");
    }

    #[test]
    fn zero_se_gives_degenerate_interval() {
        let var = VarianceResult { omega_hat: 0.0, se: 0.0, seb_hat: None };
        let (lo, hi) = confidence_interval(1.5, &var, 0.95);
        assert_eq!((lo, hi), (1.5, 1.5));
    }

    #[test]
    fn wider_level_strictly_contains_narrower() {
        let var = VarianceResult { omega_hat: 1.0, se: 0.1, seb_hat: None };
        let (lo95, hi95) = confidence_interval(0.3, &var, 0.95);
        let (lo99, hi99) = confidence_interval(0.3, &var, 0.99);
        assert!(lo99 < lo95 && hi99 > hi95);
    }
}
