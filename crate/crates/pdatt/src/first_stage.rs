//! First-stage working models: logit fits for missingness and propensity
//! probabilities, least-squares fits for outcome means, and the
//! per-observation influence functions of their coefficient estimators.
//!
//! Logits are maximized by Newton iterations with step-halving on the
//! mean log-likelihood; convergence requires max |score| < 1e-8 and a
//! relative coefficient change below 1e-10.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::solve_spd;
use crate::panel::{EstimandSpec, PanelSample, TreatmentPath};
use crate::stats::logistic;

pub(crate) const SCORE_TOL: f64 = 1e-8;
pub(crate) const COEF_TOL: f64 = 1e-10;
pub(crate) const MAX_ITER: usize = 100;
pub(crate) const MAX_HALVINGS: usize = 30;
/// |coef| beyond this during iteration is treated as separation: the
/// fitted probabilities are then numerically 0/1.
pub(crate) const SEPARATION_BOUND: f64 = 30.0;
/// Clamp for fitted probabilities used as divisors.
pub const PROB_CLAMP: f64 = 1e-6;

/// Clamp a probability to [PROB_CLAMP, 1 - PROB_CLAMP] for use as a divisor.
#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Minimal row-major matrix used for per-observation influence values.
#[derive(Debug, Clone)]
pub struct RowMat {
    pub data: Vec<f64>,
    pub nrows: usize,
    pub ncols: usize,
}

impl RowMat {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        RowMat { data: vec![0.0; nrows * ncols], nrows, ncols }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    pub fn column_means(&self) -> Vec<f64> {
        let mut means = vec![0.0; self.ncols];
        for j in 0..self.ncols {
            means[j] =
                crate::stats::sum((0..self.nrows).map(|i| self.row(i)[j])) / self.nrows as f64;
        }
        means
    }
}

/// Design abstraction so logits can run on the covariate block alone or
/// on an extended block (covariates plus the outcome change).
pub(crate) trait DesignLike {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    fn copy_row(&self, i: usize, out: &mut [f64]);
}

pub(crate) struct CovariateDesign<'a>(pub &'a PanelSample);

impl DesignLike for CovariateDesign<'_> {
    fn nrows(&self) -> usize {
        self.0.n()
    }
    fn ncols(&self) -> usize {
        self.0.k()
    }
    fn copy_row(&self, i: usize, out: &mut [f64]) {
        out.copy_from_slice(self.0.row(i));
    }
}

/// Covariates with one appended column.
pub(crate) struct ExtendedDesign<'a> {
    pub sample: &'a PanelSample,
    pub extra: &'a [f64],
}

impl DesignLike for ExtendedDesign<'_> {
    fn nrows(&self) -> usize {
        self.sample.n()
    }
    fn ncols(&self) -> usize {
        self.sample.k() + 1
    }
    fn copy_row(&self, i: usize, out: &mut [f64]) {
        let k = self.sample.k();
        out[..k].copy_from_slice(self.sample.row(i));
        out[k] = self.extra[i];
    }
}

/// A fitted logit model.
#[derive(Debug, Clone, Serialize)]
pub struct LogitFit {
    /// Coefficient vector (length of the design, intercept first).
    pub coef: Vec<f64>,
    /// Fitted probabilities for every observation, fitting subsample or not.
    pub fitted: Vec<f64>,
    pub subsample_mask: Vec<bool>,
    pub converged: bool,
    pub iterations: usize,
    /// Subsample mean of lambda(x'coef) x x' at the solution, where
    /// lambda is the logistic density.
    #[serde(skip)]
    pub neg_hessian: DMatrix<f64>,
}

/// A fitted least-squares model.
#[derive(Debug, Clone, Serialize)]
pub struct OlsFit {
    pub coef: Vec<f64>,
    /// x'coef for every observation.
    pub fitted: Vec<f64>,
    pub subsample_mask: Vec<bool>,
    /// Subsample mean of x x'.
    #[serde(skip)]
    pub gram: DMatrix<f64>,
}

impl OlsFit {
    /// A supplied (not estimated) outcome model. The empty fitting mask
    /// marks it as fixed, so it contributes no estimation effect to
    /// influence functions.
    pub fn supplied(coef: Vec<f64>, sample: &PanelSample) -> OlsFit {
        let k = sample.k();
        assert_eq!(coef.len(), k, "supplied coefficient length must match k");
        let fitted = (0..sample.n())
            .map(|i| sample.row(i).iter().zip(&coef).map(|(a, b)| a * b).sum())
            .collect();
        OlsFit {
            coef,
            fitted,
            subsample_mask: vec![false; sample.n()],
            gram: DMatrix::identity(k, k),
        }
    }
}

fn mask_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}

/// Stable per-observation Bernoulli log-likelihood for linear index z.
#[inline]
fn loglik_term(y: f64, z: f64) -> f64 {
    if z > 0.0 {
        (y - 1.0) * z - (-z).exp().ln_1p()
    } else {
        y * z - z.exp().ln_1p()
    }
}

pub(crate) fn fit_logit_design<D: DesignLike>(
    y: &[u8],
    design: &D,
    mask: &[bool],
    context: &str,
) -> Result<LogitFit> {
    let n = design.nrows();
    let k = design.ncols();
    if y.len() != n || mask.len() != n {
        return Err(Error::Validation(format!("{context}: input length mismatch")));
    }
    let idx = mask_indices(mask);
    let m = idx.len();
    if m < k {
        return Err(Error::EmptyCell(format!(
            "{context}: {m} observations in the fitting cell, need at least {k}"
        )));
    }
    let ones = idx.iter().filter(|&&i| y[i] == 1).count();
    if ones == 0 || ones == m {
        return Err(Error::DegenerateOutcome {
            context: context.to_string(),
            value: if ones == 0 { 0 } else { 1 },
        });
    }

    let minv = 1.0 / m as f64;
    let mut coef = DVector::zeros(k);
    let mut row = vec![0.0; k];
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    // mean log-likelihood at current coef
    let eval_ll = |beta: &DVector<f64>, row: &mut [f64]| -> f64 {
        let mut acc = 0.0;
        let mut comp = 0.0;
        for &i in &idx {
            design.copy_row(i, row);
            let z: f64 = row.iter().zip(beta.iter()).map(|(a, b)| a * b).sum();
            let t = loglik_term(y[i] as f64, z);
            let s = acc + t;
            if acc.abs() >= t.abs() {
                comp += (acc - s) + t;
            } else {
                comp += (t - s) + acc;
            }
            acc = s;
        }
        (acc + comp) * minv
    };

    let mut ll = eval_ll(&coef, &mut row);

    for iter in 0..MAX_ITER {
        iterations = iter + 1;
        // score and negative Hessian (mean scale)
        let mut score = DVector::zeros(k);
        let mut neg_hess = DMatrix::zeros(k, k);
        for &i in &idx {
            design.copy_row(i, &mut row);
            let z: f64 = row.iter().zip(coef.iter()).map(|(a, b)| a * b).sum();
            let p = logistic(z);
            let w = p * (1.0 - p);
            let r = y[i] as f64 - p;
            for a in 0..k {
                score[a] += r * row[a];
                for b in a..k {
                    neg_hess[(a, b)] += w * row[a] * row[b];
                }
            }
        }
        score *= minv;
        for a in 0..k {
            for b in a..k {
                neg_hess[(a, b)] *= minv;
                neg_hess[(b, a)] = neg_hess[(a, b)];
            }
        }

        let max_score = score.amax();
        trace.push(max_score);

        let step = match neg_hess.clone().cholesky() {
            Some(chol) => chol.solve(&score),
            None => {
                return Err(Error::Singular {
                    context: format!("{context}: Newton Hessian"),
                    columns: vec![],
                })
            }
        };

        // step-halving: accept the first step that does not decrease the
        // mean log-likelihood
        let mut t = 1.0;
        let mut accepted = false;
        let mut new_coef = coef.clone();
        let mut new_ll = ll;
        for _ in 0..=MAX_HALVINGS {
            new_coef = &coef + &step * t;
            new_ll = eval_ll(&new_coef, &mut row);
            if new_ll >= ll || new_ll.is_finite() && (new_ll - ll).abs() < 1e-16 {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(Error::NonConvergence {
                context: context.to_string(),
                iterations,
                separation: false,
                trace,
            });
        }

        let delta = (&new_coef - &coef).amax();
        let rel_change = delta / (1.0 + coef.amax());
        coef = new_coef;
        ll = new_ll;

        if coef.amax() > SEPARATION_BOUND {
            return Err(Error::NonConvergence {
                context: context.to_string(),
                iterations,
                separation: true,
                trace,
            });
        }
        if max_score < SCORE_TOL && rel_change < COEF_TOL {
            converged = true;
            break;
        }
    }

    if !converged {
        return Err(Error::NonConvergence {
            context: context.to_string(),
            iterations,
            separation: false,
            trace,
        });
    }

    // fitted values for all observations and the final negative Hessian
    let mut fitted = vec![0.0; n];
    for i in 0..n {
        design.copy_row(i, &mut row);
        let z: f64 = row.iter().zip(coef.iter()).map(|(a, b)| a * b).sum();
        fitted[i] = logistic(z);
    }
    let mut neg_hess = DMatrix::zeros(k, k);
    for &i in &idx {
        design.copy_row(i, &mut row);
        let p = fitted[i];
        let w = p * (1.0 - p);
        for a in 0..k {
            for b in a..k {
                neg_hess[(a, b)] += w * row[a] * row[b];
            }
        }
    }
    for a in 0..k {
        for b in a..k {
            neg_hess[(a, b)] *= minv;
            neg_hess[(b, a)] = neg_hess[(a, b)];
        }
    }

    Ok(LogitFit {
        coef: coef.iter().copied().collect(),
        fitted,
        subsample_mask: mask.to_vec(),
        converged,
        iterations,
        neg_hessian: neg_hess,
    })
}

/// Maximum-likelihood logit of a binary outcome on the sample covariates,
/// fitted over `mask`, with fitted probabilities computed for all rows.
pub fn fit_logit(y: &[u8], sample: &PanelSample, mask: &[bool], context: &str) -> Result<LogitFit> {
    fit_logit_design(y, &CovariateDesign(sample), mask, context)
}

/// Least squares of `y` on the sample covariates over `mask`, with fitted
/// values computed for all rows.
pub fn fit_ols(y: &[f64], sample: &PanelSample, mask: &[bool], context: &str) -> Result<OlsFit> {
    let n = sample.n();
    let k = sample.k();
    if y.len() != n || mask.len() != n {
        return Err(Error::Validation(format!("{context}: input length mismatch")));
    }
    let idx = mask_indices(mask);
    let m = idx.len();
    if m == 0 {
        return Err(Error::EmptyCell(format!("{context}: empty fitting cell")));
    }
    if m < k {
        return Err(Error::EmptyCell(format!(
            "{context}: {m} observations in the fitting cell, need at least {k}"
        )));
    }

    let minv = 1.0 / m as f64;
    let mut gram = DMatrix::zeros(k, k);
    let mut xty = DVector::zeros(k);
    for &i in &idx {
        let row = sample.row(i);
        for a in 0..k {
            xty[a] += row[a] * y[i];
            for b in a..k {
                gram[(a, b)] += row[a] * row[b];
            }
        }
    }
    xty *= minv;
    for a in 0..k {
        for b in a..k {
            gram[(a, b)] *= minv;
            gram[(b, a)] = gram[(a, b)];
        }
    }

    let coef = solve_spd(&gram, &xty, context, sample.column_names())?;
    let fitted: Vec<f64> = (0..n)
        .map(|i| sample.row(i).iter().zip(coef.iter()).map(|(a, b)| a * b).sum())
        .collect();

    Ok(OlsFit {
        coef: coef.iter().copied().collect(),
        fitted,
        subsample_mask: mask.to_vec(),
        gram,
    })
}

/// The seven fitted working models behind one estimand.
///
/// Fields are `None` when a reduced estimator did not need the model.
/// `complete_case` marks sets fitted on the s = 1 subsample where the
/// missingness probability is identically one.
#[derive(Debug, Clone)]
pub struct NuisanceSet {
    pub spec: EstimandSpec,
    /// Missingness model fitted on the D2 = d2 group.
    pub phi_d2: Option<LogitFit>,
    /// Missingness model fitted on the D2 = d2' group.
    pub phi_d2p: Option<LogitFit>,
    /// Conditional propensity of d1 within {S=1, D2=d2}.
    pub pi_d1gd2: Option<LogitFit>,
    /// Conditional propensity of d1'=0 within {S=1, D2=d2'}.
    pub pi_d1pgd2p: Option<LogitFit>,
    /// Marginal logit of D2 = 1 on all observations.
    pub pi_d2: Option<LogitFit>,
    /// Outcome regression on {S=1, D=d}.
    pub mu_d: Option<OlsFit>,
    /// Outcome regression on {S=1, D=d'}.
    pub mu_dp: Option<OlsFit>,
    pub complete_case: bool,
}

/// Which nuisance models an estimator needs.
#[derive(Debug, Clone, Copy)]
pub struct NuisanceRequirements {
    pub phi: bool,
    pub propensity: bool,
    pub outcome_d: bool,
    pub outcome_dp: bool,
}

impl NuisanceRequirements {
    pub const ALL: Self =
        Self { phi: true, propensity: true, outcome_d: true, outcome_dp: true };
    /// OR uses w1 only: the missingness model plus the d' outcome mean.
    pub const OR: Self =
        Self { phi: true, propensity: false, outcome_d: false, outcome_dp: true };
    /// IPW uses both weights but no outcome fits.
    pub const IPW: Self =
        Self { phi: true, propensity: true, outcome_d: false, outcome_dp: false };
    /// DR adds the d' outcome mean to IPW.
    pub const DR: Self =
        Self { phi: true, propensity: true, outcome_d: false, outcome_dp: true };
}

impl NuisanceSet {
    fn missing(name: &str) -> Error {
        Error::Validation(format!("nuisance model {name} was not fitted"))
    }

    pub fn pi_d1gd2(&self) -> Result<&LogitFit> {
        self.pi_d1gd2.as_ref().ok_or_else(|| Self::missing("pi_d1|d2"))
    }

    pub fn pi_d1pgd2p(&self) -> Result<&LogitFit> {
        self.pi_d1pgd2p.as_ref().ok_or_else(|| Self::missing("pi_d1'|d2'"))
    }

    pub fn pi_d2(&self) -> Result<&LogitFit> {
        self.pi_d2.as_ref().ok_or_else(|| Self::missing("pi_d2"))
    }

    pub fn mu_d(&self) -> Result<&OlsFit> {
        self.mu_d.as_ref().ok_or_else(|| Self::missing("mu_d"))
    }

    pub fn mu_dp(&self) -> Result<&OlsFit> {
        self.mu_dp.as_ref().ok_or_else(|| Self::missing("mu_d'"))
    }

    /// Fitted observation probability for the D2 = d2 group; ones in
    /// complete-case mode.
    pub fn phi_d2_fitted(&self, n: usize) -> Result<Vec<f64>> {
        match (&self.phi_d2, self.complete_case) {
            (Some(fit), _) => Ok(fit.fitted.clone()),
            (None, true) => Ok(vec![1.0; n]),
            (None, false) => Err(Self::missing("phi_d2")),
        }
    }

    pub fn phi_d2p_fitted(&self, n: usize) -> Result<Vec<f64>> {
        match (&self.phi_d2p, self.complete_case) {
            (Some(fit), _) => Ok(fit.fitted.clone()),
            (None, true) => Ok(vec![1.0; n]),
            (None, false) => Err(Self::missing("phi_d2'")),
        }
    }

    /// P(D2 = d2 | x_i) for the spec's target path.
    #[inline]
    pub fn p_d2_at(&self, i: usize) -> Result<f64> {
        let p1 = self.pi_d2()?.fitted[i];
        Ok(if self.spec.d.d2 == 1 { p1 } else { 1.0 - p1 })
    }

    /// Model path probability pi_d(x_i) = pi_{d1|d2} * P(D2 = d2 | x).
    #[inline]
    pub fn pi_d_at(&self, i: usize) -> Result<f64> {
        Ok(self.pi_d1gd2()?.fitted[i] * self.p_d2_at(i)?)
    }

    /// Model comparison-path probability pi_d'(x_i) with d' = (0,0).
    #[inline]
    pub fn pi_dp_at(&self, i: usize) -> Result<f64> {
        Ok(self.pi_d1pgd2p()?.fitted[i] * (1.0 - self.pi_d2()?.fitted[i]))
    }

    /// Newton iteration counts for the fitted logits, keyed by model name.
    pub fn iteration_counts(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        let mut push = |name: &str, fit: &Option<LogitFit>| {
            if let Some(f) = fit {
                out.push((name.to_string(), f.iterations));
            }
        };
        push("phi_d2", &self.phi_d2);
        push("phi_d2'", &self.phi_d2p);
        push("pi_d1|d2", &self.pi_d1gd2);
        push("pi_d1'|d2'", &self.pi_d1pgd2p);
        push("pi_d2", &self.pi_d2);
        out
    }
}

fn cell_name(s: Option<u8>, d1: Option<u8>, d2: Option<u8>) -> String {
    let mut parts = Vec::new();
    if let Some(s) = s {
        parts.push(format!("S={s}"));
    }
    if let Some(d1) = d1 {
        parts.push(format!("D1={d1}"));
    }
    if let Some(d2) = d2 {
        parts.push(format!("D2={d2}"));
    }
    format!("{{{}}}", parts.join(", "))
}

/// Missingness logit of S on a D2 group. When every unit in the group is
/// observed the likelihood has no interior maximum; the fit is pinned at
/// the separation bound so the fitted probability is numerically one.
fn fit_phi(sample: &PanelSample, d2: u8) -> Result<LogitFit> {
    let n = sample.n();
    let mask: Vec<bool> = (0..n).map(|i| sample.d2()[i] == d2).collect();
    let m = mask.iter().filter(|&&b| b).count();
    if m == 0 {
        return Err(Error::EmptyCell(cell_name(None, None, Some(d2))));
    }
    let all_observed = (0..n).all(|i| !mask[i] || sample.s()[i] == 1);
    if all_observed {
        let k = sample.k();
        let mut coef = vec![0.0; k];
        coef[0] = SEPARATION_BOUND;
        let fitted = vec![logistic(SEPARATION_BOUND); n];
        let mut neg_hess = DMatrix::zeros(k, k);
        let lam = logistic(SEPARATION_BOUND) * (1.0 - logistic(SEPARATION_BOUND));
        let minv = 1.0 / m as f64;
        for i in 0..n {
            if mask[i] {
                let row = sample.row(i);
                for a in 0..k {
                    for b in a..k {
                        neg_hess[(a, b)] += lam * row[a] * row[b] * minv;
                    }
                }
            }
        }
        for a in 0..k {
            for b in a..k {
                neg_hess[(b, a)] = neg_hess[(a, b)];
            }
        }
        return Ok(LogitFit {
            coef,
            fitted,
            subsample_mask: mask,
            converged: true,
            iterations: 0,
            neg_hessian: neg_hess,
        });
    }
    fit_logit(sample.s(), sample, &mask, &format!("phi on {}", cell_name(None, None, Some(d2))))
}

/// Fit the subset of working models an estimator requires.
pub fn fit_nuisances_subset(
    sample: &PanelSample,
    spec: EstimandSpec,
    req: NuisanceRequirements,
) -> Result<NuisanceSet> {
    let n = sample.n();
    let d = spec.d;
    let d2 = d.d2;

    // precondition: every required fitting cell is nonempty, checked up
    // front so errors name the cell rather than a downstream fit
    let mut required: Vec<(String, Box<dyn Fn(usize) -> bool + '_>)> = Vec::new();
    if req.phi {
        required.push((cell_name(None, None, Some(d2)), Box::new(move |i| sample.d2()[i] == d2)));
        required.push((cell_name(None, None, Some(0)), Box::new(|i| sample.d2()[i] == 0)));
    }
    if req.propensity {
        required.push((
            cell_name(Some(1), None, Some(d2)),
            Box::new(move |i| sample.s()[i] == 1 && sample.d2()[i] == d2),
        ));
        required.push((
            cell_name(Some(1), None, Some(0)),
            Box::new(|i| sample.s()[i] == 1 && sample.d2()[i] == 0),
        ));
    }
    if req.outcome_d {
        required.push((
            cell_name(Some(1), Some(d.d1), Some(d.d2)),
            Box::new(move |i| sample.s_on_path(i, d)),
        ));
    }
    if req.outcome_dp {
        required.push((
            cell_name(Some(1), Some(0), Some(0)),
            Box::new(|i| sample.s_on_path(i, TreatmentPath::NEVER)),
        ));
    }
    for (name, pred) in &required {
        if !(0..n).any(|i| pred(i)) {
            return Err(Error::EmptyCell(name.clone()));
        }
    }
    drop(required);

    let (phi_d2, phi_d2p) = if req.phi {
        let phi_d2 = fit_phi(sample, d2).map_err(|e| e.in_nuisance("phi_d2"))?;
        let phi_d2p = if d2 == 0 {
            phi_d2.clone()
        } else {
            fit_phi(sample, 0).map_err(|e| e.in_nuisance("phi_d2'"))?
        };
        (Some(phi_d2), Some(phi_d2p))
    } else {
        (None, None)
    };

    let (pi_d1gd2, pi_d1pgd2p, pi_d2) = if req.propensity {
        let mask_d2: Vec<bool> =
            (0..n).map(|i| sample.s()[i] == 1 && sample.d2()[i] == d2).collect();
        if !mask_d2.iter().any(|&b| b) {
            return Err(Error::EmptyCell(cell_name(Some(1), None, Some(d2)))
                .in_nuisance("pi_d1|d2"));
        }
        let y_d1: Vec<u8> = (0..n)
            .map(|i| u8::from(sample.d1(i) == Some(d.d1)))
            .collect();
        let pi_d1gd2 = fit_logit(
            &y_d1,
            sample,
            &mask_d2,
            &format!("pi_d1|d2 on {}", cell_name(Some(1), None, Some(d2))),
        )
        .map_err(|e| e.in_nuisance("pi_d1|d2"))?;

        let mask_d2p: Vec<bool> =
            (0..n).map(|i| sample.s()[i] == 1 && sample.d2()[i] == 0).collect();
        if !mask_d2p.iter().any(|&b| b) {
            return Err(Error::EmptyCell(cell_name(Some(1), None, Some(0)))
                .in_nuisance("pi_d1'|d2'"));
        }
        let y_d1p: Vec<u8> = (0..n).map(|i| u8::from(sample.d1(i) == Some(0))).collect();
        let pi_d1pgd2p = fit_logit(
            &y_d1p,
            sample,
            &mask_d2p,
            &format!("pi_d1'|d2' on {}", cell_name(Some(1), None, Some(0))),
        )
        .map_err(|e| e.in_nuisance("pi_d1'|d2'"))?;

        let all = vec![true; n];
        let pi_d2 = fit_logit(sample.d2(), sample, &all, "pi_d2 (marginal)")
            .map_err(|e| e.in_nuisance("pi_d2"))?;
        (Some(pi_d1gd2), Some(pi_d1pgd2p), Some(pi_d2))
    } else {
        (None, None, None)
    };

    let mu_d = if req.outcome_d {
        let mask: Vec<bool> = (0..n).map(|i| sample.s_on_path(i, d)).collect();
        if !mask.iter().any(|&b| b) {
            return Err(Error::EmptyCell(cell_name(Some(1), Some(d.d1), Some(d.d2)))
                .in_nuisance("mu_d"));
        }
        Some(
            fit_ols(
                sample.delta_y(),
                sample,
                &mask,
                &format!("mu_d on {}", cell_name(Some(1), Some(d.d1), Some(d.d2))),
            )
            .map_err(|e| e.in_nuisance("mu_d"))?,
        )
    } else {
        None
    };

    let mu_dp = if req.outcome_dp {
        let mask: Vec<bool> =
            (0..n).map(|i| sample.s_on_path(i, TreatmentPath::NEVER)).collect();
        if !mask.iter().any(|&b| b) {
            return Err(Error::EmptyCell(cell_name(Some(1), Some(0), Some(0)))
                .in_nuisance("mu_d'"));
        }
        Some(
            fit_ols(
                sample.delta_y(),
                sample,
                &mask,
                &format!("mu_d' on {}", cell_name(Some(1), Some(0), Some(0))),
            )
            .map_err(|e| e.in_nuisance("mu_d'"))?,
        )
    } else {
        None
    };

    Ok(NuisanceSet {
        spec,
        phi_d2,
        phi_d2p,
        pi_d1gd2,
        pi_d1pgd2p,
        pi_d2,
        mu_d,
        mu_dp,
        complete_case: false,
    })
}

/// Fit all seven working models for the robust estimator.
pub fn fit_nuisances(sample: &PanelSample, spec: EstimandSpec) -> Result<NuisanceSet> {
    fit_nuisances_subset(sample, spec, NuisanceRequirements::ALL)
}

/// Complete-case nuisances: all models except the missingness models are
/// refit on the s = 1 subsample, and the missingness probability is one.
pub fn fit_nuisances_complete_case(
    cc_sample: &PanelSample,
    spec: EstimandSpec,
    req: NuisanceRequirements,
) -> Result<NuisanceSet> {
    let mut set = fit_nuisances_subset(
        cc_sample,
        spec,
        NuisanceRequirements { phi: false, ..req },
    )?;
    set.complete_case = true;
    Ok(set)
}

/// Per-observation influence function values of the first-stage
/// coefficient estimators. Matrices are n x k; `None` when the
/// corresponding model was not fitted.
#[derive(Debug, Clone)]
pub struct InfluenceIngredients {
    pub b_beta_d: Option<RowMat>,
    pub b_beta_dp: Option<RowMat>,
    pub b_gamma_d1gd2: Option<RowMat>,
    pub b_gamma_d1pgd2p: Option<RowMat>,
    pub b_gamma_d2: Option<RowMat>,
    pub b_delta_d2: Option<RowMat>,
    pub b_delta_d2p: Option<RowMat>,
}

pub(crate) fn logit_influence_design<D: DesignLike>(
    design: &D,
    fit: &LogitFit,
    y: impl Fn(usize) -> f64,
    context: &str,
) -> Result<RowMat> {
    let n = design.nrows();
    let k = design.ncols();
    let m = fit.subsample_mask.iter().filter(|&&b| b).count();
    if m == 0 {
        // supplied model: no estimation effect
        return Ok(RowMat::zeros(n, k));
    }
    // Bread on the full-sample scale: E_n[mask * lambda * x x'].
    let scale = m as f64 / n as f64;
    let bread = &fit.neg_hessian * scale;
    let inv = bread
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular { context: format!("{context}: bread"), columns: vec![] })?
        .inverse();

    let mut out = RowMat::zeros(n, k);
    let mut row = vec![0.0; k];
    for i in 0..n {
        if !fit.subsample_mask[i] {
            continue;
        }
        design.copy_row(i, &mut row);
        let resid = y(i) - fit.fitted[i];
        let dst = out.row_mut(i);
        for a in 0..k {
            let mut acc = 0.0;
            for b in 0..k {
                acc += inv[(a, b)] * row[b];
            }
            dst[a] = acc * resid;
        }
    }
    Ok(out)
}

fn logit_influence(
    sample: &PanelSample,
    fit: &LogitFit,
    y: impl Fn(usize) -> f64,
    context: &str,
) -> Result<RowMat> {
    logit_influence_design(&CovariateDesign(sample), fit, y, context)
}

fn ols_influence(
    sample: &PanelSample,
    fit: &OlsFit,
    y: &[f64],
    context: &str,
) -> Result<RowMat> {
    let n = sample.n();
    let k = sample.k();
    let m = fit.subsample_mask.iter().filter(|&&b| b).count();
    if m == 0 {
        // supplied model: no estimation effect
        return Ok(RowMat::zeros(n, k));
    }
    let scale = m as f64 / n as f64;
    let bread = &fit.gram * scale;
    let inv = bread
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular { context: format!("{context}: bread"), columns: vec![] })?
        .inverse();

    let mut out = RowMat::zeros(n, k);
    for i in 0..n {
        if !fit.subsample_mask[i] {
            continue;
        }
        let row = sample.row(i);
        let resid = y[i] - fit.fitted[i];
        let dst = out.row_mut(i);
        for a in 0..k {
            let mut acc = 0.0;
            for b in 0..k {
                acc += inv[(a, b)] * row[b];
            }
            dst[a] = acc * resid;
        }
    }
    Ok(out)
}

/// Public wrapper used by estimators that run their own regressions
/// outside a `NuisanceSet` (the pre/post contrast).
pub fn influence_ingredients_ols(
    sample: &PanelSample,
    fit: &OlsFit,
    y: &[f64],
) -> Result<RowMat> {
    ols_influence(sample, fit, y, "ols influence")
}

/// Build the per-observation influence values b for every fitted model in
/// the set, with population expectations replaced by full-sample means.
pub fn influence_ingredients(
    sample: &PanelSample,
    nus: &NuisanceSet,
) -> Result<InfluenceIngredients> {
    let d = nus.spec.d;

    let b_beta_d = match &nus.mu_d {
        Some(fit) => Some(ols_influence(sample, fit, sample.delta_y(), "b_beta_d")?),
        None => None,
    };
    let b_beta_dp = match &nus.mu_dp {
        Some(fit) => Some(ols_influence(sample, fit, sample.delta_y(), "b_beta_d'")?),
        None => None,
    };
    let b_gamma_d1gd2 = match &nus.pi_d1gd2 {
        Some(fit) => Some(logit_influence(
            sample,
            fit,
            |i| f64::from(sample.d1(i) == Some(d.d1)),
            "b_gamma_d1|d2",
        )?),
        None => None,
    };
    let b_gamma_d1pgd2p = match &nus.pi_d1pgd2p {
        Some(fit) => Some(logit_influence(
            sample,
            fit,
            |i| f64::from(sample.d1(i) == Some(0)),
            "b_gamma_d1'|d2'",
        )?),
        None => None,
    };
    let b_gamma_d2 = match &nus.pi_d2 {
        Some(fit) => {
            Some(logit_influence(sample, fit, |i| sample.d2()[i] as f64, "b_gamma_d2")?)
        }
        None => None,
    };
    let b_delta_d2 = match &nus.phi_d2 {
        Some(fit) => Some(logit_influence(sample, fit, |i| sample.s()[i] as f64, "b_delta_d2")?),
        None => None,
    };
    let b_delta_d2p = match &nus.phi_d2p {
        Some(fit) => {
            Some(logit_influence(sample, fit, |i| sample.s()[i] as f64, "b_delta_d2'")?)
        }
        None => None,
    };

    Ok(InfluenceIngredients {
        b_beta_d,
        b_beta_dp,
        b_gamma_d1gd2,
        b_gamma_d1pgd2p,
        b_gamma_d2,
        b_delta_d2,
        b_delta_d2p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::PanelSample;
    use rand::Rng;
    use rand::SeedableRng;

    fn intercept_only_sample(y_mean_num: usize, n: usize) -> (PanelSample, Vec<u8>) {
        // d2 column carries the binary outcome for convenience
        let y: Vec<u8> = (0..n).map(|i| u8::from(i < y_mean_num)).collect();
        let sample = PanelSample::from_columns(
            vec![0.0; n],
            vec![1; n],
            vec![0; n],
            y.clone(),
            vec![1.0; n],
            1,
            vec!["const".into()],
            None,
        )
        .unwrap();
        (sample, y)
    }

    #[test]
    fn intercept_only_logit_recovers_logit_of_mean() {
        let (sample, y) = intercept_only_sample(50, 100);
        let fit = fit_logit(&y, &sample, &vec![true; 100], "test").unwrap();
        assert!(fit.coef[0].abs() < 1e-10, "logit(0.5) should be 0, got {}", fit.coef[0]);

        let (sample, y) = intercept_only_sample(75, 100);
        let fit = fit_logit(&y, &sample, &vec![true; 100], "test").unwrap();
        assert!(
            (fit.coef[0] - 3f64.ln()).abs() < 1e-9,
            "logit(0.75) = ln 3, got {}",
            fit.coef[0]
        );
    }

    #[test]
    fn one_class_outcome_errors() {
        let (sample, y) = intercept_only_sample(100, 100);
        let err = fit_logit(&y, &sample, &vec![true; 100], "test").unwrap_err();
        assert!(matches!(err, Error::DegenerateOutcome { .. }));
    }

    #[test]
    fn logit_score_matches_finite_differences() {
        // random design, compare analytic mean score to numeric gradient
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        let n = 200;
        let k = 3;
        let mut x = Vec::with_capacity(n * k);
        let mut y = Vec::with_capacity(n);
        for _ in 0..n {
            x.push(1.0);
            let x1: f64 = rng.gen_range(-1.5..1.5);
            let x2: f64 = rng.gen_range(-1.5..1.5);
            x.push(x1);
            x.push(x2);
            let p = logistic(0.3 + 0.8 * x1 - 0.5 * x2);
            y.push(u8::from(rng.gen::<f64>() < p));
        }
        let sample = PanelSample::from_columns(
            vec![0.0; n],
            vec![1; n],
            vec![0; n],
            y.clone(),
            x,
            k,
            vec!["const".into(), "x1".into(), "x2".into()],
            None,
        )
        .unwrap();

        let beta = [0.11, -0.23, 0.31];
        let ll = |b: &[f64]| -> f64 {
            let mut acc = 0.0;
            for i in 0..n {
                let z: f64 = sample.row(i).iter().zip(b).map(|(a, c)| a * c).sum();
                acc += loglik_term(y[i] as f64, z);
            }
            acc / n as f64
        };
        // analytic score
        let mut score = [0.0; 3];
        for i in 0..n {
            let z: f64 = sample.row(i).iter().zip(&beta).map(|(a, c)| a * c).sum();
            let r = y[i] as f64 - logistic(z);
            for a in 0..k {
                score[a] += r * sample.row(i)[a] / n as f64;
            }
        }
        let eps = 1e-6;
        for j in 0..k {
            let mut bp = beta;
            bp[j] += eps;
            let mut bm = beta;
            bm[j] -= eps;
            let fd = (ll(&bp) - ll(&bm)) / (2.0 * eps);
            assert!(
                (fd - score[j]).abs() < 1e-6 * (1.0 + score[j].abs()),
                "score[{j}]: analytic {} vs fd {}",
                score[j],
                fd
            );
        }
    }

    #[test]
    fn ols_exact_interpolation() {
        let n = 20;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let v = i as f64 * 0.37 - 2.0;
            x.push(1.0);
            x.push(v);
            x.push(v * v * 0.01);
            y.push(2.0 * v);
        }
        let sample = PanelSample::from_columns(
            y.clone(),
            vec![1; n],
            vec![0; n],
            vec![0; n],
            x,
            3,
            vec!["const".into(), "v".into(), "v2".into()],
            None,
        )
        .unwrap();
        let fit = fit_ols(&y, &sample, &vec![true; n], "test").unwrap();
        assert!(fit.coef[0].abs() < 1e-9);
        assert!((fit.coef[1] - 2.0).abs() < 1e-9);
        assert!(fit.coef[2].abs() < 1e-7);

        let y5 = vec![5.0; n];
        let fit = fit_ols(&y5, &sample, &vec![true; n], "test").unwrap();
        assert!((fit.coef[0] - 5.0).abs() < 1e-9);
        assert!(fit.coef[1].abs() < 1e-9);
    }

    #[test]
    fn ols_residuals_orthogonal_to_design() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        let n = 150;
        let k = 4;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..n {
            x.push(1.0);
            for _ in 1..k {
                x.push(rng.gen_range(-2.0..2.0));
            }
            y.push(rng.gen_range(-3.0..3.0));
        }
        let sample = PanelSample::from_columns(
            y.clone(),
            vec![1; n],
            vec![0; n],
            vec![0; n],
            x,
            k,
            (0..k).map(|j| format!("x{j}")).collect(),
            None,
        )
        .unwrap();
        let mask: Vec<bool> = (0..n).map(|i| i % 3 != 0).collect();
        let fit = fit_ols(&y, &sample, &mask, "test").unwrap();
        for j in 0..k {
            let dot: f64 = (0..n)
                .filter(|&i| mask[i])
                .map(|i| (y[i] - fit.fitted[i]) * sample.row(i)[j])
                .sum();
            let scale: f64 = (0..n)
                .filter(|&i| mask[i])
                .map(|i| (y[i] * sample.row(i)[j]).abs())
                .sum();
            assert!(dot.abs() <= 1e-8 * scale.max(1.0), "column {j} not orthogonal: {dot}");
        }
    }

    #[test]
    fn intercept_only_influence_is_scaled_residual() {
        // intercept-only logit with mean 1/2: b = 4 (y - 1/2) on masked rows
        let (sample, y) = intercept_only_sample(50, 100);
        let fit = fit_logit(&y, &sample, &vec![true; 100], "test").unwrap();
        let b = logit_influence(&sample, &fit, |i| y[i] as f64, "test").unwrap();
        for i in 0..100 {
            let expect = 4.0 * (y[i] as f64 - 0.5);
            assert!((b.row(i)[0] - expect).abs() < 1e-6, "row {i}: {} vs {expect}", b.row(i)[0]);
        }
    }
}
