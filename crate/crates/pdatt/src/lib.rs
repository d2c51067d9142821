//! Estimation engine for path-dependent average treatment effects on the
//! treated (PDATTs) in three-period difference-in-differences panels
//! where the middle-period treatment is partially missing.
//!
//! The estimand compares a treatment path d = (d1, d2) against the
//! never-treated path (0,0) and adjusts for missing histories with a
//! combination of outcome means, treatment-path propensities, and a
//! missing-data model; it identifies the target whenever any two of the
//! three working models are correct. Reduced outcome-regression /
//! weighting / doubly-robust estimators, complete-case counterparts, and
//! a Monte Carlo harness for their finite-sample behavior are included.

pub mod error;
pub mod estimators;
pub mod first_stage;
pub mod inference;
pub mod linalg;
pub mod panel;
pub mod rng;
pub mod simulation;
pub mod stats;

pub use error::{Error, Result};
pub use estimators::{
    aggregate_second_period, compute_weights, estimate, estimate_cc, estimate_dr, estimate_ipw,
    estimate_naive_prepost, estimate_or, estimate_robust, estimate_weak_mar_ipw,
    partial_id_bounds, BoundsResult, EstimateResult, Method, WeightSet,
};
pub use first_stage::{
    fit_logit, fit_nuisances, fit_ols, influence_ingredients, InfluenceIngredients, LogitFit,
    NuisanceSet, OlsFit,
};
pub use inference::{
    confidence_interval, estimate_robust_improved, influence_reduced, influence_robust,
    seb_estimate, InfluenceVector, TrueNuisanceValues, VarianceResult,
};
pub use panel::{
    load_csv, summarize, write_csv, CsvSchema, EstimandSpec, ObservationRecord, PanelSample,
    SampleSummary, TreatmentPath,
};
pub use simulation::{
    generate_sample, generate_sample_with_truth, kang_schafer, kang_schafer_raw, power_curve,
    run_monte_carlo, sweep_misspecification, sweep_missingness, true_pdatt, DgpConfig, DgpParams,
    McCell, McOptions, McResult, PowerCurve, Scenario, SweepRow,
};
