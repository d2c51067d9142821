//! Data-generating process and Monte Carlo experiments: bias / coverage /
//! size tables, missingness and misspecification sweeps, and power
//! curves, all reproducible from a single seed via per-replication
//! counter-derived streams.

use std::collections::HashMap;
use std::str::FromStr;
use std::sync::{Mutex, OnceLock};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{
    compute_weights, dr_point, estimate_cc, estimate_or_with, estimate_weak_mar_ipw, ipw_point,
    robust_point, Method,
};
use crate::first_stage::{
    fit_nuisances, fit_nuisances_complete_case, influence_ingredients, NuisanceRequirements,
};
use crate::inference::{
    estimate_robust_improved, influence_for, seb_estimate, variance_from, Flavor,
    TrueNuisanceValues,
};
use crate::panel::{EstimandSpec, PanelSample, TreatmentPath};
use crate::rng::stream_rng;
use crate::stats::{logistic, mean, sd_unbiased, sum, z_critical};

const GEN_CHUNK: usize = 8192;
const TRUTH_DRAWS: usize = 10_000_000;
const TRUTH_SEED: u64 = 0x7472_7574_685f_3031;
/// Stream ids below this are reserved for replication data; truth and
/// sweep draws use offsets above it.
const SWEEP_STREAM_BASE: u64 = 1 << 40;

/// Coefficient block of the simulation design: one 5-vector per model
/// column (intercept first).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpParams {
    pub gamma_1: [f64; 5],
    pub gamma_1g1: [f64; 5],
    pub gamma_1g0: [f64; 5],
    pub beta_11: [f64; 5],
    pub beta_10: [f64; 5],
    pub beta_01: [f64; 5],
    pub beta_00: [f64; 5],
    /// Intercept entries of the missingness coefficients hold the Table
    /// value without the missingness-level shift `c`; `c` is added at
    /// generation time.
    pub delta_1: [f64; 5],
    pub delta_0: [f64; 5],
}

impl Default for DgpParams {
    fn default() -> Self {
        DgpParams {
            gamma_1: [0.0, -0.5, -0.5, -0.5, -0.5],
            gamma_1g1: [0.0, -0.5, -0.5, 0.5, 0.5],
            gamma_1g0: [0.0, 0.5, 0.5, -0.5, -0.5],
            beta_11: [1.5, -0.25, 0.25, 0.25, 0.25],
            beta_10: [1.0, -0.25, -0.25, 0.25, 0.25],
            beta_01: [1.0, 0.25, 0.25, -0.25, -0.25],
            beta_00: [0.0, 0.25, 0.25, 0.25, 0.25],
            delta_1: [0.0, -0.5, -0.5, 0.5, 0.5],
            delta_0: [0.0, 0.5, 0.5, 0.5, -0.5],
        }
    }
}

/// Simulation design: sample size, covariate-mixing weights (1 = model in
/// the observed covariates, 0 = model in the transformed covariates),
/// missingness level `c` (0 is roughly 50% missing), coefficients, seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub n: usize,
    pub eta_p: f64,
    pub eta_m: f64,
    pub eta_o: f64,
    pub c: f64,
    pub params: DgpParams,
    pub seed: u64,
}

impl DgpConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        DgpConfig {
            n,
            eta_p: 1.0,
            eta_m: 1.0,
            eta_o: 1.0,
            c: 0.0,
            params: DgpParams::default(),
            seed,
        }
    }

    pub fn with_scenario(mut self, scenario: Scenario) -> Self {
        let (p, m, o) = scenario.etas();
        self.eta_p = p;
        self.eta_m = m;
        self.eta_o = o;
        self
    }
}

/// The eight misspecification cells: which working models are fitted on
/// the wrong covariate set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    None,
    M,
    P,
    O,
    MP,
    MO,
    PO,
    All,
}

impl Scenario {
    pub const ALL_CELLS: [Scenario; 8] = [
        Scenario::None,
        Scenario::M,
        Scenario::P,
        Scenario::O,
        Scenario::MP,
        Scenario::MO,
        Scenario::PO,
        Scenario::All,
    ];

    /// (eta_p, eta_m, eta_o)
    pub fn etas(&self) -> (f64, f64, f64) {
        match self {
            Scenario::None => (1.0, 1.0, 1.0),
            Scenario::M => (1.0, 0.0, 1.0),
            Scenario::P => (0.0, 1.0, 1.0),
            Scenario::O => (1.0, 1.0, 0.0),
            Scenario::MP => (0.0, 0.0, 1.0),
            Scenario::MO => (1.0, 0.0, 0.0),
            Scenario::PO => (0.0, 1.0, 0.0),
            Scenario::All => (0.0, 0.0, 0.0),
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Scenario::None => "none",
            Scenario::M => "M",
            Scenario::P => "P",
            Scenario::O => "O",
            Scenario::MP => "M-P",
            Scenario::MO => "M-O",
            Scenario::PO => "P-O",
            Scenario::All => "all",
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL_CELLS
            .iter()
            .find(|c| c.tag().eq_ignore_ascii_case(s.trim()))
            .copied()
            .ok_or_else(|| {
                Error::Validation(format!(
                    "unknown scenario '{s}' (expected one of none, M, P, O, M-P, M-O, P-O, all)"
                ))
            })
    }
}

/// The four covariate transforms, before standardization.
pub fn kang_schafer_raw(x: [f64; 4]) -> [f64; 4] {
    [
        (0.5 * x[0]).exp(),
        10.0 + x[1] / (1.0 + x[0].exp()),
        (0.6 + x[0] * x[2] / 25.0).powi(3),
        (20.0 + x[1] + x[3]).powi(2),
    ]
}

/// Apply the transforms and standardize each column to sample mean 0 and
/// variance 1 (1/n convention) within the given draws.
pub fn kang_schafer(x_rows: &[[f64; 4]]) -> Vec<[f64; 4]> {
    let mut out: Vec<[f64; 4]> = x_rows.iter().map(|&x| kang_schafer_raw(x)).collect();
    for j in 0..4 {
        let col: Vec<f64> = out.iter().map(|r| r[j]).collect();
        let m = mean(&col);
        let sd = crate::stats::variance(&col).sqrt();
        for r in out.iter_mut() {
            r[j] = (r[j] - m) / sd;
        }
    }
    out
}

struct RawDraws {
    x: Vec<[f64; 4]>,
    u1: Vec<f64>,
    u2: Vec<f64>,
    u3: Vec<f64>,
    eps: Vec<f64>,
}

fn draw_raw(n: usize, seed: u64, stream: u64) -> RawDraws {
    let chunks = n.div_ceil(GEN_CHUNK);
    let parts: Vec<RawDraws> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, stream, c as u64);
            let start = c * GEN_CHUNK;
            let len = GEN_CHUNK.min(n - start);
            let mut part = RawDraws {
                x: Vec::with_capacity(len),
                u1: Vec::with_capacity(len),
                u2: Vec::with_capacity(len),
                u3: Vec::with_capacity(len),
                eps: Vec::with_capacity(len),
            };
            for _ in 0..len {
                part.x.push([
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                ]);
                part.u1.push(rng.gen());
                part.u2.push(rng.gen());
                part.u3.push(rng.gen());
                part.eps.push(rng.sample(StandardNormal));
            }
            part
        })
        .collect();
    let mut all = RawDraws {
        x: Vec::with_capacity(n),
        u1: Vec::with_capacity(n),
        u2: Vec::with_capacity(n),
        u3: Vec::with_capacity(n),
        eps: Vec::with_capacity(n),
    };
    for p in parts {
        all.x.extend(p.x);
        all.u1.extend(p.u1);
        all.u2.extend(p.u2);
        all.u3.extend(p.u3);
        all.eps.extend(p.eps);
    }
    all
}

/// True per-observation nuisance values carried alongside a generated
/// sample, for efficiency-bound estimates and oracle checks.
#[derive(Debug, Clone)]
pub struct DgpTruth {
    pub m: [Vec<f64>; 4], // indexed by path_index: 11, 10, 01, 00
    pub p_d2_1: Vec<f64>,
    pub p_d1_g_d21: Vec<f64>,
    pub p_d1_g_d20: Vec<f64>,
    pub q1: Vec<f64>,
    pub q0: Vec<f64>,
}

fn path_index(path: TreatmentPath) -> usize {
    match (path.d1, path.d2) {
        (1, 1) => 0,
        (1, 0) => 1,
        (0, 1) => 2,
        (0, 0) => 3,
        _ => unreachable!(),
    }
}

/// Owned slices of true nuisance values for one estimand.
#[derive(Debug, Clone)]
pub struct OwnedTruth {
    pub m_d: Vec<f64>,
    pub m_dp: Vec<f64>,
    pub p_d1gd2: Vec<f64>,
    pub p_d1pgd2p: Vec<f64>,
    pub p_d2_1: Vec<f64>,
    pub q_d2: Vec<f64>,
    pub q_d2p: Vec<f64>,
}

impl OwnedTruth {
    pub fn values(&self) -> TrueNuisanceValues<'_> {
        TrueNuisanceValues {
            m_d: &self.m_d,
            m_dp: &self.m_dp,
            p_d1gd2: &self.p_d1gd2,
            p_d1pgd2p: &self.p_d1pgd2p,
            p_d2_1: &self.p_d2_1,
            q_d2: &self.q_d2,
            q_d2p: &self.q_d2p,
        }
    }
}

impl DgpTruth {
    pub fn for_spec(&self, spec: EstimandSpec) -> OwnedTruth {
        let d = spec.d;
        let p_cond = if d.d2 == 1 { &self.p_d1_g_d21 } else { &self.p_d1_g_d20 };
        let p_d1gd2: Vec<f64> = p_cond
            .iter()
            .map(|&p| if d.d1 == 1 { p } else { 1.0 - p })
            .collect();
        let p_d1pgd2p: Vec<f64> = self.p_d1_g_d20.iter().map(|&p| 1.0 - p).collect();
        OwnedTruth {
            m_d: self.m[path_index(d)].clone(),
            m_dp: self.m[3].clone(),
            p_d1gd2,
            p_d1pgd2p,
            p_d2_1: self.p_d2_1.clone(),
            q_d2: if d.d2 == 1 { self.q1.clone() } else { self.q0.clone() },
            q_d2p: self.q0.clone(),
        }
    }
}

#[inline]
fn mix(eta: f64, x: &[f64; 4], z: &[f64; 4], j: usize) -> f64 {
    eta * x[j] + (1.0 - eta) * z[j]
}

#[inline]
fn lin5(coef: &[f64; 5], eta: f64, x: &[f64; 4], z: &[f64; 4]) -> f64 {
    let mut acc = coef[0];
    for j in 0..4 {
        acc += coef[j + 1] * mix(eta, x, z, j);
    }
    acc
}

fn build_sample(
    cfg: &DgpConfig,
    raws: &RawDraws,
    want_truth: bool,
) -> (PanelSample, Option<DgpTruth>) {
    let n = raws.x.len();
    let p = &cfg.params;
    let zs = kang_schafer(&raws.x);

    let mut delta_1 = p.delta_1;
    delta_1[0] += cfg.c;
    let mut delta_0 = p.delta_0;
    delta_0[0] += cfg.c;

    let mut delta_y = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut d1v = Vec::with_capacity(n);
    let mut d2v = Vec::with_capacity(n);
    let mut xmat = Vec::with_capacity(n * 5);
    let mut truth = want_truth.then(|| DgpTruth {
        m: [
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        ],
        p_d2_1: Vec::with_capacity(n),
        p_d1_g_d21: Vec::with_capacity(n),
        p_d1_g_d20: Vec::with_capacity(n),
        q1: Vec::with_capacity(n),
        q0: Vec::with_capacity(n),
    });

    for i in 0..n {
        let x = &raws.x[i];
        let z = &zs[i];

        let p_d2 = logistic(lin5(&p.gamma_1, cfg.eta_p, x, z));
        let d2 = u8::from(p_d2 >= raws.u1[i]);
        let p_d1 = if d2 == 1 {
            logistic(lin5(&p.gamma_1g1, cfg.eta_p, x, z))
        } else {
            logistic(lin5(&p.gamma_1g0, cfg.eta_p, x, z))
        };
        let d1 = u8::from(p_d1 >= raws.u2[i]);
        let q = if d2 == 1 {
            logistic(lin5(&delta_1, cfg.eta_m, x, z))
        } else {
            logistic(lin5(&delta_0, cfg.eta_m, x, z))
        };
        let si = u8::from(q >= raws.u3[i]);

        // outcome blocks are exclusive: the (0,0) path gets beta_00 alone
        let coef: &[f64; 5] = match (d1, d2) {
            (1, 1) => &p.beta_11,
            (1, 0) => &p.beta_10,
            (0, 1) => &p.beta_01,
            _ => &p.beta_00,
        };
        let dy = lin5(coef, cfg.eta_o, x, z) + raws.eps[i];

        delta_y.push(dy);
        s.push(si);
        d1v.push(d1);
        d2v.push(d2);
        xmat.push(1.0);
        xmat.extend_from_slice(x);

        if let Some(t) = truth.as_mut() {
            t.m[0].push(lin5(&p.beta_11, cfg.eta_o, x, z));
            t.m[1].push(lin5(&p.beta_10, cfg.eta_o, x, z));
            t.m[2].push(lin5(&p.beta_01, cfg.eta_o, x, z));
            t.m[3].push(lin5(&p.beta_00, cfg.eta_o, x, z));
            t.p_d2_1.push(p_d2);
            t.p_d1_g_d21.push(logistic(lin5(&p.gamma_1g1, cfg.eta_p, x, z)));
            t.p_d1_g_d20.push(logistic(lin5(&p.gamma_1g0, cfg.eta_p, x, z)));
            t.q1.push(logistic(lin5(&delta_1, cfg.eta_m, x, z)));
            t.q0.push(logistic(lin5(&delta_0, cfg.eta_m, x, z)));
        }
    }

    let names = vec![
        "const".to_string(),
        "x1".to_string(),
        "x2".to_string(),
        "x3".to_string(),
        "x4".to_string(),
    ];
    let sample = PanelSample::from_columns(delta_y, s, d1v, d2v, xmat, 5, names, None)
        .expect("generated sample is structurally valid");
    (sample, truth)
}

/// Draw one sample; `stream` indexes the replication so the draw is a
/// pure function of (cfg.seed, stream).
pub fn generate_sample(cfg: &DgpConfig, stream: u64) -> PanelSample {
    let raws = draw_raw(cfg.n, cfg.seed, stream);
    build_sample(cfg, &raws, false).0
}

/// Draw one sample together with the true nuisance values behind it.
pub fn generate_sample_with_truth(cfg: &DgpConfig, stream: u64) -> (PanelSample, DgpTruth) {
    let raws = draw_raw(cfg.n, cfg.seed, stream);
    let (sample, truth) = build_sample(cfg, &raws, true);
    (sample, truth.expect("truth requested"))
}

#[derive(PartialEq, Eq, Hash, Clone, Copy)]
struct PathMeansKey {
    eta_p: u64,
    eta_o: u64,
    gammas: [[u64; 5]; 3],
}

#[derive(Clone, Copy)]
struct PathMeans {
    /// Mean of the outcome-model covariate vector within each target
    /// path's subpopulation (paths 11, 10, 01).
    mean_xo: [[f64; 5]; 3],
}

fn path_means_cache() -> &'static Mutex<HashMap<PathMeansKey, PathMeans>> {
    static CACHE: OnceLock<Mutex<HashMap<PathMeansKey, PathMeans>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

fn bits5(a: &[f64; 5]) -> [u64; 5] {
    [a[0].to_bits(), a[1].to_bits(), a[2].to_bits(), a[3].to_bits(), a[4].to_bits()]
}

/// Large-population means of the outcome-model covariates within each
/// treatment path, computed once per (eta_p, eta_o, propensity
/// coefficients) with a fixed internal seed and cached.
fn path_means(cfg: &DgpConfig) -> PathMeans {
    let key = PathMeansKey {
        eta_p: cfg.eta_p.to_bits(),
        eta_o: cfg.eta_o.to_bits(),
        gammas: [
            bits5(&cfg.params.gamma_1),
            bits5(&cfg.params.gamma_1g1),
            bits5(&cfg.params.gamma_1g0),
        ],
    };
    if let Some(v) = path_means_cache().lock().unwrap().get(&key) {
        return *v;
    }

    let n = TRUTH_DRAWS;
    let chunks = n.div_ceil(GEN_CHUNK);

    // pass 1: transform moments
    let (sums, sqs) = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(TRUTH_SEED, 0, c as u64);
            let start = c * GEN_CHUNK;
            let len = GEN_CHUNK.min(n - start);
            let mut sums = [0.0f64; 4];
            let mut sqs = [0.0f64; 4];
            for _ in 0..len {
                let x: [f64; 4] = [
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                ];
                let _u1: f64 = rng.gen();
                let _u2: f64 = rng.gen();
                let zt = kang_schafer_raw(x);
                for j in 0..4 {
                    sums[j] += zt[j];
                    sqs[j] += zt[j] * zt[j];
                }
            }
            (sums, sqs)
        })
        .reduce(
            || ([0.0; 4], [0.0; 4]),
            |mut a, b| {
                for j in 0..4 {
                    a.0[j] += b.0[j];
                    a.1[j] += b.1[j];
                }
                a
            },
        );
    let mut z_mean = [0.0; 4];
    let mut z_sd = [0.0; 4];
    for j in 0..4 {
        z_mean[j] = sums[j] / n as f64;
        z_sd[j] = (sqs[j] / n as f64 - z_mean[j] * z_mean[j]).sqrt();
    }

    // pass 2: per-path sums of the outcome-model covariates
    let params = cfg.params;
    let eta_p = cfg.eta_p;
    let eta_o = cfg.eta_o;
    let (path_sums, path_counts) = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(TRUTH_SEED, 0, c as u64);
            let start = c * GEN_CHUNK;
            let len = GEN_CHUNK.min(n - start);
            let mut sums = [[0.0f64; 5]; 3];
            let mut counts = [0usize; 3];
            for _ in 0..len {
                let x: [f64; 4] = [
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                    rng.sample(StandardNormal),
                ];
                let u1: f64 = rng.gen();
                let u2: f64 = rng.gen();
                let zt = kang_schafer_raw(x);
                let mut z = [0.0; 4];
                for j in 0..4 {
                    z[j] = (zt[j] - z_mean[j]) / z_sd[j];
                }
                let d2 = u8::from(logistic(lin5(&params.gamma_1, eta_p, &x, &z)) >= u1);
                let p_d1 = if d2 == 1 {
                    logistic(lin5(&params.gamma_1g1, eta_p, &x, &z))
                } else {
                    logistic(lin5(&params.gamma_1g0, eta_p, &x, &z))
                };
                let d1 = u8::from(p_d1 >= u2);
                let idx = match (d1, d2) {
                    (1, 1) => 0,
                    (1, 0) => 1,
                    (0, 1) => 2,
                    _ => continue,
                };
                counts[idx] += 1;
                sums[idx][0] += 1.0;
                for j in 0..4 {
                    sums[idx][j + 1] += mix(eta_o, &x, &z, j);
                }
            }
            (sums, counts)
        })
        .reduce(
            || ([[0.0; 5]; 3], [0usize; 3]),
            |mut a, b| {
                for p in 0..3 {
                    a.1[p] += b.1[p];
                    for j in 0..5 {
                        a.0[p][j] += b.0[p][j];
                    }
                }
                a
            },
        );

    let mut mean_xo = [[0.0; 5]; 3];
    for p in 0..3 {
        for j in 0..5 {
            mean_xo[p][j] = path_sums[p][j] / path_counts[p] as f64;
        }
    }
    let value = PathMeans { mean_xo };
    path_means_cache().lock().unwrap().insert(key, value);
    value
}

/// Ground-truth PDATTs for the three target paths (11, 10, 01), by a
/// high-precision plug-in over a large population draw with a fixed
/// internal seed (cached per configuration).
pub fn true_pdatt(cfg: &DgpConfig) -> [f64; 3] {
    let means = path_means(cfg);
    let betas = [&cfg.params.beta_11, &cfg.params.beta_10, &cfg.params.beta_01];
    let mut out = [0.0; 3];
    for p in 0..3 {
        // m_d - m_00 = X_o (beta_d - beta_00) under the exclusive blocks
        out[p] = means.mean_xo[p]
            .iter()
            .zip(betas[p].iter().zip(cfg.params.beta_00.iter()))
            .map(|(a, (b, b0))| a * (b - b0))
            .sum();
    }
    out
}

fn truth_for(cfg: &DgpConfig, path: TreatmentPath) -> f64 {
    let t = true_pdatt(cfg);
    match (path.d1, path.d2) {
        (1, 1) => t[0],
        (1, 0) => t[1],
        (0, 1) => t[2],
        _ => 0.0,
    }
}

/// One aggregated cell of a Monte Carlo table.
#[derive(Debug, Clone, Serialize)]
pub struct McCell {
    pub method: Method,
    pub pdatt: TreatmentPath,
    pub truth: f64,
    pub bias: f64,
    pub emp_sd: f64,
    pub mean_se: f64,
    /// Share of replications whose confidence interval covers the truth.
    pub coverage: f64,
    /// Rejection rate of the truth-centered 5% test.
    pub size: f64,
    pub mean_estimate: f64,
    /// Mean of the estimated asymptotic variance n * Var(tau_hat).
    pub mean_omega: f64,
}

/// Aggregated Monte Carlo output.
#[derive(Debug, Clone, Serialize)]
pub struct McResult {
    pub cells: Vec<McCell>,
    pub truths: Vec<(TreatmentPath, f64)>,
    pub reps_requested: usize,
    pub reps_used: usize,
    pub failures: usize,
    /// Mean efficiency-bound estimate per path, when requested.
    pub seb: Option<Vec<(TreatmentPath, f64)>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct McOptions {
    /// Also compute the efficiency-bound estimate from the true nuisance
    /// values each replication.
    pub compute_seb: bool,
}

struct RepOutput {
    // (method index, spec index) -> (tau, se)
    estimates: Vec<(f64, f64)>,
    seb: Vec<f64>,
}

fn needs_full(methods: &[Method]) -> bool {
    methods.iter().any(|m| {
        matches!(m, Method::R | Method::Or | Method::Ipw | Method::Dr)
    })
}

fn needs_cc(methods: &[Method]) -> bool {
    methods.iter().any(|m| matches!(m, Method::CcOr | Method::CcIpw | Method::CcDr))
}

fn run_one_rep(
    cfg: &DgpConfig,
    rep: u64,
    methods: &[Method],
    specs: &[EstimandSpec],
    opts: McOptions,
) -> Result<RepOutput> {
    let (sample, truth) = if opts.compute_seb {
        let (s, t) = generate_sample_with_truth(cfg, rep);
        (s, Some(t))
    } else {
        (generate_sample(cfg, rep), None)
    };

    let mut estimates = Vec::with_capacity(methods.len() * specs.len());
    let mut seb = Vec::with_capacity(specs.len());

    for &spec in specs {
        let full = if needs_full(methods) { Some(fit_nuisances(&sample, spec)?) } else { None };
        let weights = match &full {
            Some(nus) => Some(compute_weights(&sample, nus)?),
            None => None,
        };
        let cc_pair = if needs_cc(methods) {
            let cc = sample.complete_cases()?;
            let nus = fit_nuisances_complete_case(&cc, spec, NuisanceRequirements::ALL)?;
            Some((cc, nus))
        } else {
            None
        };

        for &method in methods {
            let (tau, se) = match method {
                Method::R | Method::Ipw | Method::Dr => {
                    let nus = full.as_ref().expect("full nuisances");
                    let w = weights.as_ref().expect("weights");
                    let tau = match method {
                        Method::R => robust_point(&sample, nus, w)?,
                        Method::Ipw => ipw_point(&sample, w),
                        Method::Dr => dr_point(&sample, nus, w)?,
                        _ => unreachable!(),
                    };
                    let flavor = match method {
                        Method::R => Flavor::Robust,
                        Method::Ipw => Flavor::Ipw,
                        Method::Dr => Flavor::Dr,
                        _ => unreachable!(),
                    };
                    let ing = influence_ingredients(&sample, nus)?;
                    let iv = influence_for(&sample, nus, w, tau, &ing, flavor, method)?;
                    let var = variance_from(&iv);
                    (tau, var.se)
                }
                Method::Or => {
                    let nus = full.as_ref().expect("full nuisances");
                    let r = estimate_or_with(&sample, nus)?;
                    (r.tau_hat, r.se)
                }
                Method::CcOr | Method::CcIpw | Method::CcDr => {
                    // refit per flavor on the shared complete-case sample
                    let (cc, nus) = cc_pair.as_ref().expect("cc nuisances");
                    let r = match method {
                        Method::CcOr => estimate_or_with(cc, nus)?,
                        Method::CcIpw => crate::estimators::estimate_ipw_with(cc, nus)?,
                        Method::CcDr => crate::estimators::estimate_dr_with(cc, nus)?,
                        _ => unreachable!(),
                    };
                    (r.tau_hat, r.se)
                }
                Method::WeakMarIpw => {
                    let r = estimate_weak_mar_ipw(&sample, spec)?;
                    (r.tau_hat, r.se)
                }
                Method::RImproved => {
                    let r = estimate_robust_improved(&sample, spec)?;
                    (r.tau_hat, r.se)
                }
                Method::Naive => {
                    return Err(Error::Validation(
                        "the naive pre/post contrast is not a PDATT estimator; exclude it from simulations"
                            .into(),
                    ))
                }
            };
            estimates.push((tau, se));
        }

        if let Some(t) = &truth {
            let owned = t.for_spec(spec);
            let tau_true = truth_for(cfg, spec.d);
            seb.push(seb_estimate(&sample, &owned.values(), spec, tau_true)?);
        }
    }

    Ok(RepOutput { estimates, seb })
}

/// Run the Monte Carlo experiment: per replication, draw a sample with a
/// replication-indexed stream, run every requested estimator with its
/// analytic standard error, and aggregate bias, dispersion, coverage and
/// size against the ground-truth PDATTs. Replications with first-stage
/// failures are excluded and counted.
pub fn run_monte_carlo(
    cfg: &DgpConfig,
    reps: usize,
    methods: &[Method],
    specs: &[EstimandSpec],
    opts: McOptions,
) -> Result<McResult> {
    if reps == 0 {
        return Err(Error::Validation("reps must be at least 1".into()));
    }
    if methods.is_empty() || specs.is_empty() {
        return Err(Error::Validation("need at least one method and one spec".into()));
    }
    if methods.contains(&Method::Naive) {
        return Err(Error::Validation(
            "the naive pre/post contrast is not a PDATT estimator; exclude it from simulations"
                .into(),
        ));
    }
    // warm the truth cache before the parallel loop
    let _ = true_pdatt(cfg);

    let outputs: Vec<Result<RepOutput>> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| run_one_rep(cfg, rep, methods, specs, opts))
        .collect();

    let mut ok = Vec::with_capacity(reps);
    let mut failures = 0usize;
    for out in outputs {
        match out {
            Ok(o) => ok.push(o),
            Err(_) => failures += 1,
        }
    }
    if ok.is_empty() {
        return Err(Error::Numerical("all replications failed".into()));
    }

    let truths: Vec<(TreatmentPath, f64)> =
        specs.iter().map(|s| (s.d, truth_for(cfg, s.d))).collect();

    let mut cells = Vec::new();
    for (si, &spec) in specs.iter().enumerate() {
        let truth = truths[si].1;
        let z_level = z_critical(spec.level);
        let z05 = z_critical(0.95);
        for (mi, &method) in methods.iter().enumerate() {
            let idx = si * methods.len() + mi;
            let taus: Vec<f64> = ok.iter().map(|o| o.estimates[idx].0).collect();
            let ses: Vec<f64> = ok.iter().map(|o| o.estimates[idx].1).collect();
            let mean_tau = mean(&taus);
            let coverage = taus
                .iter()
                .zip(&ses)
                .filter(|(t, s)| (*t - truth).abs() <= z_level * **s)
                .count() as f64
                / taus.len() as f64;
            let size = taus
                .iter()
                .zip(&ses)
                .filter(|(t, s)| (*t - truth).abs() > z05 * **s)
                .count() as f64
                / taus.len() as f64;
            let n = cfg.n as f64;
            let mean_omega =
                mean(&ses.iter().map(|s| s * s * n).collect::<Vec<_>>());
            cells.push(McCell {
                method,
                pdatt: spec.d,
                truth,
                bias: mean_tau - truth,
                emp_sd: sd_unbiased(&taus),
                mean_se: mean(&ses),
                coverage,
                size,
                mean_estimate: mean_tau,
                mean_omega,
            });
        }
    }

    let seb = if opts.compute_seb {
        let mut out = Vec::new();
        for (si, &spec) in specs.iter().enumerate() {
            let vals: Vec<f64> = ok.iter().map(|o| o.seb[si]).collect();
            out.push((spec.d, mean(&vals)));
        }
        Some(out)
    } else {
        None
    };

    Ok(McResult {
        cells,
        truths,
        reps_requested: reps,
        reps_used: ok.len(),
        failures,
        seb,
    })
}

/// One row of a sweep table (long format: x is the swept quantity).
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub x: f64,
    pub missing_share: f64,
    pub method: Method,
    pub pdatt: TreatmentPath,
    pub estimate: f64,
    pub truth: f64,
    pub bias: f64,
}

fn sweep_point(
    cfg: &DgpConfig,
    stream: u64,
    x: f64,
    methods: &[Method],
    specs: &[EstimandSpec],
    truths: &[f64; 3],
) -> Result<Vec<SweepRow>> {
    let sample = generate_sample(cfg, stream);
    let missing_share =
        sum(sample.s().iter().map(|&v| 1.0 - v as f64)) / sample.n() as f64;
    let mut rows = Vec::new();
    for &spec in specs {
        let truth = match (spec.d.d1, spec.d.d2) {
            (1, 1) => truths[0],
            (1, 0) => truths[1],
            (0, 1) => truths[2],
            _ => 0.0,
        };
        let full = fit_nuisances(&sample, spec)?;
        let w = compute_weights(&sample, &full)?;
        let cc = if needs_cc(methods) {
            let ccs = sample.complete_cases()?;
            let nus = fit_nuisances_complete_case(&ccs, spec, NuisanceRequirements::ALL)?;
            Some((ccs, nus))
        } else {
            None
        };
        for &method in methods {
            let estimate = match method {
                Method::R => robust_point(&sample, &full, &w)?,
                Method::Ipw => ipw_point(&sample, &w),
                Method::Dr => dr_point(&sample, &full, &w)?,
                Method::Or => {
                    let r = estimate_or_with(&sample, &full)?;
                    r.tau_hat
                }
                Method::CcOr | Method::CcIpw | Method::CcDr => {
                    let (ccs, _) = cc.as_ref().expect("cc sample");
                    estimate_cc(ccs, spec, method).or_else(|_| estimate_cc(&sample, spec, method))?.tau_hat
                }
                Method::RImproved => estimate_robust_improved(&sample, spec)?.tau_hat,
                Method::WeakMarIpw => estimate_weak_mar_ipw(&sample, spec)?.tau_hat,
                Method::Naive => {
                    return Err(Error::Validation("naive not supported in sweeps".into()))
                }
            };
            rows.push(SweepRow {
                x,
                missing_share,
                method,
                pdatt: spec.d,
                estimate,
                truth,
                bias: estimate - truth,
            });
        }
    }
    Ok(rows)
}

/// Bias of the requested estimators across a grid of missingness levels
/// `c`, one large draw per grid point.
pub fn sweep_missingness(
    c_grid: &[f64],
    cfg: &DgpConfig,
    n_large: usize,
    methods: &[Method],
) -> Result<Vec<SweepRow>> {
    let specs: Vec<EstimandSpec> =
        TreatmentPath::TARGETS.iter().map(|&d| EstimandSpec::new(d)).collect::<Result<_>>()?;
    let truths = true_pdatt(cfg); // c does not move the truths
    let results: Vec<Result<Vec<SweepRow>>> = c_grid
        .par_iter()
        .enumerate()
        .map(|(i, &c)| {
            let mut point_cfg = *cfg;
            point_cfg.c = c;
            point_cfg.n = n_large;
            sweep_point(
                &point_cfg,
                SWEEP_STREAM_BASE + i as u64,
                c,
                methods,
                &specs,
                &truths,
            )
        })
        .collect();
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Bias of the requested estimators across a grid of missingness-model
/// misspecification degrees eta_m (1 = correct, 0 = fully transformed).
pub fn sweep_misspecification(
    eta_m_grid: &[f64],
    cfg: &DgpConfig,
    n_large: usize,
    methods: &[Method],
) -> Result<Vec<SweepRow>> {
    let specs: Vec<EstimandSpec> =
        TreatmentPath::TARGETS.iter().map(|&d| EstimandSpec::new(d)).collect::<Result<_>>()?;
    let truths = true_pdatt(cfg); // eta_m does not move the truths
    let results: Vec<Result<Vec<SweepRow>>> = eta_m_grid
        .par_iter()
        .enumerate()
        .map(|(i, &eta_m)| {
            let mut point_cfg = *cfg;
            point_cfg.eta_m = eta_m;
            point_cfg.n = n_large;
            sweep_point(
                &point_cfg,
                SWEEP_STREAM_BASE + (1 << 20) + i as u64,
                eta_m,
                methods,
                &specs,
                &truths,
            )
        })
        .collect();
    let mut rows = Vec::new();
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}

/// Rejection frequencies of H0: tau_{(11)(00)} = 0 across a grid of true
/// values, induced by shifting the intercept of the (1,1) outcome block.
#[derive(Debug, Clone, Serialize)]
pub struct PowerCurve {
    pub targets: Vec<f64>,
    pub methods: Vec<Method>,
    /// rejections[m][t] = rejection frequency of method m at target t.
    pub rejections: Vec<Vec<f64>>,
    pub reps: usize,
    pub failures: usize,
}

/// Find the beta_11 intercept shift that sets the (1,1) truth to
/// `target`, by monotone bisection.
fn solve_intercept_shift(cfg: &DgpConfig, target: f64) -> Result<f64> {
    let tau_at = |shift: f64| -> f64 {
        let mut c = *cfg;
        c.params.beta_11[0] += shift;
        true_pdatt(&c)[0]
    };
    let base = tau_at(0.0);
    let mut lo = (target - base) - 0.5;
    let mut hi = (target - base) + 0.5;
    let mut f_lo = tau_at(lo) - target;
    let mut f_hi = tau_at(hi) - target;
    let mut grow = 0;
    while f_lo > 0.0 || f_hi < 0.0 {
        lo -= 0.5;
        hi += 0.5;
        f_lo = tau_at(lo) - target;
        f_hi = tau_at(hi) - target;
        grow += 1;
        if grow > 60 {
            return Err(Error::Numerical(format!(
                "cannot bracket intercept shift for target {target}"
            )));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let f_mid = tau_at(mid) - target;
        if f_mid.abs() < 1e-10 || (hi - lo) < 1e-12 {
            return Ok(mid);
        }
        if f_mid < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Power of the 5% test of H0: tau_{(11)(00)} = 0 for each target value.
pub fn power_curve(
    cfg: &DgpConfig,
    tau_grid: &[f64],
    reps: usize,
    methods: &[Method],
) -> Result<PowerCurve> {
    if tau_grid.is_empty() {
        return Err(Error::Validation("power grid must be nonempty".into()));
    }
    let spec = EstimandSpec::new(TreatmentPath::new(1, 1))?;
    let z = z_critical(0.95);
    let mut rejections = vec![Vec::with_capacity(tau_grid.len()); methods.len()];
    let mut failures_total = 0usize;

    for (gi, &target) in tau_grid.iter().enumerate() {
        let shift = solve_intercept_shift(cfg, target)?;
        let mut point_cfg = *cfg;
        point_cfg.params.beta_11[0] += shift;

        let outcomes: Vec<Result<Vec<bool>>> = (0..reps as u64)
            .into_par_iter()
            .map(|r| {
                let stream = (gi as u64) * reps as u64 + r;
                let sample = generate_sample(&point_cfg, stream);
                let mut rejects = Vec::with_capacity(methods.len());
                for &method in methods {
                    let (tau, se) = match method {
                        Method::R | Method::Ipw | Method::Dr | Method::Or => {
                            let nus = fit_nuisances(&sample, spec)?;
                            let w = compute_weights(&sample, &nus)?;
                            let (tau, flavor) = match method {
                                Method::R => (robust_point(&sample, &nus, &w)?, Flavor::Robust),
                                Method::Ipw => (ipw_point(&sample, &w), Flavor::Ipw),
                                Method::Dr => (dr_point(&sample, &nus, &w)?, Flavor::Dr),
                                Method::Or => {
                                    let r = estimate_or_with(&sample, &nus)?;
                                    rejects.push(r.tau_hat.abs() > z * r.se);
                                    continue;
                                }
                                _ => unreachable!(),
                            };
                            let ing = influence_ingredients(&sample, &nus)?;
                            let iv =
                                influence_for(&sample, &nus, &w, tau, &ing, flavor, method)?;
                            (tau, variance_from(&iv).se)
                        }
                        Method::RImproved => {
                            let r = estimate_robust_improved(&sample, spec)?;
                            (r.tau_hat, r.se)
                        }
                        other => {
                            return Err(Error::Validation(format!(
                                "{other} not supported in the power experiment"
                            )))
                        }
                    };
                    rejects.push(tau.abs() > z * se);
                }
                Ok(rejects)
            })
            .collect();

        let mut counts = vec![0usize; methods.len()];
        let mut used = 0usize;
        for o in outcomes {
            match o {
                Ok(flags) => {
                    used += 1;
                    for (m, &f) in flags.iter().enumerate() {
                        if f {
                            counts[m] += 1;
                        }
                    }
                }
                Err(_) => failures_total += 1,
            }
        }
        if used == 0 {
            return Err(Error::Numerical(format!(
                "all replications failed at power target {target}"
            )));
        }
        for m in 0..methods.len() {
            rejections[m].push(counts[m] as f64 / used as f64);
        }
    }

    Ok(PowerCurve {
        targets: tau_grid.to_vec(),
        methods: methods.to_vec(),
        rejections,
        reps,
        failures: failures_total,
    })
}
