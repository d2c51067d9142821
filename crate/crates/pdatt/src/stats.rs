//! Small numeric helpers: compensated summation and normal quantiles.

/// Neumaier-compensated sum. Keeps weight means and moment accumulations
/// accurate at large n.
pub fn sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut s = 0.0f64;
    let mut c = 0.0f64;
    for x in xs {
        let t = s + x;
        if s.abs() >= x.abs() {
            c += (s - t) + x;
        } else {
            c += (x - t) + s;
        }
        s = t;
    }
    s + c
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    sum(xs.iter().copied()) / xs.len() as f64
}

/// Sample variance with the 1/n convention.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    sum(xs.iter().map(|x| (x - m) * (x - m))) / xs.len() as f64
}

/// Sample standard deviation with the 1/(n-1) convention, as used for
/// Monte Carlo dispersion summaries.
pub fn sd_unbiased(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    (sum(xs.iter().map(|x| (x - m) * (x - m))) / (n - 1) as f64).sqrt()
}

/// Inverse logit.
#[inline]
pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Standard normal CDF via erfc-style rational approximation
/// (Abramowitz & Stegun 26.2.17, |err| < 7.5e-8).
pub fn normal_cdf(z: f64) -> f64 {
    if z > 8.0 {
        return 1.0;
    }
    if z < -8.0 {
        return 0.0;
    }
    let x = z.abs();
    let t = 1.0 / (1.0 + 0.2316419 * x);
    let poly = t
        * (0.319381530
            + t * (-0.356563782 + t * (1.781477937 + t * (-1.821255978 + t * 1.330274429))));
    let phi = (-x * x / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let upper = phi * poly;
    if z >= 0.0 {
        1.0 - upper
    } else {
        upper
    }
}

/// Standard normal quantile (Acklam's algorithm, refined by one Halley
/// step; absolute error well below 1e-12 on (1e-300, 1-1e-16)).
pub fn normal_quantile(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "normal_quantile requires p in (0,1)");

    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    // One Halley refinement against the high-accuracy erf-based CDF.
    let e = cdf_highprec(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (x * x / 2.0).exp();
    x - u / (1.0 + x * u / 2.0)
}

/// High-precision standard normal CDF built on an erfc expansion
/// (used only to polish the quantile).
fn cdf_highprec(z: f64) -> f64 {
    0.5 * erfc_hp(-z / std::f64::consts::SQRT_2)
}

/// erfc via the continued-fraction/series split of Numerical Recipes;
/// relative error below 1.2e-7 only for the base approximation, so a
/// series form is used for small arguments instead.
fn erfc_hp(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc_hp(-x);
    }
    if x < 2.0 {
        // erf series: erf(x) = 2/sqrt(pi) * sum (-1)^k x^(2k+1) / (k!(2k+1))
        let mut term = x;
        let mut acc = x;
        let x2 = x * x;
        let mut k = 0usize;
        while term.abs() > 1e-18 * acc.abs() + 1e-300 {
            k += 1;
            term *= -x2 / k as f64;
            acc += term / (2 * k + 1) as f64;
        }
        1.0 - 2.0 / std::f64::consts::PI.sqrt() * acc
    } else {
        // continued fraction for erfc
        let x2 = x * x;
        let mut f = 0.0;
        for i in (1..=60).rev() {
            f = 0.5 * i as f64 / (x + f);
        }
        (-x2).exp() / ((x + f) * std::f64::consts::PI.sqrt())
    }
}

/// Two-sided critical value z_{alpha/2} for a confidence level in (0,1).
pub fn z_critical(level: f64) -> f64 {
    normal_quantile(0.5 + level / 2.0)
}
