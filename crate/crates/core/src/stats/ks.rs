//! Kolmogorov–Smirnov tests.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    /// Effective sample size used for the asymptotic p-value.
    pub n_eff: f64,
}

/// Survival function of the Kolmogorov distribution, `P(K > λ)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-18 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn p_value(d: f64, n_eff: f64) -> f64 {
    let s = n_eff.sqrt();
    // Stephens' small-sample correction.
    kolmogorov_sf((s + 0.12 + 0.11 / s) * d)
}

fn sorted_finite(data: &[f64]) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Degenerate("KS test on an empty sample".into()));
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::Degenerate("KS test on non-finite data".into()));
    }
    let mut v = data.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    Ok(v)
}

/// One-sample test of `data` against a continuous CDF.
pub fn ks_one_sample(data: &[f64], cdf: impl Fn(f64) -> f64) -> Result<KsResult> {
    let v = sorted_finite(data)?;
    let n = v.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in v.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    Ok(KsResult { statistic: d, p_value: p_value(d, n), n_eff: n })
}

/// Two-sample test.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    let a = sorted_finite(a)?;
    let b = sorted_finite(b)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let n_eff = na * nb / (na + nb);
    Ok(KsResult { statistic: d, p_value: p_value(d, n_eff), n_eff })
}

/// Largest gap between an empirical CDF and a reference CDF, without a
/// p-value.
pub fn ks_distance(data: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    ks_one_sample(data, cdf).map(|r| r.statistic)
}
