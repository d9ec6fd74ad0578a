//! Estimators of the diffusion matrix `Σ` and the drift matrix `E`.

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dynamics::{start_orbit, InitialMeasure, MapSpec, Observable, DEFAULT_BURNIN};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, Csv};
use crate::rng::StreamKey;
use crate::stats::{mean_stderr_vec, IteratedStats};

/// Number of batches used for the Green–Kubo error bars.
pub const GK_BATCHES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Direct,
    GreenKubo,
    Martingale,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Direct => "direct",
            Method::GreenKubo => "green_kubo",
            Method::Martingale => "martingale",
        }
    }
}

/// How each estimator truncates its infinite-time limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    /// Orbit length `n` of the direct estimator.
    Steps(usize),
    /// Largest correlation lag `N_max`.
    MaxLag(usize),
    /// Series terms `K` of `χ′`.
    SeriesTerms(usize),
}

/// `(Σ, E)` with per-entry standard errors, all row-major `d × d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientEstimate {
    pub dim: usize,
    pub sigma: Vec<f64>,
    pub e: Vec<f64>,
    pub sigma_stderr: Vec<f64>,
    pub e_stderr: Vec<f64>,
    pub method: Method,
    pub truncation: Truncation,
}

impl CoefficientEstimate {
    pub fn sigma_at(&self, i: usize, j: usize) -> f64 {
        self.sigma[i * self.dim + j]
    }

    pub fn e_at(&self, i: usize, j: usize) -> f64 {
        self.e[i * self.dim + j]
    }

    /// Symmetric to `tol·‖Σ‖` and without eigenvalues below `−tol·‖Σ‖`.
    pub fn sigma_is_psd(&self, tol: f64) -> bool {
        let d = self.dim;
        let norm = self.sigma.iter().map(|x| x * x).sum::<f64>().sqrt();
        let slack = tol * norm.max(f64::MIN_POSITIVE);
        for a in 0..d {
            for b in 0..d {
                if (self.sigma[a * d + b] - self.sigma[b * d + a]).abs() > slack {
                    return false;
                }
            }
        }
        min_eigenvalue_symmetric(&self.sigma, d) >= -slack
    }

    /// Both matrices agree entrywise with `other` within `k` combined
    /// standard errors.
    pub fn agrees_with(&self, other: &CoefficientEstimate, k: f64) -> bool {
        let close = |a: &[f64], sa: &[f64], b: &[f64], sb: &[f64]| {
            a.iter().zip(b).zip(sa.iter().zip(sb)).all(|((x, y), (ex, ey))| (x - y).abs() <= k * (ex + ey))
        };
        self.dim == other.dim
            && close(&self.sigma, &self.sigma_stderr, &other.sigma, &other.sigma_stderr)
            && close(&self.e, &self.e_stderr, &other.e, &other.e_stderr)
    }

    /// CSV rows `method, matrix, i, j, value, stderr`.
    pub fn to_csv(estimates: &[CoefficientEstimate]) -> String {
        let mut csv = Csv::new(&["method", "matrix", "i", "j", "value", "stderr"]);
        for est in estimates {
            let d = est.dim;
            for (name, vals, errs) in [("Sigma", &est.sigma, &est.sigma_stderr), ("E", &est.e, &est.e_stderr)] {
                for i in 0..d {
                    for j in 0..d {
                        csv.row(&[
                            est.method.name().to_string(),
                            name.to_string(),
                            i.to_string(),
                            j.to_string(),
                            fmt_f64(vals[i * d + j]),
                            fmt_f64(errs[i * d + j]),
                        ]);
                    }
                }
            }
        }
        csv.finish()
    }
}

/// Smallest eigenvalue of a small symmetric matrix by Jacobi rotations.
fn min_eigenvalue_symmetric(m: &[f64], d: usize) -> f64 {
    if d == 0 {
        return 0.0;
    }
    let mut a = m.to_vec();
    for i in 0..d {
        for j in i + 1..d {
            let s = 0.5 * (a[i * d + j] + a[j * d + i]);
            a[i * d + j] = s;
            a[j * d + i] = s;
        }
    }
    for _ in 0..100 {
        let mut off = 0.0;
        for p in 0..d {
            for q in p + 1..d {
                off += a[p * d + q] * a[p * d + q];
            }
        }
        if off < 1e-30 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..d).map(|i| a[i * d + i]).fold(f64::INFINITY, f64::min)
}

/// Green–Kubo sums of autocorrelations along one long `μ`-sampled orbit,
/// truncated at lag `n_max`. Error bars come from [`GK_BATCHES`] batch means.
pub fn green_kubo(
    spec: &MapSpec,
    v: &Observable,
    n_max: usize,
    orbit_len: usize,
    key: &StreamKey,
) -> Result<CoefficientEstimate> {
    if n_max == 0 {
        return Err(Error::config("n_max", "at least one lag is required"));
    }
    if n_max >= orbit_len / 100 {
        return Err(Error::config(
            "n_max",
            format!("lag {n_max} too large for an orbit of {orbit_len}; need n_max < orbit_len/100"),
        ));
    }
    let d = v.dim();
    let batch = orbit_len / GK_BATCHES;
    if n_max >= batch {
        return Err(Error::config("n_max", "lag exceeds the batch length"));
    }

    // Components stored column-wise so each batch transform reads contiguous data.
    let len = batch * GK_BATCHES;
    let mut series = vec![vec![0.0; len]; d];
    let mut orbit = start_orbit(spec, InitialMeasure::Mu, DEFAULT_BURNIN, key, 0);
    let mut buf = vec![0.0; d];
    for t in 0..len {
        v.eval(orbit.x(), &mut buf);
        for a in 0..d {
            series[a][t] = buf[a];
        }
        orbit.advance();
    }
    let means: Vec<f64> = series.iter().map(|s| s.iter().sum::<f64>() / len as f64).collect();
    for (s, m) in series.iter_mut().zip(&means) {
        s.iter_mut().for_each(|x| *x -= m);
    }

    let fft_len = (batch + n_max + 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(fft_len);
    let inv = planner.plan_fft_inverse(fft_len);

    let per_batch: Vec<(Vec<f64>, Vec<f64>)> = (0..GK_BATCHES)
        .into_par_iter()
        .map(|b| {
            let spectra: Vec<Vec<Complex<f64>>> = (0..d)
                .map(|a| {
                    let mut x: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); fft_len];
                    for (k, val) in series[a][b * batch..(b + 1) * batch].iter().enumerate() {
                        x[k].re = *val;
                    }
                    fwd.process(&mut x);
                    x
                })
                .collect();
            let mut sigma = vec![0.0; d * d];
            let mut e = vec![0.0; d * d];
            let mut work = vec![Complex::new(0.0, 0.0); fft_len];
            for a in 0..d {
                for c in 0..d {
                    // Σ_t x_a(t) x_c(t+n) for n ≥ 0
                    for k in 0..fft_len {
                        work[k] = spectra[a][k].conj() * spectra[c][k];
                    }
                    inv.process(&mut work);
                    let scale = 1.0 / fft_len as f64;
                    let corr = |n: usize| work[n].re * scale / (batch - n) as f64;
                    let c0 = corr(0);
                    let tail: f64 = (1..=n_max).map(corr).sum();
                    e[a * d + c] = tail;
                    sigma[a * d + c] += c0 + tail;
                    sigma[c * d + a] += tail;
                }
            }
            (sigma, e)
        })
        .collect();

    let sig: Vec<Vec<f64>> = per_batch.iter().map(|(s, _)| s.clone()).collect();
    let ee: Vec<Vec<f64>> = per_batch.iter().map(|(_, e)| e.clone()).collect();
    let (sigma, sigma_stderr) = mean_stderr_vec(&sig);
    let (e, e_stderr) = mean_stderr_vec(&ee);
    Ok(CoefficientEstimate {
        dim: d,
        sigma,
        e,
        sigma_stderr,
        e_stderr,
        method: Method::GreenKubo,
        truncation: Truncation::MaxLag(n_max),
    })
}

/// Per-sample `S_n` and `𝕊_n` over `samples` orbits of length `n` started
/// from `initial`.
pub(crate) fn endpoint_sums(
    spec: &MapSpec,
    v: &Observable,
    n: usize,
    samples: usize,
    initial: InitialMeasure,
    key: &StreamKey,
) -> Vec<IteratedStats> {
    let d = v.dim();
    (0..samples as u64)
        .into_par_iter()
        .map_init(
            || vec![0.0; d],
            |buf, i| {
                let mut orbit = start_orbit(spec, initial, DEFAULT_BURNIN, key, i);
                let mut st = IteratedStats::new(d);
                for _ in 0..n {
                    v.eval(orbit.x(), buf);
                    st.push(buf);
                    orbit.advance();
                }
                st
            },
        )
        .collect()
}

/// `(1/n)` sample means of `S_n ⊗ S_n` and `𝕊_n` over `samples` orbits with
/// `μ`-sampled starts.
pub fn direct_coeffs(
    spec: &MapSpec,
    v: &Observable,
    n: usize,
    samples: usize,
    key: &StreamKey,
) -> Result<CoefficientEstimate> {
    if samples < 1000 {
        return Err(Error::config("samples", "the direct estimator needs at least 1000 samples"));
    }
    if n == 0 {
        return Err(Error::config("n", "orbit length must be positive"));
    }
    let d = v.dim();
    let sums = endpoint_sums(spec, v, n, samples, InitialMeasure::Mu, key);
    let nf = n as f64;
    let sig: Vec<Vec<f64>> = sums
        .iter()
        .map(|st| {
            let mut m = vec![0.0; d * d];
            for a in 0..d {
                for b in 0..d {
                    m[a * d + b] = st.s[a] * st.s[b] / nf;
                }
            }
            m
        })
        .collect();
    let ee: Vec<Vec<f64>> = sums.iter().map(|st| st.ss.iter().map(|x| x / nf).collect()).collect();
    let (sigma, sigma_stderr) = mean_stderr_vec(&sig);
    let (e, e_stderr) = mean_stderr_vec(&ee);
    Ok(CoefficientEstimate {
        dim: d,
        sigma,
        e,
        sigma_stderr,
        e_stderr,
        method: Method::Direct,
        truncation: Truncation::Steps(n),
    })
}
