//! Streaming Birkhoff sums, Monte Carlo moment tables and coefficient
//! estimators.

mod coeffs;
mod ks;
mod moments;

pub use coeffs::{direct_coeffs, green_kubo, CoefficientEstimate, Method, Truncation, GK_BATCHES};
pub use ks::{kolmogorov_sf, ks_distance, ks_one_sample, ks_two_sample, KsResult};
pub use moments::{
    moment_table, scaling_exponent, MomentOptions, MomentRow, MomentTable, ScalingFit, Statistic,
    BOOTSTRAP_RESAMPLES,
};

use serde::Serialize;

/// Running `S_n`, `𝕊_n` and `Q_n` of a stream of `d`-vectors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IteratedStats {
    pub dim: usize,
    pub n: u64,
    /// `Σ_{j<n} v_j`
    pub s: Vec<f64>,
    /// `Σ_{i<j<n} v_i ⊗ v_j`, row-major.
    pub ss: Vec<f64>,
    /// `Σ_{j<n} v_j ⊗ v_j`, row-major.
    pub q: Vec<f64>,
}

impl IteratedStats {
    pub fn new(dim: usize) -> Self {
        Self { dim, n: 0, s: vec![0.0; dim], ss: vec![0.0; dim * dim], q: vec![0.0; dim * dim] }
    }

    #[inline]
    pub fn push(&mut self, v: &[f64]) {
        let d = self.dim;
        for a in 0..d {
            let sa = self.s[a];
            let va = v[a];
            for b in 0..d {
                self.ss[a * d + b] += sa * v[b];
                self.q[a * d + b] += va * v[b];
            }
        }
        for a in 0..d {
            self.s[a] += v[a];
        }
        self.n += 1;
    }

    /// `max |S⊗S − 𝕊 − 𝕊ᵀ − Q|` relative to `max(|S|², tr Q)`.
    pub fn pair_residual(&self) -> f64 {
        let d = self.dim;
        let s2: f64 = self.s.iter().map(|x| x * x).sum();
        let trq: f64 = (0..d).map(|a| self.q[a * d + a]).sum();
        let mut r: f64 = 0.0;
        for a in 0..d {
            for b in 0..d {
                let lhs = self.s[a] * self.s[b];
                let rhs = self.ss[a * d + b] + self.ss[b * d + a] + self.q[a * d + b];
                r = r.max((lhs - rhs).abs());
            }
        }
        let scale = s2.max(trq);
        if scale == 0.0 {
            r
        } else {
            r / scale
        }
    }

    /// Frobenius norm of `𝕊`.
    pub fn ss_norm(&self) -> f64 {
        self.ss.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Euclidean norm of `S`.
    pub fn s_norm(&self) -> f64 {
        self.s.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Accumulate the iterated sums of a finite stream.
pub fn iterated_sums_stream<'a, I>(dim: usize, values: I) -> IteratedStats
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut st = IteratedStats::new(dim);
    for v in values {
        st.push(v);
    }
    st
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let m = xs.len() as f64;
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / m;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// Componentwise mean and standard error over samples of equal length.
pub fn mean_stderr_vec(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let len = samples.first().map_or(0, |s| s.len());
    let mut mean = vec![0.0; len];
    let mut se = vec![0.0; len];
    let mut col = Vec::with_capacity(samples.len());
    for k in 0..len {
        col.clear();
        col.extend(samples.iter().map(|s| s[k]));
        let (m, e) = mean_stderr(&col);
        mean[k] = m;
        se[k] = e;
    }
    (mean, se)
}

/// Sample covariance of `d`-vectors (rows) and the standard error of each
/// entry, using the fourth-moment formula for the variance of a product.
pub fn covariance_stderr(rows: &[Vec<f64>], d: usize) -> (Vec<f64>, Vec<f64>) {
    let m = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for a in 0..d {
            mean[a] += r[a] / m;
        }
    }
    let mut cov = vec![0.0; d * d];
    let mut se = vec![0.0; d * d];
    let mut prods = Vec::with_capacity(rows.len());
    for a in 0..d {
        for b in 0..d {
            prods.clear();
            prods.extend(rows.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])));
            let (c, e) = mean_stderr(&prods);
            cov[a * d + b] = c * m / (m - 1.0).max(1.0);
            se[a * d + b] = e;
        }
    }
    (cov, se)
}
