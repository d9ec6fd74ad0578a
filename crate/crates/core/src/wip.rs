//! Path ensembles of `(W_n, 𝕎_n)` and distributional checks against the
//! Brownian limit with drift `E t` in the iterated part.

use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dynamics::{start_orbit, InitialMeasure, MapSpec, Observable, DEFAULT_BURNIN};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, Csv};
use crate::rng::StreamKey;
use crate::stats::{covariance_stderr, ks_one_sample, ks_two_sample, mean_stderr};

/// Default significance level for distributional tests.
pub const DEFAULT_ALPHA: f64 = 0.01;
/// Default z threshold for moment comparisons.
pub const DEFAULT_Z: f64 = 3.0;

/// Where an ensemble came from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub source: String,
    pub map: String,
    pub gamma: f64,
    pub observable: String,
    pub offset: Vec<f64>,
    pub n: usize,
    pub seed: u64,
    pub initial: String,
}

/// `M` paths sampled on a fixed grid of times in `[0, 1]`.
///
/// Values are stored sample-major: path `i`, grid index `g`, component `k`
/// sits at `(i·G + g)·d + k` (and `·d²` for the matrix-valued parts).
#[derive(Debug, Clone, Serialize)]
pub struct PathEnsemble {
    pub dim: usize,
    pub grid: Vec<f64>,
    pub samples: usize,
    pub w: Vec<f64>,
    /// Empty for ensembles without an iterated part.
    pub ww: Vec<f64>,
    /// `Q/n`, the scaled diagonal sum.
    pub q: Vec<f64>,
    /// Paths dropped by the divergence guard.
    pub divergent: usize,
    pub provenance: Provenance,
}

impl PathEnsemble {
    pub fn has_iterated(&self) -> bool {
        !self.ww.is_empty()
    }

    pub fn w_at(&self, path: usize, g: usize) -> &[f64] {
        let d = self.dim;
        let base = (path * self.grid.len() + g) * d;
        &self.w[base..base + d]
    }

    pub fn ww_at(&self, path: usize, g: usize) -> &[f64] {
        let dd = self.dim * self.dim;
        let base = (path * self.grid.len() + g) * dd;
        &self.ww[base..base + dd]
    }

    pub fn q_at(&self, path: usize, g: usize) -> &[f64] {
        let dd = self.dim * self.dim;
        let base = (path * self.grid.len() + g) * dd;
        &self.q[base..base + dd]
    }

    /// Values of component `k` of `W(t_g)` across paths.
    pub fn w_component(&self, g: usize, k: usize) -> Vec<f64> {
        (0..self.samples).map(|i| self.w_at(i, g)[k]).collect()
    }

    /// Grid index of the final time.
    pub fn last(&self) -> usize {
        self.grid.len() - 1
    }

    /// Largest violation of `𝕎 + 𝕎ᵀ = W⊗W − Q/n` over paths and grid times,
    /// relative to `max(|W|², tr Q/n)`.
    pub fn levy_residual(&self) -> f64 {
        if !self.has_iterated() {
            return 0.0;
        }
        let d = self.dim;
        let mut worst: f64 = 0.0;
        for i in 0..self.samples {
            for g in 0..self.grid.len() {
                let w = self.w_at(i, g);
                let ww = self.ww_at(i, g);
                let q = self.q_at(i, g);
                let w2: f64 = w.iter().map(|x| x * x).sum();
                let trq: f64 = (0..d).map(|a| q[a * d + a]).sum();
                let scale = w2.max(trq).max(f64::MIN_POSITIVE);
                for a in 0..d {
                    for b in 0..d {
                        let r = ww[a * d + b] + ww[b * d + a] - (w[a] * w[b] - q[a * d + b]);
                        worst = worst.max(r.abs() / scale);
                    }
                }
            }
        }
        worst
    }

    /// CSV with columns `path_id, t, W[0..d), WW[0..d²)`.
    pub fn to_csv(&self) -> String {
        let d = self.dim;
        let mut header = vec!["path_id".to_string(), "t".to_string()];
        header.extend((0..d).map(|k| format!("W{k}")));
        if self.has_iterated() {
            header.extend((0..d * d).map(|k| format!("WW{k}")));
        }
        let mut csv = Csv::new(&header);
        for i in 0..self.samples {
            for (g, t) in self.grid.iter().enumerate() {
                let mut row = vec![i.to_string(), fmt_f64(*t)];
                row.extend(self.w_at(i, g).iter().map(|v| fmt_f64(*v)));
                if self.has_iterated() {
                    row.extend(self.ww_at(i, g).iter().map(|v| fmt_f64(*v)));
                }
                csv.row(&row);
            }
        }
        csv.finish()
    }

    fn same_setup(&self, other: &PathEnsemble) -> bool {
        let (a, b) = (&self.provenance, &other.provenance);
        self.dim == other.dim
            && self.grid == other.grid
            && a.map == b.map
            && a.gamma == b.gamma
            && a.observable == b.observable
            && a.n == b.n
    }
}

/// Step counts `⌊n t⌋` for each grid time, with a small guard against
/// products like `0.29·100` landing just below an integer.
pub(crate) fn grid_steps(grid: &[f64], n: usize) -> Vec<usize> {
    grid.iter().map(|&t| (t * n as f64 + 1e-9).floor() as usize).collect()
}

pub(crate) fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::config("grid", "at least one grid time is required"));
    }
    if grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::config("grid", "grid times must lie in [0, 1]"));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("grid", "grid times must be strictly increasing"));
    }
    Ok(())
}

/// Evenly spaced grid `0, 1/g, …, 1`.
pub fn uniform_grid(g: usize) -> Vec<f64> {
    (0..=g).map(|i| i as f64 / g as f64).collect()
}

/// Sample `samples` paths of `(W_n, 𝕎_n)`, one orbit of length `n` per path.
#[allow(clippy::too_many_arguments)]
pub fn sample_paths(
    spec: &MapSpec,
    v: &Observable,
    n: usize,
    samples: usize,
    grid: &[f64],
    initial: InitialMeasure,
    seed: u64,
) -> Result<PathEnsemble> {
    spec.validate()?;
    if n < 100 {
        return Err(Error::config("n", "paths need n ≥ 100"));
    }
    if samples == 0 {
        return Err(Error::config("samples", "at least one path is required"));
    }
    check_grid(grid)?;
    let d = v.dim();
    let dd = d * d;
    let steps = grid_steps(grid, n);
    let key = StreamKey::new(seed);
    let sqrt_n = (n as f64).sqrt();
    let g_len = grid.len();

    let paths: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut orbit = start_orbit(spec, initial, DEFAULT_BURNIN, &key, i);
            let mut w = vec![0.0; d];
            let mut ww = vec![0.0; dd];
            let mut q = vec![0.0; dd];
            let mut u = vec![0.0; d];
            let mut out_w = Vec::with_capacity(g_len * d);
            let mut out_ww = Vec::with_capacity(g_len * dd);
            let mut out_q = Vec::with_capacity(g_len * dd);
            let mut k = 0;
            for &target in &steps {
                while k < target {
                    v.eval(orbit.x(), &mut u);
                    for a in 0..d {
                        u[a] /= sqrt_n;
                    }
                    for a in 0..d {
                        for b in 0..d {
                            ww[a * d + b] += w[a] * u[b];
                            q[a * d + b] += u[a] * u[b];
                        }
                    }
                    for a in 0..d {
                        w[a] += u[a];
                    }
                    orbit.advance();
                    k += 1;
                }
                out_w.extend_from_slice(&w);
                out_ww.extend_from_slice(&ww);
                out_q.extend_from_slice(&q);
            }
            (out_w, out_ww, out_q)
        })
        .collect();

    let mut ens = PathEnsemble {
        dim: d,
        grid: grid.to_vec(),
        samples,
        w: Vec::with_capacity(samples * g_len * d),
        ww: Vec::with_capacity(samples * g_len * dd),
        q: Vec::with_capacity(samples * g_len * dd),
        divergent: 0,
        provenance: Provenance {
            source: "map".into(),
            map: spec.kind().name().into(),
            gamma: spec.gamma(),
            observable: v.name(),
            offset: v.offset().to_vec(),
            n,
            seed,
            initial: initial.name().into(),
        },
    };
    for (w, ww, q) in paths {
        ens.w.extend(w);
        ens.ww.extend(ww);
        ens.q.extend(q);
    }
    Ok(ens)
}

/// One line of a test report.
#[derive(Debug, Clone, Serialize)]
pub struct TestItem {
    pub test: String,
    pub component: String,
    pub t: f64,
    pub statistic: f64,
    pub p_value: Option<f64>,
    pub estimate: Option<f64>,
    pub target: Option<f64>,
    pub stderr: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TestReport {
    pub name: String,
    pub alpha: f64,
    pub z: f64,
    pub items: Vec<TestItem>,
    pub notes: Vec<String>,
    pub passed: bool,
}

impl TestReport {
    pub(crate) fn new(name: &str) -> Self {
        Self { name: name.into(), alpha: DEFAULT_ALPHA, z: DEFAULT_Z, items: Vec::new(), notes: Vec::new(), passed: true }
    }

    pub(crate) fn push(&mut self, item: TestItem) {
        self.passed &= item.pass;
        self.items.push(item);
    }

    pub(crate) fn ks(&mut self, test: &str, component: String, t: f64, r: crate::stats::KsResult) {
        let pass = r.p_value > self.alpha;
        self.push(TestItem {
            test: test.into(),
            component,
            t,
            statistic: r.statistic,
            p_value: Some(r.p_value),
            estimate: None,
            target: None,
            stderr: None,
            pass,
        });
    }

    pub(crate) fn z_item(&mut self, test: &str, component: String, t: f64, estimate: f64, target: f64, stderr: f64) {
        let diff = (estimate - target).abs();
        let z = if stderr > 0.0 { diff / stderr } else if diff == 0.0 { 0.0 } else { f64::INFINITY };
        let pass = z <= self.z;
        self.push(TestItem {
            test: test.into(),
            component,
            t,
            statistic: z,
            p_value: None,
            estimate: Some(estimate),
            target: Some(target),
            stderr: Some(stderr),
            pass,
        });
    }

    /// Append the items and notes of `other`.
    pub fn merge(&mut self, other: TestReport) {
        self.notes.extend(other.notes);
        for item in other.items {
            self.push(item);
        }
    }

    /// Items of one test at one time.
    pub fn items_for<'a>(&'a self, test: &'a str, t: f64) -> impl Iterator<Item = &'a TestItem> + 'a {
        self.items.iter().filter(move |i| i.test == test && (i.t - t).abs() < 1e-12)
    }

    /// All items of `test` at time `t` passed (vacuously true if none).
    pub fn passed_at(&self, test: &str, t: f64) -> bool {
        self.items_for(test, t).all(|i| i.pass)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub(crate) fn entry(i: usize, j: usize) -> String {
    format!("{i},{j}")
}

fn target_se(se: &[f64], k: usize) -> f64 {
    se.get(k).copied().unwrap_or(0.0)
}

/// KS normality of each component of `W(t)` against `N(0, tΣ_ii)` and a
/// covariance comparison against `tΣ`, at every positive grid time.
/// `sigma_stderr` may be empty when the target is exact.
pub fn marginal_normality(ens: &PathEnsemble, sigma: &[f64], sigma_stderr: &[f64]) -> Result<TestReport> {
    let d = ens.dim;
    if sigma.len() != d * d {
        return Err(Error::Mismatch(format!("Σ has {} entries, expected {}", sigma.len(), d * d)));
    }
    if ens.samples < 1000 {
        return Err(Error::config("samples", "normality tests need at least 1000 paths"));
    }
    let mut rep = TestReport::new("marginal_normality");
    for (g, &t) in ens.grid.iter().enumerate() {
        if t <= 0.0 {
            continue;
        }
        for k in 0..d {
            let var = t * sigma[k * d + k];
            if !(var > 0.0) {
                rep.notes.push(format!("component {k} skipped at t={t}: Σ_ii = 0"));
                continue;
            }
            let normal = Normal::new(0.0, var.sqrt()).map_err(|e| Error::Degenerate(e.to_string()))?;
            let r = ks_one_sample(&ens.w_component(g, k), |x| normal.cdf(x))?;
            rep.ks("ks_normal", k.to_string(), t, r);
        }
        let rows: Vec<Vec<f64>> = (0..ens.samples).map(|i| ens.w_at(i, g).to_vec()).collect();
        let (cov, se) = covariance_stderr(&rows, d);
        for a in 0..d {
            for b in 0..d {
                let kk = a * d + b;
                if sigma[kk] == 0.0 && cov[kk] == 0.0 {
                    continue;
                }
                rep.z_item("covariance", entry(a, b), t, cov[kk], t * sigma[kk], se[kk] + t * target_se(sigma_stderr, kk));
            }
        }
    }
    Ok(rep)
}

/// z-test of the mean of `𝕎(t)` against `tE` at every positive grid time,
/// plus the least-squares slope of the means through the origin.
pub fn drift_check(ens: &PathEnsemble, e: &[f64], e_stderr: &[f64]) -> Result<TestReport> {
    let d = ens.dim;
    let dd = d * d;
    if !ens.has_iterated() {
        return Err(Error::Mismatch("ensemble has no iterated part".into()));
    }
    if e.len() != dd {
        return Err(Error::Mismatch(format!("E has {} entries, expected {dd}", e.len())));
    }
    if ens.samples < 1000 {
        return Err(Error::config("samples", "drift checks need at least 1000 paths"));
    }
    let mut rep = TestReport::new("drift_check");
    let mut slope_num = vec![0.0; dd];
    let mut slope_se = vec![0.0; dd];
    let mut slope_den = 0.0;
    let mut col = Vec::with_capacity(ens.samples);
    for (g, &t) in ens.grid.iter().enumerate() {
        if t <= 0.0 {
            continue;
        }
        slope_den += t * t;
        for kk in 0..dd {
            col.clear();
            col.extend((0..ens.samples).map(|i| ens.ww_at(i, g)[kk]));
            let (m, se) = mean_stderr(&col);
            slope_num[kk] += t * m;
            slope_se[kk] += t * se;
            rep.z_item("mean_levy", entry(kk / d, kk % d), t, m, t * e[kk], se + t * target_se(e_stderr, kk));
        }
    }
    if slope_den > 0.0 {
        for kk in 0..dd {
            // Grid means are correlated; summing the error bars is conservative.
            let slope = slope_num[kk] / slope_den;
            let se = slope_se[kk] / slope_den + target_se(e_stderr, kk);
            rep.z_item("levy_slope", entry(kk / d, kk % d), 1.0, slope, e[kk], se);
        }
    }
    Ok(rep)
}

/// Compare ensembles started from `μ` and from Lebesgue: two-sample KS per
/// component of `W(1)`, and means and covariances of the final values.
pub fn initial_measure_comparison(ens_mu: &PathEnsemble, ens_leb: &PathEnsemble) -> Result<TestReport> {
    if !ens_mu.same_setup(ens_leb) {
        return Err(Error::Mismatch("ensembles differ in map, observable, n or grid".into()));
    }
    let d = ens_mu.dim;
    let g = ens_mu.last();
    let t = ens_mu.grid[g];
    let mut rep = TestReport::new("initial_measure_comparison");
    for k in 0..d {
        let r = ks_two_sample(&ens_mu.w_component(g, k), &ens_leb.w_component(g, k))?;
        rep.ks("ks_two_sample", k.to_string(), t, r);
    }
    let rows = |e: &PathEnsemble| (0..e.samples).map(|i| e.w_at(i, g).to_vec()).collect::<Vec<_>>();
    let (c1, s1) = covariance_stderr(&rows(ens_mu), d);
    let (c2, s2) = covariance_stderr(&rows(ens_leb), d);
    for kk in 0..d * d {
        if c1[kk] == 0.0 && c2[kk] == 0.0 {
            continue;
        }
        rep.z_item("covariance", entry(kk / d, kk % d), t, c2[kk], c1[kk], s1[kk] + s2[kk]);
    }
    if ens_mu.has_iterated() && ens_leb.has_iterated() {
        let mut col = Vec::new();
        for kk in 0..d * d {
            col.clear();
            col.extend((0..ens_mu.samples).map(|i| ens_mu.ww_at(i, g)[kk]));
            let (m1, e1) = mean_stderr(&col);
            col.clear();
            col.extend((0..ens_leb.samples).map(|i| ens_leb.ww_at(i, g)[kk]));
            let (m2, e2) = mean_stderr(&col);
            if e1 == 0.0 && e2 == 0.0 && m1 == m2 {
                continue;
            }
            rep.z_item("mean_levy", entry(kk / d, kk % d), t, m2, m1, e1 + e2);
        }
    }
    Ok(rep)
}
