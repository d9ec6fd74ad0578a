//! Monte Carlo moments of the running maxima `max_{k≤n}|S_k|` and
//! `max_{k≤n}|𝕊_k|`, and log-log scaling fits.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{start_orbit, InitialMeasure, MapSpec, Observable, Orbit, DEFAULT_BURNIN};
use crate::error::{Error, Result};
use crate::io::{fmt_f64, Csv};
use crate::rng::{Purpose, StreamKey};

/// Bootstrap resamples for standard errors and slope intervals.
pub const BOOTSTRAP_RESAMPLES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Statistic {
    /// `max_{k≤n} |S_k|`
    S,
    /// `max_{k≤n} ‖𝕊_k‖`
    SS,
}

impl Statistic {
    pub fn name(&self) -> &'static str {
        match self {
            Statistic::S => "S",
            Statistic::SS => "SS",
        }
    }

    /// Highest exponent covered by the moment bounds for moment order `p`.
    pub fn max_q(&self, p: f64) -> f64 {
        match self {
            Statistic::S => 2.0 * (p - 1.0),
            Statistic::SS => p - 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentRow {
    pub n: usize,
    pub q: f64,
    pub stat: Statistic,
    /// `E[max^q]`
    pub value: f64,
    pub stderr: f64,
    pub samples: usize,
}

#[derive(Debug, Clone)]
pub struct MomentOptions {
    pub burnin: usize,
    /// Allow exponents beyond the guaranteed range.
    pub allow_high_q: bool,
    pub bootstrap: usize,
}

impl Default for MomentOptions {
    fn default() -> Self {
        Self { burnin: DEFAULT_BURNIN, allow_high_q: false, bootstrap: BOOTSTRAP_RESAMPLES }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentTable {
    pub rows: Vec<MomentRow>,
    pub n_grid: Vec<usize>,
    pub q_grid: Vec<f64>,
    pub initial: InitialMeasure,
    pub seed: u64,
    /// Rows omitted because their exponent lies outside the guaranteed range.
    pub skipped: Vec<String>,
    #[serde(skip)]
    bootstrap: usize,
    /// Per sample, per grid point: `(max|S_k|, max‖𝕊_k‖)`.
    #[serde(skip)]
    maxima: Vec<Vec<(f64, f64)>>,
}

impl MomentTable {
    pub fn row(&self, n: usize, q: f64, stat: Statistic) -> Option<&MomentRow> {
        self.rows.iter().find(|r| r.n == n && r.q == q && r.stat == stat)
    }

    /// Per-sample running maxima at grid index `g`.
    pub fn maxima_at(&self, g: usize) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.maxima.iter().map(move |m| m[g])
    }

    /// CSV rows `n, q, stat, value, stderr, M`.
    pub fn to_csv(&self) -> String {
        let mut csv = Csv::new(&["n", "q", "stat", "value", "stderr", "M"]);
        for r in &self.rows {
            csv.row(&[
                r.n.to_string(),
                fmt_f64(r.q),
                r.stat.name().to_string(),
                fmt_f64(r.value),
                fmt_f64(r.stderr),
                r.samples.to_string(),
            ]);
        }
        csv.finish()
    }

    fn resamples(&self) -> Vec<Vec<u32>> {
        let m = self.maxima.len();
        let mut rng = StreamKey::new(self.seed).stream(0, Purpose::Bootstrap);
        (0..self.bootstrap).map(|_| (0..m).map(|_| rng.gen_range(0..m as u32)).collect()).collect()
    }
}

fn moment(values: impl Iterator<Item = f64>, q: f64, count: usize) -> f64 {
    values.map(|x| x.powf(q)).sum::<f64>() / count as f64
}

fn pick(pair: (f64, f64), stat: Statistic) -> f64 {
    match stat {
        Statistic::S => pair.0,
        Statistic::SS => pair.1,
    }
}

/// Running maxima along one orbit, recorded after `n` steps for each `n` of
/// the sorted `grid`.
fn running_maxima(v: &Observable, grid: &[usize], orbit: &mut Orbit<'_>) -> Vec<(f64, f64)> {
    let d = v.dim();
    let mut out = Vec::with_capacity(grid.len());
    let n_max = *grid.last().unwrap_or(&0);
    let mut next = 0;
    if d == 1 {
        let mut buf = [0.0];
        let (mut s, mut ss) = (0.0f64, 0.0f64);
        let (mut ms, mut mss) = (0.0f64, 0.0f64);
        for step in 1..=n_max {
            v.eval(orbit.x(), &mut buf);
            ss += s * buf[0];
            s += buf[0];
            ms = ms.max(s.abs());
            mss = mss.max(ss.abs());
            orbit.advance();
            while next < grid.len() && grid[next] == step {
                out.push((ms, mss));
                next += 1;
            }
        }
    } else {
        let mut buf = vec![0.0; d];
        let mut s = vec![0.0; d];
        let mut ss = vec![0.0; d * d];
        let (mut ms, mut mss) = (0.0f64, 0.0f64);
        for step in 1..=n_max {
            v.eval(orbit.x(), &mut buf);
            for a in 0..d {
                for b in 0..d {
                    ss[a * d + b] += s[a] * buf[b];
                }
            }
            for a in 0..d {
                s[a] += buf[a];
            }
            ms = ms.max(s.iter().map(|x| x * x).sum::<f64>().sqrt());
            mss = mss.max(ss.iter().map(|x| x * x).sum::<f64>().sqrt());
            orbit.advance();
            while next < grid.len() && grid[next] == step {
                out.push((ms, mss));
                next += 1;
            }
        }
    }
    // n = 0 checkpoints
    while out.len() < grid.len() {
        out.insert(0, (0.0, 0.0));
    }
    out
}

/// Monte Carlo moments `E[max_{k≤n}|S_k|^q]` and `E[max_{k≤n}‖𝕊_k‖^q]` over
/// `samples` orbits, with bootstrap standard errors.
#[allow(clippy::too_many_arguments)]
pub fn moment_table(
    spec: &MapSpec,
    v: &Observable,
    n_grid: &[usize],
    q_grid: &[f64],
    samples: usize,
    initial: InitialMeasure,
    seed: u64,
    opts: &MomentOptions,
) -> Result<MomentTable> {
    spec.validate()?;
    if samples < 100 {
        return Err(Error::config("samples", "moment tables need at least 100 samples"));
    }
    if n_grid.is_empty() || q_grid.is_empty() {
        return Err(Error::config("n", "empty n or q grid"));
    }
    if q_grid.iter().any(|&q| !(q > 0.0)) {
        return Err(Error::config("q", "exponents must be positive"));
    }
    let mut skipped = Vec::new();
    let mut stat_q = Vec::new();
    for &q in q_grid {
        for stat in [Statistic::S, Statistic::SS] {
            let cap = stat.max_q(spec.p());
            if q > cap && !opts.allow_high_q {
                if stat == Statistic::S {
                    return Err(Error::config(
                        "q",
                        format!("q = {q} exceeds the guaranteed range 2(p-1) = {cap}; pass the override flag to force"),
                    ));
                }
                skipped.push(format!("SS q={q} above p-1={cap}"));
                continue;
            }
            stat_q.push((stat, q));
        }
    }

    let mut grid = n_grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let key = StreamKey::new(seed);
    let burnin = opts.burnin;
    let maxima: Vec<Vec<(f64, f64)>> = (0..samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut orbit = start_orbit(spec, initial, burnin, &key, i);
            running_maxima(v, &grid, &mut orbit)
        })
        .collect();

    let mut table = MomentTable {
        rows: Vec::new(),
        n_grid: grid.clone(),
        q_grid: q_grid.to_vec(),
        initial,
        seed,
        skipped,
        bootstrap: opts.bootstrap.max(2),
        maxima,
    };
    let resamples = table.resamples();
    for (stat, q) in stat_q {
        for (g, &n) in grid.iter().enumerate() {
            let value = moment(table.maxima.iter().map(|m| pick(m[g], stat)), q, samples);
            let boots: Vec<f64> = resamples
                .iter()
                .map(|idx| moment(idx.iter().map(|&i| pick(table.maxima[i as usize][g], stat)), q, samples))
                .collect();
            let stderr = std_dev(&boots);
            table.rows.push(MomentRow { n, q, stat, value, stderr, samples });
        }
    }
    Ok(table)
}

fn std_dev(xs: &[f64]) -> f64 {
    let m = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / m;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1.0).max(1.0)).sqrt()
}

/// Log-log slope of `E[max^q]^{1/q}` against `n`.
#[derive(Debug, Clone, Serialize)]
pub struct ScalingFit {
    pub stat: Statistic,
    pub q: f64,
    pub slope: f64,
    /// 95% bootstrap percentile interval.
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_values: Vec<usize>,
}

impl ScalingFit {
    pub fn within(&self, lo: f64, hi: f64) -> bool {
        self.slope >= lo && self.slope <= hi
    }
}

fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let m = x.len() as f64;
    let mx = x.iter().sum::<f64>() / m;
    let my = y.iter().sum::<f64>() / m;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Fit the scaling exponent of every `(statistic, q)` series of the table.
pub fn scaling_exponent(table: &MomentTable) -> Result<Vec<ScalingFit>> {
    let grid: Vec<usize> = table.n_grid.iter().copied().filter(|&n| n > 0).collect();
    if grid.len() < 4 {
        return Err(Error::config("n", "scaling fits need at least 4 distinct n values"));
    }
    let span = (*grid.last().unwrap() as f64 / grid[0] as f64).log10();
    if span < 2.0 - 1e-12 {
        return Err(Error::config("n", "scaling fits need n values spanning two decades"));
    }
    let offset = table.n_grid.len() - grid.len();
    let logn: Vec<f64> = grid.iter().map(|&n| (n as f64).ln()).collect();
    let resamples = table.resamples();
    let samples = table.maxima.len();

    let mut series: Vec<(Statistic, f64)> = Vec::new();
    for r in &table.rows {
        if !series.contains(&(r.stat, r.q)) {
            series.push((r.stat, r.q));
        }
    }
    let mut fits = Vec::new();
    for (stat, q) in series {
        let values: Vec<f64> = grid.iter().map(|&n| table.row(n, q, stat).map_or(0.0, |r| r.value)).collect();
        if values.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Degenerate(format!("zero {} moment; no scaling to fit", stat.name())));
        }
        let y: Vec<f64> = values.iter().map(|v| v.ln() / q).collect();
        let slope = ols_slope(&logn, &y);
        let mut boot: Vec<f64> = resamples
            .iter()
            .filter_map(|idx| {
                let yb: Vec<f64> = (0..grid.len())
                    .map(|g| moment(idx.iter().map(|&i| pick(table.maxima[i as usize][g + offset], stat)), q, samples))
                    .map(|m| m.ln() / q)
                    .collect();
                yb.iter().all(|v| v.is_finite()).then(|| ols_slope(&logn, &yb))
            })
            .collect();
        boot.sort_by(|a, b| a.total_cmp(b));
        let pct = |p: f64| boot[((p * (boot.len() - 1) as f64).round() as usize).min(boot.len() - 1)];
        let (ci_low, ci_high) = if boot.is_empty() { (slope, slope) } else { (pct(0.025), pct(0.975)) };
        fits.push(ScalingFit { stat, q, slope, ci_low, ci_high, n_values: grid.clone() });
    }
    Ok(fits)
}
