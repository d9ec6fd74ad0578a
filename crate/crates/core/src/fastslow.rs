//! Fast-slow systems `x_{k+1} = x_k + a(x_k, y_k)/n + b(x_k, y_k)/√n` driven
//! by a map orbit `y_k`, and the Euler–Maruyama reference for the limiting
//! SDE.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{start_orbit, InitialMeasure, MapSpec, Observable, DEFAULT_BURNIN};
use crate::error::{Error, Result};
use crate::rng::{Purpose, StreamKey};
use crate::stats::{covariance_stderr, ks_two_sample, mean_stderr};
use crate::tower::{InvariantMean, DEFAULT_TOWER_BINS};
use crate::wip::{check_grid, entry, grid_steps, PathEnsemble, Provenance, TestReport};

/// Slow variables beyond this magnitude mark a path as divergent.
pub const DIVERGENCE_BOUND: f64 = 1e12;
/// Points of the x-grid used to center the noise.
pub const CENTERING_GRID: usize = 64;

/// Drift presets, shared by the fast-slow system and the SDE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Drift {
    Zero,
    /// `a(x) = θ x`
    Linear(f64),
}

impl Drift {
    /// Parse `zero` or `linear(θ)`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "zero" {
            return Ok(Drift::Zero);
        }
        if let Some(arg) = s.strip_prefix("linear(").and_then(|r| r.strip_suffix(')')) {
            let theta = arg.trim().parse::<f64>().map_err(|_| Error::config("drift", format!("bad coefficient in `{s}`")))?;
            return Ok(Drift::Linear(theta));
        }
        Err(Error::config("drift", format!("unknown drift preset `{s}`")))
    }

    #[inline]
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Drift::Zero => out.iter_mut().for_each(|o| *o = 0.0),
            Drift::Linear(theta) => out.iter_mut().zip(x).for_each(|(o, xi)| *o = theta * xi),
        }
    }
}

/// Noise presets `b(x, y)` built from an observable `v` of the fast variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Zero,
    /// `b(x, y) = v(y)`
    Additive,
    /// `b(x, y) = x ⊙ v(y)` componentwise
    Product,
}

impl NoiseKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "zero" => Ok(NoiseKind::Zero),
            "additive" => Ok(NoiseKind::Additive),
            "product" => Ok(NoiseKind::Product),
            other => Err(Error::config("noise", format!("unknown noise preset `{other}`"))),
        }
    }
}

/// Centering offsets of `b(x, ·)` on a grid of `x`, interpolated linearly in
/// each component and extrapolated linearly beyond the ends.
#[derive(Debug, Clone, Serialize)]
pub struct NoiseCentering {
    pub x_lo: f64,
    pub x_hi: f64,
    /// `offsets[g·d + k]`: mean of component `k` of `b` at grid point `g`.
    pub offsets: Vec<f64>,
}

impl NoiseCentering {
    fn points(&self) -> usize {
        self.offsets.len() / self.dim().max(1)
    }

    fn dim(&self) -> usize {
        self.offsets.len() / CENTERING_GRID
    }

    /// Offset of component `k` at slow value `x_k`.
    #[inline]
    pub fn offset(&self, k: usize, x: f64) -> f64 {
        let d = self.dim();
        let g = self.points();
        let h = (self.x_hi - self.x_lo) / (g - 1) as f64;
        let t = (x - self.x_lo) / h;
        let i = (t.floor().max(0.0) as usize).min(g - 2);
        let f = t - i as f64;
        self.offsets[i * d + k] * (1.0 - f) + self.offsets[(i + 1) * d + k] * f
    }
}

#[derive(Debug, Clone)]
pub struct FastSlowSpec {
    pub dim: usize,
    pub drift: Drift,
    pub noise: NoiseKind,
    /// Raw observable of the fast variable entering `b`; its offset is ignored.
    pub v: Observable,
    pub xi: Vec<f64>,
    pub centering: Option<NoiseCentering>,
}

impl FastSlowSpec {
    pub fn new(drift: Drift, noise: NoiseKind, v: Observable, xi: Vec<f64>) -> Result<Self> {
        if xi.len() != v.dim() {
            return Err(Error::Mismatch(format!("ξ has {} components, observable has {}", xi.len(), v.dim())));
        }
        let raw = v.clone().with_offset(vec![0.0; v.dim()])?;
        Ok(Self { dim: xi.len(), drift, noise, v: raw, xi, centering: None })
    }

    /// Raw `b(x, y)` before centering.
    #[inline]
    fn raw_noise(&self, x: &[f64], vy: &[f64], out: &mut [f64]) {
        match self.noise {
            NoiseKind::Zero => out.iter_mut().for_each(|o| *o = 0.0),
            NoiseKind::Additive => out.copy_from_slice(vy),
            NoiseKind::Product => out.iter_mut().zip(x.iter().zip(vy)).for_each(|(o, (a, b))| *o = a * b),
        }
    }

    /// Center `b(x, ·)` against `μ` of `spec` on a grid of `x ∈ [x_lo, x_hi]`
    /// (the same interval in every component).
    pub fn center(mut self, spec: &MapSpec, x_lo: f64, x_hi: f64) -> Result<Self> {
        if !(x_hi > x_lo) {
            return Err(Error::config("centering", "empty x interval"));
        }
        let d = self.dim;
        let mut offsets = vec![0.0; CENTERING_GRID * d];
        if self.noise != NoiseKind::Zero {
            // both presets are linear in v(y), so one mean fixes every grid point
            let m = InvariantMean::new(spec, DEFAULT_TOWER_BINS)?.mean(&self.v);
            for g in 0..CENTERING_GRID {
                let xg = x_lo + (x_hi - x_lo) * g as f64 / (CENTERING_GRID - 1) as f64;
                for k in 0..d {
                    offsets[g * d + k] = match self.noise {
                        NoiseKind::Product => xg * m[k],
                        _ => m[k],
                    };
                }
            }
        }
        self.centering = Some(NoiseCentering { x_lo, x_hi, offsets });
        Ok(self)
    }

    /// Centered `b(x, y)` given `v(y)`.
    #[inline]
    pub fn noise(&self, x: &[f64], vy: &[f64], out: &mut [f64]) {
        self.raw_noise(x, vy, out);
        if let Some(c) = &self.centering {
            for k in 0..self.dim {
                out[k] -= c.offset(k, x[k]);
            }
        }
    }

    /// Largest `|∫ b(x, ·) dμ|` after centering at the ends and midpoint of
    /// the centering interval, as measured by the tower quadrature.
    pub fn centering_error(&self, spec: &MapSpec) -> Result<f64> {
        let Some(c) = &self.centering else {
            return Err(Error::config("centering", "noise has not been centered"));
        };
        let means = InvariantMean::new(spec, DEFAULT_TOWER_BINS)?;
        let mut worst: f64 = 0.0;
        for xg in [c.x_lo, 0.5 * (c.x_lo + c.x_hi), c.x_hi] {
            let xs = vec![xg; self.dim];
            let this = self.clone();
            let obs = Observable::custom("b", self.dim, move |y, out| {
                let vy = this.v.eval_vec(y);
                this.noise(&xs, &vy, out);
            });
            worst = means.mean(&obs).iter().fold(worst, |w, m| w.max(m.abs()));
        }
        Ok(worst)
    }
}

fn provenance(source: &str, spec: Option<&MapSpec>, v: &str, n: usize, seed: u64, initial: &str) -> Provenance {
    Provenance {
        source: source.into(),
        map: spec.map_or("none".into(), |s| s.kind().name().into()),
        gamma: spec.map_or(0.0, |s| s.gamma()),
        observable: v.into(),
        offset: Vec::new(),
        n,
        seed,
        initial: initial.into(),
    }
}

/// Assemble an ensemble from per-path snapshots, dropping divergent paths.
fn collect_paths(
    dim: usize,
    grid: &[f64],
    paths: Vec<Option<Vec<f64>>>,
    prov: Provenance,
) -> PathEnsemble {
    let mut w = Vec::new();
    let mut samples = 0;
    let mut divergent = 0;
    for p in paths {
        match p {
            Some(v) => {
                w.extend(v);
                samples += 1;
            }
            None => divergent += 1,
        }
    }
    PathEnsemble { dim, grid: grid.to_vec(), samples, w, ww: Vec::new(), q: Vec::new(), divergent, provenance: prov }
}

/// Simulate `samples` slow paths `x̂_n(t) = x_{⌊nt⌋}` on `grid`, each driven
/// by an independent fast orbit.
#[allow(clippy::too_many_arguments)]
pub fn simulate_fastslow(
    fs: &FastSlowSpec,
    spec: &MapSpec,
    n: usize,
    samples: usize,
    grid: &[f64],
    initial: InitialMeasure,
    seed: u64,
) -> Result<PathEnsemble> {
    spec.validate()?;
    if n < 100 {
        return Err(Error::config("n", "fast-slow paths need n ≥ 100"));
    }
    check_grid(grid)?;
    let d = fs.dim;
    let steps = grid_steps(grid, n);
    let key = StreamKey::new(seed);
    let nf = n as f64;
    let sqrt_n = nf.sqrt();
    let paths: Vec<Option<Vec<f64>>> = (0..samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut orbit = start_orbit(spec, initial, DEFAULT_BURNIN, &key, i);
            let mut x = fs.xi.clone();
            let mut a = vec![0.0; d];
            let mut b = vec![0.0; d];
            let mut vy = vec![0.0; d];
            let mut out = Vec::with_capacity(grid.len() * d);
            let mut k = 0;
            for &target in &steps {
                while k < target {
                    fs.v.eval(orbit.x(), &mut vy);
                    fs.drift.eval(&x, &mut a);
                    fs.noise(&x, &vy, &mut b);
                    for c in 0..d {
                        x[c] += a[c] / nf + b[c] / sqrt_n;
                    }
                    if x.iter().any(|v| !(v.abs() <= DIVERGENCE_BOUND)) {
                        return None;
                    }
                    orbit.advance();
                    k += 1;
                }
                out.extend_from_slice(&x);
            }
            Some(out)
        })
        .collect();
    Ok(collect_paths(d, grid, paths, provenance("fastslow", Some(spec), &fs.v.name(), n, seed, initial.name())))
}

/// Diffusion presets for the reference SDE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Diffusion {
    /// Constant `d × e` matrix, row-major.
    Constant { rows: usize, cols: usize, matrix: Vec<f64> },
    /// `σ(x) = diag(x) · M` with `M` a constant `d × e` matrix.
    Multiplicative { rows: usize, cols: usize, matrix: Vec<f64> },
}

impl Diffusion {
    /// Scalar constant noise `σ = s`.
    pub fn scalar(s: f64) -> Self {
        Diffusion::Constant { rows: 1, cols: 1, matrix: vec![s] }
    }

    fn shape(&self) -> (usize, usize) {
        match self {
            Diffusion::Constant { rows, cols, .. } | Diffusion::Multiplicative { rows, cols, .. } => (*rows, *cols),
        }
    }

    /// `σ(x)` row-major.
    pub fn eval(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Diffusion::Constant { matrix, .. } => out.copy_from_slice(matrix),
            Diffusion::Multiplicative { cols, matrix, .. } => {
                for (r, xr) in x.iter().enumerate() {
                    for c in 0..*cols {
                        out[r * cols + c] = xr * matrix[r * cols + c];
                    }
                }
            }
        }
    }
}

/// A user-specified limiting SDE `dX = ā(X) dt + σ(X) dB`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SDESpec {
    pub dim: usize,
    pub drift: Drift,
    pub diffusion: Diffusion,
    pub h: f64,
    pub xi: Vec<f64>,
    /// How the drift was obtained (for instance a user-entered correction).
    pub note: String,
}

impl SDESpec {
    pub fn new(drift: Drift, diffusion: Diffusion, h: f64, xi: Vec<f64>, note: &str) -> Result<Self> {
        let (rows, cols) = diffusion.shape();
        let size = match &diffusion {
            Diffusion::Constant { matrix, .. } | Diffusion::Multiplicative { matrix, .. } => matrix.len(),
        };
        if rows != xi.len() || size != rows * cols {
            return Err(Error::Mismatch("diffusion matrix shape does not match the state dimension".into()));
        }
        Ok(Self { dim: xi.len(), drift, diffusion, h, xi, note: note.into() })
    }

    /// `σσᵀ` at `x`.
    pub fn covariance(&self, x: &[f64]) -> Vec<f64> {
        let (d, e) = self.diffusion.shape();
        let mut s = vec![0.0; d * e];
        self.diffusion.eval(x, &mut s);
        let mut c = vec![0.0; d * d];
        for a in 0..d {
            for b in 0..d {
                c[a * d + b] = (0..e).map(|k| s[a * e + k] * s[b * e + k]).sum();
            }
        }
        c
    }
}

/// Euler–Maruyama paths on `grid · t1` with step `h`.
pub fn euler_maruyama(sde: &SDESpec, t1: f64, samples: usize, grid: &[f64], seed: u64) -> Result<PathEnsemble> {
    if !(sde.h > 0.0 && sde.h <= 1e-2) {
        return Err(Error::config("h", "Euler–Maruyama needs 0 < h ≤ 1e-2"));
    }
    if !(t1 > 0.0) {
        return Err(Error::config("t1", "final time must be positive"));
    }
    check_grid(grid)?;
    let total = (t1 / sde.h).round() as usize;
    let h = t1 / total as f64;
    let steps = grid_steps(grid, total);
    let (d, e) = sde.diffusion.shape();
    let key = StreamKey::new(seed);
    let sqrt_h = h.sqrt();
    let paths: Vec<Option<Vec<f64>>> = (0..samples as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = key.stream(i, Purpose::Gaussian);
            let mut x = sde.xi.clone();
            let mut a = vec![0.0; d];
            let mut s = vec![0.0; d * e];
            let mut db = vec![0.0; e];
            let mut out = Vec::with_capacity(grid.len() * d);
            let mut k = 0;
            for &target in &steps {
                while k < target {
                    sde.drift.eval(&x, &mut a);
                    sde.diffusion.eval(&x, &mut s);
                    for z in db.iter_mut() {
                        let g: f64 = StandardNormal.sample(&mut rng);
                        *z = g * sqrt_h;
                    }
                    for r in 0..d {
                        let noise: f64 = (0..e).map(|c| s[r * e + c] * db[c]).sum();
                        x[r] += a[r] * h + noise;
                    }
                    if x.iter().any(|v| !(v.abs() <= DIVERGENCE_BOUND)) {
                        return None;
                    }
                    k += 1;
                }
                out.extend_from_slice(&x);
            }
            Some(out)
        })
        .collect();
    Ok(collect_paths(d, grid, paths, provenance("euler_maruyama", None, "gaussian", total, seed, "point")))
}

/// Two-sample KS per component at the final time, and z-tests of means and
/// covariances at every grid time.
pub fn homogenization_compare(fast: &PathEnsemble, sde: &PathEnsemble) -> Result<TestReport> {
    if fast.dim != sde.dim || fast.grid != sde.grid {
        return Err(Error::Mismatch("ensembles differ in dimension or grid".into()));
    }
    let d = fast.dim;
    let mut rep = TestReport::new("homogenization_compare");
    if fast.divergent + sde.divergent > 0 {
        rep.notes.push(format!("divergent paths excluded: fast {}, sde {}", fast.divergent, sde.divergent));
    }
    let last = fast.last();
    for k in 0..d {
        let a = fast.w_component(last, k);
        let b = sde.w_component(last, k);
        if a.iter().chain(&b).all(|&x| x == a[0]) {
            rep.notes.push(format!("component {k} is deterministic in both ensembles"));
            continue;
        }
        rep.ks("ks_two_sample", k.to_string(), fast.grid[last], ks_two_sample(&a, &b)?);
    }
    for (g, &t) in fast.grid.iter().enumerate() {
        for k in 0..d {
            let (m1, e1) = mean_stderr(&fast.w_component(g, k));
            let (m2, e2) = mean_stderr(&sde.w_component(g, k));
            rep.z_item("mean", k.to_string(), t, m1, m2, e1 + e2);
        }
        let rows = |e: &PathEnsemble| (0..e.samples).map(|i| e.w_at(i, g).to_vec()).collect::<Vec<_>>();
        let (c1, s1) = covariance_stderr(&rows(fast), d);
        let (c2, s2) = covariance_stderr(&rows(sde), d);
        for kk in 0..d * d {
            if c1[kk] == 0.0 && c2[kk] == 0.0 {
                continue;
            }
            rep.z_item("covariance", entry(kk / d, kk % d), t, c1[kk], c2[kk], s1[kk] + s2[kk]);
        }
    }
    Ok(rep)
}
