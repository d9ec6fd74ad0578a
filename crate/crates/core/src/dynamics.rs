//! Base maps, observables, orbit iteration and invariant measures.
//!
//! Three families are supported:
//!
//! * `lsv`: the intermittent map `x(1 + 2^γ x^γ)` on `[0, ½]`, `2x - 1` on
//!   `(½, 1]`, with a neutral fixed point at zero;
//! * `doubling`: `2x mod 1`, the uniformly expanding reference case;
//! * `quadratic`: `1 - a x²` on `[-1, 1]`, shipped only at `a = 2`.
//!
//! All arithmetic is in `f64`. Monte Carlo orbits of the doubling map are
//! generated on a 64-bit dyadic state whose vacated low bit is refilled from
//! the sample's random stream at every step; this is the exact law of the
//! binary-digit shift for a uniformly drawn real start, and avoids the
//! collapse to zero that plain floating-point doubling suffers after 53 steps.
//! Quadratic orbits run on the same state through `x = -cos 2πu`, since float
//! iteration of `1 - 2x²` is eventually absorbed at `-1`.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::GaussLegendre;
use crate::rng::{Purpose, StreamKey};

/// Which family a [`MapSpec`] belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MapKind {
    Lsv,
    Doubling,
    Quadratic,
}

impl MapKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "lsv" => Ok(MapKind::Lsv),
            "doubling" => Ok(MapKind::Doubling),
            "quadratic" => Ok(MapKind::Quadratic),
            other => Err(Error::config("map", format!("unknown map preset `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MapKind::Lsv => "lsv",
            MapKind::Doubling => "doubling",
            MapKind::Quadratic => "quadratic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Power {
    Sqrt,
    Sqrt2,
    Sqrt3,
    General(f64),
}

impl Power {
    fn for_exponent(gamma: f64) -> Self {
        if gamma == 0.5 {
            Power::Sqrt
        } else if gamma == 0.25 {
            Power::Sqrt2
        } else if gamma == 0.125 {
            Power::Sqrt3
        } else {
            Power::General(gamma)
        }
    }

    #[inline(always)]
    fn eval(self, x: f64) -> f64 {
        match self {
            Power::Sqrt => x.sqrt(),
            Power::Sqrt2 => x.sqrt().sqrt(),
            Power::Sqrt3 => x.sqrt().sqrt().sqrt(),
            Power::General(g) => x.powf(g),
        }
    }
}

/// A nonuniformly expanding interval map together with its regularity data.
///
/// `beta` and `c1` are carried as metadata only (the expansion and distortion
/// constants of the inducing scheme); nothing numerical depends on them.
#[derive(Debug, Clone, PartialEq)]
pub struct MapSpec {
    kind: MapKind,
    gamma: f64,
    a_quad: f64,
    p: f64,
    eta: f64,
    beta: f64,
    c1: f64,
    two_pow_gamma: f64,
    power: Power,
}

impl MapSpec {
    /// Intermittent map in the diffusive regime: `0 < γ < ½`, `2 ≤ p < 1/γ`.
    pub fn lsv(gamma: f64, p: f64) -> Result<Self> {
        let spec = Self::lsv_unrestricted(gamma)?.with_moment_order(p)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Intermittent map for any `γ ∈ (0, 1)`. Only map evaluation is
    /// meaningful outside `(0, ½)`; statistical routines call
    /// [`MapSpec::validate`] and refuse such specs.
    pub fn lsv_unrestricted(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::config("gamma", format!("must lie in (0, 1), got {gamma}")));
        }
        Ok(Self {
            kind: MapKind::Lsv,
            gamma,
            a_quad: 0.0,
            p: 2.0,
            eta: 1.0,
            beta: 2.0,
            c1: 1.0,
            two_pow_gamma: 2f64.powf(gamma),
            power: Power::for_exponent(gamma),
        })
    }

    pub fn doubling() -> Self {
        Self {
            kind: MapKind::Doubling,
            gamma: 0.0,
            a_quad: 0.0,
            p: f64::INFINITY,
            eta: 1.0,
            beta: 2.0,
            c1: 1.0,
            two_pow_gamma: 1.0,
            power: Power::General(0.0),
        }
    }

    /// The Chebyshev member `1 - 2x²` of the quadratic family.
    pub fn quadratic() -> Self {
        Self {
            kind: MapKind::Quadratic,
            gamma: 0.0,
            a_quad: 2.0,
            p: f64::INFINITY,
            eta: 1.0,
            beta: 2.0,
            c1: 1.0,
            two_pow_gamma: 1.0,
            power: Power::General(0.0),
        }
    }

    /// Build from preset name and decimal parameters as they appear in configs.
    pub fn from_parts(kind: MapKind, gamma: Option<f64>, p: Option<f64>, eta: Option<f64>) -> Result<Self> {
        let spec = match kind {
            MapKind::Lsv => {
                let gamma = gamma.ok_or_else(|| Error::config("gamma", "required for the lsv map"))?;
                let p = p.unwrap_or_else(|| default_moment_order(gamma));
                MapSpec::lsv(gamma, p)?
            }
            MapKind::Doubling => {
                let mut s = MapSpec::doubling();
                if let Some(p) = p {
                    s = s.with_moment_order(p)?;
                }
                s
            }
            MapKind::Quadratic => {
                let mut s = MapSpec::quadratic();
                if let Some(p) = p {
                    s = s.with_moment_order(p)?;
                }
                s
            }
        };
        match eta {
            Some(eta) => spec.with_eta(eta),
            None => Ok(spec),
        }
    }

    pub fn with_moment_order(mut self, p: f64) -> Result<Self> {
        if !(p >= 2.0) {
            return Err(Error::config("p", format!("moment order must be ≥ 2, got {p}")));
        }
        self.p = p;
        Ok(self)
    }

    pub fn with_eta(mut self, eta: f64) -> Result<Self> {
        if !(eta > 0.0 && eta <= 1.0) {
            return Err(Error::config("eta", format!("Hölder exponent must lie in (0, 1], got {eta}")));
        }
        self.eta = eta;
        Ok(self)
    }

    /// Regime check applied before any statistical use of the map.
    pub fn validate(&self) -> Result<()> {
        if self.kind == MapKind::Lsv {
            if !(self.gamma > 0.0 && self.gamma < 0.5) {
                return Err(Error::config(
                    "gamma",
                    format!("must lie in (0, 1/2) for the diffusive regime, got {}", self.gamma),
                ));
            }
            if !(self.p >= 2.0 && self.p < 1.0 / self.gamma) {
                return Err(Error::config(
                    "p",
                    format!("must satisfy 2 <= p < 1/gamma = {}, got {}", 1.0 / self.gamma, self.p),
                ));
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn a_quad(&self) -> f64 {
        self.a_quad
    }
    pub fn p(&self) -> f64 {
        self.p
    }
    pub fn eta(&self) -> f64 {
        self.eta
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn c1(&self) -> f64 {
        self.c1
    }

    pub fn domain(&self) -> (f64, f64) {
        match self.kind {
            MapKind::Quadratic => (-1.0, 1.0),
            _ => (0.0, 1.0),
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        let (lo, hi) = self.domain();
        x >= lo && x <= hi
    }

    /// One application of the map without a domain check.
    #[inline(always)]
    pub fn step(&self, x: f64) -> f64 {
        match self.kind {
            MapKind::Lsv => {
                if x <= 0.5 {
                    (x * (1.0 + self.two_pow_gamma * self.power.eval(x))).min(1.0)
                } else {
                    2.0 * x - 1.0
                }
            }
            MapKind::Doubling => {
                if x < 0.5 {
                    2.0 * x
                } else {
                    2.0 * x - 1.0
                }
            }
            MapKind::Quadratic => (1.0 - self.a_quad * x * x).max(-1.0),
        }
    }

    /// Left branch of the intermittent map, `x(1 + 2^γ x^γ)`.
    #[inline]
    pub(crate) fn lsv_left(&self, x: f64) -> f64 {
        x * (1.0 + self.two_pow_gamma * self.power.eval(x))
    }

    /// Derivative of the left branch.
    #[inline]
    pub(crate) fn lsv_left_derivative(&self, x: f64) -> f64 {
        1.0 + (1.0 + self.gamma) * self.two_pow_gamma * self.power.eval(x)
    }

    /// Inverse of the left branch on `[0, 1]`, by Newton iteration from the
    /// right (the branch is convex, so iterates decrease monotonically).
    pub(crate) fn lsv_left_inverse(&self, w: f64, guess: f64) -> f64 {
        if w <= 0.0 {
            return 0.0;
        }
        let mut x = guess.min(w).max(0.0);
        if x <= 0.0 {
            x = w;
        }
        for _ in 0..100 {
            let f = self.lsv_left(x) - w;
            let next = x - f / self.lsv_left_derivative(x);
            let next = if next <= 0.0 { 0.5 * x } else { next };
            if (x - next).abs() <= 4.0 * f64::EPSILON * next {
                return next;
            }
            x = next;
        }
        x
    }

    /// Branch inverses of the full map, used by the Ulam discretization.
    /// Each entry is `(inverse, domain of the branch, increasing?)`.
    fn branches(&self) -> Vec<Branch> {
        match self.kind {
            MapKind::Lsv => vec![
                Branch { lo: 0.0, hi: 0.5, increasing: true },
                Branch { lo: 0.5, hi: 1.0, increasing: true },
            ],
            MapKind::Doubling => vec![
                Branch { lo: 0.0, hi: 0.5, increasing: true },
                Branch { lo: 0.5, hi: 1.0, increasing: true },
            ],
            MapKind::Quadratic => vec![
                Branch { lo: -1.0, hi: 0.0, increasing: true },
                Branch { lo: 0.0, hi: 1.0, increasing: false },
            ],
        }
    }

    fn branch_inverse(&self, branch: usize, w: f64) -> f64 {
        match (self.kind, branch) {
            (MapKind::Lsv, 0) => self.lsv_left_inverse(w, w),
            (MapKind::Lsv, _) => 0.5 * (w + 1.0),
            (MapKind::Doubling, 0) => 0.5 * w,
            (MapKind::Doubling, _) => 0.5 * (w + 1.0),
            (MapKind::Quadratic, 0) => -((1.0 - w).max(0.0) / self.a_quad).sqrt(),
            (MapKind::Quadratic, _) => ((1.0 - w).max(0.0) / self.a_quad).sqrt(),
        }
    }
}

/// Default moment order for an intermittent map when none is given: the
/// midpoint of the admissible range `[2, 1/γ)`, capped at 4.
pub fn default_moment_order(gamma: f64) -> f64 {
    if gamma <= 0.0 {
        return 4.0;
    }
    (0.5 * (2.0 + 1.0 / gamma)).min(4.0).max(2.0)
}

struct Branch {
    lo: f64,
    hi: f64,
    increasing: bool,
}

/// `T(x)` with a domain check.
pub fn apply_map(spec: &MapSpec, x: f64) -> Result<f64> {
    if !spec.contains(x) || x.is_nan() {
        let (lo, hi) = spec.domain();
        return Err(Error::Domain { x, lo, hi });
    }
    Ok(spec.step(x))
}

/// Feed `x0, T x0, …, T^{n-1} x0` to `folder`, without storing the orbit.
pub fn orbit_fold<A, F>(spec: &MapSpec, x0: f64, n: usize, init: A, mut folder: F) -> Result<A>
where
    F: FnMut(A, f64) -> A,
{
    if n > 0 {
        apply_map(spec, x0)?;
    }
    let mut acc = init;
    let mut x = x0;
    for _ in 0..n {
        acc = folder(acc, x);
        x = spec.step(x);
    }
    Ok(acc)
}

/// Distribution of orbit starting points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialMeasure {
    /// Invariant measure, approximated by burn-in from uniform starts.
    Mu,
    /// Normalized Lebesgue measure on the domain.
    Lebesgue,
}

impl InitialMeasure {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "mu" => Ok(InitialMeasure::Mu),
            "lebesgue" | "leb" => Ok(InitialMeasure::Lebesgue),
            other => Err(Error::config("initial", format!("unknown initial measure `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            InitialMeasure::Mu => "mu",
            InitialMeasure::Lebesgue => "lebesgue",
        }
    }
}

/// Default burn-in used for μ-sampling.
pub const DEFAULT_BURNIN: usize = 1000;

#[derive(Debug, Clone)]
enum OrbitState {
    Real(f64),
    Dyadic(u64),
}

/// A Monte Carlo orbit: a current point plus the random stream used to refill
/// dyadic digits for the doubling map and, through its conjugacy, the quadratic map.
#[derive(Debug, Clone)]
pub struct Orbit<'a> {
    spec: &'a MapSpec,
    state: OrbitState,
    rng: ChaCha8Rng,
    bits: u64,
    nbits: u32,
}

const TWO_POW_M53: f64 = 1.0 / 9_007_199_254_740_992.0;

impl<'a> Orbit<'a> {
    pub fn new(spec: &'a MapSpec, x0: f64, mut rng: ChaCha8Rng) -> Self {
        let state = match spec.kind {
            MapKind::Doubling => {
                let clamped = x0.clamp(0.0, 1.0);
                let bits = if clamped >= 1.0 {
                    u64::MAX
                } else {
                    // Digits below 2^-53 are not carried by x0; draw them so
                    // they do not surface as zeros after 53 steps.
                    (clamped * 18_446_744_073_709_551_616.0) as u64 | (rng.next_u64() >> 53)
                };
                OrbitState::Dyadic(bits)
            }
            // 1 - 2x² is conjugate to doubling through x = -cos 2πu.
            MapKind::Quadratic => {
                let u = (-x0.clamp(-1.0, 1.0)).acos() / std::f64::consts::TAU;
                OrbitState::Dyadic((u * 18_446_744_073_709_551_616.0) as u64 | (rng.next_u64() >> 53))
            }
            MapKind::Lsv => OrbitState::Real(x0),
        };
        Self { spec, state, rng, bits: 0, nbits: 0 }
    }

    /// Current point.
    #[inline(always)]
    pub fn x(&self) -> f64 {
        match self.state {
            OrbitState::Real(x) => x,
            OrbitState::Dyadic(b) => {
                let u = (b >> 11) as f64 * TWO_POW_M53;
                if self.spec.kind == MapKind::Quadratic {
                    -(std::f64::consts::TAU * u).cos()
                } else {
                    u
                }
            }
        }
    }

    /// Advance by one application of the map.
    #[inline(always)]
    pub fn advance(&mut self) {
        match &mut self.state {
            OrbitState::Real(x) => *x = self.spec.step(*x),
            OrbitState::Dyadic(b) => {
                if self.nbits == 0 {
                    self.bits = self.rng.next_u64();
                    self.nbits = 64;
                }
                *b = (*b << 1) | (self.bits & 1);
                self.bits >>= 1;
                self.nbits -= 1;
            }
        }
    }

    pub fn advance_by(&mut self, k: usize) {
        for _ in 0..k {
            self.advance();
        }
    }

    pub fn spec(&self) -> &MapSpec {
        self.spec
    }
}

/// Uniform draw on the domain of `spec`.
pub fn uniform_point<R: Rng + ?Sized>(spec: &MapSpec, rng: &mut R) -> f64 {
    let (lo, hi) = spec.domain();
    lo + (hi - lo) * rng.gen::<f64>()
}

/// Starting orbit for Monte Carlo sample `index`, positioned after burn-in
/// when sampling from μ.
pub fn start_orbit<'a>(
    spec: &'a MapSpec,
    initial: InitialMeasure,
    burnin: usize,
    key: &StreamKey,
    index: u64,
) -> Orbit<'a> {
    let mut start_rng = key.stream(index, Purpose::Start);
    let x0 = uniform_point(spec, &mut start_rng);
    let mut orbit = Orbit::new(spec, x0, key.stream(index, Purpose::Orbit));
    if initial == InitialMeasure::Mu {
        orbit.advance_by(burnin);
    }
    orbit
}

/// `count` points approximately distributed according to the invariant
/// measure: uniform starts iterated `burnin` times.
pub fn sample_invariant(spec: &MapSpec, count: usize, burnin: usize, key: &StreamKey) -> Result<Vec<f64>> {
    if count == 0 {
        return Err(Error::config("count", "at least one sample is required"));
    }
    Ok((0..count as u64)
        .map(|i| start_orbit(spec, InitialMeasure::Mu, burnin, key, i).x())
        .collect())
}

/// Piecewise-constant density on equal-width bins of an interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Density {
    pub lo: f64,
    pub hi: f64,
    /// Probability mass of each bin; sums to one.
    pub mass: Vec<f64>,
    /// ℓ¹ residual of the fixed-point equation at termination.
    pub residual: f64,
    pub iterations: usize,
}

impl Density {
    pub fn uniform(lo: f64, hi: f64, bins: usize) -> Self {
        Self { lo, hi, mass: vec![1.0 / bins as f64; bins], residual: 0.0, iterations: 0 }
    }

    pub fn bins(&self) -> usize {
        self.mass.len()
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.bins() as f64
    }

    pub fn bin_edges(&self, i: usize) -> (f64, f64) {
        let w = self.width();
        (self.lo + i as f64 * w, self.lo + (i + 1) as f64 * w)
    }

    /// Density value (mass per unit length) at `x`.
    pub fn value(&self, x: f64) -> f64 {
        let i = (((x - self.lo) / self.width()) as usize).min(self.bins() - 1);
        self.mass[i] / self.width()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let i = self.bin_of(x).min(self.bins());
        self.cdf_in(x, i, self.mass[..i].iter().sum())
    }

    /// The distribution function with cumulative masses precomputed, for
    /// evaluation at many points.
    pub fn cdf_fn(&self) -> impl Fn(f64) -> f64 + '_ {
        let mut below = Vec::with_capacity(self.bins() + 1);
        let mut acc = 0.0;
        below.push(0.0);
        for m in &self.mass {
            acc += m;
            below.push(acc);
        }
        move |x| {
            let i = self.bin_of(x).min(self.bins());
            self.cdf_in(x, i, below[i])
        }
    }

    fn bin_of(&self, x: f64) -> usize {
        if x <= self.lo {
            0
        } else {
            (((x - self.lo) / self.width()) as usize).min(self.bins() - 1)
        }
    }

    fn cdf_in(&self, x: f64, i: usize, below: f64) -> f64 {
        if x <= self.lo {
            return 0.0;
        }
        if x >= self.hi {
            return 1.0;
        }
        let t = (x - self.lo) / self.width();
        below + self.mass[i] * (t - i as f64)
    }

    /// `∫ f dμ` with Gauss–Legendre quadrature inside every bin.
    pub fn integrate(&self, dim: usize, f: impl Fn(f64, &mut [f64])) -> Vec<f64> {
        let rule = GaussLegendre::new(4);
        let mut total = vec![0.0; dim];
        let mut buf = vec![0.0; dim];
        for (i, &m) in self.mass.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let (a, b) = self.bin_edges(i);
            for (node, weight) in rule.nodes_on(a, b) {
                f(node, &mut buf);
                let scale = m * weight / (b - a);
                for (t, v) in total.iter_mut().zip(&buf) {
                    *t += scale * v;
                }
            }
        }
        total
    }
}

/// Maximum power iterations for the Ulam fixed point.
pub const ULAM_MAX_ITER: usize = 500_000;
/// ℓ¹ tolerance for the Ulam fixed point.
pub const ULAM_TOL: f64 = 1e-10;

/// Invariant density of `spec` by Ulam's method on `bins` equal bins.
///
/// The Markov matrix entries `Leb(B_i ∩ T⁻¹B_j) / Leb(B_i)` are computed
/// exactly from branch inverses of the bin edges, and the stationary vector
/// is found by power iteration.
pub fn invariant_density_ulam(spec: &MapSpec, bins: usize) -> Result<Density> {
    if bins < 2 {
        return Err(Error::config("bins", "at least two bins are required"));
    }
    if spec.kind == MapKind::Doubling {
        return Ok(Density::uniform(0.0, 1.0, bins));
    }
    let (lo, hi) = spec.domain();
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|j| lo + j as f64 * width).collect();

    // Sparse transition triplets (source, target, probability).
    let mut triplets: Vec<(u32, u32, f64)> = Vec::with_capacity(8 * bins);
    for (b, branch) in spec.branches().iter().enumerate() {
        let pre: Vec<f64> = edges
            .iter()
            .map(|&w| spec.branch_inverse(b, w).clamp(branch.lo, branch.hi))
            .collect();
        for j in 0..bins {
            let (mut a, mut c) = (pre[j], pre[j + 1]);
            if !branch.increasing {
                std::mem::swap(&mut a, &mut c);
            }
            if c <= a {
                continue;
            }
            let first = (((a - lo) / width) as usize).min(bins - 1);
            let last = (((c - lo) / width) as usize).min(bins - 1);
            for i in first..=last {
                let (bl, bh) = (edges[i], edges[i + 1]);
                let overlap = c.min(bh) - a.max(bl);
                if overlap > 0.0 {
                    triplets.push((i as u32, j as u32, overlap / width));
                }
            }
        }
    }
    // Normalize rows so each source bin is a probability vector.
    let mut row_sum = vec![0.0; bins];
    for &(i, _, p) in &triplets {
        row_sum[i as usize] += p;
    }
    for t in &mut triplets {
        t.2 /= row_sum[t.0 as usize];
    }

    let mut mass = vec![1.0 / bins as f64; bins];
    let mut next = vec![0.0; bins];
    let mut residual = f64::INFINITY;
    for iter in 1..=ULAM_MAX_ITER {
        next.iter_mut().for_each(|v| *v = 0.0);
        for &(i, j, p) in &triplets {
            next[j as usize] += mass[i as usize] * p;
        }
        let total: f64 = next.iter().sum();
        residual = 0.0;
        for (m, n) in mass.iter_mut().zip(next.iter()) {
            let n = n / total;
            residual += (n - *m).abs();
            *m = n;
        }
        if residual <= ULAM_TOL {
            return Ok(Density { lo, hi, mass, residual, iterations: iter });
        }
    }
    Err(Error::Convergence { what: "Ulam power iteration".into(), iterations: ULAM_MAX_ITER, residual })
}

/// Evaluator signature for user-defined observables.
pub type ObservableFn = Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>;

/// Built-in observable shapes.
#[derive(Clone)]
pub enum ObservableKind {
    /// `x`
    Linear,
    /// `cos 2πx`
    Cos,
    /// `sin 2πx`
    Sin,
    /// `(x, cos 2πx, sin 2πx)`
    Mixed3,
    /// identically zero in `d` dimensions
    Zero(usize),
    /// a constant vector
    Constant(Vec<f64>),
    Custom { dim: usize, name: String, f: ObservableFn },
}

impl fmt::Debug for ObservableKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObservableKind::Linear => write!(f, "Linear"),
            ObservableKind::Cos => write!(f, "Cos"),
            ObservableKind::Sin => write!(f, "Sin"),
            ObservableKind::Mixed3 => write!(f, "Mixed3"),
            ObservableKind::Zero(d) => write!(f, "Zero({d})"),
            ObservableKind::Constant(c) => write!(f, "Constant({c:?})"),
            ObservableKind::Custom { dim, name, .. } => write!(f, "Custom({name}, d={dim})"),
        }
    }
}

/// Estimated sup norm and Hölder seminorm of an observable.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct HolderData {
    pub sup: f64,
    pub seminorm: f64,
}

/// A vector-valued observable `v(x) - c`.
#[derive(Debug, Clone)]
pub struct Observable {
    kind: ObservableKind,
    dim: usize,
    offset: Vec<f64>,
    pub holder: HolderData,
}

impl Observable {
    pub fn new(kind: ObservableKind) -> Self {
        let dim = match &kind {
            ObservableKind::Linear | ObservableKind::Cos | ObservableKind::Sin => 1,
            ObservableKind::Mixed3 => 3,
            ObservableKind::Zero(d) => *d,
            ObservableKind::Constant(c) => c.len(),
            ObservableKind::Custom { dim, .. } => *dim,
        };
        Self { kind, dim, offset: vec![0.0; dim], holder: HolderData::default() }
    }

    pub fn custom(name: &str, dim: usize, f: impl Fn(f64, &mut [f64]) + Send + Sync + 'static) -> Self {
        Self::new(ObservableKind::Custom { dim, name: name.to_string(), f: Arc::new(f) })
    }

    /// Preset by name: `linear`, `cos`, `sin`, `mixed3`, `zero`.
    pub fn preset(name: &str) -> Result<Self> {
        let kind = match name {
            "linear" | "x" => ObservableKind::Linear,
            "cos" => ObservableKind::Cos,
            "sin" => ObservableKind::Sin,
            "mixed3" => ObservableKind::Mixed3,
            "zero" => ObservableKind::Zero(1),
            other => return Err(Error::config("obs", format!("unknown observable preset `{other}`"))),
        };
        Ok(Self::new(kind))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &ObservableKind {
        &self.kind
    }

    pub fn offset(&self) -> &[f64] {
        &self.offset
    }

    pub fn name(&self) -> String {
        match &self.kind {
            ObservableKind::Linear => "linear".into(),
            ObservableKind::Cos => "cos".into(),
            ObservableKind::Sin => "sin".into(),
            ObservableKind::Mixed3 => "mixed3".into(),
            ObservableKind::Zero(_) => "zero".into(),
            ObservableKind::Constant(_) => "constant".into(),
            ObservableKind::Custom { name, .. } => name.clone(),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self.kind, ObservableKind::Zero(_)) && self.offset.iter().all(|&c| c == 0.0)
    }

    /// Uncentered value.
    #[inline(always)]
    pub fn raw(&self, x: f64, out: &mut [f64]) {
        match &self.kind {
            ObservableKind::Linear => out[0] = x,
            ObservableKind::Cos => out[0] = (2.0 * PI * x).cos(),
            ObservableKind::Sin => out[0] = (2.0 * PI * x).sin(),
            ObservableKind::Mixed3 => {
                let (s, c) = (2.0 * PI * x).sin_cos();
                out[0] = x;
                out[1] = c;
                out[2] = s;
            }
            ObservableKind::Zero(_) => out.iter_mut().for_each(|o| *o = 0.0),
            ObservableKind::Constant(c) => out.copy_from_slice(c),
            ObservableKind::Custom { f, .. } => f(x, out),
        }
    }

    /// Centered value `v(x) - c`.
    #[inline(always)]
    pub fn eval(&self, x: f64, out: &mut [f64]) {
        self.raw(x, out);
        for (o, c) in out.iter_mut().zip(&self.offset) {
            *o -= c;
        }
    }

    pub fn eval_vec(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval(x, &mut out);
        out
    }

    /// Replace the centering offset.
    pub fn with_offset(mut self, offset: Vec<f64>) -> Result<Self> {
        if offset.len() != self.dim {
            return Err(Error::Mismatch(format!(
                "offset has {} components, observable has {}",
                offset.len(),
                self.dim
            )));
        }
        self.offset = offset;
        Ok(self)
    }

    /// Center against the invariant density, `c = ∫ v dμ`.
    pub fn centered(self, density: &Density) -> Self {
        let dim = self.dim;
        let mean = density.integrate(dim, |x, out| self.raw(x, out));
        let mut centered = self;
        centered.offset = mean;
        centered
    }

    /// Fill in [`HolderData`] by sampling `grid` points of the domain.
    pub fn with_holder_estimate(mut self, spec: &MapSpec, grid: usize) -> Self {
        let (lo, hi) = spec.domain();
        let eta = spec.eta();
        let pts: Vec<f64> = (0..=grid).map(|i| lo + (hi - lo) * i as f64 / grid as f64).collect();
        let vals: Vec<Vec<f64>> = pts.iter().map(|&x| self.eval_vec(x)).collect();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let sup = vals.iter().map(|v| norm(v)).fold(0.0, f64::max);
        let mut semi: f64 = 0.0;
        for stride in [1usize, 4, 16, 64] {
            for i in 0..pts.len().saturating_sub(stride) {
                let d: Vec<f64> = vals[i].iter().zip(&vals[i + stride]).map(|(a, b)| a - b).collect();
                let dist = (pts[i + stride] - pts[i]).powf(eta);
                semi = semi.max(norm(&d) / dist);
            }
        }
        self.holder = HolderData { sup, seminorm: semi };
        self
    }
}

/// Build a preset observable centered with the Ulam density of `spec`.
pub fn centered_preset(spec: &MapSpec, name: &str, bins: usize) -> Result<Observable> {
    let obs = Observable::preset(name)?;
    if obs.is_zero() {
        return Ok(obs);
    }
    let density = invariant_density_ulam(spec, bins)?;
    Ok(obs.centered(&density))
}

/// A parametrized sequence of intermittent maps `γ_n = γ_∞ + α/n`.
#[derive(Debug, Clone, PartialEq)]
pub struct MapFamily {
    pub gamma_inf: f64,
    pub alpha: f64,
    pub p: f64,
}

impl MapFamily {
    pub fn new(gamma_inf: f64, alpha: f64, p: f64) -> Result<Self> {
        let family = Self { gamma_inf, alpha, p };
        family.limit()?;
        Ok(family)
    }

    pub fn gamma(&self, n: Option<u64>) -> f64 {
        match n {
            Some(n) => self.gamma_inf + self.alpha / n as f64,
            None => self.gamma_inf,
        }
    }

    /// Member `n` (`None` is the limit member).
    pub fn member(&self, n: Option<u64>) -> Result<MapSpec> {
        if n == Some(0) {
            return Err(Error::config("n", "family indices start at 1"));
        }
        MapSpec::lsv(self.gamma(n), self.p)
    }

    pub fn limit(&self) -> Result<MapSpec> {
        self.member(None)
    }

    /// `|γ_n - γ_∞|` is nonincreasing along `indices` (sorted ascending).
    pub fn converges_on(&self, indices: &[u64]) -> bool {
        let gaps: Vec<f64> = indices.iter().map(|&n| (self.gamma(Some(n)) - self.gamma_inf).abs()).collect();
        gaps.windows(2).all(|w| w[1] <= w[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn lsv_right_branch() {
        let spec = MapSpec::lsv(0.25, 3.0).unwrap();
        assert_eq!(apply_map(&spec, 0.75).unwrap(), 0.5);
        assert_eq!(apply_map(&spec, 0.0).unwrap(), 0.0);
        assert_eq!(apply_map(&spec, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn lsv_left_branch_gamma_half() {
        // 0.25 * (1 + sqrt(2) * 0.5), exact to double precision.
        let spec = MapSpec::lsv_unrestricted(0.5).unwrap();
        assert_abs_diff_eq!(apply_map(&spec, 0.25).unwrap(), 0.426_776_695_296_636_9, epsilon = 1e-9);
        assert!(spec.validate().is_err());
    }

    #[test]
    fn domain_errors() {
        let spec = MapSpec::lsv(0.25, 3.0).unwrap();
        assert!(matches!(apply_map(&spec, 1.5), Err(Error::Domain { .. })));
        assert!(matches!(apply_map(&spec, -0.1), Err(Error::Domain { .. })));
        assert!(apply_map(&MapSpec::quadratic(), -0.9).is_ok());
    }

    #[test]
    fn regime_is_validated() {
        assert!(MapSpec::lsv(0.5, 2.0).is_err());
        assert!(MapSpec::lsv(0.25, 4.0).is_err());
        assert!(MapSpec::lsv(0.25, 1.5).is_err());
        assert!(MapSpec::lsv(0.25, 3.9).is_ok());
    }

    #[test]
    fn orbit_fold_collects() {
        let collect = |spec: &MapSpec, x0, n| {
            orbit_fold(spec, x0, n, Vec::new(), |mut v, x| {
                v.push(x);
                v
            })
            .unwrap()
        };
        assert_eq!(collect(&MapSpec::doubling(), 0.1, 3), vec![0.1, 0.2, 0.4]);
        assert!(collect(&MapSpec::doubling(), 0.3, 0).is_empty());
        assert_eq!(collect(&MapSpec::lsv(0.25, 3.0).unwrap(), 0.75, 2), vec![0.75, 0.5]);
    }

    #[test]
    fn zero_burnin_returns_raw_uniform_draw() {
        let key = StreamKey::new(11);
        let spec = MapSpec::lsv(0.25, 3.0).unwrap();
        let pts = sample_invariant(&spec, 1, 0, &key).unwrap();
        let expected = uniform_point(&spec, &mut key.stream(0, Purpose::Start));
        assert_eq!(pts, vec![expected]);
        assert!(sample_invariant(&spec, 0, 0, &key).is_err());
    }

    #[test]
    fn doubling_density_is_uniform() {
        let d = invariant_density_ulam(&MapSpec::doubling(), 256).unwrap();
        assert!(d.mass.iter().all(|&m| (m - 1.0 / 256.0).abs() < 1e-15));
    }

    #[test]
    fn ulam_fixed_point_and_normalization() {
        let spec = MapSpec::lsv(0.25, 3.0).unwrap();
        let d = invariant_density_ulam(&spec, 512).unwrap();
        assert!(d.residual <= ULAM_TOL);
        assert_abs_diff_eq!(d.mass.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(d.mass.iter().all(|&m| m >= 0.0));
        let left: f64 = d.mass[..256].iter().sum();
        assert!(left > 0.5);
    }

    #[test]
    fn chebyshev_density_matches_arcsine() {
        // Ulam converges like bins^(-1/2) here because of the endpoint
        // singularities of the arcsine density.
        let d = invariant_density_ulam(&MapSpec::quadratic(), 1600).unwrap();
        for x in [-0.8, -0.3, 0.0, 0.4, 0.9] {
            let exact = 0.5 + (x as f64).asin() / PI;
            assert_abs_diff_eq!(d.cdf(x), exact, epsilon = 1e-2);
        }
    }

    #[test]
    fn near_zero_gamma_is_nearly_doubling() {
        let spec = MapSpec::lsv(1e-6, 2.0).unwrap();
        let d = invariant_density_ulam(&spec, 256).unwrap();
        for &m in &d.mass {
            assert!((m * 256.0 - 1.0).abs() < 1e-3, "bin density {}", m * 256.0);
        }
    }

    #[test]
    fn doubling_monte_carlo_orbit_does_not_collapse() {
        let spec = MapSpec::doubling();
        let key = StreamKey::new(5);
        let mut orbit = start_orbit(&spec, InitialMeasure::Lebesgue, 0, &key, 0);
        orbit.advance_by(200);
        let mut nonzero = 0;
        for _ in 0..100 {
            if orbit.x() > 0.0 {
                nonzero += 1;
            }
            orbit.advance();
        }
        assert!(nonzero > 90);
    }

    #[test]
    fn family_members_and_limit() {
        let fam = MapFamily::new(0.25, 0.1, 2.5).unwrap();
        assert_abs_diff_eq!(fam.member(Some(10)).unwrap().gamma(), 0.26, epsilon = 1e-15);
        assert_eq!(fam.limit().unwrap().gamma(), 0.25);
        assert!(fam.converges_on(&[1, 10, 100]));
        assert!(fam.member(Some(0)).is_err());
    }

    #[test]
    fn presets_resolve() {
        for name in ["linear", "cos", "sin", "mixed3", "zero"] {
            assert!(Observable::preset(name).is_ok());
        }
        assert!(Observable::preset("nope").is_err());
        assert_eq!(Observable::preset("mixed3").unwrap().dim(), 3);
    }

    proptest! {
        #[test]
        fn lsv_monotone_on_branches(gamma in 0.01f64..0.49, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let spec = MapSpec::lsv(gamma, 2.0).unwrap();
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            for (lo, hi) in [(0.0, 0.5), (0.5 + 1e-12, 1.0)] {
                let xa = lo + (hi - lo) * a;
                let xb = lo + (hi - lo) * b;
                prop_assert!(spec.step(xa) <= spec.step(xb));
            }
        }

        #[test]
        fn maps_stay_in_domain(x in 0.0f64..=1.0, gamma in 0.01f64..0.49) {
            let lsv = MapSpec::lsv(gamma, 2.0).unwrap();
            prop_assert!(lsv.contains(lsv.step(x)));
            prop_assert!(MapSpec::doubling().contains(MapSpec::doubling().step(x)));
            let q = MapSpec::quadratic();
            let y = 2.0 * x - 1.0;
            prop_assert!(q.contains(q.step(y)));
        }

        #[test]
        fn left_inverse_roundtrip(w in 0.0f64..=1.0, gamma in 0.01f64..0.49) {
            let spec = MapSpec::lsv(gamma, 2.0).unwrap();
            let x = spec.lsv_left_inverse(w, w);
            prop_assert!((spec.lsv_left(x) - w).abs() <= 1e-14);
        }
    }
}
