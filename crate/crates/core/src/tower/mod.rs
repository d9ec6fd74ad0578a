//! Induced first-return schemes, their discretized transfer operators, and
//! the martingale-coboundary decomposition built on top of them.
//!
//! For the intermittent map the reference set is `Y = [½, 1]` and `τ` is the
//! first return time. The `τ = k` cylinder is bounded by points of the
//! backward orbit `z_0 = 1, z_k = L⁻¹(z_{k-1})` of the left branch `L`:
//! `a_k = ((1 + z_k)/2, (1 + z_{k-1})/2]`. The doubling map is already
//! uniformly expanding and is induced trivially with `Y = [0, 1]`, `τ ≡ 1`.

mod decompose;
mod model;

pub use decompose::{
    decompose_with_tolerance, e_from_chi, hypothesis_diagnostics, martingale_decompose, sigma_from_m,
    tower_coefficients, DeviationRow, DiagnosticsReport, MartingaleDecomposition, TowerCoefficients, DEFAULT_K_MAX,
};
pub use model::{ulam_p, InducedObservable, TowerModel, DEFAULT_TOWER_BINS};

use serde::Serialize;

use crate::dynamics::{MapKind, MapSpec, Observable};
use crate::error::{Error, Result};

/// Default cap on retained return times.
pub const DEFAULT_TAU_CAP: u32 = 1000;

/// One cylinder of the inducing partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Cylinder {
    pub tau: u32,
    pub left: f64,
    pub right: f64,
    /// Lebesgue length, computed without cancellation near `y = ½`.
    pub length: f64,
}

/// Return-time partition of `Y` up to `tau_cap`.
#[derive(Debug, Clone)]
pub struct InducedScheme {
    spec: MapSpec,
    pub y_lo: f64,
    pub y_hi: f64,
    /// Ordered by increasing `τ`.
    pub cylinders: Vec<Cylinder>,
    pub tau_cap: u32,
    /// Normalized Lebesgue measure of `{τ > tau_cap}` in `Y`.
    pub tail_lebesgue: f64,
}

impl InducedScheme {
    pub fn spec(&self) -> &MapSpec {
        &self.spec
    }

    pub fn contains(&self, y: f64) -> bool {
        y >= self.y_lo && y <= self.y_hi
    }

    pub fn y_length(&self) -> f64 {
        self.y_hi - self.y_lo
    }
}

/// Build the first-return scheme of `spec` with return times up to `tau_cap`.
pub fn build_induced(spec: &MapSpec, tau_cap: u32) -> Result<InducedScheme> {
    if tau_cap < 1 {
        return Err(Error::config("tau_cap", "must be at least 1"));
    }
    match spec.kind() {
        MapKind::Doubling => Ok(InducedScheme {
            spec: spec.clone(),
            y_lo: 0.0,
            y_hi: 1.0,
            cylinders: vec![
                Cylinder { tau: 1, left: 0.0, right: 0.5, length: 0.5 },
                Cylinder { tau: 1, left: 0.5, right: 1.0, length: 0.5 },
            ],
            tau_cap,
            tail_lebesgue: 0.0,
        }),
        MapKind::Lsv => {
            let mut cylinders = Vec::with_capacity(tau_cap as usize);
            let mut z_prev = 1.0;
            for k in 1..=tau_cap {
                let z = spec.lsv_left_inverse(z_prev, z_prev);
                cylinders.push(Cylinder {
                    tau: k,
                    left: 0.5 * (1.0 + z),
                    right: 0.5 * (1.0 + z_prev),
                    length: 0.5 * (z_prev - z),
                });
                z_prev = z;
            }
            let tail = z_prev;
            if tail > 0.5 {
                return Err(Error::config(
                    "tau_cap",
                    format!("tail mass {tail:e} above 0.5; tau_cap {tau_cap} is far too small"),
                ));
            }
            Ok(InducedScheme { spec: spec.clone(), y_lo: 0.5, y_hi: 1.0, cylinders, tau_cap, tail_lebesgue: tail })
        }
        MapKind::Quadratic => Err(Error::Unsupported(
            "no constructive inducing scheme is provided for the quadratic family".into(),
        )),
    }
}

/// Midpoint nodes of the angle quadrature used for the quadratic map.
pub const CONJUGACY_NODES: usize = 4096;

/// Means against the invariant measure: tower quadrature where an inducing
/// scheme exists; for the quadratic map, the conjugacy `x = -cos 2πu` with
/// Lebesgue measure in `u`.
#[derive(Debug, Clone)]
pub enum InvariantMean {
    Tower(Box<TowerModel>),
    Conjugacy { nodes: usize },
}

impl InvariantMean {
    pub fn new(spec: &MapSpec, bins: usize) -> Result<Self> {
        match spec.kind() {
            MapKind::Lsv | MapKind::Doubling => {
                let scheme = build_induced(spec, DEFAULT_TAU_CAP)?;
                Ok(InvariantMean::Tower(Box::new(ulam_p(&scheme, bins)?)))
            }
            MapKind::Quadratic => Ok(InvariantMean::Conjugacy { nodes: CONJUGACY_NODES }),
        }
    }

    /// `∫ v dμ` for `v` including its current offset.
    pub fn mean(&self, v: &Observable) -> Vec<f64> {
        match self {
            InvariantMean::Tower(t) => t.invariant_mean(v),
            InvariantMean::Conjugacy { nodes } => {
                // Periodic integrand in u: the midpoint rule converges spectrally.
                let d = v.dim();
                let mut total = vec![0.0; d];
                let mut buf = vec![0.0; d];
                for k in 0..*nodes {
                    let u = (k as f64 + 0.5) / *nodes as f64;
                    v.eval(-(std::f64::consts::TAU * u).cos(), &mut buf);
                    for (t, b) in total.iter_mut().zip(&buf) {
                        *t += b;
                    }
                }
                total.iter().map(|t| t / *nodes as f64).collect()
            }
        }
    }

    /// Shift the offset of `v` so that its mean vanishes.
    pub fn center(&self, v: Observable) -> Result<Observable> {
        let mean = self.mean(&v);
        let offset = v.offset().iter().zip(&mean).map(|(a, b)| a + b).collect();
        v.with_offset(offset)
    }
}

/// Preset observable centered against the invariant measure of `spec`.
pub fn centered_observable(spec: &MapSpec, name: &str) -> Result<Observable> {
    let v = Observable::preset(name)?;
    if v.is_zero() {
        return Ok(v);
    }
    InvariantMean::new(spec, DEFAULT_TOWER_BINS)?.center(v)
}

/// Result of following an orbit back to `Y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReturnTime {
    pub tau: u32,
    /// The cap was reached before the orbit returned.
    pub capped: bool,
    /// `T^τ y` (the image under the induced map when not capped).
    pub image: f64,
}

fn reference_set(spec: &MapSpec) -> Result<(f64, f64)> {
    match spec.kind() {
        MapKind::Doubling => Ok((0.0, 1.0)),
        MapKind::Lsv => Ok((0.5, 1.0)),
        MapKind::Quadratic => Err(Error::Unsupported("quadratic map has no inducing scheme".into())),
    }
}

/// Smallest `n ≥ 1` with `T^n y ∈ Y`, capped at `tau_cap` with a flag.
pub fn return_time(spec: &MapSpec, y: f64, tau_cap: u32) -> Result<ReturnTime> {
    let (lo, hi) = reference_set(spec)?;
    if !(y >= lo && y <= hi) {
        return Err(Error::Domain { x: y, lo, hi });
    }
    let mut x = y;
    for n in 1..=tau_cap {
        x = spec.step(x);
        if x >= lo && x <= hi {
            return Ok(ReturnTime { tau: n, capped: false, image: x });
        }
    }
    Ok(ReturnTime { tau: tau_cap, capped: true, image: x })
}

/// Induced observable `φ′(y) = Σ_{ℓ<τ(y)} v(T^ℓ y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct InducedValue {
    pub value: Vec<f64>,
    pub tau: u32,
    pub capped: bool,
}

pub fn induce_observable(spec: &MapSpec, v: &Observable, y: f64, tau_cap: u32) -> Result<InducedValue> {
    let rt = return_time(spec, y, tau_cap)?;
    let mut value = vec![0.0; v.dim()];
    let mut buf = vec![0.0; v.dim()];
    let mut x = y;
    for _ in 0..rt.tau {
        v.eval(x, &mut buf);
        for (a, b) in value.iter_mut().zip(&buf) {
            *a += b;
        }
        x = spec.step(x);
    }
    Ok(InducedValue { value, tau: rt.tau, capped: rt.capped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::ObservableKind;
    use approx::assert_abs_diff_eq;

    #[test]
    fn doubling_scheme_is_trivial() {
        let s = build_induced(&MapSpec::doubling(), 7).unwrap();
        assert!(s.cylinders.iter().all(|c| c.tau == 1));
        assert_eq!(s.y_lo, 0.0);
        assert_eq!(s.tail_lebesgue, 0.0);
    }

    #[test]
    fn lsv_first_cylinder_is_upper_quarter() {
        let s = build_induced(&MapSpec::lsv(0.25, 3.0).unwrap(), 100).unwrap();
        let c = s.cylinders[0];
        assert_eq!(c.tau, 1);
        assert_abs_diff_eq!(c.left, 0.75, epsilon = 1e-15);
        assert_eq!(c.right, 1.0);
    }

    #[test]
    fn lsv_cylinders_tile_y() {
        let s = build_induced(&MapSpec::lsv(0.25, 3.0).unwrap(), 200).unwrap();
        for w in s.cylinders.windows(2) {
            assert!(w[1].right <= w[0].left + 1e-15);
            assert!(w[1].tau == w[0].tau + 1);
        }
        let covered: f64 = s.cylinders.iter().map(|c| c.length).sum::<f64>() / 0.5;
        assert_abs_diff_eq!(covered + s.tail_lebesgue, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn cylinder_endpoints_map_onto_y() {
        let spec = MapSpec::lsv(0.25, 3.0).unwrap();
        let s = build_induced(&spec, 30).unwrap();
        for c in &s.cylinders {
            // One-sided images: the right branch once, then the left branch
            // τ - 1 times, as for interior points of the cylinder.
            let image = |x: f64| (1..c.tau).fold(2.0 * x - 1.0, |w, _| spec.lsv_left(w));
            assert_abs_diff_eq!(image(c.right), 1.0, epsilon = 1e-9);
            if c.tau < s.tau_cap {
                assert_abs_diff_eq!(image(c.left), 0.5, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn tail_decays_with_cap() {
        let spec = MapSpec::lsv(0.25, 3.0).unwrap();
        let tails: Vec<f64> = [10, 50, 100, 400].iter().map(|&c| build_induced(&spec, c).unwrap().tail_lebesgue).collect();
        assert!(tails.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn return_times() {
        let spec = MapSpec::lsv(0.25, 3.0).unwrap();
        assert_eq!(return_time(&spec, 0.8, 100).unwrap().tau, 1);
        let rt = return_time(&spec, 0.7, 100).unwrap();
        assert_eq!(rt.tau, 2);
        assert_abs_diff_eq!(rt.image, 0.4 * (1.0 + 2f64.powf(0.25) * 0.4f64.powf(0.25)), epsilon = 1e-12);
        assert_eq!(return_time(&MapSpec::doubling(), 0.6, 10).unwrap().tau, 1);
        assert!(return_time(&spec, 0.2, 10).is_err());
        let capped = return_time(&spec, 0.5 + 1e-12, 5).unwrap();
        assert!(capped.capped);
        assert_eq!(capped.tau, 5);
    }

    #[test]
    fn induced_observable_values() {
        let spec = MapSpec::lsv(0.25, 3.0).unwrap();
        let c = Observable::new(ObservableKind::Constant(vec![2.5]));
        let iv = induce_observable(&spec, &c, 0.7, 100).unwrap();
        assert_eq!(iv.value, vec![5.0]);

        let cos = Observable::preset("cos").unwrap();
        let iv = induce_observable(&MapSpec::doubling(), &cos, 0.6, 10).unwrap();
        assert_abs_diff_eq!(iv.value[0], (1.2 * std::f64::consts::PI).cos(), epsilon = 1e-15);

        let lin = Observable::preset("linear").unwrap().with_offset(vec![0.3]).unwrap();
        let iv = induce_observable(&spec, &lin, 0.7, 100).unwrap();
        assert_abs_diff_eq!(iv.value[0], (0.7 - 0.3) + (0.4 - 0.3), epsilon = 1e-15);
    }

    #[test]
    fn quadratic_is_unsupported() {
        assert!(matches!(build_induced(&MapSpec::quadratic(), 10), Err(Error::Unsupported(_))));
    }
}
