//! Martingale-coboundary decomposition `φ′ = m′ + χ′∘F − χ′` on the
//! discretized tower, the coefficient formulas built from it and numerical
//! diagnostics for the limit-theorem hypotheses.

use rayon::prelude::*;
use serde::Serialize;

use crate::dynamics::{start_orbit, InitialMeasure, MapSpec, Observable, DEFAULT_BURNIN};
use crate::error::{Error, Result};
use crate::rng::StreamKey;
use crate::stats::{CoefficientEstimate, Method, Truncation};
use crate::tower::model::{InducedObservable, PreimageWalker, TowerModel};
use crate::tower::{build_induced, ulam_p};

/// Default cap on the number of series terms.
pub const DEFAULT_K_MAX: usize = 1000;

/// Stop the series once `|P^k φ′|_∞` falls below this multiple of `‖φ′‖`.
const SERIES_STOP: f64 = 1e-10;
/// Default bound on `|P m′|_∞` relative to `‖φ′‖`.
const KERNEL_TOL: f64 = 1e-6;
const MEAN_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct MartingaleDecomposition {
    pub dim: usize,
    /// `χ′` at the nodes, row-major `bins × d`.
    pub chi_prime: Vec<f64>,
    /// `m′` at the nodes, row-major `bins × d`.
    pub m_prime: Vec<f64>,
    /// Number of series terms kept.
    pub k: usize,
    /// `|P m′|_∞` evaluated pointwise at the preimages.
    pub residual_kernel: f64,
    /// `|P^{K+1} φ′|_∞`
    pub residual_series: f64,
    /// `max_j |φ′ − m′ − χ′∘F + χ′|`
    pub identity_residual: f64,
    pub phi_norm: f64,
    pub induced: InducedObservable,
}

impl MartingaleDecomposition {
    /// The centered observable the decomposition was computed for.
    pub fn observable(&self) -> &Observable {
        &self.induced.observable
    }

    /// CSV with columns `bin_center, chi[0..d), m[0..d)`.
    pub fn to_csv(&self, tower: &TowerModel) -> String {
        let d = self.dim;
        let mut header = vec!["bin_center".to_string()];
        header.extend((0..d).map(|k| format!("chi{k}")));
        header.extend((0..d).map(|k| format!("m{k}")));
        let mut out = header.join(",") + "\n";
        for (j, y) in tower.nodes().iter().enumerate() {
            let mut row = vec![crate::io::fmt_f64(*y)];
            row.extend(self.chi_prime[j * d..(j + 1) * d].iter().map(|v| crate::io::fmt_f64(*v)));
            row.extend(self.m_prime[j * d..(j + 1) * d].iter().map(|v| crate::io::fmt_f64(*v)));
            out += &row.join(",");
            out.push('\n');
        }
        out
    }
}

/// Decompose the induced observable with at most `k_max` series terms.
pub fn martingale_decompose(
    tower: &TowerModel,
    induced: &InducedObservable,
    k_max: usize,
) -> Result<MartingaleDecomposition> {
    decompose_with_tolerance(tower, induced, k_max, KERNEL_TOL)
}

pub fn decompose_with_tolerance(
    tower: &TowerModel,
    induced: &InducedObservable,
    k_max: usize,
    kernel_tol: f64,
) -> Result<MartingaleDecomposition> {
    if k_max == 0 {
        return Err(Error::config("k_max", "at least one series term is required"));
    }
    let d = induced.dim;
    let bins = tower.bins();
    let norm = induced.phi_norm;
    let scale = norm.max(f64::MIN_POSITIVE);

    let mean = tower.integrate(&induced.push_phi, d);
    let mean_abs = mean.iter().fold(0.0f64, |a, m| a.max(m.abs()));
    if mean_abs > MEAN_TOL * norm.max(1.0) {
        return Err(Error::NotCentered { mean: mean_abs, tolerance: MEAN_TOL * norm.max(1.0) });
    }

    let sup = |w: &[f64]| w.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut chi = vec![0.0; bins * d];
    let mut psi = induced.push_phi.clone();
    let mut k = 0;
    loop {
        chi.iter_mut().zip(&psi).for_each(|(c, p)| *c += p);
        k += 1;
        psi = tower.apply_p(&psi, d);
        if sup(&psi) < SERIES_STOP * scale || k == k_max {
            break;
        }
    }
    let residual_series = sup(&psi);
    let tolerance = kernel_tol * norm;
    if residual_series > tolerance.max(1e-300) && norm > 0.0 {
        return Err(Error::SeriesNotDecayed { residual: residual_series, tolerance });
    }

    let mut m = vec![0.0; bins * d];
    let mut chi_image = vec![0.0; d];
    let mut identity_residual: f64 = 0.0;
    for j in 0..bins {
        tower.interpolate(&chi, d, induced.image[j], &mut chi_image);
        for a in 0..d {
            let idx = j * d + a;
            m[idx] = induced.phi[idx] - chi_image[a] + chi[idx];
            let r = induced.phi[idx] - m[idx] - chi_image[a] + chi[idx];
            identity_residual = identity_residual.max(r.abs());
        }
    }

    // P m′ at each node, with m′ evaluated at the preimages themselves.
    let scheme = tower.scheme();
    let obs = &induced.observable;
    let kernel_rows: Vec<f64> = (0..bins)
        .into_par_iter()
        .map_init(
            || (PreimageWalker::new(scheme, Some(obs)), vec![0.0; d], vec![0.0; d]),
            |(walker, acc, ci), j| {
                acc.iter_mut().for_each(|v| *v = 0.0);
                walker.walk(tower.nodes()[j], |pre| {
                    let g = tower.weight(j, pre);
                    tower.interpolate(&chi, d, pre.point, ci);
                    for a in 0..d {
                        acc[a] += g * (pre.phi[a] - chi[j * d + a] + ci[a]);
                    }
                });
                acc.iter().fold(0.0f64, |x, v| x.max(v.abs()))
            },
        )
        .collect();
    let residual_kernel = kernel_rows.into_iter().fold(0.0, f64::max);
    if norm > 0.0 && residual_kernel > tolerance {
        return Err(Error::SeriesNotDecayed { residual: residual_kernel, tolerance });
    }

    Ok(MartingaleDecomposition {
        dim: d,
        chi_prime: chi,
        m_prime: m,
        k,
        residual_kernel,
        residual_series,
        identity_residual,
        phi_norm: norm,
        induced: induced.clone(),
    })
}

/// Nodal `P(m′ ⊗ m′)` plus the tail functional `∫|m′|² 1{|m′|² > q}` for each
/// `q`, all integrated pointwise at the preimages.
struct MSquares {
    psi: Vec<f64>,
    tail: Vec<f64>,
    mass: f64,
}

fn m_squares(tower: &TowerModel, decomp: &MartingaleDecomposition, q_grid: &[f64]) -> MSquares {
    let d = decomp.dim;
    let bins = tower.bins();
    let scheme = tower.scheme();
    let obs = decomp.observable();
    let chi = &decomp.chi_prime;
    let rows: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..bins)
        .into_par_iter()
        .map_init(
            || (PreimageWalker::new(scheme, Some(obs)), vec![0.0; d], vec![0.0; d]),
            |(walker, ci, mv), j| {
                let mut psi = vec![0.0; d * d];
                let mut tail = vec![0.0; q_grid.len()];
                let mut mass = 0.0;
                walker.walk(tower.nodes()[j], |pre| {
                    let g = tower.weight(j, pre);
                    tower.interpolate(chi, d, pre.point, ci);
                    for a in 0..d {
                        mv[a] = pre.phi[a] - chi[j * d + a] + ci[a];
                    }
                    let sq: f64 = mv.iter().map(|v| v * v).sum();
                    for a in 0..d {
                        for b in 0..d {
                            psi[a * d + b] += g * mv[a] * mv[b];
                        }
                    }
                    mass += g * sq;
                    for (t, q) in tail.iter_mut().zip(q_grid) {
                        if sq > *q {
                            *t += g * sq;
                        }
                    }
                });
                (psi, tail, mass)
            },
        )
        .collect();
    let mut psi = Vec::with_capacity(bins * d * d);
    let mut tail = vec![0.0; q_grid.len()];
    let mut mass = 0.0;
    for (j, (p, t, m)) in rows.into_iter().enumerate() {
        psi.extend(p);
        let w = tower.mu[j];
        tail.iter_mut().zip(&t).for_each(|(a, b)| *a += w * b);
        mass += w * m;
    }
    MSquares { psi, tail, mass }
}

fn symmetrize(m: &mut [f64], d: usize) {
    for a in 0..d {
        for b in a + 1..d {
            let s = 0.5 * (m[a * d + b] + m[b * d + a]);
            m[a * d + b] = s;
            m[b * d + a] = s;
        }
    }
}

/// `Σ = τ̄⁻¹ ∫_Y m′ ⊗ m′ dμ_Y`, row-major `d × d`.
pub fn sigma_from_m(tower: &TowerModel, decomp: &MartingaleDecomposition) -> Vec<f64> {
    let d = decomp.dim;
    let sq = m_squares(tower, decomp, &[]);
    let mut sigma: Vec<f64> = tower.integrate(&sq.psi, d * d).iter().map(|v| v / tower.tau_bar).collect();
    symmetrize(&mut sigma, d);
    sigma
}

/// `E = τ̄⁻¹ ∫_Y Σ_{ℓ<τ} χ(y,ℓ) ⊗ φ(y,ℓ) dμ_Y`, with the level sums streamed
/// along each excursion.
pub fn e_from_chi(tower: &TowerModel, decomp: &MartingaleDecomposition) -> Vec<f64> {
    let d = decomp.dim;
    let bins = tower.bins();
    let scheme = tower.scheme();
    let obs = decomp.observable();
    let chi = &decomp.chi_prime;
    let rows: Vec<Vec<f64>> = (0..bins)
        .into_par_iter()
        .map_init(
            || (PreimageWalker::new(scheme, Some(obs)), vec![0.0; d]),
            |(walker, ci), j| {
                let mut acc = vec![0.0; d * d];
                walker.walk(tower.nodes()[j], |pre| {
                    let g = tower.weight(j, pre);
                    tower.interpolate(chi, d, pre.point, ci);
                    for a in 0..d {
                        for b in 0..d {
                            acc[a * d + b] += g * (ci[a] * pre.phi[b] + pre.iter[a * d + b]);
                        }
                    }
                });
                acc
            },
        )
        .collect();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    tower.integrate(&flat, d * d).iter().map(|v| v / tower.tau_bar).collect()
}

/// One row of the Birkhoff-average check for `UL(m ⊗ m)`.
#[derive(Debug, Clone, Serialize)]
pub struct DeviationRow {
    pub n: usize,
    /// Mean over samples of `(1/n) Σ_{j<n} UL(m⊗m)(x_j) − Σ`, row-major.
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    /// Root mean square Frobenius deviation.
    pub rms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnosticsReport {
    pub q_grid: Vec<f64>,
    /// `∫|m′|² 1{|m′|² > q} dμ_Y` for each `q`.
    pub tail: Vec<f64>,
    /// `∫|m′|² dμ_Y`
    pub m_mass: f64,
    pub sigma: Vec<f64>,
    pub samples: usize,
    pub deviations: Vec<DeviationRow>,
}

impl DiagnosticsReport {
    /// Tail functional is nonincreasing in `q`.
    pub fn tail_decreasing(&self) -> bool {
        self.tail.windows(2).all(|w| w[1] <= w[0] + 1e-15 * self.m_mass.max(1.0))
    }
}

/// Tail functional on `q_grid` and Monte Carlo Birkhoff averages of
/// `UL(m ⊗ m)` along `T`-orbits at each `n` of `n_grid`.
pub fn hypothesis_diagnostics(
    tower: &TowerModel,
    decomp: &MartingaleDecomposition,
    q_grid: &[f64],
    n_grid: &[usize],
    samples: usize,
    key: &StreamKey,
) -> Result<DiagnosticsReport> {
    let d = decomp.dim;
    let dd = d * d;
    let sq = m_squares(tower, decomp, q_grid);
    let mut sigma: Vec<f64> = tower.integrate(&sq.psi, dd).iter().map(|v| v / tower.tau_bar).collect();
    symmetrize(&mut sigma, d);

    let mut grid = n_grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    let n_max = grid.last().copied().unwrap_or(0);
    let spec: &MapSpec = tower.scheme().spec();
    let scheme = tower.scheme();

    let per_sample: Vec<Vec<Vec<f64>>> = (0..samples as u64)
        .into_par_iter()
        .map_init(
            || vec![0.0; dd],
            |buf, i| {
                let mut orbit = start_orbit(spec, InitialMeasure::Mu, DEFAULT_BURNIN, key, i);
                let mut acc = vec![0.0; dd];
                let mut out = Vec::with_capacity(grid.len());
                let mut next = 0;
                for step in 1..=n_max {
                    orbit.advance();
                    let x = orbit.x();
                    if scheme.contains(x) {
                        tower.interpolate(&sq.psi, dd, x, buf);
                        acc.iter_mut().zip(buf.iter()).for_each(|(a, b)| *a += b);
                    }
                    while next < grid.len() && grid[next] == step {
                        out.push(acc.iter().zip(&sigma).map(|(a, s)| a / step as f64 - s).collect());
                        next += 1;
                    }
                }
                out
            },
        )
        .collect();

    let mut deviations = Vec::with_capacity(grid.len());
    for (g, &n) in grid.iter().enumerate() {
        let mut mean = vec![0.0; dd];
        let mut m2 = vec![0.0; dd];
        let mut frob = 0.0;
        for s in &per_sample {
            for k in 0..dd {
                mean[k] += s[g][k];
                m2[k] += s[g][k] * s[g][k];
            }
            frob += s[g].iter().map(|v| v * v).sum::<f64>();
        }
        let m = samples as f64;
        let stderr: Vec<f64> = (0..dd)
            .map(|k| {
                let mu = mean[k] / m;
                let var = (m2[k] / m - mu * mu).max(0.0) * m / (m - 1.0).max(1.0);
                (var / m).sqrt()
            })
            .collect();
        mean.iter_mut().for_each(|v| *v /= m);
        deviations.push(DeviationRow { n, mean, stderr, rms: (frob / m).sqrt() });
    }

    Ok(DiagnosticsReport {
        q_grid: q_grid.to_vec(),
        tail: sq.tail,
        m_mass: sq.mass,
        sigma,
        samples,
        deviations,
    })
}

/// Martingale estimate of `(Σ, E)` together with decomposition metadata.
#[derive(Debug, Clone)]
pub struct TowerCoefficients {
    pub estimate: CoefficientEstimate,
    pub tower: TowerModel,
    pub decomposition: MartingaleDecomposition,
}

/// Build the tower at `bins` and `bins/2`, decompose `v` on both and report
/// the finer estimate with the difference as its error bar.
pub fn tower_coefficients(spec: &MapSpec, v: &Observable, bins: usize, tau_cap: u32) -> Result<TowerCoefficients> {
    if bins < 32 {
        return Err(Error::config("bins", "coefficient error bars need at least 32 bins"));
    }
    let scheme = build_induced(spec, tau_cap)?;
    let run = |b: usize| -> Result<(TowerModel, MartingaleDecomposition, Vec<f64>, Vec<f64>)> {
        let tower = ulam_p(&scheme, b)?;
        let induced = tower.induce(v)?;
        let decomp = martingale_decompose(&tower, &induced, DEFAULT_K_MAX)?;
        let sigma = sigma_from_m(&tower, &decomp);
        let e = e_from_chi(&tower, &decomp);
        Ok((tower, decomp, sigma, e))
    };
    let (tower, decomp, sigma, e) = run(bins)?;
    let (_, _, sigma_half, e_half) = run(bins / 2)?;
    let floor = 1e-12;
    let err = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs() + floor).collect::<Vec<f64>>();
    let estimate = CoefficientEstimate {
        dim: decomp.dim,
        sigma_stderr: err(&sigma, &sigma_half),
        e_stderr: err(&e, &e_half),
        sigma,
        e,
        method: Method::Martingale,
        truncation: Truncation::SeriesTerms(decomp.k),
    };
    Ok(TowerCoefficients { estimate, tower, decomposition: decomp })
}
