//! End-to-end acceptance checks, one test per criterion. Each prints a
//! `PASS`/`FAIL` line to stderr (uncaptured) before asserting.
//!
//! Statistical criteria built on KS tests run three seeds and need two to pass.

use std::io::Write;
use std::sync::OnceLock;

use homog_core::dynamics::{start_orbit, InitialMeasure, MapKind, MapSpec, Observable};
use homog_core::fastslow::{euler_maruyama, homogenization_compare, simulate_fastslow, Diffusion, Drift, FastSlowSpec, NoiseKind, SDESpec};
use homog_core::rng::{Purpose, StreamKey};
use homog_core::semiflow::{flow_coeffs_tower, flow_scaling, flow_wip_check, FlowObservable, Roof, SuspensionSpec};
use homog_core::stats::{
    covariance_stderr, direct_coeffs, green_kubo, mean_stderr, moment_table, scaling_exponent, CoefficientEstimate,
    IteratedStats, MomentOptions, MomentTable, Statistic,
};
use homog_core::tower::{
    build_induced, centered_observable, martingale_decompose, tower_coefficients, ulam_p, DEFAULT_TAU_CAP,
};
use homog_core::wip::{drift_check, marginal_normality, sample_paths, uniform_grid, PathEnsemble};
use rand::Rng;

const SEEDS: [u64; 3] = [11, 12, 13];
/// Offset giving the Lebesgue runs seeds independent of the μ runs.
const LEB_OFFSET: u64 = 100;

fn verdict(criterion: u32, pass: bool, detail: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{} criterion {criterion}: {detail}", if pass { "PASS" } else { "FAIL" });
}

fn two_of_three(criterion: u32, passes: &[bool], detail: &str) {
    let n = passes.iter().filter(|&&p| p).count();
    let ok = n >= 2;
    verdict(criterion, ok, &format!("{detail}; {n}/3 seeds passed"));
    assert!(ok, "criterion {criterion}: {n}/3 seeds passed");
}

fn lsv() -> MapSpec {
    MapSpec::lsv(0.25, 3.0).unwrap()
}

fn within(a: f64, b: f64, se: f64) -> bool {
    (a - b).abs() <= 3.0 * se
}

#[test]
fn criterion_1_pair_identity() {
    let specs = [lsv(), MapSpec::doubling(), MapSpec::quadratic()];
    let presets = ["linear", "cos", "sin", "mixed3"];
    let key = StreamKey::new(1);
    let mut worst: f64 = 0.0;
    for i in 0..1000u64 {
        let mut rng = key.stream(i, Purpose::Synthetic);
        let spec = &specs[rng.gen_range(0..3)];
        let v = centered_observable(spec, presets[rng.gen_range(0..4)]).unwrap();
        let n = rng.gen_range(1..=10_000);
        let mut orbit = start_orbit(spec, InitialMeasure::Lebesgue, 0, &key, i);
        let mut st = IteratedStats::new(v.dim());
        let mut buf = vec![0.0; v.dim()];
        for _ in 0..n {
            v.eval(orbit.x(), &mut buf);
            st.push(&buf);
            orbit.advance();
        }
        worst = worst.max(st.pair_residual());
    }
    let ok = worst <= 1e-10;
    verdict(1, ok, &format!("max relative pair residual {worst:.2e} over 1000 orbits"));
    assert!(ok);
}

#[test]
fn criterion_2_doubling_oracle() {
    let spec = MapSpec::doubling();
    let v = Observable::preset("cos").unwrap();
    let direct = direct_coeffs(&spec, &v, 10_000, 10_000, &StreamKey::new(21)).unwrap();
    let gk = green_kubo(&spec, &v, 64, 10_000_000, &StreamKey::new(22)).unwrap();
    let tower = tower_coefficients(&spec, &v, 4096, DEFAULT_TAU_CAP).unwrap().estimate;
    let mut ok = true;
    let mut detail = Vec::new();
    for est in [&direct, &gk, &tower] {
        let pass = within(est.sigma[0], 0.5, est.sigma_stderr[0]) && within(est.e[0], 0.0, est.e_stderr[0]);
        ok &= pass;
        detail.push(format!(
            "{} Σ={:.5}±{:.1e} E={:.5}±{:.1e}",
            est.method.name(),
            est.sigma[0],
            est.sigma_stderr[0],
            est.e[0],
            est.e_stderr[0]
        ));
    }
    verdict(2, ok, &detail.join(", "));
    assert!(ok);
}

#[test]
fn criterion_3_martingale_decomposition() {
    let spec = lsv();
    let tower = ulam_p(&build_induced(&spec, DEFAULT_TAU_CAP).unwrap(), 4096).unwrap();
    let mut ok = true;
    let mut detail = Vec::new();
    for name in ["linear", "cos", "sin", "mixed3"] {
        let induced = tower.induce(&centered_observable(&spec, name).unwrap()).unwrap();
        let dec = martingale_decompose(&tower, &induced, 200).unwrap();
        let bound = 1e-6 * dec.phi_norm;
        ok &= dec.identity_residual <= bound && dec.residual_kernel <= bound;
        detail.push(format!("{name}: identity {:.1e}, |Pm′| {:.1e}, bound {bound:.1e}", dec.identity_residual, dec.residual_kernel));
    }
    verdict(3, ok, &detail.join("; "));
    assert!(ok);
}

const MOMENT_GRID: [usize; 4] = [1000, 10_000, 100_000, 1_000_000];

fn moment_run(initial: InitialMeasure, seed: u64) -> MomentTable {
    let spec = lsv();
    let v = centered_observable(&spec, "linear").unwrap();
    moment_table(&spec, &v, &MOMENT_GRID, &[2.0], 10_000, initial, seed, &MomentOptions::default()).unwrap()
}

fn mu_moments() -> &'static Vec<MomentTable> {
    static CELL: OnceLock<Vec<MomentTable>> = OnceLock::new();
    CELL.get_or_init(|| SEEDS.iter().map(|&s| moment_run(InitialMeasure::Mu, s)).collect())
}

#[test]
fn criterion_4_moment_scaling() {
    let mut passes = Vec::new();
    let mut detail = Vec::new();
    for t in mu_moments() {
        let fits = scaling_exponent(t).unwrap();
        let slope = |stat| fits.iter().find(|f| f.stat == stat).unwrap().slope;
        let (s, ss) = (slope(Statistic::S), slope(Statistic::SS));
        passes.push((0.45..=0.55).contains(&s) && (0.9..=1.1).contains(&ss));
        detail.push(format!("seed {}: S {s:.3}, 𝕊 {ss:.3}", t.seed));
    }
    two_of_three(4, &passes, &detail.join(", "));
}

struct Consensus {
    sigma: Vec<f64>,
    sigma_stderr: Vec<f64>,
    e: Vec<f64>,
    e_stderr: Vec<f64>,
}

fn wip_observable() -> Observable {
    centered_observable(&lsv(), "mixed3").unwrap()
}

/// Tower coefficients, checked against the direct and Green–Kubo estimates.
fn consensus() -> &'static (Consensus, String) {
    static CELL: OnceLock<(Consensus, String)> = OnceLock::new();
    CELL.get_or_init(|| {
        let spec = lsv();
        let v = wip_observable();
        let tower = tower_coefficients(&spec, &v, 4096, DEFAULT_TAU_CAP).unwrap().estimate;
        let direct = direct_coeffs(&spec, &v, 10_000, 10_000, &StreamKey::new(51)).unwrap();
        let gk = green_kubo(&spec, &v, 1000, 10_000_000, &StreamKey::new(52)).unwrap();
        let agree = |a: &CoefficientEstimate| {
            (0..a.sigma.len()).all(|k| {
                within(a.sigma[k], tower.sigma[k], a.sigma_stderr[k] + tower.sigma_stderr[k])
                    && within(a.e[k], tower.e[k], a.e_stderr[k] + tower.e_stderr[k])
            })
        };
        let note = format!("consensus from tower; direct agrees: {}, green-kubo agrees: {}", agree(&direct), agree(&gk));
        let c = Consensus { sigma: tower.sigma, sigma_stderr: tower.sigma_stderr, e: tower.e, e_stderr: tower.e_stderr };
        (c, note)
    })
}

fn wip_run(initial: InitialMeasure, seed: u64) -> PathEnsemble {
    sample_paths(&lsv(), &wip_observable(), 100_000, 10_000, &uniform_grid(1), initial, seed).unwrap()
}

fn mu_paths() -> &'static Vec<PathEnsemble> {
    static CELL: OnceLock<Vec<PathEnsemble>> = OnceLock::new();
    CELL.get_or_init(|| SEEDS.iter().map(|&s| wip_run(InitialMeasure::Mu, s)).collect())
}

#[test]
fn criterion_5_iterated_wip() {
    let (c, note) = consensus();
    let mut passes = Vec::new();
    let mut detail = Vec::new();
    for (ens, seed) in mu_paths().iter().zip(SEEDS) {
        let normal = marginal_normality(ens, &c.sigma, &c.sigma_stderr).unwrap();
        let drift = drift_check(ens, &c.e, &c.e_stderr).unwrap();
        let ks = normal.passed_at("ks_normal", 1.0);
        let cov = normal.passed_at("covariance", 1.0);
        let mean = drift.passed_at("mean_levy", 1.0);
        passes.push(ks && cov && mean);
        detail.push(format!("seed {seed}: ks {ks}, cov {cov}, levy mean {mean}"));
    }
    two_of_three(5, &passes, &format!("{}; {note}", detail.join(", ")));
}

/// Per-statistic agreement of two moment tables.
fn moments_agree(a: &MomentTable, b: &MomentTable) -> (bool, f64) {
    let mut worst: f64 = 0.0;
    for (x, y) in a.rows.iter().zip(&b.rows) {
        assert_eq!((x.n, x.q, x.stat), (y.n, y.q, y.stat));
        worst = worst.max((x.value - y.value).abs() / (x.stderr + y.stderr));
    }
    (a.rows.len() == b.rows.len() && worst <= 3.0, worst)
}

/// Agreement of cov(W(1)) and the mean of 𝕎(1) entrywise.
fn paths_agree(a: &PathEnsemble, b: &PathEnsemble) -> (bool, f64) {
    let d = a.dim;
    let g = a.last();
    let rows = |e: &PathEnsemble| (0..e.samples).map(|i| e.w_at(i, g).to_vec()).collect::<Vec<_>>();
    let (ca, sa) = covariance_stderr(&rows(a), d);
    let (cb, sb) = covariance_stderr(&rows(b), d);
    let mut worst: f64 = 0.0;
    for k in 0..d * d {
        worst = worst.max((ca[k] - cb[k]).abs() / (sa[k] + sb[k]));
        let entry = |e: &PathEnsemble| (0..e.samples).map(|i| e.ww_at(i, g)[k]).collect::<Vec<_>>();
        let (ma, ea) = mean_stderr(&entry(a));
        let (mb, eb) = mean_stderr(&entry(b));
        worst = worst.max((ma - mb).abs() / (ea + eb));
    }
    (worst <= 3.0, worst)
}

#[test]
fn criterion_6_lebesgue_robustness() {
    let mut passes = Vec::new();
    let mut detail = Vec::new();
    for (k, &seed) in SEEDS.iter().enumerate() {
        let leb_moments = moment_run(InitialMeasure::Lebesgue, seed + LEB_OFFSET);
        let (m_ok, m_worst) = moments_agree(&mu_moments()[k], &leb_moments);
        let leb_paths = wip_run(InitialMeasure::Lebesgue, seed + LEB_OFFSET);
        let (p_ok, p_worst) = paths_agree(&mu_paths()[k], &leb_paths);
        passes.push(m_ok && p_ok);
        detail.push(format!("seed {seed}: moments {m_worst:.2} se, paths {p_worst:.2} se"));
    }
    two_of_three(6, &passes, &format!("largest |μ − Lebesgue| in combined stderr: {}", detail.join(", ")));
}

#[test]
fn criterion_7_additive_homogenization() {
    let spec = MapSpec::doubling();
    let fs = FastSlowSpec::new(Drift::Linear(-1.0), NoiseKind::Additive, Observable::preset("cos").unwrap(), vec![0.0])
        .unwrap()
        .center(&spec, -10.0, 10.0)
        .unwrap();
    let sde = SDESpec::new(Drift::Linear(-1.0), Diffusion::scalar(0.5f64.sqrt()), 1e-3, vec![0.0], "ou").unwrap();
    let grid = [0.0, 1.0];
    let mut passes = Vec::new();
    let mut detail = Vec::new();
    for seed in SEEDS {
        let fast = simulate_fastslow(&fs, &spec, 100_000, 10_000, &grid, InitialMeasure::Mu, seed).unwrap();
        let em = euler_maruyama(&sde, 1.0, 10_000, &grid, seed + LEB_OFFSET).unwrap();
        let rep = homogenization_compare(&fast, &em).unwrap();
        let ks = rep.passed_at("ks_two_sample", 1.0);
        let var = rep.passed_at("covariance", 1.0);
        let p = rep.items_for("ks_two_sample", 1.0).next().and_then(|i| i.p_value).unwrap_or(f64::NAN);
        passes.push(ks && var);
        detail.push(format!("seed {seed}: ks p={p:.3}, variance {var}"));
    }
    two_of_three(7, &passes, &detail.join(", "));
}

#[test]
fn criterion_8_semiflow() {
    let spec = SuspensionSpec::new(MapSpec::doubling(), Roof::Affine(0.5), 1.0).unwrap();
    let v = FlowObservable::preset("cos").unwrap().centered(&spec).unwrap();
    let coeffs = flow_coeffs_tower(&spec, &v, 4096).unwrap();
    let scaling = flow_scaling(&spec, &v, &[10.0, 100.0, 1000.0], 10_000, 81).unwrap();
    let last = scaling.rows.last().unwrap();
    let lap = within(last.lap_rate, 1.0 / spec.h_bar, last.lap_rate_stderr);
    let (rep, _) = flow_wip_check(&spec, &v, &coeffs, 10_000.0, 10_000, &uniform_grid(1), 82).unwrap();
    let cov = rep.passed_at("covariance", 1.0);
    let drift = rep.passed_at("mean_levy", 1.0);
    let ok = lap && cov && drift;
    verdict(
        8,
        ok,
        &format!(
            "lap rate {:.5}±{:.1e} vs 1/h̄ {:.5} ({lap}), cov target {:.4} ({cov}), levy mean target {:.4} ({drift})",
            last.lap_rate,
            last.lap_rate_stderr,
            1.0 / spec.h_bar,
            coeffs.cov[0],
            coeffs.drift[0]
        ),
    );
    assert!(ok);
}

#[test]
fn criterion_9_family_continuity() {
    let reference = {
        let spec = lsv();
        tower_coefficients(&spec, &centered_observable(&spec, "linear").unwrap(), 4096, DEFAULT_TAU_CAP).unwrap().estimate
    };
    let mut detail = Vec::new();
    let mut ok = true;
    for n in [1u32, 10, 100] {
        let gamma = 0.25 + 0.1 / n as f64;
        let spec = MapSpec::from_parts(MapKind::Lsv, Some(gamma), None, None).unwrap();
        let v = centered_observable(&spec, "linear").unwrap();
        let est = direct_coeffs(&spec, &v, 10_000, 10_000, &StreamKey::new(90 + n as u64)).unwrap();
        detail.push(format!(
            "γ={gamma}: Σ={:.4}±{:.1e} E={:.4}±{:.1e}",
            est.sigma[0], est.sigma_stderr[0], est.e[0], est.e_stderr[0]
        ));
        if n == 100 {
            ok = within(est.sigma[0], reference.sigma[0], est.sigma_stderr[0] + reference.sigma_stderr[0])
                && within(est.e[0], reference.e[0], est.e_stderr[0] + reference.e_stderr[0]);
        }
    }
    detail.push(format!("γ=0.25 reference Σ={:.4} E={:.4}", reference.sigma[0], reference.e[0]));
    verdict(9, ok, &detail.join(", "));
    assert!(ok);
}
