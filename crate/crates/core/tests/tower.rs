use approx::assert_abs_diff_eq;
use homog_core::dynamics::{MapSpec, Observable, ObservableKind};
use homog_core::rng::{Purpose, StreamKey};
use homog_core::stats::{green_kubo, ks_distance};
use homog_core::tower::{
    build_induced, centered_observable, hypothesis_diagnostics, induce_observable, martingale_decompose,
    return_time, tower_coefficients, ulam_p, TowerModel, DEFAULT_TAU_CAP,
};
use rand::Rng;
use std::f64::consts::PI;

fn lsv() -> MapSpec {
    MapSpec::lsv(0.25, 3.0).unwrap()
}

fn lsv_tower(bins: usize) -> TowerModel {
    ulam_p(&build_induced(&lsv(), DEFAULT_TAU_CAP).unwrap(), bins).unwrap()
}

#[test]
fn cylinders() {
    let d = build_induced(&MapSpec::doubling(), 7).unwrap();
    assert_eq!((d.y_lo, d.y_hi), (0.0, 1.0));
    assert!(d.cylinders.iter().all(|c| c.tau == 1));
    assert_abs_diff_eq!(d.cylinders.iter().map(|c| c.length).sum::<f64>(), 1.0, epsilon = 1e-15);

    let s = build_induced(&lsv(), 100).unwrap();
    let first = s.cylinders[0];
    assert_eq!(first.tau, 1);
    assert_abs_diff_eq!(first.left, 0.75, epsilon = 1e-15);
    assert_abs_diff_eq!(first.right, 1.0, epsilon = 1e-15);
}

#[test]
fn tail_and_cylinders_match_monte_carlo_returns() {
    let spec = lsv();
    let caps = [5u32, 10, 20];
    let tails: Vec<f64> = caps.iter().map(|&c| build_induced(&spec, c).unwrap().tail_lebesgue).collect();
    assert!(tails.windows(2).all(|w| w[1] < w[0]), "{tails:?}");

    let count = 1_000_000;
    let mut rng = StreamKey::new(8).stream(0, Purpose::Start);
    let mut hist = vec![0usize; 21];
    for _ in 0..count {
        let y = 0.5 + 0.5 * rng.gen::<f64>();
        let rt = return_time(&spec, y, 20).unwrap();
        hist[if rt.capped { 0 } else { rt.tau as usize }] += 1;
    }
    let tol = |p: f64| 5.0 * (p * (1.0 - p) / count as f64).sqrt() + 1e-6;
    for (&cap, &tail) in caps.iter().zip(&tails) {
        let beyond = hist[0] + hist[cap as usize + 1..].iter().sum::<usize>();
        let frac = beyond as f64 / count as f64;
        assert!((frac - tail).abs() <= tol(tail), "cap {cap}: {frac} vs {tail}");
    }
    let scheme = build_induced(&spec, 20).unwrap();
    for c in &scheme.cylinders {
        let p = c.length / scheme.y_length();
        let frac = hist[c.tau as usize] as f64 / count as f64;
        assert!((frac - p).abs() <= tol(p), "tau {}: {frac} vs {p}", c.tau);
    }
}

#[test]
fn return_times() {
    let spec = lsv();
    assert_eq!(return_time(&spec, 0.8, 100).unwrap().tau, 1);
    let rt = return_time(&spec, 0.7, 100).unwrap();
    assert_eq!(rt.tau, 2);
    let x1: f64 = 2.0 * 0.7 - 1.0;
    assert_abs_diff_eq!(rt.image, x1 * (1.0 + 2f64.powf(0.25) * x1.powf(0.25)), epsilon = 1e-14);
    assert_abs_diff_eq!(rt.image, 0.7783, epsilon = 1e-4);
    assert_eq!(return_time(&MapSpec::doubling(), 0.6, 100).unwrap().tau, 1);
}

#[test]
fn induced_values() {
    let spec = lsv();
    let c = Observable::new(ObservableKind::Constant(vec![2.5, -1.0]));
    let iv = induce_observable(&spec, &c, 0.7, 100).unwrap();
    assert_eq!(iv.tau, 2);
    assert_abs_diff_eq!(iv.value[0], 5.0, epsilon = 1e-14);
    assert_abs_diff_eq!(iv.value[1], -2.0, epsilon = 1e-14);

    let cos = Observable::preset("cos").unwrap();
    let iv = induce_observable(&MapSpec::doubling(), &cos, 0.6, 100).unwrap();
    assert_abs_diff_eq!(iv.value[0], (1.2 * PI).cos(), epsilon = 1e-14);

    let v = centered_observable(&spec, "linear").unwrap();
    let iv = induce_observable(&spec, &v, 0.7, 100).unwrap();
    let expect = v.eval_vec(0.7)[0] + v.eval_vec(2.0 * 0.7 - 1.0)[0];
    assert_abs_diff_eq!(iv.value[0], expect, epsilon = 1e-14);
}

#[test]
fn transfer_operator() {
    let tower = ulam_p(&build_induced(&MapSpec::doubling(), 1).unwrap(), 256).unwrap();
    let w: Vec<f64> = tower.nodes().iter().map(|y| y * y - 0.3 * y).collect();
    let pw = tower.apply_p(&w, 1);
    for (j, &y) in tower.nodes().iter().enumerate() {
        let f = |x: f64| x * x - 0.3 * x;
        let exact = 0.5 * (f(0.5 * y) + f(0.5 * y + 0.5));
        assert_abs_diff_eq!(pw[j], exact, epsilon = 1e-4);
    }
    assert!(tower.constant_residual() <= 1e-8);
    assert!(lsv_tower(1024).constant_residual() <= 1e-8);
}

#[test]
fn invariant_weights_match_monte_carlo_returns() {
    let spec = lsv();
    let tower = lsv_tower(2048);
    let chains = 1000;
    let mut ys = Vec::with_capacity(chains * 1000);
    for c in 0..chains {
        let mut rng = StreamKey::new(12).stream(c as u64, Purpose::Start);
        let mut y = 0.5 + 0.5 * rng.gen::<f64>();
        for k in 0..1100 {
            let rt = return_time(&spec, y, DEFAULT_TAU_CAP).unwrap();
            y = if rt.capped { 0.5 + 0.5 * rng.gen::<f64>() } else { rt.image };
            if k >= 100 {
                ys.push(y);
            }
        }
    }
    let dist = ks_distance(&ys, tower.cdf_fn()).unwrap();
    assert!(dist <= 0.02, "{dist}");
}

#[test]
fn telescoping_sum_of_return_times() {
    let tower = lsv_tower(4096);
    let from_cylinders = tower.tau_bar_from_cylinders();
    assert!((from_cylinders - tower.tau_bar).abs() <= 1e-6 * tower.tau_bar, "{from_cylinders} vs {}", tower.tau_bar);
}

#[test]
fn decompositions() {
    let doubling = ulam_p(&build_induced(&MapSpec::doubling(), 1).unwrap(), 256).unwrap();
    let induced = doubling.induce(&Observable::preset("cos").unwrap()).unwrap();
    let dec = martingale_decompose(&doubling, &induced, 50).unwrap();
    assert!(dec.chi_prime.iter().all(|v| v.abs() <= 1e-6));
    for (m, p) in dec.m_prime.iter().zip(&induced.phi) {
        assert_abs_diff_eq!(m, p, epsilon = 1e-6);
    }
    let zero = doubling.induce(&Observable::new(ObservableKind::Zero(1))).unwrap();
    let dec = martingale_decompose(&doubling, &zero, 50).unwrap();
    assert!(dec.chi_prime.iter().chain(&dec.m_prime).all(|&v| v == 0.0));

    let tower = lsv_tower(4096);
    for name in ["linear", "cos", "sin", "mixed3"] {
        let v = centered_observable(&lsv(), name).unwrap();
        let induced = tower.induce(&v).unwrap();
        let dec = martingale_decompose(&tower, &induced, 200).unwrap();
        assert!(dec.residual_kernel <= 1e-6 * induced.phi_norm, "{name}: {}", dec.residual_kernel);
        assert!(dec.identity_residual <= dec.residual_series.max(1e-8), "{name}: {}", dec.identity_residual);
    }
}

#[test]
fn doubling_coefficients() {
    let tc = tower_coefficients(&MapSpec::doubling(), &Observable::preset("cos").unwrap(), 256, 1).unwrap();
    assert_abs_diff_eq!(tc.estimate.sigma[0], 0.5, epsilon = 1e-6);
    assert_abs_diff_eq!(tc.estimate.e[0], 0.0, epsilon = 1e-10);
    let tc = tower_coefficients(&lsv(), &Observable::new(ObservableKind::Zero(2)), 256, DEFAULT_TAU_CAP).unwrap();
    assert!(tc.estimate.sigma.iter().chain(&tc.estimate.e).all(|&v| v == 0.0));
}

#[test]
fn lsv_coefficients_agree_with_green_kubo() {
    let spec = lsv();
    let v = centered_observable(&spec, "linear").unwrap();
    let tower = tower_coefficients(&spec, &v, 4096, DEFAULT_TAU_CAP).unwrap().estimate;
    let gk = green_kubo(&spec, &v, 1000, 10_000_000, &StreamKey::new(5)).unwrap();
    for (a, b, sa, sb) in [
        (tower.sigma[0], gk.sigma[0], tower.sigma_stderr[0], gk.sigma_stderr[0]),
        (tower.e[0], gk.e[0], tower.e_stderr[0], gk.e_stderr[0]),
    ] {
        assert!((a - b).abs() <= 3.0 * (sa + sb), "{a} ± {sa} vs {b} ± {sb}");
    }
}

#[test]
fn diagnostics() {
    let doubling = ulam_p(&build_induced(&MapSpec::doubling(), 1).unwrap(), 256).unwrap();
    let induced = doubling.induce(&Observable::preset("cos").unwrap()).unwrap();
    let dec = martingale_decompose(&doubling, &induced, 50).unwrap();
    let rep = hypothesis_diagnostics(&doubling, &dec, &[2.0], &[10_000], 1000, &StreamKey::new(2)).unwrap();
    assert_eq!(rep.tail[0], 0.0);
    let row = &rep.deviations[0];
    assert!(row.mean[0].abs() <= 3.0 * row.stderr[0], "{} ± {}", row.mean[0], row.stderr[0]);

    let spec = lsv();
    let tower = lsv_tower(4096);
    let v = centered_observable(&spec, "linear").unwrap();
    let induced = tower.induce(&v).unwrap();
    let dec = martingale_decompose(&tower, &induced, 200).unwrap();
    let q = [1.0, 10.0, 1000.0];
    let rep = hypothesis_diagnostics(&tower, &dec, &q, &[1000], 1000, &StreamKey::new(2)).unwrap();
    assert!(rep.tail_decreasing());

    // Oracle: m′ = φ′ − χ′∘F + χ′ along Monte Carlo chains of the induced map.
    let nodes = tower.nodes();
    let chi = |y: f64| {
        let t = ((y - nodes[0]) / tower.width()).clamp(0.0, (nodes.len() - 1) as f64);
        let i = (t as usize).min(nodes.len() - 2);
        let f = t - i as f64;
        dec.chi_prime[i] * (1.0 - f) + dec.chi_prime[i + 1] * f
    };
    let mut sums = vec![(0.0, 0.0); q.len()];
    let mut count = 0usize;
    for c in 0..2000 {
        let mut rng = StreamKey::new(3).stream(c, Purpose::Start);
        let mut y = 0.5 + 0.5 * rng.gen::<f64>();
        for k in 0..5100 {
            let phi = induce_observable(&spec, &induced.observable, y, DEFAULT_TAU_CAP).unwrap();
            let rt = return_time(&spec, y, DEFAULT_TAU_CAP).unwrap();
            if k >= 100 && !rt.capped {
                let m = phi.value[0] - chi(rt.image) + chi(y);
                let sq = m * m;
                count += 1;
                for (s, &qq) in sums.iter_mut().zip(&q) {
                    if sq > qq {
                        s.0 += sq;
                        s.1 += sq * sq;
                    }
                }
            }
            y = if rt.capped { 0.5 + 0.5 * rng.gen::<f64>() } else { rt.image };
        }
    }
    let n = count as f64;
    for (k, &(s1, s2)) in sums.iter().enumerate() {
        let mean = s1 / n;
        let se = ((s2 / n - mean * mean) / n).sqrt();
        assert!((rep.tail[k] - mean).abs() <= 3.0 * se, "q={}: {} vs {mean} ± {se}", q[k], rep.tail[k]);
    }
}
