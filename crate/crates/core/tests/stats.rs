use homog_core::dynamics::{orbit_fold, InitialMeasure, MapSpec, Observable, ObservableKind};
use homog_core::rng::StreamKey;
use homog_core::stats::{
    direct_coeffs, green_kubo, iterated_sums_stream, moment_table, scaling_exponent, CoefficientEstimate,
    IteratedStats, MomentOptions, Statistic,
};
use homog_core::tower::{centered_observable, tower_coefficients, DEFAULT_TAU_CAP};
use proptest::prelude::*;

fn lsv() -> MapSpec {
    MapSpec::lsv(0.25, 3.0).unwrap()
}

#[test]
fn scalar_sums() {
    let st = iterated_sums_stream(1, [[1.0], [2.0], [3.0]].iter().map(|v| &v[..]));
    assert_eq!((st.s[0], st.ss[0], st.q[0]), (6.0, 11.0, 14.0));
}

proptest! {
    #[test]
    fn pair_identity_on_arbitrary_streams(d in 1usize..4, data in prop::collection::vec(-5.0f64..5.0, 0..600)) {
        let mut st = IteratedStats::new(d);
        for chunk in data.chunks_exact(d) {
            st.push(chunk);
        }
        prop_assert!(st.pair_residual() <= 1e-12);
    }

    #[test]
    fn pair_identity_on_orbits(x0 in 0.0f64..1.0, n in 1usize..5000, which in 0usize..3) {
        let spec = [lsv(), MapSpec::doubling(), MapSpec::quadratic()][which].clone();
        let x0 = if which == 2 { 2.0 * x0 - 1.0 } else { x0 };
        let v = Observable::preset("mixed3").unwrap();
        let st = orbit_fold(&spec, x0, n, IteratedStats::new(3), |mut acc, x| {
            acc.push(&v.eval_vec(x));
            acc
        }).unwrap();
        prop_assert!(st.pair_residual() <= 1e-10);
    }
}

#[test]
fn doubling_second_moment_grows_like_sigma_n() {
    let v = Observable::preset("cos").unwrap();
    let est = direct_coeffs(&MapSpec::doubling(), &v, 10_000, 10_000, &StreamKey::new(1)).unwrap();
    let second = est.sigma[0] * 10_000.0;
    assert!((second - 5000.0).abs() <= 0.05 * 5000.0, "{second}");
    assert!((est.sigma[0] - 0.5).abs() <= 3.0 * est.sigma_stderr[0]);
    assert!(est.e[0].abs() <= 3.0 * est.e_stderr[0]);
}

#[test]
fn green_kubo_doubling() {
    let v = Observable::preset("cos").unwrap();
    let gk = green_kubo(&MapSpec::doubling(), &v, 64, 1_000_000, &StreamKey::new(2)).unwrap();
    assert!((gk.sigma[0] - 0.5).abs() <= 3.0 * gk.sigma_stderr[0], "{} ± {}", gk.sigma[0], gk.sigma_stderr[0]);
    assert!(gk.e[0].abs() <= 3.0 * gk.e_stderr[0], "{} ± {}", gk.e[0], gk.e_stderr[0]);
}

#[test]
fn zero_observable() {
    let z = Observable::new(ObservableKind::Zero(2));
    let spec = lsv();
    let key = StreamKey::new(3);
    let all_zero = |e: &CoefficientEstimate| e.sigma.iter().chain(&e.e).all(|&v| v == 0.0);
    assert!(all_zero(&green_kubo(&spec, &z, 10, 10_000, &key).unwrap()));
    assert!(all_zero(&direct_coeffs(&spec, &z, 100, 1000, &key).unwrap()));

    let grid = [100, 1000, 3000, 10_000];
    let t = moment_table(&spec, &z, &grid, &[2.0], 100, InitialMeasure::Mu, 3, &MomentOptions::default()).unwrap();
    assert!(t.rows.iter().all(|r| r.value == 0.0));
    assert!(scaling_exponent(&t).is_err());
}

#[test]
fn lsv_iterated_moments_grow() {
    let spec = lsv();
    let v = centered_observable(&spec, "linear").unwrap();
    let grid = [100, 1000, 10_000];
    let t = moment_table(&spec, &v, &grid, &[2.0], 500, InitialMeasure::Mu, 4, &MomentOptions::default()).unwrap();
    let ss: Vec<f64> = grid.iter().map(|&n| t.row(n, 2.0, Statistic::SS).unwrap().value).collect();
    assert!(ss.iter().all(|v| v.is_finite()));
    assert!(ss.windows(2).all(|w| w[1] > w[0]), "{ss:?}");
}

#[test]
fn doubling_scaling_exponents() {
    let v = Observable::preset("cos").unwrap();
    let grid = [100, 1000, 3000, 10_000];
    let t = moment_table(&MapSpec::doubling(), &v, &grid, &[2.0], 2000, InitialMeasure::Mu, 5, &MomentOptions::default())
        .unwrap();
    let fits = scaling_exponent(&t).unwrap();
    let s = fits.iter().find(|f| f.stat == Statistic::S).unwrap();
    let ss = fits.iter().find(|f| f.stat == Statistic::SS).unwrap();
    assert!(s.within(0.45, 0.55), "{}", s.slope);
    assert!(ss.within(0.9, 1.1), "{}", ss.slope);
}

#[test]
fn estimator_triangle_on_lsv() {
    let spec = lsv();
    let v = centered_observable(&spec, "mixed3").unwrap();
    let direct = direct_coeffs(&spec, &v, 10_000, 10_000, &StreamKey::new(6)).unwrap();
    let gk = green_kubo(&spec, &v, 1000, 10_000_000, &StreamKey::new(7)).unwrap();
    let tower = tower_coefficients(&spec, &v, 4096, DEFAULT_TAU_CAP).unwrap().estimate;
    for (a, b) in [(&direct, &gk), (&direct, &tower), (&gk, &tower)] {
        for k in 0..9 {
            let ds = (a.sigma[k] - b.sigma[k]).abs();
            assert!(ds <= 3.0 * (a.sigma_stderr[k] + b.sigma_stderr[k]), "{:?}/{:?} Σ[{k}]", a.method, b.method);
            let de = (a.e[k] - b.e[k]).abs();
            assert!(de <= 3.0 * (a.e_stderr[k] + b.e_stderr[k]), "{:?}/{:?} E[{k}]", a.method, b.method);
        }
    }
}

#[test]
fn moment_rows_do_not_depend_on_initial_measure() {
    let spec = lsv();
    let v = centered_observable(&spec, "linear").unwrap();
    let grid = [1000, 10_000];
    let opts = MomentOptions::default();
    let mu = moment_table(&spec, &v, &grid, &[1.0, 2.0], 2000, InitialMeasure::Mu, 8, &opts).unwrap();
    let leb = moment_table(&spec, &v, &grid, &[1.0, 2.0], 2000, InitialMeasure::Lebesgue, 108, &opts).unwrap();
    assert_eq!(mu.rows.len(), leb.rows.len());
    for (a, b) in mu.rows.iter().zip(&leb.rows) {
        assert_eq!((a.n, a.q, a.stat), (b.n, b.q, b.stat));
        assert!((a.value - b.value).abs() <= 3.0 * (a.stderr + b.stderr), "{a:?} vs {b:?}");
    }
}
