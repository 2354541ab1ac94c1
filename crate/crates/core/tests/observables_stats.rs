use proptest::prelude::*;

use swe_clt::kernels::RieszExponent;
use swe_clt::noise::{build_covariance, sample_field};
use swe_clt::observables::{
    estimate_eta, estimate_eta_at, estimate_sigma2_mc, estimate_sigma2_quadrature, spatial_average, trapezoid_weights,
};
use swe_clt::solver::{solve, Diffusion, Domain, GridSolution, Scheme};
use swe_clt::stats::{
    density_report, grid_mass, ks_two_sample, median, oracle_floor, oracle_samples, rate_fit, BandwidthRule, EvalGrid,
    Metric,
};

fn solutions(diffusion: Diffusion, r: f64, t: f64, div: f64, n: u64) -> Vec<GridSolution> {
    let beta = RieszExponent::new(0.5).unwrap();
    let dom = Domain::for_window(r, t, t / div).unwrap();
    let spec = dom.noise_spec(beta, 77).unwrap();
    let model = build_covariance(&spec).unwrap();
    (0..n)
        .map(|i| {
            let noise = sample_field(&model, &spec, i).unwrap();
            solve(Scheme::WalshSum, &noise, &diffusion, dom.origin()).unwrap()
        })
        .collect()
}

#[test]
fn additive_mc_variance_matches_quadrature() {
    let (r, t) = (2.0, 1.0);
    let d = Diffusion::Const(2.0);
    let raw: Vec<f64> = solutions(d, r, t, 32.0, 4000).iter().map(|s| spatial_average(s, r).unwrap()).collect();
    let beta = RieszExponent::new(0.5).unwrap();
    let mc = estimate_sigma2_mc(&raw, r, t, beta).unwrap();
    let q = estimate_sigma2_quadrature(r, t, beta, &d).unwrap();
    assert!((mc.sigma2 - q.sigma2).abs() < 4.0 * mc.stderr, "{} ± {} vs {}", mc.sigma2, mc.stderr, q.sigma2);
}

#[test]
fn eta_starts_at_sigma_of_initial_value() {
    let sols = solutions(Diffusion::Sin2, 1.0, 1.0, 16.0, 300);
    let pooled = estimate_eta(&sols, &Diffusion::Sin2, &[0.0, 0.5]).unwrap();
    assert!((pooled.eta[0] - (2.0 + 1f64.sin())).abs() < 1e-12);
    let single = estimate_eta_at(&sols, &Diffusion::Sin2, &[0.0, 0.5], 0.25).unwrap();
    let se = (pooled.stderr[1].powi(2) + single.stderr[1].powi(2)).sqrt();
    assert!((pooled.eta[1] - single.eta[1]).abs() < 4.0 * se);
}

#[test]
fn kde_of_normal_sample() {
    let grid = EvalGrid::default();
    let x = oracle_samples(3, 100_000, 0);
    let rep = density_report(&x, &grid, BandwidthRule::Silverman).unwrap();
    assert!(rep.sup_distance <= 0.02, "sup {}", rep.sup_distance);
    assert!((grid_mass(&grid, &rep.density) - 1.0).abs() < 1e-3);
    assert!(rep.kolmogorov < 0.01);
}

#[test]
fn oracle_floor_shrinks_with_sample_size() {
    let grid = EvalGrid::default();
    let small = oracle_floor(1000, 20, 5, &grid, BandwidthRule::Silverman).unwrap();
    let large = oracle_floor(4000, 20, 5, &grid, BandwidthRule::Silverman).unwrap();
    for m in Metric::ALL {
        assert!(median(large.metric(m)) < median(small.metric(m)), "{}", m.name());
    }
}

#[test]
fn ks_two_sample_of_identical_samples() {
    let a = oracle_samples(1, 500, 0);
    let (d, p) = ks_two_sample(&a, &a).unwrap();
    assert_eq!(d, 0.0);
    assert!(p > 0.99);
}

proptest! {
    #[test]
    fn trapezoid_weights_integrate_constants(r in 0.05f64..3.0, dx in 0.01f64..0.5) {
        let half = ((r + 0.5) / dx).ceil() as usize + 2;
        let nx = 2 * half + 1;
        let origin = -(half as f64) * dx;
        let w = trapezoid_weights(origin, dx, nx, r).unwrap();
        let total: f64 = w.iter().sum();
        prop_assert!((total - 2.0 * r).abs() < 1e-10);
        let first: f64 = w.iter().enumerate().map(|(j, c)| c * (origin + j as f64 * dx)).sum();
        prop_assert!(first.abs() < 1e-10);
    }

    #[test]
    fn rate_fit_recovers_power_laws(a in 0.1f64..10.0, p in -2.0f64..2.0) {
        let pts: Vec<(f64, f64)> = [2.0, 4.0, 8.0, 16.0].iter().map(|&r: &f64| (r, a * r.powf(p))).collect();
        let f = rate_fit(&pts).unwrap();
        prop_assert!((f.slope - p).abs() < 1e-10);
    }
}
