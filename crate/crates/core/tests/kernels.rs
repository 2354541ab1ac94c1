use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use swe_clt::kernels::*;

fn b(x: f64) -> RieszExponent {
    RieszExponent::new(x).unwrap()
}

/// Midpoint rule on an `m × m` grid; fine for lags of at least two cells,
/// where the kernel is smooth on the product of the cells.
fn cell_covariance_brute(dx: f64, lag: usize, beta: f64, m: usize) -> f64 {
    let h = dx / m as f64;
    let ell = lag as f64 * dx;
    let mut acc = 0.0;
    for i in 0..m {
        let u = (i as f64 + 0.5) * h;
        for j in 0..m {
            let v = (j as f64 + 0.5) * h;
            acc += (ell + u - v).abs().powf(-beta);
        }
    }
    acc * h * h
}

#[test]
fn cell_covariance_against_brute_force() {
    for beta in [0.2, 0.5, 0.8] {
        for dx in [0.25, 1.0] {
            for lag in [2usize, 3, 7] {
                let exact = cell_covariance(dx, lag, b(beta));
                let brute = cell_covariance_brute(dx, lag, beta, 400);
                assert!((exact / brute - 1.0).abs() < 1e-5, "beta={beta} dx={dx} lag={lag}: {exact} vs {brute}");
            }
        }
    }
}

#[test]
fn box_identity_constant_over_random_tuples() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for beta in [0.3, 0.5, 0.7] {
        let e = b(beta);
        let c = e.box_normalization();
        for _ in 0..25 {
            let t = rng.random_range(0.1..2.0);
            let s = rng.random_range(0.1..2.0);
            let x = rng.random_range(-3.0..3.0);
            let xi = rng.random_range(-3.0..3.0);
            let closed = riesz_box_closed(t, s, x, xi, e).unwrap();
            let numeric = riesz_box_numeric(t, s, x, xi, e, 1e-11).unwrap();
            assert!((numeric * c / closed - 1.0).abs() < 1e-6, "({t},{s},{x},{xi}): {numeric} {closed}");
        }
    }
}

#[test]
fn variance_limit_matches_riesz_ball_factor() {
    let e = b(0.5);
    let r = 400.0;
    let ratio = cumulative_window_energy(r, 1.0, e).unwrap() / r.powf(1.5);
    let limit = variance_constant(e, 1.0, |_| 1.0).unwrap() * riesz_ball_factor(e);
    assert!((ratio / limit - 1.0).abs() < 2e-3, "{ratio} vs {limit}");
}

#[test]
fn g_delta_cubic_near_zero() {
    let e = b(0.5);
    let w = WindowFunction::new(10.0, 1.0).unwrap();
    let s2 = cumulative_window_energy(10.0, 1.0, e).unwrap();
    let small = [1e-3, 2e-3, 4e-3];
    let g: Vec<f64> = small.iter().map(|&d| g_delta(w, d, e, s2).unwrap()).collect();
    let slope = (g[2] / g[0]).ln() / 4f64.ln();
    assert!((slope - 3.0).abs() < 0.01, "{slope}");
    for &d in &small {
        assert!(g_delta(w, d, e, s2).unwrap() >= g_delta_lower_bound(w, d, e, s2).unwrap());
    }
}

/// Monte Carlo estimate of the six-fold integral defining Φ, with the
/// cone variables sampled uniformly; β = 0.3 keeps the estimator's
/// variance finite.
#[test]
fn phi_appendix_against_monte_carlo() {
    let (r, t, beta) = (1.0, 1.0, 0.3);
    let exact = phi_appendix(r, t, b(beta), 1e-8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 2_000_000;
    let half = r + t;
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..n {
        let s = rng.random_range(0.0..t);
        let q = rng.random_range(0.0..s);
        let y = rng.random_range(-half..half);
        let yp = rng.random_range(-half..half);
        let h = s - q;
        let z = y + rng.random_range(-h..h);
        let zp = yp + rng.random_range(-h..h);
        let f = phi_window(r, t - s, y).unwrap()
            * phi_window(r, t - s, yp).unwrap()
            * 0.25
            * (y - yp).abs().powf(-beta)
            * (z - zp).abs().powf(-beta);
        let v = f * t * s * (2.0 * half).powi(2) * (2.0 * h).powi(2);
        sum += v;
        sum2 += v * v;
    }
    let mean = sum / n as f64;
    let se = ((sum2 / n as f64 - mean * mean) / n as f64).sqrt();
    assert!((exact - mean).abs() < 4.0 * se, "phi {exact} vs MC {mean} ± {se}");
}

proptest! {
    #[test]
    fn green_is_half_indicator(t in 0.0f64..5.0, x in -6.0f64..6.0) {
        let g = green(t, x).unwrap();
        prop_assert_eq!(g, if x.abs() < t { 0.5 } else { 0.0 });
        prop_assert_eq!(green(t, t).unwrap(), 0.0);
    }

    #[test]
    fn phi_window_bounds(r in 0.1f64..20.0, lag in 0.0f64..5.0, dl in 0.0f64..1.0, y in -30.0f64..30.0) {
        let p = phi_window(r, lag, y).unwrap();
        prop_assert!(p >= 0.0 && p <= lag + 1e-12 && p <= r + 1e-12);
        prop_assert!(phi_window(r, lag + dl, y).unwrap() >= p - 1e-12);
        prop_assert_eq!(p, phi_window(r, lag, -y).unwrap());
    }

    #[test]
    fn cell_covariance_positive_and_decreasing(beta in 0.05f64..0.95, dx in 0.01f64..2.0, lag in 0usize..50) {
        let e = b(beta);
        let c0 = cell_covariance(dx, lag, e);
        let c1 = cell_covariance(dx, lag + 1, e);
        prop_assert!(c0 > 0.0 && c1 > 0.0);
        prop_assert!(c1 < c0);
    }

    #[test]
    fn cumulative_energy_monotone(r in 0.5f64..20.0, d in 0.01f64..2.0, dd in 0.01f64..1.0) {
        let e = b(0.5);
        let a = cumulative_window_energy(r, d, e).unwrap();
        let c = cumulative_window_energy(r, d + dd, e).unwrap();
        prop_assert!(a > 0.0 && c > a);
    }
}
