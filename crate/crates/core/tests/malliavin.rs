use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use swe_clt::campaign::{malliavin_level, CampaignConfig};
use swe_clt::kernels::RieszExponent;
use swe_clt::malliavin::{assemble_report, gradient, gradient_forward, hessian_vector, MalliavinContext};
use swe_clt::noise::{build_covariance, sample_field, NoiseField};
use swe_clt::observables::{estimate_sigma2_quadrature, spatial_average};
use swe_clt::solver::{solve, Diffusion, Domain, GridSolution, Scheme};
use swe_clt::stats::rate_fit;

const R: f64 = 0.5;
const T: f64 = 0.5;

fn setup(scheme: Scheme, seed: u64) -> (Domain, NoiseField, GridSolution) {
    let dom = Domain::for_window(R, T, 1.0 / 16.0).unwrap();
    let spec = dom.noise_spec(RieszExponent::new(0.5).unwrap(), seed).unwrap();
    let model = build_covariance(&spec).unwrap();
    let noise = sample_field(&model, &spec, 0).unwrap();
    let sol = solve(scheme, &noise, &Diffusion::Sin2, dom.origin()).unwrap();
    (dom, noise, sol)
}

fn shifted(noise: &NoiseField, dir: &[f64], eps: f64) -> NoiseField {
    let mut out = noise.clone();
    for (w, d) in out.increments.iter_mut().zip(dir) {
        *w += eps * d;
    }
    out
}

fn direction(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-0.1..0.1)).collect()
}

/// Central differences of the spatial average in noise space.
#[test]
fn gradient_matches_finite_differences() {
    for scheme in [Scheme::WalshSum, Scheme::Leapfrog] {
        let (dom, noise, sol) = setup(scheme, 1);
        let ctx = MalliavinContext::new(&sol, R, 1.0).unwrap();
        let df = gradient(&ctx, &sol, &noise, &Diffusion::Sin2).unwrap();
        let h = direction(df.len(), 2);
        let eps = 1e-5;
        let f = |e: f64| {
            let s = solve(scheme, &shifted(&noise, &h, e), &Diffusion::Sin2, dom.origin()).unwrap();
            spatial_average(&s, R).unwrap()
        };
        let fd = (f(eps) - f(-eps)) / (2.0 * eps);
        let ad: f64 = df.iter().zip(&h).map(|(a, b)| a * b).sum();
        assert!((fd - ad).abs() < 1e-7 * (1.0 + ad.abs()), "{scheme}: {fd} vs {ad}");

        let fwd = gradient_forward(&ctx, &sol, &noise, &Diffusion::Sin2).unwrap();
        for (a, b) in df.iter().zip(&fwd) {
            assert!((a - b).abs() < 1e-12, "{scheme}: adjoint {a} vs forward {b}");
        }
    }
}

#[test]
fn hessian_vector_matches_finite_differences() {
    for scheme in [Scheme::WalshSum, Scheme::Leapfrog] {
        let (dom, noise, sol) = setup(scheme, 3);
        let ctx = MalliavinContext::new(&sol, R, 1.0).unwrap();
        let z = direction(noise.increments.len(), 4);
        let hz = hessian_vector(&ctx, &sol, &noise, &Diffusion::Sin2, &z).unwrap();
        let eps = 1e-5;
        let g = |e: f64| {
            let n = shifted(&noise, &z, e);
            let s = solve(scheme, &n, &Diffusion::Sin2, dom.origin()).unwrap();
            gradient(&ctx, &s, &n, &Diffusion::Sin2).unwrap()
        };
        let (gp, gm) = (g(eps), g(-eps));
        let scale = hz.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        for i in 0..hz.len() {
            let fd = (gp[i] - gm[i]) / (2.0 * eps);
            assert!((fd - hz[i]).abs() < 1e-6 * (1.0 + scale), "{scheme} [{i}]: {fd} vs {}", hz[i]);
        }
    }
}

/// With constant diffusion `DF` does not depend on the noise, and its norm
/// matches the quadrature variance up to discretisation error.
#[test]
fn additive_gram_is_deterministic_and_near_one() {
    let k = 1.3;
    let diffusion = Diffusion::Const(k);
    let (r, t) = (2.0, 1.0);
    let beta = RieszExponent::new(0.5).unwrap();
    let dom = Domain::for_window(r, t, t / 32.0).unwrap();
    let spec = dom.noise_spec(beta, 8).unwrap();
    let model = build_covariance(&spec).unwrap();
    let sigma2 = estimate_sigma2_quadrature(r, t, beta, &diffusion).unwrap().sigma2;
    let grams: Vec<f64> = (0..5)
        .map(|i| {
            let noise = sample_field(&model, &spec, i).unwrap();
            let sol = solve(Scheme::WalshSum, &noise, &diffusion, dom.origin()).unwrap();
            assemble_report(&sol, &noise, &diffusion, r, sigma2).unwrap().gram_norm
        })
        .collect();
    for g in &grams {
        assert!((g / grams[0] - 1.0).abs() < 1e-12);
    }
    assert!((grams[0] - 1.0).abs() < 0.05, "gram {}", grams[0]);
}

/// The second-derivative norm decays at least like `R^{−β/2}` (with slack
/// for Monte Carlo error).
#[test]
fn second_derivative_norm_decays() {
    let mut cfg = CampaignConfig::new(0.5, 1.0, Diffusion::Sin2, vec![2.0, 4.0, 8.0], 100, 21, std::env::temp_dir());
    cfg.pilot_replicates = Some(1000);
    let pts: Vec<(f64, f64)> = cfg
        .r_ladder
        .iter()
        .map(|&r| {
            let l = malliavin_level(&cfg, r).unwrap();
            (r, l.d2_mean.sqrt())
        })
        .collect();
    let fit = rate_fit(&pts).unwrap();
    assert!(fit.slope <= -0.25 + 0.1, "slope {} ± {}", fit.slope, fit.slope_stderr);
}
