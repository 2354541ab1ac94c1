//! Deterministic kernel integrals.
//!
//! Every singular `|y−z|^{−β}` integral is reduced analytically through the
//! antiderivative chain
//!
//! ```text
//! Ψ₀(a) = |a|^{−β},  Ψ(a) = |a|^{2−β}/((1−β)(2−β)),  Ψ'' = Ψ₀,
//! ```
//!
//! (and its higher antiderivatives) before any numerical quadrature, so the
//! remaining integrands are bounded.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::quadrature::{self, breakpoints, integrate, integrate_pieces, Tolerance};

/// Riesz exponent `β ∈ (0, 1)` of the spatial covariance `|x−y|^{−β}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct RieszExponent {
    beta: f64,
}

impl TryFrom<f64> for RieszExponent {
    type Error = crate::Error;

    fn try_from(beta: f64) -> Result<Self> {
        Self::new(beta)
    }
}

impl From<RieszExponent> for f64 {
    fn from(b: RieszExponent) -> f64 {
        b.beta
    }
}

impl RieszExponent {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(invalid(format!("Riesz exponent must lie in (0,1), got {beta}")));
        }
        Ok(Self { beta })
    }

    #[inline]
    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Hurst index of the equivalent fractional noise, `H = 1 − β/2`.
    #[inline]
    pub fn hurst(&self) -> f64 {
        1.0 - 0.5 * self.beta
    }

    /// `(1−β)(2−β)`: the normalisation relating the double integral of the
    /// Riesz kernel over a box to the four-term `|·|^{2−β}` combination.
    #[inline]
    pub fn box_normalization(&self) -> f64 {
        (1.0 - self.beta) * (2.0 - self.beta)
    }

    /// Fourier transform constant: `∫|x|^{−β}e^{−ixξ}dx = c·|ξ|^{β−1}`.
    pub fn fourier_constant(&self) -> f64 {
        2.0 * statrs::function::gamma::gamma(1.0 - self.beta) * (0.5 * PI * self.beta).sin()
    }

    /// First antiderivative of `|a|^{−β}`.
    #[inline]
    pub fn psi_prime(&self, a: f64) -> f64 {
        a.signum() * a.abs().powf(1.0 - self.beta) / (1.0 - self.beta)
    }

    /// Second antiderivative of `|a|^{−β}`.
    #[inline]
    pub fn psi(&self, a: f64) -> f64 {
        a.abs().powf(2.0 - self.beta) / self.box_normalization()
    }

    /// Third antiderivative of `|a|^{−β}`.
    #[inline]
    fn psi3(&self, a: f64) -> f64 {
        let b = self.beta;
        a.signum() * a.abs().powf(3.0 - b) / ((1.0 - b) * (2.0 - b) * (3.0 - b))
    }

    fn norm4(&self) -> f64 {
        let b = self.beta;
        (1.0 - b) * (2.0 - b) * (3.0 - b) * (4.0 - b)
    }
}

/// Averaging window `φ_{R,t}(s,y) = ∫_{−R}^{R} G(t−s, x−y) dx`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowFunction {
    pub r: f64,
    pub t: f64,
}

impl WindowFunction {
    pub fn new(r: f64, t: f64) -> Result<Self> {
        if !(r > 0.0) || !(t > 0.0) {
            return Err(invalid(format!("window needs R > 0 and t > 0, got R={r}, t={t}")));
        }
        Ok(Self { r, t })
    }

    pub fn eval(&self, s: f64, y: f64) -> Result<f64> {
        phi_window(self.r, self.t - s, y)
    }
}

/// Numerically calibrated constants.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct KernelConstants {
    pub variance_constant: f64,
    pub c_beta_estimate: f64,
}

/// Wave Green's function `G(t,x) = ½·1_{|x|<t}`.
pub fn green(t: f64, x: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(invalid(format!("green: time must be nonnegative, got {t}")));
    }
    Ok(if x.abs() < t { 0.5 } else { 0.0 })
}

/// Half the length of `[y−lag, y+lag] ∩ [−R, R]`.
pub fn phi_window(r: f64, lag: f64, y: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(invalid(format!("phi_window: R must be positive, got {r}")));
    }
    if !(lag >= 0.0) {
        return Err(invalid(format!("phi_window: lag must be nonnegative, got {lag}")));
    }
    Ok(phi_unchecked(r, lag, y))
}

#[inline]
pub(crate) fn phi_unchecked(r: f64, lag: f64, y: f64) -> f64 {
    let lo = (y - lag).max(-r);
    let hi = (y + lag).min(r);
    0.5 * (hi - lo).max(0.0)
}

/// Right-hand side of the Riesz box identity:
/// `|d−t−s|^{2−β} + |d+t+s|^{2−β} − |d+t−s|^{2−β} − |d−t+s|^{2−β}`, `d = x−ξ`.
pub fn riesz_box_closed(t: f64, s: f64, x: f64, xi: f64, beta: RieszExponent) -> Result<f64> {
    if !(t >= 0.0 && s >= 0.0) {
        return Err(invalid(format!("riesz_box_closed: need t,s ≥ 0, got t={t}, s={s}")));
    }
    let g = 2.0 - beta.beta();
    let d = x - xi;
    let p = |a: f64| a.abs().powf(g);
    Ok(p(d - t - s) + p(d + t + s) - p(d + t - s) - p(d - t + s))
}

/// `∫∫ 1_{|x−y|≤t} 1_{|ξ−z|≤s} |y−z|^{−β} dy dz` by quadrature.
///
/// The `z` integral is done exactly with the first antiderivative of the
/// kernel; the remaining `y` integrand is continuous with cusps at
/// `y = ξ ± s`, which are used as breakpoints.
pub fn riesz_box_numeric(
    t: f64,
    s: f64,
    x: f64,
    xi: f64,
    beta: RieszExponent,
    tol: f64,
) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(invalid("riesz_box_numeric: tolerance must be positive"));
    }
    if !(t >= 0.0 && s >= 0.0) {
        return Err(invalid(format!("riesz_box_numeric: need t,s ≥ 0, got t={t}, s={s}")));
    }
    if t == 0.0 || s == 0.0 {
        return Ok(0.0);
    }
    let inner = |y: f64| beta.psi_prime(y - xi + s) - beta.psi_prime(y - xi - s);
    let pts = breakpoints(x - t, x + t, &[xi - s, xi + s]);
    let tol = Tolerance::relative(tol).with_max_intervals(20_000);
    Ok(integrate_pieces(inner, &pts, tol, "riesz box")?.value)
}

/// Ratios `closed / numeric` over probe tuples; constant when the closed
/// form is exact up to normalisation.
#[derive(Debug, Clone, Serialize)]
pub struct CBetaCalibration {
    pub beta: f64,
    pub ratios: Vec<f64>,
    pub estimate: f64,
    pub max_over_min: f64,
}

pub fn calibrate_c_beta(
    beta: RieszExponent,
    probes: &[(f64, f64, f64, f64)],
    tol: f64,
) -> Result<CBetaCalibration> {
    if probes.is_empty() {
        return Err(invalid("calibrate_c_beta: no probe tuples"));
    }
    let mut ratios = Vec::with_capacity(probes.len());
    for &(t, s, x, xi) in probes {
        let closed = riesz_box_closed(t, s, x, xi, beta)?;
        let numeric = riesz_box_numeric(t, s, x, xi, beta, tol)?;
        if numeric <= 0.0 {
            return Err(invalid(format!(
                "calibrate_c_beta: degenerate probe (t={t}, s={s})"
            )));
        }
        ratios.push(closed / numeric);
    }
    let estimate = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let max = ratios.iter().copied().fold(f64::MIN, f64::max);
    let min = ratios.iter().copied().fold(f64::MAX, f64::min);
    Ok(CBetaCalibration {
        beta: beta.beta(),
        ratios,
        estimate,
        max_over_min: max / min,
    })
}

/// `|c+h|^p + |c−h|^p − 2|c|^p` without catastrophic cancellation when
/// `|h| ≪ |c|`.
pub(crate) fn second_difference(p: f64, c: f64, h: f64) -> f64 {
    let c = c.abs();
    let h = h.abs();
    if c == 0.0 {
        return 2.0 * h.powf(p);
    }
    let q = h / c;
    if q >= 0.125 {
        return (c + h).powf(p) + (c - h).abs().powf(p) - 2.0 * c.powf(p);
    }
    // 2 Σ_{k≥1} binom(p, 2k) q^{2k}
    let q2 = q * q;
    let mut binom = 1.0;
    let mut qpow = 1.0;
    let mut sum = 0.0;
    for k in 1..=16 {
        let n = 2 * k;
        binom *= (p - (n - 2) as f64) * (p - (n - 1) as f64) / ((n - 1) as f64 * n as f64);
        qpow *= q2;
        let term = binom * qpow;
        sum += term;
        if term.abs() <= 1e-18 * sum.abs() {
            break;
        }
    }
    2.0 * c.powf(p) * sum
}

/// Exact covariance of the Riesz noise integrated over two cells of width
/// `dx` whose left edges are `lag_index·dx` apart:
/// `∫₀^{dx}∫₀^{dx} |ℓ+u−v|^{−β} du dv = Ψ(ℓ+dx) + Ψ(ℓ−dx) − 2Ψ(ℓ)`.
pub fn cell_covariance(dx: f64, lag_index: usize, beta: RieszExponent) -> f64 {
    let ell = lag_index as f64 * dx;
    second_difference(2.0 - beta.beta(), ell, dx) / beta.box_normalization()
}

/// `2^{2−β} ∫₀ᵗ (t−s)² η²(s) ds`.
pub fn variance_constant<F: Fn(f64) -> f64>(beta: RieszExponent, t: f64, eta: F) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(invalid(format!("variance_constant: t must be nonnegative, got {t}")));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    let f = |s: f64| {
        let e = eta(s);
        (t - s) * (t - s) * e * e
    };
    let r = integrate(f, 0.0, t, Tolerance::relative(1e-12), "variance constant")?;
    Ok(2f64.powf(2.0 - beta.beta()) * r.value)
}

/// `∫∫_{[−1,1]²} |x−y|^{−β} dx dy / 2^{2−β} = 2/((1−β)(2−β))`.
///
/// Ratio between the exact large-`R` limit of `σ²_{R,t}/R^{2−β}` under the
/// covariance `|x−y|^{−β}` and [`variance_constant`].
pub fn riesz_ball_factor(beta: RieszExponent) -> f64 {
    2.0 / beta.box_normalization()
}

/// `I(ℓ) = ∫∫ φ(ℓ,y) φ(ℓ,ỹ) |y−ỹ|^{−β} dy dỹ` for the window of half-width
/// `R` and cone lag `ℓ`, in closed form.
pub fn window_energy(r: f64, lag: f64, beta: RieszExponent) -> f64 {
    if lag <= 0.0 {
        return 0.0;
    }
    let p = 4.0 - beta.beta();
    let sd = second_difference(p, 2.0 * r, 2.0 * lag);
    0.5 * (sd - 2.0 * (2.0 * lag).powf(p)) / beta.norm4()
}

/// `∫₀^δ I(ℓ) dℓ`: the Riesz energy of the averaging window over the last
/// `δ` units of time (equal to `σ²_{R,δ}` for `σ ≡ 1`).
pub fn cumulative_window_energy(r: f64, delta: f64, beta: RieszExponent) -> Result<f64> {
    if !(r > 0.0) || !(delta >= 0.0) {
        return Err(invalid(format!(
            "cumulative_window_energy: need R > 0, δ ≥ 0 (R={r}, δ={delta})"
        )));
    }
    if delta == 0.0 {
        return Ok(0.0);
    }
    let pts = breakpoints(0.0, delta, &[r]);
    let tol = Tolerance::relative(1e-13);
    Ok(integrate_pieces(|l| window_energy(r, l, beta), &pts, tol, "window energy")?.value)
}

/// `1 − sin(x)/x`, accurate near zero.
fn one_minus_sinc(x: f64) -> f64 {
    let x2 = x * x;
    if x.abs() < 0.1 {
        // x²/6 − x⁴/120 + x⁶/5040 − x⁸/362880
        x2 / 6.0 * (1.0 - x2 / 20.0 * (1.0 - x2 / 42.0 * (1.0 - x2 / 72.0)))
    } else {
        1.0 - x.sin() / x
    }
}

/// `∫₀^∞ ξ^{β−1} k(ξ) dξ` for a bounded, oscillating `k` with
/// `k(ξ) ≈ tail_coeff·ξ^{−4}` on average at infinity. `period` is the
/// shortest oscillation period of `k`.
fn fourier_half_line<K: Fn(f64) -> f64>(
    beta: RieszExponent,
    period: f64,
    tail_coeff: f64,
    rel_tol: f64,
    k: K,
) -> Result<f64> {
    let b = beta.beta();
    // First panel, singular weight removed by ξ = v^{1/β}.
    let first = integrate(
        |v: f64| k(v.powf(1.0 / b)) / b,
        0.0,
        period.powf(b),
        Tolerance::relative(rel_tol),
        "fourier first panel",
    )?
    .value;
    let mut total = first;
    let panel_tol = Tolerance::relative(rel_tol).with_abs(rel_tol * first.abs() * 1e-3);
    let mut lo = period;
    loop {
        let hi = lo + period;
        let r = integrate(
            |xi: f64| xi.powf(b - 1.0) * k(xi),
            lo,
            hi,
            panel_tol,
            "fourier panel",
        )?;
        total += r.value;
        lo = hi;
        let tail = tail_coeff * lo.powf(b - 4.0) / (4.0 - b);
        if tail < 1e-3 * rel_tol * total.abs() || lo > 1e7 {
            return Ok(total + tail);
        }
    }
}

/// `∫₀^δ I(ℓ) dℓ` evaluated through the Fourier representation
/// `(c/2π) ∫ |ξ|^{β−1} (∫₀^δ sin²(ℓξ)dℓ)/ξ² · 4sin²(Rξ)/ξ² dξ`.
pub fn cumulative_window_energy_fourier(
    r: f64,
    delta: f64,
    beta: RieszExponent,
    rel_tol: f64,
) -> Result<f64> {
    if !(r > 0.0) || !(delta >= 0.0) {
        return Err(invalid("cumulative_window_energy_fourier: need R > 0, δ ≥ 0"));
    }
    if delta == 0.0 {
        return Ok(0.0);
    }
    // ∫₀^δ sin²(ℓξ) dℓ / ξ² = (δ/2)(1 − sinc(2δξ))/ξ²
    let k = |xi: f64| {
        if xi == 0.0 {
            return delta.powi(3) / 3.0 * 4.0 * r * r;
        }
        let s = 0.5 * delta * one_minus_sinc(2.0 * delta * xi) / (xi * xi);
        let w = (r * xi).sin() / xi;
        s * 4.0 * w * w
    };
    let period = PI / r.max(delta);
    let half = fourier_half_line(beta, period, delta, rel_tol, k)?;
    Ok(beta.fourier_constant() / (2.0 * PI) * 2.0 * half)
}

/// `g(δ) = σ_{R,t}^{−2} ∫_{t−δ}^{t} ∫∫ φ(s,y)φ(s,ỹ)|y−ỹ|^{−β} dy dỹ ds`,
/// computed by the Fourier representation with the time integral done
/// exactly.
pub fn g_delta(window: WindowFunction, delta: f64, beta: RieszExponent, sigma2: f64) -> Result<f64> {
    check_g_args(window, delta, sigma2)?;
    Ok(cumulative_window_energy_fourier(window.r, delta, beta, 1e-9)? / sigma2)
}

/// Same quantity as [`g_delta`] through the real-space closed form.
pub fn g_delta_closed(
    window: WindowFunction,
    delta: f64,
    beta: RieszExponent,
    sigma2: f64,
) -> Result<f64> {
    check_g_args(window, delta, sigma2)?;
    Ok(cumulative_window_energy(window.r, delta, beta)? / sigma2)
}

/// Lower bound obtained from
/// `∫₀^δ |Ĝ_s(ξ)|² ds ≥ (2⁴π²)^{−1} (δ∧δ³)/(1+|ξ|²)`.
pub fn g_delta_lower_bound(
    window: WindowFunction,
    delta: f64,
    beta: RieszExponent,
    sigma2: f64,
) -> Result<f64> {
    check_g_args(window, delta, sigma2)?;
    if delta == 0.0 {
        return Ok(0.0);
    }
    let r = window.r;
    let k = |xi: f64| {
        let w = if xi == 0.0 { r } else { (r * xi).sin() / xi };
        4.0 * w * w / (1.0 + xi * xi)
    };
    let half = fourier_half_line(beta, PI / r.max(1.0), 2.0, 1e-9, k)?;
    let factor = delta.min(delta.powi(3)) / (16.0 * PI * PI);
    Ok(beta.fourier_constant() / (2.0 * PI) * 2.0 * half * factor / sigma2)
}

fn check_g_args(window: WindowFunction, delta: f64, sigma2: f64) -> Result<()> {
    if !(delta >= 0.0 && delta <= window.t) {
        return Err(invalid(format!("g_delta: need 0 ≤ δ ≤ t, got δ={delta}")));
    }
    if !(sigma2 > 0.0) {
        return Err(invalid(format!("g_delta: σ² must be positive, got {sigma2}")));
    }
    Ok(())
}

/// Knots of the trapezoid `y ↦ φ(ℓ, y)`.
fn window_knots(r: f64, lag: f64) -> [f64; 4] {
    let a = (r - lag).abs();
    let b = r + lag;
    [-b, -a, a, b]
}

/// Autocorrelation `∫ φ(ℓ,y) φ(ℓ,y−d) dy`, exact (the product of two
/// piecewise-linear functions is integrated with Simpson's rule on every
/// piece, which is exact for quadratics).
pub(crate) fn window_autocorrelation(r: f64, lag: f64, d: f64) -> f64 {
    if lag <= 0.0 {
        return 0.0;
    }
    let k = window_knots(r, lag);
    let lo = k[0].max(k[0] + d);
    let hi = k[3].min(k[3] + d);
    if hi <= lo {
        return 0.0;
    }
    let mut pts = [0.0f64; 10];
    let mut n = 0;
    for &p in k.iter() {
        for q in [p, p + d] {
            if q > lo && q < hi {
                pts[n] = q;
                n += 1;
            }
        }
    }
    pts[n] = lo;
    pts[n + 1] = hi;
    let pts = &mut pts[..n + 2];
    pts.sort_by(f64::total_cmp);
    let f = |y: f64| phi_unchecked(r, lag, y) * phi_unchecked(r, lag, y - d);
    let mut acc = 0.0;
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b > a {
            acc += (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b));
        }
    }
    acc
}

/// `M_s(d) = ∫₀ˢ dℓ ∫∫ G(ℓ,y−z) G(ℓ,y'−z') |z−z'|^{−β} dz dz'` with `d = y−y'`.
pub(crate) fn cone_energy_integrated(s: f64, d: f64, beta: RieszExponent) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    let d = d.abs();
    let h = 2.0 * s;
    if d > 0.0 && h < 0.2 * d {
        // ¼ Σ_{k≥1} (β)_{2k−2} d^{−β−2k+2} h^{2k+1}/(2k+1)!
        let b = beta.beta();
        let mut rising = 1.0;
        let mut fact = 6.0; // 3!
        let mut hpow = h.powi(3);
        let mut dpow = d.powf(-b);
        let mut sum = rising * dpow * hpow / fact;
        for k in 2..=12 {
            let m = (2 * k - 4) as f64;
            rising *= (b + m) * (b + m + 1.0);
            let n = (2 * k + 1) as f64;
            fact *= (n - 1.0) * n;
            hpow *= h * h;
            dpow /= d * d;
            let term = rising * dpow * hpow / fact;
            sum += term;
            if term.abs() <= 1e-17 * sum.abs() {
                break;
            }
        }
        return 0.25 * sum;
    }
    0.125 * (beta.psi3(d + h) - beta.psi3(d - h)) - 0.5 * s * beta.psi(d)
}

/// `Φ_{R,t} = ∫₀ᵗ∫₀ˢ∫ φ(s,y)φ(s,y')G(s−r,y−z)G(s−r,y'−z')|y−y'|^{−β}|z−z'|^{−β}`.
///
/// The `(z, z', r)` integrals are done in closed form, leaving
/// `Φ = 2∫₀ᵗ ds ∫₀^{D} d^{−β} M_s(d) A_{t−s}(d) dd` where `A` is the window
/// autocorrelation; the `d^{−β}` singularity is removed by `d = v^{1/(1−β)}`.
pub fn phi_appendix(r: f64, t: f64, beta: RieszExponent, tol: f64) -> Result<f64> {
    if !(r > 0.0) || !(t >= 0.0) {
        return Err(invalid(format!("phi_appendix: need R > 0, t ≥ 0 (R={r}, t={t})")));
    }
    if !(tol > 0.0) {
        return Err(invalid("phi_appendix: tolerance must be positive"));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    let b = beta.beta();
    let inner_tol = Tolerance::relative(0.1 * tol).with_max_intervals(10_000);
    let inner = |s: f64| -> Result<f64> {
        let lag = t - s;
        if lag <= 0.0 || s <= 0.0 {
            return Ok(0.0);
        }
        let span = 2.0 * (r + lag);
        let kinks = [
            2.0 * s,
            2.0 * (r - lag).abs(),
            2.0 * r.min(lag),
            2.0 * r.max(lag),
        ];
        let pts = breakpoints(0.0, span, &kinks);
        let integrand = |d: f64| {
            d.abs().powf(-b)
                * cone_energy_integrated(s, d, beta)
                * window_autocorrelation(r, lag, d)
        };
        // Singular first piece.
        let d1 = pts[1];
        let first = integrate(
            |v: f64| {
                let d = v.powf(1.0 / (1.0 - b));
                cone_energy_integrated(s, d, beta) * window_autocorrelation(r, lag, d) / (1.0 - b)
            },
            0.0,
            d1.powf(1.0 - b),
            inner_tol,
            "phi appendix (singular piece)",
        )?
        .value;
        let rest = integrate_pieces(integrand, &pts[1..], inner_tol, "phi appendix")?.value;
        Ok(2.0 * (first + rest))
    };
    let mut failure = None;
    let outer_pts = breakpoints(0.0, t, &[t - r]);
    let result = quadrature::integrate_pieces(
        |s| match inner(s) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                0.0
            }
        },
        &outer_pts,
        Tolerance::relative(tol).with_max_intervals(2_000),
        "phi appendix (outer)",
    )?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(result.value)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x: f64) -> RieszExponent {
        RieszExponent::new(x).unwrap()
    }

    #[test]
    fn exponent_domain() {
        assert!(RieszExponent::new(0.0).is_err());
        assert!(RieszExponent::new(1.0).is_err());
        assert!(RieszExponent::new(f64::NAN).is_err());
        let e = b(0.5);
        assert_eq!(e.hurst(), 0.75);
    }

    #[test]
    fn green_values() {
        assert_eq!(green(1.0, 0.5).unwrap(), 0.5);
        assert_eq!(green(1.0, 1.0).unwrap(), 0.0);
        assert_eq!(green(1.0, 1.5).unwrap(), 0.0);
        assert_eq!(green(0.0, 0.0).unwrap(), 0.0);
        assert!(green(-1.0, 0.0).is_err());
    }

    #[test]
    fn phi_values() {
        assert_eq!(phi_window(1.0, 0.5, 0.0).unwrap(), 0.5);
        assert_eq!(phi_window(1.0, 0.5, 1.0).unwrap(), 0.25);
        assert_eq!(phi_window(1.0, 0.5, 3.0).unwrap(), 0.0);
        assert_eq!(phi_window(1.0, 0.5, -1.0).unwrap(), 0.25);
        assert!(phi_window(0.0, 0.5, 0.0).is_err());
        assert!(phi_window(1.0, -0.5, 0.0).is_err());
    }

    #[test]
    fn riesz_box_examples() {
        let v = riesz_box_closed(1.0, 1.0, 0.0, 0.0, b(0.5)).unwrap();
        assert!((v - 2.0 * 2f64.powf(1.5)).abs() < 1e-12);
        assert_eq!(riesz_box_closed(1.0, 0.0, 0.3, -2.0, b(0.5)).unwrap(), 0.0);
        let a = riesz_box_closed(0.7, 1.3, 0.2, -0.4, b(0.3)).unwrap();
        let c = riesz_box_closed(1.3, 0.7, -0.4, 0.2, b(0.3)).unwrap();
        assert!((a - c).abs() < 1e-12);
        assert!(riesz_box_closed(-1.0, 1.0, 0.0, 0.0, b(0.5)).is_err());
    }

    #[test]
    fn numeric_box_far_field_and_degenerate() {
        let beta = b(0.5);
        assert_eq!(riesz_box_numeric(0.0, 1.0, 0.0, 0.0, beta, 1e-8).unwrap(), 0.0);
        let far = riesz_box_numeric(0.5, 0.25, 400.0, 0.0, beta, 1e-10).unwrap();
        let approx = 1.0 * 0.5 * 400f64.powf(-0.5);
        assert!((far / approx - 1.0).abs() < 1e-5);
    }

    #[test]
    fn c_beta_matches_box_normalization() {
        let beta = b(0.5);
        let closed = riesz_box_closed(1.0, 1.0, 0.0, 0.0, beta).unwrap();
        let numeric = riesz_box_numeric(1.0, 1.0, 0.0, 0.0, beta, 1e-10).unwrap();
        assert!((closed / numeric - beta.box_normalization()).abs() < 1e-8);
    }

    #[test]
    fn cell_covariance_examples() {
        let beta = b(0.5);
        assert!((cell_covariance(1.0, 0, beta) - 8.0 / 3.0).abs() < 1e-13);
        let expect = (11f64.powf(1.5) + 9f64.powf(1.5) - 2.0 * 10f64.powf(1.5)) / 0.75;
        assert!((cell_covariance(1.0, 10, beta) - expect).abs() < 1e-10);
        assert!((cell_covariance(1.0, 10, beta) - 0.3165).abs() < 1e-4);
        let far = cell_covariance(1.0, 100_000, beta);
        assert!((far / 100_000f64.powf(-0.5) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn series_second_difference_agrees_with_direct() {
        for &p in &[1.5, 2.2, 3.5] {
            for &(c, h) in &[(10.0, 1.0), (3.0, 0.3), (50.0, 1.0)] {
                let (c, h): (f64, f64) = (c, h);
                let direct = (c + h).powf(p) + (c - h).powf(p) - 2.0 * c.powf(p);
                let s = second_difference(p, c, h);
                assert!((s - direct).abs() <= 1e-9 * direct.abs(), "{p} {c} {h}");
            }
        }
    }

    #[test]
    fn variance_constant_examples() {
        let v = variance_constant(b(0.5), 1.0, |_| 1.0).unwrap();
        assert!((v - 2f64.powf(1.5) / 3.0).abs() < 1e-12);
        assert!((v - 0.94281).abs() < 1e-5);
        assert_eq!(variance_constant(b(0.5), 0.0, |_| 3.0).unwrap(), 0.0);
        let near_one = variance_constant(b(1.0 - 1e-12), 1.0, |_| 2.0).unwrap();
        assert!((near_one - 8.0 / 3.0).abs() < 1e-9);
        assert!(variance_constant(b(0.5), -1.0, |_| 1.0).is_err());
    }

    #[test]
    fn window_energy_small_lag_limit() {
        // For ℓ ≪ R the window is ≈ ℓ on [−R,R].
        let beta = b(0.5);
        let (r, l): (f64, f64) = (20.0, 0.01);
        let approx = l * l * 2.0 * (2.0 * r).powf(1.5) / beta.box_normalization();
        let v = window_energy(r, l, beta);
        assert!((v / approx - 1.0).abs() < 1e-3, "{v} {approx}");
    }

    #[test]
    fn fourier_and_closed_window_energy_agree() {
        for &beta in &[0.2, 0.5, 0.8] {
            let e = b(beta);
            for &(r, d) in &[(1.0, 1.0), (5.0, 0.3), (10.0, 1.0)] {
                let c = cumulative_window_energy(r, d, e).unwrap();
                let f = cumulative_window_energy_fourier(r, d, e, 1e-10).unwrap();
                assert!((c / f - 1.0).abs() < 1e-6, "β={beta} R={r} δ={d}: {c} vs {f}");
            }
        }
    }

    #[test]
    fn autocorrelation_at_zero_is_l2_norm() {
        let (r, lag) = (2.0, 0.5);
        let direct = integrate(
            |y| phi_unchecked(r, lag, y).powi(2),
            -3.0,
            3.0,
            Tolerance::relative(1e-12),
            "l2",
        )
        .unwrap()
        .value;
        assert!((window_autocorrelation(r, lag, 0.0) - direct).abs() < 1e-9);
        assert_eq!(window_autocorrelation(r, lag, 10.0), 0.0);
    }

    #[test]
    fn cone_energy_series_matches_direct() {
        let beta = b(0.5);
        let s = 0.3;
        for &d in &[3.1, 5.0, 40.0] {
            let direct = 0.125 * (beta.psi3(d + 2.0 * s) - beta.psi3(d - 2.0 * s)) - 0.5 * s * beta.psi(d);
            let series = cone_energy_integrated(s, d, beta);
            assert!((series - direct).abs() <= 1e-7 * series.abs(), "{d}: {series} {direct}");
        }
    }

    #[test]
    fn g_delta_zero_and_argument_checks() {
        let w = WindowFunction::new(10.0, 1.0).unwrap();
        assert_eq!(g_delta(w, 0.0, b(0.5), 1.0).unwrap(), 0.0);
        assert!(g_delta(w, 2.0, b(0.5), 1.0).is_err());
        assert!(g_delta(w, 0.5, b(0.5), 0.0).is_err());
    }

    #[test]
    fn phi_appendix_zero_time() {
        assert_eq!(phi_appendix(4.0, 0.0, b(0.5), 1e-6).unwrap(), 0.0);
    }
}
