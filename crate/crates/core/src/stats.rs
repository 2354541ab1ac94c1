//! Density estimation and distances to the standard normal law.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf;

use crate::error::{invalid, Error, Result};
use crate::rng;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

#[inline]
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erf::erfc(-z / std::f64::consts::SQRT_2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BandwidthRule {
    Silverman,
    Fixed(f64),
}

/// Uniform evaluation grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl Default for EvalGrid {
    fn default() -> Self {
        Self {
            lo: -6.0,
            hi: 6.0,
            points: 1201,
        }
    }
}

impl EvalGrid {
    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.points - 1) as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        let h = self.step();
        (0..self.points).map(|i| self.lo + i as f64 * h).collect()
    }
}

/// Sorted copy; errors on non-finite entries.
fn sorted_finite(samples: &[f64]) -> Result<Vec<f64>> {
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(invalid("samples contain non-finite values"));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(s)
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, q)
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// `0.9·min(sd, IQR/1.34)·n^{−1/5}`.
pub fn silverman_bandwidth(sorted: &[f64]) -> Result<f64> {
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let sd = (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let iqr = quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    if !(spread > 0.0) {
        return Err(Error::ZeroVariance);
    }
    Ok(0.9 * spread * n.powf(-0.2))
}

/// Density estimate together with its distances to `N(0,1)`.
#[derive(Debug, Clone, Serialize)]
pub struct DensityReport {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
    pub n: usize,
    pub sup_distance: f64,
    pub kolmogorov: f64,
    pub tv_estimate: f64,
}

/// Gaussian KDE on the grid. Kernel tails beyond 8 bandwidths
/// (`< 1e−14` relative) are skipped.
pub fn kde(samples: &[f64], grid: &EvalGrid, rule: BandwidthRule) -> Result<(Vec<f64>, f64)> {
    const MIN: usize = 100;
    if samples.len() < MIN {
        return Err(Error::InsufficientData {
            needed: MIN,
            got: samples.len(),
        });
    }
    let sorted = sorted_finite(samples)?;
    let h = match rule {
        BandwidthRule::Silverman => silverman_bandwidth(&sorted)?,
        BandwidthRule::Fixed(h) if h > 0.0 => h,
        BandwidthRule::Fixed(h) => return Err(invalid(format!("bandwidth must be positive, got {h}"))),
    };
    let n = sorted.len() as f64;
    let norm = INV_SQRT_2PI / (n * h);
    let cut = 8.0 * h;
    let density = grid
        .nodes()
        .into_iter()
        .map(|z| {
            let lo = sorted.partition_point(|&x| x < z - cut);
            let hi = sorted.partition_point(|&x| x <= z + cut);
            let s: f64 = sorted[lo..hi]
                .iter()
                .map(|&x| {
                    let d = (z - x) / h;
                    (-0.5 * d * d).exp()
                })
                .sum();
            s * norm
        })
        .collect();
    Ok((density, h))
}

/// Kolmogorov distance of the empirical CDF to `Φ`.
pub fn kolmogorov_distance(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let sorted = sorted_finite(samples)?;
    let n = sorted.len() as f64;
    Ok(sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal_cdf(x);
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max))
}

/// `(sup |f̂ − φ|, Kolmogorov, ½∫|f̂ − φ|)`.
pub fn distances(grid: &EvalGrid, density: &[f64], samples: &[f64]) -> Result<(f64, f64, f64)> {
    if density.len() != grid.points {
        return Err(invalid("density does not match the grid"));
    }
    let nodes = grid.nodes();
    let diff: Vec<f64> = nodes.iter().zip(density).map(|(&z, &f)| (f - normal_pdf(z)).abs()).collect();
    let sup = diff.iter().copied().fold(0.0, f64::max);
    let h = grid.step();
    let l1 = h * (diff.iter().sum::<f64>() - 0.5 * (diff[0] + diff[diff.len() - 1]));
    Ok((sup, kolmogorov_distance(samples)?, 0.5 * l1))
}

pub fn density_report(samples: &[f64], grid: &EvalGrid, rule: BandwidthRule) -> Result<DensityReport> {
    let (density, bandwidth) = kde(samples, grid, rule)?;
    let (sup_distance, kolmogorov, tv_estimate) = distances(grid, &density, samples)?;
    Ok(DensityReport {
        grid: grid.nodes(),
        density,
        bandwidth,
        n: samples.len(),
        sup_distance,
        kolmogorov,
        tv_estimate,
    })
}

/// Trapezoid integral of a density on the grid.
pub fn grid_mass(grid: &EvalGrid, density: &[f64]) -> f64 {
    let h = grid.step();
    h * (density.iter().sum::<f64>() - 0.5 * (density[0] + density[density.len() - 1]))
}

/// Least-squares fit of `log distance` against `log R`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateFit {
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
}

pub fn rate_fit(ladder: &[(f64, f64)]) -> Result<RateFit> {
    if ladder.len() < 3 {
        return Err(Error::InsufficientData {
            needed: 3,
            got: ladder.len(),
        });
    }
    if let Some(&(r, d)) = ladder.iter().find(|&&(r, d)| !(r > 0.0) || !(d > 0.0)) {
        return Err(invalid(format!("rate_fit needs positive R and distance, got ({r}, {d})")));
    }
    let points: Vec<(f64, f64)> = ladder.iter().map(|&(r, d)| (r.ln(), d.ln())).collect();
    let (slope, intercept, slope_stderr) = ols(&points);
    Ok(RateFit {
        points,
        slope,
        intercept,
        slope_stderr,
    })
}

/// `(slope, intercept, slope standard error)`.
pub fn ols(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let se = if points.len() > 2 {
        (ssr / (n - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    (slope, intercept, se)
}

/// Distances measured on exactly normal samples of the same size.
#[derive(Debug, Clone, Serialize)]
pub struct OracleFloor {
    pub n: usize,
    pub sup: Vec<f64>,
    pub kolmogorov: Vec<f64>,
    pub tv: Vec<f64>,
}

impl OracleFloor {
    pub fn metric(&self, m: Metric) -> &[f64] {
        match m {
            Metric::Sup => &self.sup,
            Metric::Kolmogorov => &self.kolmogorov,
            Metric::Tv => &self.tv,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Sup,
    Kolmogorov,
    Tv,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Sup, Metric::Kolmogorov, Metric::Tv];

    pub fn name(&self) -> &'static str {
        match self {
            Metric::Sup => "sup",
            Metric::Kolmogorov => "kolmogorov",
            Metric::Tv => "tv",
        }
    }

    pub fn of(&self, r: &DensityReport) -> f64 {
        match self {
            Metric::Sup => r.sup_distance,
            Metric::Kolmogorov => r.kolmogorov,
            Metric::Tv => r.tv_estimate,
        }
    }
}

/// Standard normal draws for oracle run `run`.
pub fn oracle_samples(seed: u64, n: usize, run: u64) -> Vec<f64> {
    let mut g = rng::stream(seed, "oracle", &[n as u64, run]);
    (0..n).map(|_| g.sample(StandardNormal)).collect()
}

pub fn oracle_floor(n: usize, runs: usize, seed: u64, grid: &EvalGrid, rule: BandwidthRule) -> Result<OracleFloor> {
    use rayon::prelude::*;
    let reports: Vec<DensityReport> = (0..runs as u64)
        .into_par_iter()
        .map(|run| density_report(&oracle_samples(seed, n, run), grid, rule))
        .collect::<Result<_>>()?;
    Ok(OracleFloor {
        n,
        sup: reports.iter().map(|r| r.sup_distance).collect(),
        kolmogorov: reports.iter().map(|r| r.kolmogorov).collect(),
        tv: reports.iter().map(|r| r.tv_estimate).collect(),
    })
}

/// Remove the estimation floor from a measured distance:
/// `√max(d² − f², 0)` with `f` the oracle median.
pub fn floor_corrected(distance: f64, floor_median: f64) -> f64 {
    (distance * distance - floor_median * floor_median).max(0.0).sqrt()
}

/// Two-sample Kolmogorov–Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InsufficientData { needed: 1, got: 0 });
    }
    let (x, y) = (sorted_finite(a)?, sorted_finite(b)?);
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < x.len() && j < y.len() {
        let v = x[i].min(y[j]);
        while i < x.len() && x[i] <= v {
            i += 1;
        }
        while j < y.len() && y[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let en = (n * m / (n + m)).sqrt();
    let lambda = (en + 0.12 + 0.11 / en) * d;
    Ok((d, kolmogorov_survival(lambda)))
}

/// `P(K > λ)` for the Kolmogorov distribution.
pub fn kolmogorov_survival(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = 2.0 * (-1f64).powf(k - 1.0) * (-2.0 * k * k * lambda * lambda).exp();
        s += term;
        if term.abs() < 1e-16 {
            break;
        }
    }
    s.clamp(0.0, 1.0)
}

/// Mean, standard error, skewness and excess kurtosis.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct Moments {
    pub mean: f64,
    pub stderr: f64,
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub n: usize,
}

pub fn moments(x: &[f64]) -> Moments {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for v in x {
        let d = v - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
    let variance = m2 * n / (n - 1.0);
    Moments {
        mean,
        stderr: (variance / n).sqrt(),
        variance,
        skewness: m3 / m2.powf(1.5),
        excess_kurtosis: m4 / (m2 * m2) - 3.0,
        n: x.len(),
    }
}
