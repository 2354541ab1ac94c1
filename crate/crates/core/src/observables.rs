//! Spatial averages, their variance, and the stationarity function `η`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kernels::{self, RieszExponent};
use crate::solver::{Diffusion, GridSolution};

/// Quadrature weights `c_j` with `Σ c_j f(x_j) = ∫_{−R}^{R} f̃` for the
/// piecewise-linear interpolant `f̃` of nodal values (the trapezoid rule
/// when `±R` are nodes).
pub fn trapezoid_weights(origin: f64, dx: f64, nx: usize, r: f64) -> Result<Vec<f64>> {
    if !(r > 0.0) {
        return Err(invalid(format!("averaging half-width must be positive, got {r}")));
    }
    let x_last = origin + (nx - 1) as f64 * dx;
    let slack = 1e-9 * dx;
    if -r < origin - slack || r > x_last + slack {
        return Err(invalid(format!(
            "[−{r}, {r}] is not inside the solution domain [{origin}, {x_last}]"
        )));
    }
    let mut c = vec![0.0; nx];
    for j in 0..nx - 1 {
        let (xa, xb) = (origin + j as f64 * dx, origin + (j + 1) as f64 * dx);
        let a = xa.max(-r);
        let b = xb.min(r);
        if b - a <= slack {
            continue;
        }
        // ∫_a^b of the hat functions of nodes j and j+1.
        let pa = (a - xa) / dx;
        let pb = (b - xa) / dx;
        let len = b - a;
        let mean_p = 0.5 * (pa + pb);
        c[j] += len * (1.0 - mean_p);
        c[j + 1] += len * mean_p;
    }
    Ok(c)
}

/// `∫_{−R}^{R} (u(t, x) − 1) dx` at the final time.
pub fn spatial_average(sol: &GridSolution, r: f64) -> Result<f64> {
    let c = trapezoid_weights(sol.origin, sol.spec.dx, sol.nx(), r)?;
    Ok(weighted_average(&c, sol.final_row()))
}

#[inline]
pub fn weighted_average(weights: &[f64], row: &[f64]) -> f64 {
    weights.iter().zip(row).filter(|(c, _)| **c != 0.0).map(|(c, u)| c * (u - 1.0)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AverageSample {
    pub r: f64,
    pub t: f64,
    pub raw: f64,
    pub normalized: f64,
    pub replicate_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMethod {
    Mc,
    Quadrature,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub sigma2: f64,
    pub method: VarianceMethod,
    pub stderr: f64,
    pub r: f64,
    pub t: f64,
    pub beta: f64,
    /// Set when `t = 0`, where `σ² = 0` and nothing can be normalised.
    pub degenerate: bool,
}

/// Sample variance of raw averages with its jackknife standard error.
pub fn estimate_sigma2_mc(raw: &[f64], r: f64, t: f64, beta: RieszExponent) -> Result<VarianceEstimate> {
    const MIN: usize = 1000;
    if raw.len() < MIN {
        return Err(Error::InsufficientData {
            needed: MIN,
            got: raw.len(),
        });
    }
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let centered: Vec<f64> = raw.iter().map(|x| x - mean).collect();
    let s2: f64 = centered.iter().map(|d| d * d).sum();
    let var = s2 / (n - 1.0);
    // Leave-one-out variances: (S₂ − d_i²·n/(n−1)) / (n−2), d_i centred.
    let loo: Vec<f64> = centered.iter().map(|d| (s2 - d * d * n / (n - 1.0)) / (n - 2.0)).collect();
    let loo_mean = loo.iter().sum::<f64>() / n;
    let jk = ((n - 1.0) / n * loo.iter().map(|v| (v - loo_mean).powi(2)).sum::<f64>()).sqrt();
    if !(var > 0.0) {
        return Err(Error::ZeroVariance);
    }
    Ok(VarianceEstimate {
        sigma2: var,
        method: VarianceMethod::Mc,
        stderr: jk,
        r,
        t,
        beta: beta.beta(),
        degenerate: false,
    })
}

/// `σ²_{R,t} = k² ∫₀ᵗ∫∫ φφ |y−ỹ|^{−β}` for `σ ≡ k`.
pub fn estimate_sigma2_quadrature(
    r: f64,
    t: f64,
    beta: RieszExponent,
    diffusion: &Diffusion,
) -> Result<VarianceEstimate> {
    let k = diffusion
        .constant_value()
        .ok_or_else(|| invalid("quadrature variance needs a constant diffusion"))?;
    if !(t >= 0.0) {
        return Err(invalid(format!("t must be nonnegative, got {t}")));
    }
    let sigma2 = k * k * kernels::cumulative_window_energy(r, t, beta)?;
    Ok(VarianceEstimate {
        sigma2,
        method: VarianceMethod::Quadrature,
        stderr: 0.0,
        r,
        t,
        beta: beta.beta(),
        degenerate: t == 0.0,
    })
}

pub fn normalize(raw: &[f64], first_replicate: u64, variance: &VarianceEstimate) -> Result<Vec<AverageSample>> {
    if !(variance.sigma2 > 0.0) {
        return Err(invalid("cannot normalise by a nonpositive variance"));
    }
    let sd = variance.sigma2.sqrt();
    Ok(raw
        .iter()
        .enumerate()
        .map(|(i, &x)| AverageSample {
            r: variance.r,
            t: variance.t,
            raw: x,
            normalized: x / sd,
            replicate_id: first_replicate + i as u64,
        })
        .collect())
}

/// Estimated `η(s) = E σ(u(s, x))` with standard errors.
#[derive(Debug, Clone, Serialize)]
pub struct EtaCurve {
    pub s: Vec<f64>,
    pub eta: Vec<f64>,
    pub stderr: Vec<f64>,
}

impl EtaCurve {
    /// Piecewise-linear interpolation, constant beyond the ends.
    pub fn eval(&self, s: f64) -> f64 {
        let i = self.s.partition_point(|&v| v <= s);
        if i == 0 {
            return self.eta[0];
        }
        if i == self.s.len() {
            return self.eta[self.s.len() - 1];
        }
        let (s0, s1) = (self.s[i - 1], self.s[i]);
        let p = (s - s0) / (s1 - s0);
        self.eta[i - 1] * (1.0 - p) + self.eta[i] * p
    }
}

fn eta_impl(
    replicates: &[GridSolution],
    diffusion: &Diffusion,
    s_grid: &[f64],
    nodes: &dyn Fn(&GridSolution, usize) -> Vec<usize>,
) -> Result<EtaCurve> {
    const MIN: usize = 100;
    if replicates.len() < MIN {
        return Err(Error::InsufficientData {
            needed: MIN,
            got: replicates.len(),
        });
    }
    let first = &replicates[0];
    if replicates.iter().any(|s| s.spec.nx != first.spec.nx || s.spec.nt != first.spec.nt || s.spec.dt != first.spec.dt) {
        return Err(invalid("estimate_eta: replicates live on different grids"));
    }
    let dt = first.spec.dt;
    let mut eta = Vec::with_capacity(s_grid.len());
    let mut se = Vec::with_capacity(s_grid.len());
    for &s in s_grid {
        let n = (s / dt).round();
        if n < 0.0 || n as usize > first.nt() {
            return Err(invalid(format!("s = {s} is outside the simulated time range")));
        }
        let n = n as usize;
        let idx = nodes(first, n);
        if idx.is_empty() {
            return Err(invalid(format!("no interior nodes at s = {s}")));
        }
        let per_rep: Vec<f64> = replicates
            .iter()
            .map(|sol| idx.iter().map(|&j| diffusion.sigma(sol.at(n, j))).sum::<f64>() / idx.len() as f64)
            .collect();
        let m = per_rep.len() as f64;
        let mean = per_rep.iter().sum::<f64>() / m;
        let var = per_rep.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
        eta.push(mean);
        se.push((var / m).sqrt());
    }
    Ok(EtaCurve {
        s: s_grid.to_vec(),
        eta,
        stderr: se,
    })
}

/// `η(s)` pooled over replicates and over nodes whose backward cone stays
/// inside the domain (by stationarity in `x`).
pub fn estimate_eta(replicates: &[GridSolution], diffusion: &Diffusion, s_grid: &[f64]) -> Result<EtaCurve> {
    eta_impl(replicates, diffusion, s_grid, &|sol, n| {
        let dx = sol.spec.dx;
        let half = -sol.origin;
        let reach = half - n as f64 * sol.spec.dt - 2.0 * dx;
        (0..sol.nx()).filter(|&j| sol.x(j).abs() <= reach).collect()
    })
}

/// `η(s)` at the single node nearest to `x`.
pub fn estimate_eta_at(replicates: &[GridSolution], diffusion: &Diffusion, s_grid: &[f64], x: f64) -> Result<EtaCurve> {
    eta_impl(replicates, diffusion, s_grid, &|sol, _| {
        let j = ((x - sol.origin) / sol.spec.dx).round();
        if j < 0.0 || j as usize >= sol.nx() {
            Vec::new()
        } else {
            vec![j as usize]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::NoiseSpec;
    use crate::solver::Scheme;

    fn synthetic(f: impl Fn(f64) -> f64) -> GridSolution {
        let spec = NoiseSpec::new(RieszExponent::new(0.5).unwrap(), 0.25, 0.25, 17, 1, 0).unwrap();
        let origin = -2.0;
        let mut u = vec![1.0; 2 * 17];
        for j in 0..17 {
            u[17 + j] = f(origin + j as f64 * 0.25);
        }
        GridSolution {
            u,
            spec,
            scheme: Scheme::Leapfrog,
            origin,
            noise_id: 0,
        }
    }

    #[test]
    fn average_examples() {
        assert_eq!(spatial_average(&synthetic(|_| 1.0), 1.0).unwrap(), 0.0);
        assert!(spatial_average(&synthetic(|x| 1.0 + x), 1.0).unwrap().abs() < 1e-14);
        assert!((spatial_average(&synthetic(|_| 2.0), 1.0).unwrap() - 2.0).abs() < 1e-14);
        // Off-grid R is integrated exactly for piecewise-linear data.
        assert!((spatial_average(&synthetic(|_| 2.0), 0.9).unwrap() - 1.8).abs() < 1e-14);
        assert!((spatial_average(&synthetic(|x| 1.0 + x), 0.9).unwrap()).abs() < 1e-14);
        assert!(spatial_average(&synthetic(|_| 2.0), 3.0).is_err());
    }

    #[test]
    fn jackknife_of_known_sample() {
        let raw: Vec<f64> = (0..2000).map(|i| ((i * 7) % 13) as f64 - 6.0).collect();
        let b = RieszExponent::new(0.5).unwrap();
        let v = estimate_sigma2_mc(&raw, 1.0, 1.0, b).unwrap();
        let n = raw.len() as f64;
        let m = raw.iter().sum::<f64>() / n;
        let direct = raw.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((v.sigma2 - direct).abs() < 1e-12);
        assert!(v.stderr > 0.0 && v.stderr < v.sigma2);
        assert!(estimate_sigma2_mc(&raw[..10], 1.0, 1.0, b).is_err());
        let normed = normalize(&raw, 0, &v).unwrap();
        let vn = normed.iter().map(|s| (s.normalized - m / v.sigma2.sqrt()).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((vn - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quadrature_variance() {
        let b = RieszExponent::new(0.5).unwrap();
        let v = estimate_sigma2_quadrature(2.0, 0.0, b, &Diffusion::Const(1.0)).unwrap();
        assert!(v.degenerate && v.sigma2 == 0.0);
        let one = estimate_sigma2_quadrature(2.0, 1.0, b, &Diffusion::Const(1.0)).unwrap();
        let three = estimate_sigma2_quadrature(2.0, 1.0, b, &Diffusion::Const(3.0)).unwrap();
        assert!((three.sigma2 / one.sigma2 - 9.0).abs() < 1e-12);
        assert!(estimate_sigma2_quadrature(2.0, 1.0, b, &Diffusion::Sin2).is_err());
    }

    #[test]
    fn eta_interpolation() {
        let c = EtaCurve {
            s: vec![0.0, 1.0],
            eta: vec![2.0, 4.0],
            stderr: vec![0.0, 0.0],
        };
        assert_eq!(c.eval(0.5), 3.0);
        assert_eq!(c.eval(-1.0), 2.0);
        assert_eq!(c.eval(2.0), 4.0);
    }
}
