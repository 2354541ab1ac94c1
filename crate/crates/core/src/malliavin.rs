//! Malliavin derivatives on the grid.
//!
//! The discrete derivative of a functional with respect to the noise is
//! `∂/∂ΔW[m][k]`. Since `ΔW[m][k] = W(1_cell)`, this partial derivative is
//! the value of `D_{s,y}` for `(s,y)` in cell `(m,k)` (a density), and
//! `H`-inner products become `Σ_m aᵀ T b` with `T = Toeplitz(dt·C(ℓ))`.
//!
//! Fields are computed by transcribing the derivative recursions through
//! the same scheme as the solution. `DF_{R,t}` over all bases is obtained
//! from one adjoint sweep instead of one forward propagation per base.

use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::kernels;
use crate::noise::{self, NoiseField, ToeplitzOperator};
use crate::observables::trapezoid_weights;
use crate::solver::{Diffusion, GridSolution, Scheme};

/// Grid index `(m, k)` of a base point `(s_m, y_k)`.
pub type Base = (usize, usize);

/// `D_{s,y} u` on the grid for one base.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivativeField {
    pub base: Base,
    /// Row-major `(nt+1) × nx`.
    pub values: Vec<f64>,
    pub nx: usize,
    pub nt: usize,
    pub scheme: Scheme,
    pub noise_id: u64,
}

impl DerivativeField {
    #[inline]
    pub fn at(&self, n: usize, j: usize) -> f64 {
        self.values[n * self.nx + j]
    }

    #[inline]
    pub fn row(&self, n: usize) -> &[f64] {
        &self.values[n * self.nx..(n + 1) * self.nx]
    }
}

/// `D_{r,z} D_{s,y} u` on the grid, `r < s`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SecondDerivativeField {
    pub bases: (Base, Base),
    pub values: Vec<f64>,
    pub nx: usize,
    pub nt: usize,
}

impl SecondDerivativeField {
    #[inline]
    pub fn at(&self, n: usize, j: usize) -> f64 {
        self.values[n * self.nx + j]
    }
}

/// Per-replicate Malliavin quantities of `F_{R,t}`.
#[derive(Debug, Clone, Serialize)]
pub struct MalliavinReport {
    /// `D_{s_m, y_k} F`, row-major `nt × nx`.
    pub df: Vec<f64>,
    /// `w(s_m, y_k) = φ_{R,t}(s_m, y_k) σ(u[m][k]) / σ_{R,t}`.
    pub w: Vec<f64>,
    pub gram_norm: f64,
    pub stein_pairing: f64,
    pub nt: usize,
    pub nx: usize,
}

fn check_provenance(sol: &GridSolution, noise: &NoiseField) -> Result<()> {
    if sol.noise_id != noise.id || sol.spec.nx != noise.spec.nx || sol.spec.nt != noise.spec.nt {
        return Err(invalid("solution and noise field do not share provenance"));
    }
    Ok(())
}

/// Value at `(n, j)` of the scheme's discrete Green's function for a unit
/// impulse in cell `base`.
///
/// Walsh-sum: `½·1_{|j−k|<n−m}`. Leapfrog: the impulse weight (`½` for the
/// first step, `1` afterwards) on nodes of matching parity inside the cone.
pub fn grid_green(scheme: Scheme, base: Base, n: usize, j: usize) -> f64 {
    let (m, k) = base;
    if n <= m {
        return 0.0;
    }
    let dist = j.abs_diff(k);
    let steps = n - m;
    if dist >= steps {
        return 0.0;
    }
    match scheme {
        Scheme::WalshSum => 0.5,
        Scheme::Leapfrog => {
            if (steps - 1 - dist) % 2 == 0 {
                if m == 0 {
                    0.5
                } else {
                    1.0
                }
            } else {
                0.0
            }
        }
    }
}

/// Prefix sums of rows, for sums over cone windows `|k−j| ≤ reach`.
struct ConeSums {
    nx: usize,
    prefix: Vec<f64>,
}

impl ConeSums {
    fn new(levels: usize, nx: usize) -> Self {
        Self {
            nx,
            prefix: vec![0.0; levels * (nx + 1)],
        }
    }

    fn set(&mut self, level: usize, values: impl Iterator<Item = f64>) {
        let p = &mut self.prefix[level * (self.nx + 1)..(level + 1) * (self.nx + 1)];
        p[0] = 0.0;
        for (k, v) in values.enumerate() {
            p[k + 1] = p[k] + v;
        }
    }

    #[inline]
    fn window(&self, level: usize, j: usize, reach: usize) -> f64 {
        let p = &self.prefix[level * (self.nx + 1)..];
        let lo = j.saturating_sub(reach);
        let hi = (j + reach + 1).min(self.nx);
        p[hi] - p[lo]
    }
}

/// Solve the linear recursion
/// `Y = seed + Σ G·(σ′(u)·ΔW·Y + forcing)` from step `start` on, in the
/// scheme of `sol`. `seed_row(n, j)` is the Walsh seed term, `impulse` the
/// leapfrog seed `(step, node, value)` written into row `start + 1`.
#[allow(clippy::too_many_arguments)]
fn propagate_linear(
    sol: &GridSolution,
    noise: &NoiseField,
    diffusion: &Diffusion,
    start: usize,
    impulse: (usize, f64),
    walsh_seed: &dyn Fn(usize, usize) -> f64,
    forcing: &dyn Fn(usize, usize) -> f64,
) -> Vec<f64> {
    let (nx, nt) = (sol.nx(), sol.nt());
    let mut y = vec![0.0; (nt + 1) * nx];
    if start >= nt {
        return y;
    }
    match sol.scheme {
        Scheme::Leapfrog => {
            let (k0, v0) = impulse;
            y[(start + 1) * nx + k0] = v0;
            for n in start + 1..nt {
                let (head, tail) = y.split_at_mut((n + 1) * nx);
                let prev = &head[(n - 1) * nx..n * nx];
                let cur = &head[n * nx..];
                let next = &mut tail[..nx];
                let u = sol.row(n);
                let w = noise.row(n);
                for j in 0..nx {
                    let left = if j > 0 { cur[j - 1] } else { 0.0 };
                    let right = if j + 1 < nx { cur[j + 1] } else { 0.0 };
                    next[j] = left + right - prev[j]
                        + diffusion.sigma_prime(u[j]) * w[j] * cur[j]
                        + forcing(n, j);
                }
            }
        }
        Scheme::WalshSum => {
            let mut sums = ConeSums::new(nt, nx);
            for n in start + 1..=nt {
                let m = n - 1;
                if m > start {
                    let u = sol.row(m);
                    let w = noise.row(m);
                    let cur = &y[m * nx..(m + 1) * nx];
                    let vals: Vec<f64> = (0..nx)
                        .map(|k| diffusion.sigma_prime(u[k]) * w[k] * cur[k] + forcing(m, k))
                        .collect();
                    sums.set(m, vals.into_iter());
                }
                for j in 0..nx {
                    let mut acc = 0.0;
                    for m in start + 1..n {
                        acc += sums.window(m, j, n - m - 1);
                    }
                    y[n * nx + j] = walsh_seed(n, j) + 0.5 * acc;
                }
            }
        }
    }
    y
}

/// `D_{s,y} u` for the base `(m₀, k₀)`.
pub fn first_derivative(
    sol: &GridSolution,
    noise: &NoiseField,
    diffusion: &Diffusion,
    base: Base,
) -> Result<DerivativeField> {
    check_provenance(sol, noise)?;
    let (m0, k0) = base;
    if m0 >= sol.nt() || k0 >= sol.nx() {
        return Err(invalid(format!("base {base:?} is outside the noise grid")));
    }
    let amp = diffusion.sigma(sol.at(m0, k0));
    let scheme = sol.scheme;
    let seed_weight = grid_green(Scheme::Leapfrog, base, m0 + 1, k0);
    let values = propagate_linear(
        sol,
        noise,
        diffusion,
        m0,
        (k0, seed_weight * amp),
        &|n, j| amp * grid_green(Scheme::WalshSum, base, n, j),
        &|_, _| 0.0,
    );
    Ok(DerivativeField {
        base,
        values,
        nx: sol.nx(),
        nt: sol.nt(),
        scheme,
        noise_id: noise.id,
    })
}

/// `D_{r,z} D_{s,y} u` from the two first-derivative fields.
pub fn second_derivative(
    sol: &GridSolution,
    noise: &NoiseField,
    diffusion: &Diffusion,
    d_rz: &DerivativeField,
    d_sy: &DerivativeField,
) -> Result<SecondDerivativeField> {
    check_provenance(sol, noise)?;
    if d_rz.noise_id != noise.id || d_sy.noise_id != noise.id || d_rz.scheme != sol.scheme || d_sy.scheme != sol.scheme {
        return Err(invalid("derivative fields do not belong to this solution"));
    }
    let (r, s) = (d_rz.base, d_sy.base);
    if r.0 >= s.0 {
        return Err(invalid(format!("second derivative needs r < s, got bases {r:?}, {s:?}")));
    }
    let (m2, k2) = s;
    let amp = diffusion.sigma_prime(sol.at(m2, k2)) * d_rz.at(m2, k2);
    let forcing = |n: usize, j: usize| {
        diffusion.sigma_second(sol.at(n, j)) * d_rz.at(n, j) * d_sy.at(n, j) * noise.get(n, j)
    };
    let seed_weight = grid_green(Scheme::Leapfrog, s, m2 + 1, k2);
    let values = propagate_linear(
        sol,
        noise,
        diffusion,
        m2,
        (k2, seed_weight * amp),
        &|n, j| amp * grid_green(Scheme::WalshSum, s, n, j),
        &forcing,
    );
    Ok(SecondDerivativeField {
        bases: (r, s),
        values,
        nx: sol.nx(),
        nt: sol.nt(),
    })
}

/// Precomputed grid data for the functional `F_{R,t}`.
#[derive(Debug, Clone)]
pub struct MalliavinContext {
    pub r: f64,
    pub sigma2: f64,
    /// Trapezoid weights over `[−R, R]` divided by `σ_{R,t}`.
    pub weights: Vec<f64>,
    /// `φ_{R,t}(s_m, x_k)`, row-major `nt × nx`.
    pub window: Vec<f64>,
    pub gram: ToeplitzOperator,
    nx: usize,
    nt: usize,
}

impl MalliavinContext {
    pub fn new(sol: &GridSolution, r: f64, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0) {
            return Err(invalid(format!("sigma2 must be positive, got {sigma2}")));
        }
        let (nx, nt) = (sol.nx(), sol.nt());
        let spec = sol.spec;
        let sd = sigma2.sqrt();
        let weights: Vec<f64> = trapezoid_weights(sol.origin, spec.dx, nx, r)?
            .into_iter()
            .map(|c| c / sd)
            .collect();
        let t = nt as f64 * spec.dt;
        let mut window = vec![0.0; nt * nx];
        for m in 0..nt {
            let lag = t - m as f64 * spec.dt;
            for k in 0..nx {
                window[m * nx + k] = kernels::phi_window(r, lag, sol.x(k))?;
            }
        }
        let row: Vec<f64> = (0..nx)
            .map(|l| spec.dt * kernels::cell_covariance(spec.dx, l, spec.beta))
            .collect();
        Ok(Self {
            r,
            sigma2,
            weights,
            window,
            gram: ToeplitzOperator::new(&row)?,
            nx,
            nt,
        })
    }

    fn check(&self, sol: &GridSolution) -> Result<()> {
        if sol.nx() != self.nx || sol.nt() != self.nt {
            return Err(invalid("Malliavin context was built for a different grid"));
        }
        Ok(())
    }

    /// `Σ_m aᵀ T b` over time rows.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        let nx = self.nx;
        (0..self.nt)
            .map(|m| self.gram.bilinear(&a[m * nx..(m + 1) * nx], &b[m * nx..(m + 1) * nx]))
            .sum()
    }
}

/// Adjoint state `λ[n][j] = ∂F/∂u[n][j]` (leapfrog) or the cone-summed
/// adjoint `g[n][j] = ∂F/∂(σ(u)ΔW)[n][j]` (Walsh-sum), row-major over
/// `(nt+2) × nx` resp. `nt × nx`.
fn adjoint(ctx: &MalliavinContext, sol: &GridSolution, noise: &NoiseField, diffusion: &Diffusion) -> Vec<f64> {
    let (nx, nt) = (sol.nx(), sol.nt());
    match sol.scheme {
        Scheme::Leapfrog => {
            let mut a = vec![0.0; (nt + 2) * nx];
            a[nt * nx..(nt + 1) * nx].copy_from_slice(&ctx.weights);
            for n in (1..nt).rev() {
                let (head, tail) = a.split_at_mut((n + 1) * nx);
                let out = &mut head[n * nx..];
                let next = &tail[..nx];
                let next2 = &tail[nx..2 * nx];
                let u = sol.row(n);
                let w = noise.row(n);
                for j in 0..nx {
                    let left = if j > 0 { next[j - 1] } else { 0.0 };
                    let right = if j + 1 < nx { next[j + 1] } else { 0.0 };
                    out[j] = left + right + next[j] * diffusion.sigma_prime(u[j]) * w[j] - next2[j];
                }
            }
            a
        }
        Scheme::WalshSum => {
            // λ[N] = weights, λ[n] = σ′ΔW g[n] for n < N,
            // g[n][j] = ½ Σ_{n'>n} Σ_{|j'−j|<n'−n} λ[n'][j'].
            let mut g = vec![0.0; nt * nx];
            let mut sums = ConeSums::new(nt + 1, nx);
            sums.set(nt, ctx.weights.iter().copied());
            for n in (0..nt).rev() {
                for j in 0..nx {
                    let mut acc = 0.0;
                    for np in n + 1..=nt {
                        acc += sums.window(np, j, np - n - 1);
                    }
                    g[n * nx + j] = 0.5 * acc;
                }
                let u = sol.row(n);
                let w = noise.row(n);
                let gn = &g[n * nx..(n + 1) * nx];
                sums.set(n, (0..nx).map(|k| diffusion.sigma_prime(u[k]) * w[k] * gn[k]));
            }
            g
        }
    }
}

/// `D F_{R,t}` at every base, by one adjoint sweep.
pub fn gradient(ctx: &MalliavinContext, sol: &GridSolution, noise: &NoiseField, diffusion: &Diffusion) -> Result<Vec<f64>> {
    check_provenance(sol, noise)?;
    ctx.check(sol)?;
    let (nx, nt) = (sol.nx(), sol.nt());
    let adj = adjoint(ctx, sol, noise, diffusion);
    let mut df = vec![0.0; nt * nx];
    for m in 0..nt {
        let u = sol.row(m);
        for k in 0..nx {
            let s = diffusion.sigma(u[k]);
            df[m * nx + k] = match sol.scheme {
                Scheme::Leapfrog => {
                    let w = if m == 0 { 0.5 } else { 1.0 };
                    w * adj[(m + 1) * nx + k] * s
                }
                Scheme::WalshSum => adj[m * nx + k] * s,
            };
        }
    }
    Ok(df)
}

/// `D F_{R,t}` assembled base by base from [`first_derivative`]; cost
/// `O(nt²·nx²)`, used to cross-check [`gradient`].
pub fn gradient_forward(
    ctx: &MalliavinContext,
    sol: &GridSolution,
    noise: &NoiseField,
    diffusion: &Diffusion,
) -> Result<Vec<f64>> {
    ctx.check(sol)?;
    let (nx, nt) = (sol.nx(), sol.nt());
    let mut df = vec![0.0; nt * nx];
    for m in 0..nt {
        for k in 0..nx {
            let d = first_derivative(sol, noise, diffusion, (m, k))?;
            df[m * nx + k] = d.row(nt).iter().zip(&ctx.weights).map(|(a, b)| a * b).sum();
        }
    }
    Ok(df)
}

/// Hessian-vector product `(D²F) z`, with `z` an `nt × nx` direction in
/// noise space. Forward tangent plus adjoint tangent sweep.
pub fn hessian_vector(
    ctx: &MalliavinContext,
    sol: &GridSolution,
    noise: &NoiseField,
    diffusion: &Diffusion,
    z: &[f64],
) -> Result<Vec<f64>> {
    check_provenance(sol, noise)?;
    ctx.check(sol)?;
    let (nx, nt) = (sol.nx(), sol.nt());
    if z.len() != nt * nx {
        return Err(invalid("hessian_vector: direction has the wrong shape"));
    }
    let s = |n: usize, j: usize| diffusion.sigma(sol.at(n, j));
    let sp = |n: usize, j: usize| diffusion.sigma_prime(sol.at(n, j));
    let spp = |n: usize, j: usize| diffusion.sigma_second(sol.at(n, j));
    let dw = |n: usize, j: usize| noise.get(n, j);
    let zz = |n: usize, j: usize| z[n * nx + j];
    let adj = adjoint(ctx, sol, noise, diffusion);
    let mut out = vec![0.0; nt * nx];
    match sol.scheme {
        Scheme::Leapfrog => {
            // Tangent of the solution.
            let mut ud = vec![0.0; (nt + 1) * nx];
            for j in 0..nx {
                ud[nx + j] = 0.5 * s(0, j) * zz(0, j);
            }
            for n in 1..nt {
                for j in 0..nx {
                    let left = if j > 0 { ud[n * nx + j - 1] } else { 0.0 };
                    let right = if j + 1 < nx { ud[n * nx + j + 1] } else { 0.0 };
                    ud[(n + 1) * nx + j] = left + right - ud[(n - 1) * nx + j]
                        + sp(n, j) * ud[n * nx + j] * dw(n, j)
                        + s(n, j) * zz(n, j);
                }
            }
            // Tangent of the adjoint.
            let mut ad = vec![0.0; (nt + 2) * nx];
            for n in (1..nt).rev() {
                for j in 0..nx {
                    let nb = |jj: isize| -> f64 {
                        if jj < 0 || jj as usize >= nx {
                            0.0
                        } else {
                            ad[(n + 1) * nx + jj as usize]
                        }
                    };
                    let ji = j as isize;
                    let a1 = adj[(n + 1) * nx + j];
                    ad[n * nx + j] = nb(ji - 1) + nb(ji + 1) + ad[(n + 1) * nx + j] * sp(n, j) * dw(n, j)
                        + a1 * (spp(n, j) * ud[n * nx + j] * dw(n, j) + sp(n, j) * zz(n, j))
                        - ad[(n + 2) * nx + j];
                }
            }
            for m in 0..nt {
                let w = if m == 0 { 0.5 } else { 1.0 };
                for k in 0..nx {
                    out[m * nx + k] = w
                        * (ad[(m + 1) * nx + k] * s(m, k) + adj[(m + 1) * nx + k] * sp(m, k) * ud[m * nx + k]);
                }
            }
        }
        Scheme::WalshSum => {
            // u̇[n][j] = ½ Σ_{m<n} Σ_cone (σ′ u̇ ΔW + σ z)[m][k]
            let mut ud = vec![0.0; (nt + 1) * nx];
            let mut sums = ConeSums::new(nt, nx);
            for n in 1..=nt {
                let m = n - 1;
                let vals: Vec<f64> = (0..nx)
                    .map(|k| sp(m, k) * ud[m * nx + k] * dw(m, k) + s(m, k) * zz(m, k))
                    .collect();
                sums.set(m, vals.into_iter());
                for j in 0..nx {
                    let acc: f64 = (0..n).map(|mm| sums.window(mm, j, n - mm - 1)).sum();
                    ud[n * nx + j] = 0.5 * acc;
                }
            }
            // λ̇[N] = 0; λ̇[n] = (σ″u̇ΔW + σ′z) g[n] + σ′ΔW ġ[n];
            // ġ[n] = ½ Σ_{n'>n} cone sums of λ̇[n'].
            let g = &adj;
            let mut gd = vec![0.0; nt * nx];
            let mut sums = ConeSums::new(nt + 1, nx);
            sums.set(nt, std::iter::repeat_n(0.0, nx));
            for n in (0..nt).rev() {
                for j in 0..nx {
                    let acc: f64 = (n + 1..=nt).map(|np| sums.window(np, j, np - n - 1)).sum();
                    gd[n * nx + j] = 0.5 * acc;
                }
                let vals: Vec<f64> = (0..nx)
                    .map(|k| {
                        (spp(n, k) * ud[n * nx + k] * dw(n, k) + sp(n, k) * zz(n, k)) * g[n * nx + k]
                            + sp(n, k) * dw(n, k) * gd[n * nx + k]
                    })
                    .collect();
                sums.set(n, vals.into_iter());
            }
            for m in 0..nt {
                for k in 0..nx {
                    out[m * nx + k] = gd[m * nx + k] * s(m, k) + g[m * nx + k] * sp(m, k) * ud[m * nx + k];
                }
            }
        }
    }
    Ok(out)
}

/// Unbiased one-probe estimate of `‖D²F‖²_{H⊗H} = tr(T H T H)`: with `z`
/// an independent noise sample (covariance `T`), `E[(Hz)ᵀ T (Hz)]` equals it.
pub fn d2_norm_sq_estimate(
    ctx: &MalliavinContext,
    sol: &GridSolution,
    noise: &NoiseField,
    diffusion: &Diffusion,
    probe: &NoiseField,
) -> Result<f64> {
    if probe.spec.nx != sol.nx() || probe.spec.nt != sol.nt() {
        return Err(invalid("probe field has the wrong shape"));
    }
    let hz = hessian_vector(ctx, sol, noise, diffusion, &probe.increments)?;
    Ok(ctx.inner(&hz, &hz))
}

pub fn assemble_report_with(
    ctx: &MalliavinContext,
    sol: &GridSolution,
    noise: &NoiseField,
    diffusion: &Diffusion,
) -> Result<MalliavinReport> {
    let df = gradient(ctx, sol, noise, diffusion)?;
    let (nx, nt) = (sol.nx(), sol.nt());
    let sd = ctx.sigma2.sqrt();
    let mut w = vec![0.0; nt * nx];
    for m in 0..nt {
        for k in 0..nx {
            w[m * nx + k] = ctx.window[m * nx + k] * diffusion.sigma(sol.at(m, k)) / sd;
        }
    }
    let gram_norm = ctx.inner(&df, &df);
    let stein_pairing = ctx.inner(&df, &w);
    if !gram_norm.is_finite() || !stein_pairing.is_finite() {
        return Err(Error::NumericalBlowup { n: nt, j: 0 });
    }
    Ok(MalliavinReport {
        df,
        w,
        gram_norm,
        stein_pairing,
        nt,
        nx,
    })
}

pub fn assemble_report(
    sol: &GridSolution,
    noise: &NoiseField,
    diffusion: &Diffusion,
    r: f64,
    sigma2: f64,
) -> Result<MalliavinReport> {
    let ctx = MalliavinContext::new(sol, r, sigma2)?;
    assemble_report_with(&ctx, sol, noise, diffusion)
}

/// Empirical small-ball table for `‖DF‖²_H`.
#[derive(Debug, Clone, Serialize)]
pub struct SmallBallTable {
    /// `(ε, fraction of gram_norm < ε)`.
    pub rows: Vec<(f64, f64)>,
    pub min: f64,
    pub quantile_01: f64,
    pub n: usize,
}

pub fn small_ball_probe(gram_norms: &[f64], eps_grid: &[f64]) -> Result<SmallBallTable> {
    if gram_norms.len() < 1000 {
        return Err(Error::InsufficientData {
            needed: 1000,
            got: gram_norms.len(),
        });
    }
    let mut sorted = gram_norms.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let rows = eps_grid
        .iter()
        .map(|&e| (e, sorted.partition_point(|&g| g < e) as f64 / n as f64))
        .collect();
    Ok(SmallBallTable {
        rows,
        min: sorted[0],
        quantile_01: crate::stats::quantile_sorted(&sorted, 0.01),
        n,
    })
}

/// Convenience: a sample of the noise law on the same grid, used as a
/// Hutchinson probe.
pub fn probe_field(model: &noise::CovarianceModel, sol: &GridSolution, replicate: u64) -> Result<NoiseField> {
    noise::sample_field_stream(model, &sol.spec, "hutchinson-probe", replicate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::RieszExponent;
    use crate::noise::{build_covariance, sample_field};
    use crate::solver::{solve, Domain};

    fn setup(scheme: Scheme, diffusion: Diffusion) -> (GridSolution, NoiseField) {
        let d = Domain::for_window(0.5, 0.25, 1.0 / 16.0).unwrap();
        let spec = d.noise_spec(RieszExponent::new(0.5).unwrap(), 5).unwrap();
        let m = build_covariance(&spec).unwrap();
        // Inflate the noise so nonlinear terms matter.
        let mut f = sample_field(&m, &spec, 0).unwrap();
        f.increments.iter_mut().for_each(|v| *v *= 4.0);
        let f = NoiseField::from_increments(spec, f.increments).unwrap();
        (solve(scheme, &f, &diffusion, d.origin()).unwrap(), f)
    }

    fn perturbed(sol: &GridSolution, noise: &NoiseField, diffusion: &Diffusion, idx: usize, h: f64) -> GridSolution {
        let mut inc = noise.increments.clone();
        inc[idx] += h;
        let f = NoiseField::from_increments(noise.spec, inc).unwrap();
        solve(sol.scheme, &f, diffusion, sol.origin).unwrap()
    }

    #[test]
    fn first_derivative_matches_finite_differences() {
        for scheme in [Scheme::Leapfrog, Scheme::WalshSum] {
            let diff = Diffusion::Sin2;
            let (sol, noise) = setup(scheme, diff);
            let nx = sol.nx();
            for base in [(0usize, nx / 2), (2, nx / 2 + 1)] {
                let d = first_derivative(&sol, &noise, &diff, base).unwrap();
                let h = 1e-6;
                let idx = base.0 * nx + base.1;
                let up = perturbed(&sol, &noise, &diff, idx, h);
                let dn = perturbed(&sol, &noise, &diff, idx, -h);
                for n in 0..=sol.nt() {
                    for j in 0..nx {
                        let fd = (up.at(n, j) - dn.at(n, j)) / (2.0 * h);
                        assert!((fd - d.at(n, j)).abs() < 1e-6, "{scheme} {base:?} n={n} j={j}: {fd} vs {}", d.at(n, j));
                    }
                }
            }
        }
    }

    #[test]
    fn second_derivative_matches_finite_differences() {
        for scheme in [Scheme::Leapfrog, Scheme::WalshSum] {
            let diff = Diffusion::Sin2;
            let (sol, noise) = setup(scheme, diff);
            let nx = sol.nx();
            let (r, s) = ((0usize, nx / 2), (1usize, nx / 2 + 1));
            let d2 = {
                let a = first_derivative(&sol, &noise, &diff, r).unwrap();
                let b = first_derivative(&sol, &noise, &diff, s).unwrap();
                second_derivative(&sol, &noise, &diff, &a, &b).unwrap()
            };
            let h = 1e-5;
            let mk = |sign: f64| {
                let mut inc = noise.increments.clone();
                inc[r.0 * nx + r.1] += sign * h;
                let f = NoiseField::from_increments(noise.spec, inc).unwrap();
                let sol2 = solve(scheme, &f, &diff, sol.origin).unwrap();
                first_derivative(&sol2, &f, &diff, s).unwrap()
            };
            let (up, dn) = (mk(1.0), mk(-1.0));
            for n in 0..=sol.nt() {
                for j in 0..nx {
                    let fd = (up.at(n, j) - dn.at(n, j)) / (2.0 * h);
                    assert!((fd - d2.at(n, j)).abs() < 1e-5, "{scheme} n={n} j={j}: {fd} vs {}", d2.at(n, j));
                }
            }
            let a = first_derivative(&sol, &noise, &diff, s).unwrap();
            let b = first_derivative(&sol, &noise, &diff, r).unwrap();
            assert!(second_derivative(&sol, &noise, &diff, &a, &b).is_err());
        }
    }

    #[test]
    fn adjoint_gradient_matches_forward_assembly() {
        for scheme in [Scheme::Leapfrog, Scheme::WalshSum] {
            let diff = Diffusion::Sqrt1p;
            let (sol, noise) = setup(scheme, diff);
            let ctx = MalliavinContext::new(&sol, 0.5, 0.3).unwrap();
            let a = gradient(&ctx, &sol, &noise, &diff).unwrap();
            let b = gradient_forward(&ctx, &sol, &noise, &diff).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-11 * (1.0 + y.abs()), "{scheme}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn hessian_vector_matches_gradient_differences() {
        for scheme in [Scheme::Leapfrog, Scheme::WalshSum] {
            let diff = Diffusion::Sin2;
            let (sol, noise) = setup(scheme, diff);
            let ctx = MalliavinContext::new(&sol, 0.5, 0.3).unwrap();
            let z: Vec<f64> = (0..noise.increments.len()).map(|i| ((i * 37) % 11) as f64 / 11.0 - 0.5).collect();
            let hz = hessian_vector(&ctx, &sol, &noise, &diff, &z).unwrap();
            let h = 1e-6;
            let grad_at = |sign: f64| {
                let inc: Vec<f64> = noise.increments.iter().zip(&z).map(|(a, b)| a + sign * h * b).collect();
                let f = NoiseField::from_increments(noise.spec, inc).unwrap();
                let s2 = solve(scheme, &f, &diff, sol.origin).unwrap();
                gradient(&ctx, &s2, &f, &diff).unwrap()
            };
            let (gp, gm) = (grad_at(1.0), grad_at(-1.0));
            for i in 0..hz.len() {
                let fd = (gp[i] - gm[i]) / (2.0 * h);
                assert!((fd - hz[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{scheme} i={i}: {fd} vs {}", hz[i]);
            }
        }
    }

    #[test]
    fn additive_case_is_seed_only() {
        for scheme in [Scheme::Leapfrog, Scheme::WalshSum] {
            let diff = Diffusion::Const(1.7);
            let (sol, noise) = setup(scheme, diff);
            let base = (1, sol.nx() / 2 - 3);
            let d = first_derivative(&sol, &noise, &diff, base).unwrap();
            for n in 0..=sol.nt() {
                for j in 0..sol.nx() {
                    assert_eq!(d.at(n, j), 1.7 * grid_green(scheme, base, n, j));
                }
            }
        }
    }

    #[test]
    fn small_ball_table() {
        let g: Vec<f64> = (0..1000).map(|i| 0.5 + i as f64 / 1000.0).collect();
        let t = small_ball_probe(&g, &[0.1, 0.6, 2.0]).unwrap();
        assert_eq!(t.rows[0].1, 0.0);
        assert!((t.rows[1].1 - 0.1).abs() < 1e-12);
        assert_eq!(t.rows[2].1, 1.0);
        assert_eq!(t.min, 0.5);
        assert!(small_ball_probe(&g[..10], &[0.1]).is_err());
    }
}
