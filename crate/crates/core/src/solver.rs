//! Discretisations of the mild equation
//! `u(t,x) = 1 + ∫₀ᵗ∫ G(t−s, x−y) σ(u(s,y)) W(ds,dy)`.
//!
//! Grid node `j` sits at `origin + j·dx`; the noise increment `ΔW[m][k]`
//! covers the cell `[t_m, t_m+dt) × [x_k, x_k+dx)` and is attached to node
//! `(m, k)`. Both schemes evaluate `σ` at the left time point.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dump;
use crate::error::{invalid, Error, Result};
use crate::kernels::RieszExponent;
use crate::noise::{NoiseField, NoiseSpec};

/// Diffusion coefficient `σ` from the built-in catalogue.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Diffusion {
    /// `σ ≡ k`.
    Const(f64),
    /// `σ(x) = 2 + sin x`.
    Sin2,
    /// `σ(x) = √(1+x²)`.
    Sqrt1p,
}

impl Diffusion {
    #[inline]
    pub fn sigma(&self, x: f64) -> f64 {
        match *self {
            Diffusion::Const(k) => k,
            Diffusion::Sin2 => 2.0 + x.sin(),
            Diffusion::Sqrt1p => (1.0 + x * x).sqrt(),
        }
    }

    #[inline]
    pub fn sigma_prime(&self, x: f64) -> f64 {
        match *self {
            Diffusion::Const(_) => 0.0,
            Diffusion::Sin2 => x.cos(),
            Diffusion::Sqrt1p => x / (1.0 + x * x).sqrt(),
        }
    }

    #[inline]
    pub fn sigma_second(&self, x: f64) -> f64 {
        match *self {
            Diffusion::Const(_) => 0.0,
            Diffusion::Sin2 => -x.sin(),
            Diffusion::Sqrt1p => (1.0 + x * x).powf(-1.5),
        }
    }

    /// Lower bound `c` with `σ ≥ c`.
    pub fn lower_bound(&self) -> f64 {
        match *self {
            Diffusion::Const(k) => k,
            Diffusion::Sin2 | Diffusion::Sqrt1p => 1.0,
        }
    }

    /// Bound `L` on `|σ′|` and `|σ″|`.
    pub fn lipschitz(&self) -> f64 {
        match *self {
            Diffusion::Const(_) => 0.0,
            Diffusion::Sin2 | Diffusion::Sqrt1p => 1.0,
        }
    }

    pub fn constant_value(&self) -> Option<f64> {
        match *self {
            Diffusion::Const(k) => Some(k),
            _ => None,
        }
    }

    /// Spot-check `σ ≥ c > 0` and `|σ′|, |σ″| ≤ L` on 10⁴ points of `[−50, 50]`.
    pub fn check_hypothesis(&self) -> Result<()> {
        let c = self.lower_bound();
        if !(c > 0.0) {
            return Err(invalid(format!("diffusion {self}: lower bound must be positive")));
        }
        let l = self.lipschitz();
        for i in 0..10_000 {
            let x = -50.0 + 100.0 * i as f64 / 9_999.0;
            if self.sigma(x) < c
                || self.sigma_prime(x).abs() > l + 1e-12
                || self.sigma_second(x).abs() > l + 1e-12
            {
                return Err(invalid(format!("diffusion {self} violates its bounds at x={x}")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for Diffusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diffusion::Const(k) => write!(f, "const:{k}"),
            Diffusion::Sin2 => f.write_str("sin2"),
            Diffusion::Sqrt1p => f.write_str("sqrt1p"),
        }
    }
}

impl FromStr for Diffusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let d = match s {
            "sin2" => Diffusion::Sin2,
            "sqrt1p" => Diffusion::Sqrt1p,
            _ => {
                let k = s
                    .strip_prefix("const:")
                    .and_then(|v| v.trim().parse::<f64>().ok())
                    .ok_or_else(|| invalid(format!("unknown diffusion {s:?} (expected const:k, sin2 or sqrt1p)")))?;
                if !(k > 0.0 && k.is_finite()) {
                    return Err(invalid(format!("const diffusion needs k > 0, got {k}")));
                }
                Diffusion::Const(k)
            }
        };
        Ok(d)
    }
}

impl TryFrom<String> for Diffusion {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Diffusion> for String {
    fn from(d: Diffusion) -> String {
        d.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    WalshSum,
    Leapfrog,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::WalshSum => "walsh-sum",
            Scheme::Leapfrog => "leapfrog",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "walsh-sum" | "walsh" => Ok(Scheme::WalshSum),
            "leapfrog" => Ok(Scheme::Leapfrog),
            _ => Err(invalid(format!("unknown scheme {s:?}"))),
        }
    }
}

/// Symmetric grid `x_j = (j − H)·dx`, `j = 0..2H`, with `dt = dx`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub dx: f64,
    pub half_cells: usize,
    pub nt: usize,
}

impl Domain {
    /// Smallest padded domain for observing `[−R, R]` at time `t`:
    /// `H = ⌈(R+t)/dx⌉ + 2`.
    pub fn for_window(r: f64, t: f64, dx: f64) -> Result<Self> {
        if !(r >= 0.0 && t > 0.0 && dx > 0.0) {
            return Err(invalid(format!("domain: need R ≥ 0, t > 0, dx > 0 (R={r}, t={t}, dx={dx})")));
        }
        let steps = t / dx;
        let nt = steps.round();
        if (steps - nt).abs() > 1e-9 * steps.max(1.0) || nt < 1.0 {
            return Err(invalid(format!("domain: t/dx = {steps} is not a positive integer")));
        }
        let half_cells = ((r + t) / dx - 1e-9).ceil() as usize + 2;
        Ok(Self {
            dx,
            half_cells,
            nt: nt as usize,
        })
    }

    /// Grid with halved steps whose cells tile this grid's cells exactly;
    /// see [`Domain::refinement_offset`].
    pub fn refined(&self) -> Self {
        Self {
            dx: 0.5 * self.dx,
            half_cells: 2 * self.half_cells + 1,
            nt: 2 * self.nt,
        }
    }

    /// Fine cell index of coarse cell 0 for [`Domain::refined`] grids.
    pub const fn refinement_offset() -> usize {
        1
    }

    #[inline]
    pub fn nx(&self) -> usize {
        2 * self.half_cells + 1
    }

    #[inline]
    pub fn origin(&self) -> f64 {
        -(self.half_cells as f64) * self.dx
    }

    #[inline]
    pub fn center(&self) -> usize {
        self.half_cells
    }

    #[inline]
    pub fn x(&self, j: usize) -> f64 {
        (j as f64 - self.half_cells as f64) * self.dx
    }

    pub fn t_final(&self) -> f64 {
        self.nt as f64 * self.dx
    }

    pub fn noise_spec(&self, beta: RieszExponent, seed: u64) -> Result<NoiseSpec> {
        NoiseSpec::new(beta, self.dx, self.dx, self.nx(), self.nt, seed)
    }
}

/// `u` on the space–time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSolution {
    /// Row-major `(nt+1) × nx`.
    pub u: Vec<f64>,
    pub spec: NoiseSpec,
    pub scheme: Scheme,
    pub origin: f64,
    /// Id of the noise field that drove the solve.
    pub noise_id: u64,
}

impl GridSolution {
    #[inline]
    pub fn nx(&self) -> usize {
        self.spec.nx
    }

    #[inline]
    pub fn nt(&self) -> usize {
        self.spec.nt
    }

    #[inline]
    pub fn row(&self, n: usize) -> &[f64] {
        let nx = self.spec.nx;
        &self.u[n * nx..(n + 1) * nx]
    }

    #[inline]
    pub fn at(&self, n: usize, j: usize) -> f64 {
        self.u[n * self.spec.nx + j]
    }

    pub fn final_row(&self) -> &[f64] {
        self.row(self.spec.nt)
    }

    #[inline]
    pub fn x(&self, j: usize) -> f64 {
        self.origin + j as f64 * self.spec.dx
    }

    pub fn dump(&self, path: &Path) -> Result<()> {
        dump::write_solution(path, self)
    }
}

fn check_row(row: &[f64], n: usize) -> Result<()> {
    match row.iter().position(|v| !v.is_finite()) {
        Some(j) => Err(Error::NumericalBlowup { n, j }),
        None => Ok(()),
    }
}

/// Unit-CFL leapfrog scheme; ghost nodes outside the grid are held at 1.
pub fn solve_leapfrog(noise: &NoiseField, diffusion: &Diffusion, origin: f64) -> Result<GridSolution> {
    let spec = noise.spec;
    if (spec.dt - spec.dx).abs() > 1e-12 * spec.dx {
        return Err(invalid(format!("leapfrog needs dt = dx (dt={}, dx={})", spec.dt, spec.dx)));
    }
    let (nx, nt) = (spec.nx, spec.nt);
    let mut u = vec![1.0; (nt + 1) * nx];
    let at = |row: &[f64], j: isize| -> f64 {
        if j < 0 || j as usize >= nx {
            1.0
        } else {
            row[j as usize]
        }
    };
    {
        let (u0, rest) = u.split_at_mut(nx);
        let u1 = &mut rest[..nx];
        let w = noise.row(0);
        for j in 0..nx {
            let ji = j as isize;
            u1[j] = 0.5 * (at(u0, ji - 1) + at(u0, ji + 1)) + 0.5 * diffusion.sigma(u0[j]) * w[j];
        }
        check_row(u1, 1)?;
    }
    for n in 1..nt {
        let (head, tail) = u.split_at_mut((n + 1) * nx);
        let prev = &head[(n - 1) * nx..n * nx];
        let cur = &head[n * nx..];
        let next = &mut tail[..nx];
        let w = noise.row(n);
        next[0] = 1.0 + at(cur, 1) - prev[0] + diffusion.sigma(cur[0]) * w[0];
        for j in 1..nx - 1 {
            next[j] = cur[j - 1] + cur[j + 1] - prev[j] + diffusion.sigma(cur[j]) * w[j];
        }
        let l = nx - 1;
        next[l] = cur[l - 1] + 1.0 - prev[l] + diffusion.sigma(cur[l]) * w[l];
        check_row(next, n + 1)?;
    }
    Ok(GridSolution {
        u,
        spec,
        scheme: Scheme::Leapfrog,
        origin,
        noise_id: noise.id,
    })
}

/// Direct transcription of the mild equation:
/// `u[n][j] = 1 + ½ Σ_{m<n} Σ_{|k−j|<n−m} σ(u[m][k]) ΔW[m][k]`, with the
/// inner sums taken from per-step prefix sums.
pub fn solve_walsh(noise: &NoiseField, diffusion: &Diffusion, origin: f64) -> Result<GridSolution> {
    let spec = noise.spec;
    let (nx, nt) = (spec.nx, spec.nt);
    let mut u = vec![1.0; (nt + 1) * nx];
    // prefix[m][i] = Σ_{k<i} σ(u[m][k]) ΔW[m][k]
    let mut prefix = vec![0.0; nt * (nx + 1)];
    for n in 0..nt {
        {
            let row = &u[n * nx..(n + 1) * nx];
            let w = noise.row(n);
            let p = &mut prefix[n * (nx + 1)..(n + 1) * (nx + 1)];
            for k in 0..nx {
                p[k + 1] = p[k] + diffusion.sigma(row[k]) * w[k];
            }
        }
        let target = n + 1;
        let out = &mut u[target * nx..(target + 1) * nx];
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for m in 0..target {
                let reach = target - m - 1;
                let lo = j.saturating_sub(reach);
                let hi = (j + reach + 1).min(nx);
                let p = &prefix[m * (nx + 1)..];
                acc += p[hi] - p[lo];
            }
            *o = 1.0 + 0.5 * acc;
        }
        check_row(out, target)?;
    }
    Ok(GridSolution {
        u,
        spec,
        scheme: Scheme::WalshSum,
        origin,
        noise_id: noise.id,
    })
}

pub fn solve(scheme: Scheme, noise: &NoiseField, diffusion: &Diffusion, origin: f64) -> Result<GridSolution> {
    match scheme {
        Scheme::Leapfrog => solve_leapfrog(noise, diffusion, origin),
        Scheme::WalshSum => solve_walsh(noise, diffusion, origin),
    }
}

/// Spatial region `[x_min, x_max]` used for comparisons at every time step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub x_min: f64,
    pub x_max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Comparison {
    Pointwise,
    /// Both solutions are filtered by `[¼, ½, ¼]` in space first, which
    /// removes the leapfrog's odd/even grid mode.
    ParitySmoothed,
}

#[derive(Debug, Clone, Serialize)]
pub struct TimeProfile {
    pub t: f64,
    pub max_abs: f64,
    pub rms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Discrepancy {
    pub max_abs: f64,
    pub rms: f64,
    pub per_time: Vec<TimeProfile>,
}

fn smoothed(row: &[f64], j: usize) -> f64 {
    0.25 * row[j - 1] + 0.5 * row[j] + 0.25 * row[j + 1]
}

pub fn cross_validate(
    a: &GridSolution,
    b: &GridSolution,
    region: Region,
    comparison: Comparison,
) -> Result<Discrepancy> {
    let same_grid = a.spec.nx == b.spec.nx
        && a.spec.nt == b.spec.nt
        && a.spec.dx == b.spec.dx
        && a.spec.dt == b.spec.dt
        && a.origin == b.origin;
    if !same_grid {
        return Err(invalid("cross_validate: solutions live on different grids"));
    }
    let nx = a.nx();
    let lo_margin = usize::from(comparison == Comparison::ParitySmoothed);
    let idx: Vec<usize> = (lo_margin..nx - lo_margin)
        .filter(|&j| {
            let x = a.x(j);
            x >= region.x_min - 1e-12 && x <= region.x_max + 1e-12
        })
        .collect();
    if idx.is_empty() {
        return Err(invalid("cross_validate: region contains no grid nodes"));
    }
    let mut per_time = Vec::with_capacity(a.nt() + 1);
    let (mut max_abs, mut sq, mut count) = (0.0f64, 0.0, 0usize);
    for n in 0..=a.nt() {
        let (ra, rb) = (a.row(n), b.row(n));
        let (mut m, mut s) = (0.0f64, 0.0);
        for &j in &idx {
            let d = match comparison {
                Comparison::Pointwise => ra[j] - rb[j],
                Comparison::ParitySmoothed => smoothed(ra, j) - smoothed(rb, j),
            };
            m = m.max(d.abs());
            s += d * d;
        }
        per_time.push(TimeProfile {
            t: n as f64 * a.spec.dt,
            max_abs: m,
            rms: (s / idx.len() as f64).sqrt(),
        });
        max_abs = max_abs.max(m);
        sq += s;
        count += idx.len();
    }
    Ok(Discrepancy {
        max_abs,
        rms: (sq / count as f64).sqrt(),
        per_time,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn domain() -> Domain {
        Domain::for_window(1.0, 0.5, 1.0 / 16.0).unwrap()
    }

    fn spec() -> NoiseSpec {
        domain().noise_spec(RieszExponent::new(0.5).unwrap(), 1).unwrap()
    }

    #[test]
    fn diffusion_catalogue() {
        assert_eq!("const:2".parse::<Diffusion>().unwrap(), Diffusion::Const(2.0));
        assert_eq!("sin2".parse::<Diffusion>().unwrap(), Diffusion::Sin2);
        assert!("const:0".parse::<Diffusion>().is_err());
        assert!("cubic".parse::<Diffusion>().is_err());
        for d in [Diffusion::Const(1.5), Diffusion::Sin2, Diffusion::Sqrt1p] {
            d.check_hypothesis().unwrap();
            assert_eq!(d.to_string().parse::<Diffusion>().unwrap(), d);
        }
        let h = 1e-6;
        for d in [Diffusion::Sin2, Diffusion::Sqrt1p] {
            for x in [-1.3, 0.0, 0.7, 4.0] {
                let fd = (d.sigma(x + h) - d.sigma(x - h)) / (2.0 * h);
                assert!((fd - d.sigma_prime(x)).abs() < 1e-8);
                let fd2 = (d.sigma_prime(x + h) - d.sigma_prime(x - h)) / (2.0 * h);
                assert!((fd2 - d.sigma_second(x)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn domain_geometry() {
        let d = domain();
        assert_eq!(d.nt, 8);
        assert_eq!(d.half_cells, 26);
        assert_eq!(d.x(d.center()), 0.0);
        assert!(Domain::for_window(1.0, 0.5, 0.3).is_err());
        let f = d.refined();
        let off = Domain::refinement_offset();
        for j in [0, 5, d.nx() - 1] {
            assert!((f.x(off + 2 * j) - d.x(j)).abs() < 1e-12);
        }
        assert!(off + 2 * d.nx() <= f.nx());
    }

    #[test]
    fn zero_noise_keeps_constant() {
        let z = NoiseField::zeros(spec());
        for sol in [
            solve_leapfrog(&z, &Diffusion::Sin2, 0.0).unwrap(),
            solve_walsh(&z, &Diffusion::Sin2, 0.0).unwrap(),
        ] {
            assert!(sol.u.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn impulse_response() {
        let s = spec();
        let j0 = s.nx / 2;
        for m0 in [0usize, 2] {
            let mut inc = vec![0.0; s.nt * s.nx];
            inc[m0 * s.nx + j0] = 1.0;
            let f = NoiseField::from_increments(s, inc).unwrap();
            let lf = solve_leapfrog(&f, &Diffusion::Const(1.0), 0.0).unwrap();
            let ws = solve_walsh(&f, &Diffusion::Const(1.0), 0.0).unwrap();
            let seed = if m0 == 0 { 0.5 } else { 1.0 };
            for n in 0..=s.nt {
                for j in 0..s.nx {
                    let dist = j.abs_diff(j0);
                    let inside = n > m0 && dist < n - m0;
                    let parity = inside && (n - m0 - 1 - dist) % 2 == 0;
                    let want_lf = if parity { seed } else { 0.0 };
                    assert_eq!(lf.at(n, j) - 1.0, want_lf, "leapfrog n={n} j={j}");
                    let want_ws = if inside { 0.5 } else { 0.0 };
                    assert_eq!(ws.at(n, j) - 1.0, want_ws, "walsh n={n} j={j}");
                }
            }
        }
    }

    #[test]
    fn first_step_agrees() {
        let s = spec();
        let inc: Vec<f64> = (0..s.nt * s.nx).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.5).collect();
        let f = NoiseField::from_increments(s, inc).unwrap();
        let a = solve_leapfrog(&f, &Diffusion::Sin2, 0.0).unwrap();
        let b = solve_walsh(&f, &Diffusion::Sin2, 0.0).unwrap();
        for j in 1..s.nx - 1 {
            assert!((a.at(1, j) - b.at(1, j)).abs() < 1e-15);
        }
    }

    #[test]
    fn leapfrog_requires_unit_cfl() {
        let s = NoiseSpec::new(RieszExponent::new(0.5).unwrap(), 0.1, 0.2, 8, 2, 0).unwrap();
        assert!(solve_leapfrog(&NoiseField::zeros(s), &Diffusion::Sin2, 0.0).is_err());
    }

    #[test]
    fn cross_validate_identity_and_mismatch() {
        let s = spec();
        let f = NoiseField::zeros(s);
        let a = solve_leapfrog(&f, &Diffusion::Sin2, domain().origin()).unwrap();
        let r = Region { x_min: -1.0, x_max: 1.0 };
        let d = cross_validate(&a, &a, r, Comparison::Pointwise).unwrap();
        assert_eq!(d.max_abs, 0.0);
        assert_eq!(d.per_time.len(), s.nt + 1);
        let mut b = a.clone();
        b.origin += 1.0;
        assert!(cross_validate(&a, &b, r, Comparison::Pointwise).is_err());
    }
}
