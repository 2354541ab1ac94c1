//! Cell-integrated Riesz noise.
//!
//! `ΔW[n][j]` is the noise mass of the cell `[t_n, t_n+dt) × [x_j, x_j+dx)`.
//! Rows are independent; each row is a stationary Gaussian vector with
//! covariance `dt·C(|j−k|)`, where `C` is [`kernels::cell_covariance`].

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Error, Result};
use crate::kernels::{self, RieszExponent};
use crate::rng;

/// Default stream tag for [`sample_field`].
pub const DEFAULT_STREAM: &str = "noise";

/// Discretisation of the noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub beta: RieszExponent,
    pub dt: f64,
    pub dx: f64,
    pub nx: usize,
    pub nt: usize,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(beta: RieszExponent, dt: f64, dx: f64, nx: usize, nt: usize, seed: u64) -> Result<Self> {
        let s = Self { beta, dt, dx, nx, nt, seed };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) || !(self.dx > 0.0 && self.dx.is_finite()) {
            return Err(invalid(format!("noise spec: need dt, dx > 0 (dt={}, dx={})", self.dt, self.dx)));
        }
        if self.nx < 2 {
            return Err(invalid(format!("noise spec: nx must be ≥ 2, got {}", self.nx)));
        }
        if self.nt < 1 {
            return Err(invalid("noise spec: nt must be ≥ 1"));
        }
        Ok(())
    }

    fn same_covariance(&self, other: &NoiseSpec) -> bool {
        self.beta == other.beta && self.dt == other.dt && self.dx == other.dx && self.nx == other.nx
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMethod {
    Circulant,
    DenseFactorization,
}

/// Which sampler [`build_covariance_with`] may choose.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodPreference {
    Auto,
    ForceDense,
}

#[derive(Clone)]
enum Sampler {
    Circulant {
        scale: Vec<f64>,
        fft: Arc<dyn Fft<f64>>,
    },
    Dense {
        factor: DMatrix<f64>,
    },
}

/// Covariance row, embedding spectrum and the sampler built from them.
#[derive(Clone)]
pub struct CovarianceModel {
    pub row: Vec<f64>,
    pub spectrum: Vec<f64>,
    pub method: SamplingMethod,
    /// Most negative raw eigenvalue divided by the largest one.
    pub min_eigenvalue_ratio: f64,
    spec: NoiseSpec,
    sampler: Sampler,
}

impl fmt::Debug for CovarianceModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CovarianceModel")
            .field("nx", &self.row.len())
            .field("embedding", &self.spectrum.len())
            .field("method", &self.method)
            .field("min_eigenvalue_ratio", &self.min_eigenvalue_ratio)
            .finish()
    }
}

/// Smallest even 2·3·5-smooth integer `≥ n`.
pub fn fft_friendly_len(n: usize) -> usize {
    let mut m = n.max(2);
    loop {
        if m % 2 == 0 {
            let mut k = m;
            for p in [2, 3, 5] {
                while k % p == 0 {
                    k /= p;
                }
            }
            if k == 1 {
                return m;
            }
        }
        m += 1;
    }
}

/// Real eigenvalues of the symmetric circulant whose first column is `c`.
fn circulant_spectrum(c: &[f64]) -> Vec<f64> {
    let mut buf: Vec<Complex64> = c.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf.into_iter().map(|z| z.re).collect()
}

pub fn build_covariance(spec: &NoiseSpec) -> Result<CovarianceModel> {
    build_covariance_with(spec, MethodPreference::Auto)
}

pub fn build_covariance_with(spec: &NoiseSpec, pref: MethodPreference) -> Result<CovarianceModel> {
    spec.validate()?;
    let nx = spec.nx;
    let m = fft_friendly_len(2 * (nx - 1));
    let half = m / 2;
    let cov = |l: usize| spec.dt * kernels::cell_covariance(spec.dx, l, spec.beta);
    let ext: Vec<f64> = (0..=half).map(cov).collect();
    let mut c = vec![0.0; m];
    for k in 0..m {
        c[k] = ext[k.min(m - k)];
    }
    let raw = circulant_spectrum(&c);
    let max = raw.iter().copied().fold(f64::MIN, f64::max);
    let min = raw.iter().copied().fold(f64::MAX, f64::min);
    let ratio = min / max;
    let row = ext[..nx].to_vec();
    let spectrum: Vec<f64> = raw.iter().map(|&v| v.max(0.0)).collect();

    let want_dense = pref == MethodPreference::ForceDense || ratio < -1e-10;
    let method = if !want_dense {
        SamplingMethod::Circulant
    } else if nx <= 2048 {
        SamplingMethod::DenseFactorization
    } else if ratio >= -1e-6 {
        SamplingMethod::Circulant
    } else {
        return Err(Error::CovarianceEmbedding(format!(
            "circulant embedding of length {m} has relative negativity {ratio:e} and nx={nx} is too large for dense factorisation"
        )));
    };

    let sampler = match method {
        SamplingMethod::Circulant => Sampler::Circulant {
            scale: spectrum.iter().map(|&l| (l / m as f64).sqrt()).collect(),
            fft: FftPlanner::new().plan_fft_forward(m),
        },
        SamplingMethod::DenseFactorization => {
            let t = DMatrix::from_fn(nx, nx, |i, j| row[i.abs_diff(j)]);
            let chol = t.cholesky().ok_or_else(|| {
                Error::CovarianceEmbedding("Toeplitz covariance is not positive definite".into())
            })?;
            Sampler::Dense { factor: chol.unpack() }
        }
    };
    Ok(CovarianceModel {
        row,
        spectrum,
        method,
        min_eigenvalue_ratio: ratio,
        spec: *spec,
        sampler,
    })
}

/// One realisation of the noise increments.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseField {
    pub spec: NoiseSpec,
    /// Row-major `nt × nx`.
    pub increments: Vec<f64>,
    /// Identifier of the realisation, carried into solutions.
    pub id: u64,
}

impl NoiseField {
    pub fn zeros(spec: NoiseSpec) -> Self {
        Self::from_increments(spec, vec![0.0; spec.nt * spec.nx]).expect("shape matches")
    }

    /// Wrap explicit increments; the id is a content hash.
    pub fn from_increments(spec: NoiseSpec, increments: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if increments.len() != spec.nt * spec.nx {
            return Err(invalid(format!(
                "noise field: expected {}×{} increments, got {}",
                spec.nt,
                spec.nx,
                increments.len()
            )));
        }
        let mut h = Sha256::new();
        for v in &increments {
            h.update(v.to_le_bytes());
        }
        let d = h.finalize();
        let id = u64::from_le_bytes(d[..8].try_into().expect("8 bytes"));
        Ok(Self { spec, increments, id })
    }

    #[inline]
    pub fn row(&self, n: usize) -> &[f64] {
        &self.increments[n * self.spec.nx..(n + 1) * self.spec.nx]
    }

    #[inline]
    pub fn get(&self, n: usize, j: usize) -> f64 {
        self.increments[n * self.spec.nx + j]
    }

    /// Aggregate onto a grid with doubled steps: coarse cell `(N, J)` is the
    /// union of fine cells `(2N+a, offset+2J+b)`, `a, b ∈ {0,1}`.
    pub fn coarsen(&self, offset: usize, nx_coarse: usize) -> Result<NoiseField> {
        let s = self.spec;
        if s.nt % 2 != 0 {
            return Err(invalid("coarsen: nt must be even"));
        }
        if offset + 2 * nx_coarse > s.nx {
            return Err(invalid("coarsen: coarse grid exceeds fine grid"));
        }
        let spec = NoiseSpec {
            dt: 2.0 * s.dt,
            dx: 2.0 * s.dx,
            nx: nx_coarse,
            nt: s.nt / 2,
            ..s
        };
        let mut out = vec![0.0; spec.nt * nx_coarse];
        for n in 0..spec.nt {
            let (r0, r1) = (self.row(2 * n), self.row(2 * n + 1));
            for j in 0..nx_coarse {
                let k = offset + 2 * j;
                out[n * nx_coarse + j] = r0[k] + r0[k + 1] + r1[k] + r1[k + 1];
            }
        }
        NoiseField::from_increments(spec, out)
    }
}

/// Sample replicate `replicate_id` on the default stream.
pub fn sample_field(model: &CovarianceModel, spec: &NoiseSpec, replicate_id: u64) -> Result<NoiseField> {
    sample_field_stream(model, spec, DEFAULT_STREAM, replicate_id)
}

/// Sample replicate `replicate_id` of the named stream. Pair `p` of rows
/// `(2p, 2p+1)` (circulant) or row `n` (dense) draws from its own generator
/// keyed by `(seed, stream, replicate_id, p or n)`.
pub fn sample_field_stream(
    model: &CovarianceModel,
    spec: &NoiseSpec,
    stream: &str,
    replicate_id: u64,
) -> Result<NoiseField> {
    if !model.spec.same_covariance(spec) {
        return Err(invalid("sample_field: covariance model was built for a different grid"));
    }
    let (nx, nt) = (spec.nx, spec.nt);
    let mut inc = vec![0.0; nt * nx];
    match &model.sampler {
        Sampler::Circulant { scale, fft } => {
            let m = scale.len();
            let mut buf = vec![Complex64::new(0.0, 0.0); m];
            let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
            for p in 0..nt.div_ceil(2) {
                let mut g = rng::stream(spec.seed, stream, &[replicate_id, p as u64]);
                for (z, &s) in buf.iter_mut().zip(scale) {
                    let a: f64 = g.sample(StandardNormal);
                    let b: f64 = g.sample(StandardNormal);
                    *z = Complex64::new(s * a, s * b);
                }
                fft.process_with_scratch(&mut buf, &mut scratch);
                let n0 = 2 * p;
                for j in 0..nx {
                    inc[n0 * nx + j] = buf[j].re;
                }
                if n0 + 1 < nt {
                    for j in 0..nx {
                        inc[(n0 + 1) * nx + j] = buf[j].im;
                    }
                }
            }
        }
        Sampler::Dense { factor } => {
            for n in 0..nt {
                let mut g = rng::stream(spec.seed, stream, &[replicate_id, n as u64]);
                let z = DVector::from_fn(nx, |_, _| g.sample::<f64, _>(StandardNormal));
                let y = factor * z;
                inc[n * nx..(n + 1) * nx].copy_from_slice(y.as_slice());
            }
        }
    }
    let mut h = Sha256::new();
    h.update(spec.seed.to_le_bytes());
    h.update(stream.as_bytes());
    h.update(replicate_id.to_le_bytes());
    let d = h.finalize();
    Ok(NoiseField {
        spec: *spec,
        increments: inc,
        id: u64::from_le_bytes(d[..8].try_into().expect("8 bytes")),
    })
}

/// Symmetric Toeplitz operator applied through a circulant embedding.
#[derive(Clone)]
pub struct ToeplitzOperator {
    n: usize,
    eig: Vec<f64>,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl fmt::Debug for ToeplitzOperator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ToeplitzOperator").field("n", &self.n).field("embedding", &self.eig.len()).finish()
    }
}

impl ToeplitzOperator {
    pub fn new(row: &[f64]) -> Result<Self> {
        let n = row.len();
        if n == 0 {
            return Err(invalid("Toeplitz operator needs a nonempty row"));
        }
        let m = fft_friendly_len(2 * n);
        let mut c = vec![0.0; m];
        c[..n].copy_from_slice(row);
        for k in 1..n {
            c[m - k] = row[k];
        }
        let mut planner = FftPlanner::new();
        Ok(Self {
            n,
            eig: circulant_spectrum(&c),
            fwd: planner.plan_fft_forward(m),
            inv: planner.plan_fft_inverse(m),
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n, "Toeplitz operator: dimension mismatch");
        let m = self.eig.len();
        let mut buf = vec![Complex64::new(0.0, 0.0); m];
        for (b, &v) in buf.iter_mut().zip(x) {
            b.re = v;
        }
        self.fwd.process(&mut buf);
        for (b, &l) in buf.iter_mut().zip(&self.eig) {
            *b *= l / m as f64;
        }
        self.inv.process(&mut buf);
        buf[..self.n].iter().map(|z| z.re).collect()
    }

    /// `xᵀ T y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        let ty = self.apply(y);
        x.iter().zip(&ty).map(|(a, b)| a * b).sum()
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.bilinear(x, x)
    }
}

/// Estimate with its Monte Carlo standard error.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct LagStat {
    pub lag: i64,
    pub value: f64,
    pub stderr: f64,
}

/// Pooled empirical covariance of a collection of fields.
#[derive(Debug, Clone, Serialize)]
pub struct CovarianceReport {
    /// Same-time covariance by spatial lag `0..=max_lag`.
    pub spatial: Vec<LagStat>,
    /// Covariance between rows `n` and `n+1` by spatial lag
    /// `−max_lag..=max_lag` (empty when `nt = 1`).
    pub time_lag_one: Vec<LagStat>,
    /// Per spatial lag, the largest `|cov(j, j+ℓ) − cov(0, ℓ)|` over offsets
    /// `j`, in units of the standard error of the difference.
    pub stationarity_max_z: Vec<f64>,
    pub slices: usize,
}

impl CovarianceReport {
    /// Largest `|empirical − expected| / stderr` over spatial lags.
    pub fn max_z_against(&self, expected_row: &[f64]) -> f64 {
        self.spatial
            .iter()
            .map(|s| {
                let e = expected_row[s.lag as usize];
                z_score(s.value - e, s.stderr)
            })
            .fold(0.0, f64::max)
    }

    pub fn max_abs_deviation(&self, expected_row: &[f64]) -> f64 {
        self.spatial
            .iter()
            .map(|s| (s.value - expected_row[s.lag as usize]).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_time_lag_z(&self) -> f64 {
        self.time_lag_one.iter().map(|s| z_score(s.value, s.stderr)).fold(0.0, f64::max)
    }
}

fn z_score(diff: f64, se: f64) -> f64 {
    if se > 0.0 {
        diff.abs() / se
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Mean and standard error of iid values.
fn mean_se(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut n = 0usize;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for v in values {
        n += 1;
        let d = v - mean;
        mean += d / n as f64;
        m2 += d * (v - mean);
    }
    if n < 2 {
        return (mean, 0.0);
    }
    (mean, (m2 / (n - 1) as f64 / n as f64).sqrt())
}

/// Pooled covariance by lag, using the known zero mean. Standard errors
/// treat each time slice as one independent observation.
pub fn empirical_covariance(fields: &[NoiseField], max_lag: usize) -> Result<CovarianceReport> {
    if fields.len() < 2 {
        return Err(Error::InsufficientData { needed: 2, got: fields.len() });
    }
    let spec = fields[0].spec;
    if fields.iter().any(|f| {
        let s = f.spec;
        !(s.same_covariance(&spec) && s.nt == spec.nt)
    }) {
        return Err(invalid("empirical_covariance: fields have mismatched specs"));
    }
    let (nx, nt) = (spec.nx, spec.nt);
    if max_lag >= nx {
        return Err(invalid("empirical_covariance: max_lag must be < nx"));
    }
    let slices = || fields.iter().flat_map(move |f| (0..nt).map(move |n| f.row(n)));
    let slice_count = fields.len() * nt;

    let spatial = (0..=max_lag)
        .map(|l| {
            let (value, stderr) = mean_se(slices().map(|r| {
                let cnt = nx - l;
                (0..cnt).map(|j| r[j] * r[j + l]).sum::<f64>() / cnt as f64
            }));
            LagStat { lag: l as i64, value, stderr }
        })
        .collect();

    let mut time_lag_one = Vec::new();
    if nt >= 2 {
        for l in -(max_lag as i64)..=(max_lag as i64) {
            let pairs = fields.iter().flat_map(|f| (0..nt - 1).map(move |n| (f.row(n), f.row(n + 1))));
            let (value, stderr) = mean_se(pairs.map(|(a, b)| {
                let (mut s, mut c) = (0.0, 0usize);
                for j in 0..nx {
                    let k = j as i64 + l;
                    if k >= 0 && (k as usize) < nx {
                        s += a[j] * b[k as usize];
                        c += 1;
                    }
                }
                s / c as f64
            }));
            time_lag_one.push(LagStat { lag: l, value, stderr });
        }
    }

    let mut stationarity_max_z = Vec::with_capacity(max_lag + 1);
    for l in 0..=max_lag {
        let per_offset: Vec<(f64, f64)> = (0..nx - l)
            .map(|j| mean_se(slices().map(|r| r[j] * r[j + l])))
            .collect();
        let (c0, s0) = per_offset[0];
        let z = per_offset[1..]
            .iter()
            .map(|&(c, s)| z_score(c - c0, (s * s + s0 * s0).sqrt()))
            .fold(0.0, f64::max);
        stationarity_max_z.push(z);
    }

    Ok(CovarianceReport {
        spatial,
        time_lag_one,
        stationarity_max_z,
        slices: slice_count,
    })
}
