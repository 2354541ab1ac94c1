//! End-to-end campaigns behind the `swe-clt` subcommands.
//!
//! Every replicate draws from its own counter-keyed stream and results are
//! collected in replicate order before any reduction, so data files do not
//! depend on the worker count.

pub mod config;
pub mod output;

use std::path::PathBuf;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

pub use config::{CampaignConfig, GridChoice, Overrides, Purpose, Workers};
pub use output::{format_float, Cell, Csv, Outputs, Provenance};

use crate::dump;
use crate::error::{invalid, Result};
use crate::kernels::{self, CBetaCalibration, RieszExponent, WindowFunction};
use crate::malliavin::{self, MalliavinContext, SmallBallTable};
use crate::noise::{
    build_covariance, empirical_covariance, sample_field_stream, CovarianceModel, CovarianceReport, NoiseField,
    NoiseSpec, SamplingMethod, DEFAULT_STREAM,
};
use crate::observables::{
    estimate_sigma2_mc, estimate_sigma2_quadrature, normalize, trapezoid_weights, weighted_average, VarianceEstimate,
};
use crate::rng;
use crate::solver::{cross_validate, solve, Comparison, Domain, GridSolution, Region, Scheme};
use crate::stats::{self, density_report, oracle_floor, rate_fit, DensityReport, EvalGrid, Metric, RateFit};

/// Binary dumps requested on the command line.
#[derive(Debug, Clone, Default)]
pub struct Dumps {
    pub noise: Option<PathBuf>,
    pub solution: Option<PathBuf>,
}

pub fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| invalid(format!("cannot start {workers} workers: {e}")))
}

/// File-name tag for a window half-width.
fn r_tag(r: f64) -> String {
    format!("R{r}")
}

/// Grid, sampler and averaging weights for one `R`.
pub struct Level {
    pub r: f64,
    pub domain: Domain,
    pub spec: NoiseSpec,
    pub model: CovarianceModel,
    pub weights: Vec<f64>,
}

impl Level {
    /// The noise seed is derived from the campaign seed, `tag` and `R`, so
    /// different `R` use unrelated streams.
    pub fn new(cfg: &CampaignConfig, r: f64, purpose: Purpose, tag: &str) -> Result<Self> {
        let dx = cfg.dx(purpose);
        let domain = Domain::for_window(r, cfg.t, dx)?;
        let seed = rng::derive_seed(cfg.seed, tag, &[r.to_bits()]);
        let spec = domain.noise_spec(cfg.exponent(), seed)?;
        let model = build_covariance(&spec)?;
        let weights = trapezoid_weights(domain.origin(), dx, domain.nx(), r)?;
        Ok(Self {
            r,
            domain,
            spec,
            model,
            weights,
        })
    }

    pub fn replicate(&self, cfg: &CampaignConfig, stream: &str, i: u64) -> Result<(NoiseField, GridSolution)> {
        let noise = sample_field_stream(&self.model, &self.spec, stream, i)?;
        let sol = solve(cfg.scheme, &noise, &cfg.diffusion, self.domain.origin())?;
        Ok((noise, sol))
    }

    /// Raw spatial averages of replicates `0..n` of `stream`, in order.
    pub fn averages(&self, cfg: &CampaignConfig, stream: &str, n: usize) -> Result<Vec<f64>> {
        (0..n as u64)
            .into_par_iter()
            .map(|i| {
                let (_, sol) = self.replicate(cfg, stream, i)?;
                Ok(weighted_average(&self.weights, sol.final_row()))
            })
            .collect()
    }

    fn write_dumps(&self, cfg: &CampaignConfig, dumps: &Dumps) -> Result<()> {
        if dumps.noise.is_none() && dumps.solution.is_none() {
            return Ok(());
        }
        let (noise, sol) = self.replicate(cfg, DEFAULT_STREAM, 0)?;
        if let Some(p) = &dumps.noise {
            dump::write_noise(p, &noise)?;
        }
        if let Some(p) = &dumps.solution {
            dump::write_solution(p, &sol)?;
        }
        Ok(())
    }
}

fn mean_and_se(x: &[f64]) -> (f64, f64) {
    let m = stats::moments(x);
    (m.mean, m.stderr)
}

/// An `R` whose computation failed; the campaign carries on without it.
#[derive(Debug, Clone, Serialize)]
pub struct LevelFailure {
    pub r: f64,
    pub error: String,
}

// ---------------------------------------------------------------------------
// clt-scan

/// Oracle distances at matched `n` for one metric.
#[derive(Debug, Clone, Serialize)]
pub struct FloorSummary {
    pub metric: Metric,
    pub median: f64,
    pub p99: f64,
    /// Fraction of oracle runs at least as far from `N(0,1)` as the campaign.
    pub exceed_fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CltLevel {
    pub r: f64,
    pub n: usize,
    pub nx: usize,
    pub nt: usize,
    pub dx: f64,
    pub variance: VarianceEstimate,
    pub quadrature: Option<VarianceEstimate>,
    pub mean_normalized: f64,
    pub mean_stderr: f64,
    pub bandwidth: f64,
    pub sup_distance: f64,
    pub kolmogorov: f64,
    pub tv_estimate: f64,
    pub floors: Vec<FloorSummary>,
    #[serde(skip)]
    pub raw: Vec<f64>,
    #[serde(skip)]
    pub normalized: Vec<f64>,
    #[serde(skip)]
    pub density: Option<DensityReport>,
}

impl CltLevel {
    pub fn distance(&self, m: Metric) -> f64 {
        match m {
            Metric::Sup => self.sup_distance,
            Metric::Kolmogorov => self.kolmogorov,
            Metric::Tv => self.tv_estimate,
        }
    }

    pub fn floor(&self, m: Metric) -> &FloorSummary {
        self.floors.iter().find(|f| f.metric == m).expect("every metric has a floor")
    }

    /// Distance with the oracle median removed in quadrature.
    pub fn corrected(&self, m: Metric) -> f64 {
        stats::floor_corrected(self.distance(m), self.floor(m).median)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricFit {
    pub metric: Metric,
    pub floor_corrected: bool,
    pub points_used: usize,
    pub fit: Option<RateFit>,
    pub note: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CltResult {
    pub levels: Vec<CltLevel>,
    pub failures: Vec<LevelFailure>,
    pub fits: Vec<MetricFit>,
    pub partial: bool,
}

impl CltResult {
    pub fn fit(&self, m: Metric) -> Option<&RateFit> {
        self.fits.iter().find(|f| f.metric == m).and_then(|f| f.fit.as_ref())
    }
}

pub fn clt_level(cfg: &CampaignConfig, r: f64) -> Result<CltLevel> {
    let level = Level::new(cfg, r, Purpose::Density, "clt-scan")?;
    let beta = cfg.exponent();
    let pilot = level.averages(cfg, "pilot", cfg.pilot())?;
    let variance = estimate_sigma2_mc(&pilot, r, cfg.t, beta)?;
    let quadrature = match cfg.diffusion.constant_value() {
        Some(_) => Some(estimate_sigma2_quadrature(r, cfg.t, beta, &cfg.diffusion)?),
        None => None,
    };
    let raw = level.averages(cfg, DEFAULT_STREAM, cfg.replicates)?;
    let normalized: Vec<f64> = normalize(&raw, 0, &variance)?.into_iter().map(|s| s.normalized).collect();
    let grid = EvalGrid::default();
    let density = density_report(&normalized, &grid, cfg.bandwidth)?;
    let oracle_seed = rng::derive_seed(cfg.seed, "oracle", &[r.to_bits()]);
    let oracle = oracle_floor(normalized.len(), cfg.oracle_runs, oracle_seed, &grid, cfg.bandwidth)?;
    let floors = Metric::ALL
        .iter()
        .map(|&m| {
            let vals = oracle.metric(m);
            let observed = m.of(&density);
            FloorSummary {
                metric: m,
                median: stats::median(vals),
                p99: stats::quantile(vals, 0.99),
                exceed_fraction: vals.iter().filter(|&&v| v >= observed).count() as f64 / vals.len() as f64,
            }
        })
        .collect();
    let (mean_normalized, mean_stderr) = mean_and_se(&normalized);
    Ok(CltLevel {
        r,
        n: normalized.len(),
        nx: level.domain.nx(),
        nt: level.domain.nt,
        dx: level.domain.dx,
        variance,
        quadrature,
        mean_normalized,
        mean_stderr,
        bandwidth: density.bandwidth,
        sup_distance: density.sup_distance,
        kolmogorov: density.kolmogorov,
        tv_estimate: density.tv_estimate,
        floors,
        raw,
        normalized,
        density: Some(density),
    })
}

/// Rate fits on floor-corrected distances; `R` whose distance is inside the
/// floor are dropped and noted.
pub fn fit_ladder(levels: &[CltLevel]) -> Vec<MetricFit> {
    Metric::ALL
        .iter()
        .map(|&m| {
            let pts: Vec<(f64, f64)> = levels
                .iter()
                .map(|l| (l.r, l.corrected(m)))
                .filter(|&(_, d)| d > 0.0)
                .collect();
            let dropped = levels.len() - pts.len();
            let note = (dropped > 0).then(|| format!("{dropped} level(s) at or below the oracle floor were dropped"));
            let (fit, note) = match rate_fit(&pts) {
                Ok(f) => (Some(f), note),
                Err(e) => (None, Some(note.map_or(e.to_string(), |n| format!("{n}; {e}")))),
            };
            MetricFit {
                metric: m,
                floor_corrected: true,
                points_used: pts.len(),
                fit,
                note,
            }
        })
        .collect()
}

pub fn run_clt_scan(cfg: &CampaignConfig, dumps: &Dumps) -> Result<CltResult> {
    cfg.validate()?;
    let workers = cfg.workers.resolve();
    let pool = thread_pool(workers)?;
    let mut out = Outputs::new(&cfg.output_dir);
    let mut levels = Vec::new();
    let mut failures = Vec::new();
    for &r in &cfg.r_ladder {
        match pool.install(|| clt_level(cfg, r)) {
            Ok(l) => {
                write_clt_level(&mut out, &l, cfg)?;
                levels.push(l);
            }
            Err(e) => failures.push(LevelFailure { r, error: e.to_string() }),
        }
    }
    if let Some(&r) = cfg.r_ladder.first() {
        Level::new(cfg, r, Purpose::Density, "clt-scan")?.write_dumps(cfg, dumps)?;
    }
    let fits = fit_ladder(&levels);
    let mut table = Csv::new(&["R", "n", "metric", "value", "floor_value", "floor_p99", "corrected", "bandwidth"]);
    for l in &levels {
        for &m in &Metric::ALL {
            let f = l.floor(m);
            table.push(vec![
                l.r.into(),
                l.n.into(),
                m.name().into(),
                l.distance(m).into(),
                f.median.into(),
                f.p99.into(),
                l.corrected(m).into(),
                l.bandwidth.into(),
            ]);
        }
    }
    out.csv("distances.csv", &table)?;
    out.json("rate_fit.json", &fits)?;
    let result = CltResult {
        partial: !failures.is_empty(),
        levels,
        failures,
        fits,
    };
    out.json("summary.json", &result)?;
    out.json("provenance.json", &Provenance::new("clt-scan", cfg, workers))?;
    Ok(result)
}

fn write_clt_level(out: &mut Outputs, l: &CltLevel, cfg: &CampaignConfig) -> Result<()> {
    let tag = r_tag(l.r);
    let mut samples = Csv::new(&["replicate", "R", "t", "beta", "raw", "normalized"]);
    for (i, (&raw, &z)) in l.raw.iter().zip(&l.normalized).enumerate() {
        samples.push(vec![i.into(), l.r.into(), cfg.t.into(), cfg.beta.into(), raw.into(), z.into()]);
    }
    out.csv(&format!("samples_{tag}.csv"), &samples)?;
    #[derive(Serialize)]
    struct VarianceSidecar<'a> {
        variance: &'a VarianceEstimate,
        quadrature: &'a Option<VarianceEstimate>,
    }
    out.json(
        &format!("variance_{tag}.json"),
        &VarianceSidecar {
            variance: &l.variance,
            quadrature: &l.quadrature,
        },
    )?;
    if let Some(d) = &l.density {
        let mut dens = Csv::new(&["z", "density", "normal_pdf"]);
        for (&z, &f) in d.grid.iter().zip(&d.density) {
            dens.push(vec![z.into(), f.into(), stats::normal_pdf(z).into()]);
        }
        out.csv(&format!("density_{tag}.csv"), &dens)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// malliavin-diag

#[derive(Debug, Clone, Copy, Serialize)]
pub struct MalliavinRow {
    pub replicate: u64,
    pub r: f64,
    pub gram_norm: f64,
    pub stein_pairing: f64,
    /// Largest `|D u|` outside the forward cone over the sampled bases.
    pub cone_violation: f64,
    /// Hutchinson estimate of `‖D²F‖²`.
    pub d2_norm_estimate: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MalliavinLevel {
    pub r: f64,
    pub n: usize,
    pub nx: usize,
    pub nt: usize,
    pub sigma2: VarianceEstimate,
    pub gram_mean: f64,
    pub gram_stderr: f64,
    pub gram_variance: f64,
    pub gram_variance_stderr: f64,
    pub gram_cv: f64,
    pub stein_mean: f64,
    pub stein_stderr: f64,
    pub cone_violation_max: f64,
    pub d2_mean: f64,
    pub d2_stderr: f64,
    pub small_ball: Option<SmallBallTable>,
    #[serde(skip)]
    pub rows: Vec<MalliavinRow>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MalliavinResult {
    pub levels: Vec<MalliavinLevel>,
    pub failures: Vec<LevelFailure>,
    /// `log Var(‖DF‖²_H)` against `log R`.
    pub variance_fit: Option<RateFit>,
    /// `log √E‖D²F‖²` against `log R`.
    pub d2_fit: Option<RateFit>,
    pub partial: bool,
}

/// Largest `|values|` at nodes outside the base's forward cone.
pub fn cone_violation(field: &malliavin::DerivativeField) -> f64 {
    let (m, k) = field.base;
    let mut worst = 0.0f64;
    for n in 0..=field.nt {
        for j in 0..field.nx {
            let inside = n > m && j.abs_diff(k) < n - m;
            if !inside {
                worst = worst.max(field.at(n, j).abs());
            }
        }
    }
    worst
}

pub fn malliavin_pilot_size(cfg: &CampaignConfig) -> usize {
    cfg.pilot_replicates.unwrap_or(cfg.replicates.max(10_000))
}

pub fn malliavin_level(cfg: &CampaignConfig, r: f64) -> Result<MalliavinLevel> {
    let level = Level::new(cfg, r, Purpose::Malliavin, "malliavin-diag")?;
    if level.domain.nt > 64 {
        return Err(invalid(format!(
            "Malliavin diagnostics are capped at 64 time steps, grid has {}",
            level.domain.nt
        )));
    }
    let beta = cfg.exponent();
    let pilot = level.averages(cfg, "pilot", malliavin_pilot_size(cfg))?;
    let sigma2 = estimate_sigma2_mc(&pilot, r, cfg.t, beta)?;
    let zero = solve(cfg.scheme, &NoiseField::zeros(level.spec), &cfg.diffusion, level.domain.origin())?;
    let ctx = MalliavinContext::new(&zero, r, sigma2.sigma2)?;
    let probes = cfg.hutchinson_probes as u64;
    let rows: Vec<MalliavinRow> = (0..cfg.replicates as u64)
        .into_par_iter()
        .map(|i| {
            let (noise, sol) = level.replicate(cfg, DEFAULT_STREAM, i)?;
            let rep = malliavin::assemble_report_with(&ctx, &sol, &noise, &cfg.diffusion)?;
            let mut g = rng::stream(level.spec.seed, "cone-bases", &[i]);
            let mut violation = 0.0f64;
            for _ in 0..cfg.cone_bases {
                let base = (g.random_range(0..sol.nt()), g.random_range(0..sol.nx()));
                let d = malliavin::first_derivative(&sol, &noise, &cfg.diffusion, base)?;
                violation = violation.max(cone_violation(&d));
            }
            let mut d2 = 0.0;
            for p in 0..probes {
                let z = malliavin::probe_field(&level.model, &sol, i * probes + p)?;
                d2 += malliavin::d2_norm_sq_estimate(&ctx, &sol, &noise, &cfg.diffusion, &z)?;
            }
            Ok(MalliavinRow {
                replicate: i,
                r,
                gram_norm: rep.gram_norm,
                stein_pairing: rep.stein_pairing,
                cone_violation: violation,
                d2_norm_estimate: if probes > 0 { d2 / probes as f64 } else { f64::NAN },
            })
        })
        .collect::<Result<_>>()?;
    let gram: Vec<f64> = rows.iter().map(|r| r.gram_norm).collect();
    let stein: Vec<f64> = rows.iter().map(|r| r.stein_pairing).collect();
    let d2: Vec<f64> = rows.iter().map(|r| r.d2_norm_estimate).collect();
    let gm = stats::moments(&gram);
    let m2 = gm.variance * (gm.n as f64 - 1.0) / gm.n as f64;
    let m4 = (gm.excess_kurtosis + 3.0) * m2 * m2;
    let (stein_mean, stein_stderr) = mean_and_se(&stein);
    let (d2_mean, d2_stderr) = mean_and_se(&d2);
    let small_ball = if rows.len() >= 1000 {
        Some(malliavin::small_ball_probe(&gram, &cfg.small_ball_eps)?)
    } else {
        None
    };
    Ok(MalliavinLevel {
        r,
        n: rows.len(),
        nx: level.domain.nx(),
        nt: level.domain.nt,
        sigma2,
        gram_mean: gm.mean,
        gram_stderr: gm.stderr,
        gram_variance: gm.variance,
        gram_variance_stderr: ((m4 - m2 * m2).max(0.0) / gm.n as f64).sqrt(),
        gram_cv: gm.variance.sqrt() / gm.mean,
        stein_mean,
        stein_stderr,
        cone_violation_max: rows.iter().map(|r| r.cone_violation).fold(0.0, f64::max),
        d2_mean,
        d2_stderr,
        small_ball,
        rows,
    })
}

pub fn run_malliavin_diag(cfg: &CampaignConfig, dumps: &Dumps) -> Result<MalliavinResult> {
    cfg.validate()?;
    let workers = cfg.workers.resolve();
    let pool = thread_pool(workers)?;
    let mut out = Outputs::new(&cfg.output_dir);
    let mut levels = Vec::new();
    let mut failures = Vec::new();
    for &r in &cfg.r_ladder {
        match pool.install(|| malliavin_level(cfg, r)) {
            Ok(l) => {
                if let Some(sb) = &l.small_ball {
                    let mut t = Csv::new(&["epsilon", "fraction_below"]);
                    for &(e, f) in &sb.rows {
                        t.push(vec![e.into(), f.into()]);
                    }
                    out.csv(&format!("small_ball_{}.csv", r_tag(r)), &t)?;
                }
                levels.push(l);
            }
            Err(e) => failures.push(LevelFailure { r, error: e.to_string() }),
        }
    }
    if let Some(&r) = cfg.r_ladder.first() {
        Level::new(cfg, r, Purpose::Malliavin, "malliavin-diag")?.write_dumps(cfg, dumps)?;
    }
    let mut table = Csv::new(&["replicate", "R", "gram_norm", "stein_pairing", "cone_violation", "d2_norm_estimate"]);
    for l in &levels {
        for row in &l.rows {
            table.push(vec![
                row.replicate.into(),
                row.r.into(),
                row.gram_norm.into(),
                row.stein_pairing.into(),
                row.cone_violation.into(),
                row.d2_norm_estimate.into(),
            ]);
        }
    }
    out.csv("malliavin.csv", &table)?;
    let variance_fit = rate_fit(&levels.iter().map(|l| (l.r, l.gram_variance)).collect::<Vec<_>>()).ok();
    let d2_fit = rate_fit(&levels.iter().map(|l| (l.r, l.d2_mean.sqrt())).collect::<Vec<_>>()).ok();
    let result = MalliavinResult {
        partial: !failures.is_empty(),
        levels,
        failures,
        variance_fit,
        d2_fit,
    };
    out.json("malliavin_summary.json", &result)?;
    out.json("provenance.json", &Provenance::new("malliavin-diag", cfg, workers))?;
    Ok(result)
}

// ---------------------------------------------------------------------------
// kernels

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Fail,
    Info,
}

impl Status {
    fn from_bool(ok: bool) -> Self {
        if ok {
            Status::Pass
        } else {
            Status::Fail
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Status::Pass => "pass",
            Status::Fail => "fail",
            Status::Info => "info",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelRow {
    pub quantity: String,
    pub beta: f64,
    pub t: f64,
    pub r: f64,
    pub delta: f64,
    pub value: f64,
    pub reference: f64,
    pub tolerance: f64,
    pub status: Status,
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelsReport {
    pub rows: Vec<KernelRow>,
    pub c_beta: CBetaCalibration,
    pub variance_constant: f64,
    pub g_ratio_min: f64,
    pub phi_fit: RateFit,
}

impl KernelsReport {
    pub fn row(&self, quantity: &str) -> Option<&KernelRow> {
        self.rows.iter().find(|r| r.quantity == quantity)
    }
}

/// Deterministic probe tuples `(t, s, x, ξ)` from an additive recurrence.
pub fn c_beta_probes(count: usize) -> Vec<(f64, f64, f64, f64)> {
    const ALPHA: [f64; 4] = [0.618_033_988_749_894_9, 0.414_213_562_373_095_1, 0.732_050_807_568_877_2, 0.236_067_977_499_789_7];
    (1..=count)
        .map(|i| {
            let u = ALPHA.map(|a| (i as f64 * a).fract());
            (0.1 + 1.9 * u[0], 0.1 + 1.9 * u[1], -2.0 + 4.0 * u[2], -2.0 + 4.0 * u[3])
        })
        .collect()
}

pub const G_DELTAS: [f64; 8] = [0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4];
pub const PHI_LADDER: [f64; 4] = [4.0, 8.0, 16.0, 32.0];
pub const VARIANCE_LADDER: [f64; 4] = [5.0, 20.0, 50.0, 200.0];

pub fn kernels_report(beta: RieszExponent, t: f64, g_window: f64) -> Result<KernelsReport> {
    let b = beta.beta();
    let mut rows = Vec::new();
    let mut row = |quantity: &str, r: f64, delta: f64, value: f64, reference: f64, tolerance: f64, status: Status| {
        rows.push(KernelRow {
            quantity: quantity.into(),
            beta: b,
            t,
            r,
            delta,
            value,
            reference,
            tolerance,
            status,
        })
    };
    let nan = f64::NAN;

    let probes = c_beta_probes(100);
    let c_beta = calibrate_c_beta_par(beta, &probes)?;
    let c_ref = beta.box_normalization();
    for &ratio in &c_beta.ratios {
        let ok = (ratio / c_ref - 1.0).abs() <= 1e-4;
        row("c_beta_ratio", nan, nan, ratio, c_ref, 1e-4, Status::from_bool(ok));
    }
    row("c_beta_max_over_min", nan, nan, c_beta.max_over_min, 1.0, 1e-4, Status::from_bool(c_beta.max_over_min <= 1.0 + 1e-4));

    let vc = kernels::variance_constant(beta, t, |_| 1.0)?;
    let vc_ref = 2f64.powf(2.0 - b) * t.powi(3) / 3.0;
    row("variance_constant", nan, nan, vc, vc_ref, 1e-4, Status::from_bool((vc - vc_ref).abs() <= 1e-4));
    let limit = vc * kernels::riesz_ball_factor(beta);
    row("variance_limit_riesz", nan, nan, limit, nan, nan, Status::Info);
    for &r in &VARIANCE_LADDER {
        let ratio = kernels::cumulative_window_energy(r, t, beta)? / r.powf(2.0 - b);
        row("sigma2_over_r_pow", r, nan, ratio, vc, 0.05, Status::from_bool((ratio / vc - 1.0).abs() <= 0.05));
        row("sigma2_over_r_pow_riesz", r, nan, ratio, limit, 0.05, Status::from_bool((ratio / limit - 1.0).abs() <= 0.05));
    }

    let window = WindowFunction::new(g_window, t)?;
    let sigma2 = kernels::cumulative_window_energy(g_window, t, beta)?;
    let mut g_ratio_min = f64::INFINITY;
    for &d in &G_DELTAS {
        let g = kernels::g_delta_closed(window, d, beta, sigma2)?;
        let lower = kernels::g_delta_lower_bound(window, d, beta, sigma2)?;
        let ratio = g / d.powi(3);
        g_ratio_min = g_ratio_min.min(ratio);
        row("g_delta_over_delta3", g_window, d, ratio, lower / d.powi(3), nan, Status::from_bool(g >= lower && ratio > 0.0));
    }

    let phi: Vec<(f64, f64)> = PHI_LADDER
        .par_iter()
        .map(|&r| Ok((r, kernels::phi_appendix(r, t, beta, 1e-8)?)))
        .collect::<Result<_>>()?;
    for &(r, v) in &phi {
        row("phi", r, nan, v, nan, nan, Status::Info);
    }
    let phi_fit = rate_fit(&phi)?;
    let bound = 2.0 - 2.0 * b;
    row("phi_exponent", nan, nan, phi_fit.slope, bound, 0.2, Status::from_bool(phi_fit.slope <= bound + 0.2));

    Ok(KernelsReport {
        rows,
        c_beta,
        variance_constant: vc,
        g_ratio_min,
        phi_fit,
    })
}

fn calibrate_c_beta_par(beta: RieszExponent, probes: &[(f64, f64, f64, f64)]) -> Result<CBetaCalibration> {
    let parts: Vec<CBetaCalibration> = probes
        .par_iter()
        .map(|p| kernels::calibrate_c_beta(beta, std::slice::from_ref(p), 1e-10))
        .collect::<Result<_>>()?;
    let ratios: Vec<f64> = parts.into_iter().flat_map(|c| c.ratios).collect();
    let max = ratios.iter().copied().fold(f64::MIN, f64::max);
    let min = ratios.iter().copied().fold(f64::MAX, f64::min);
    Ok(CBetaCalibration {
        beta: beta.beta(),
        estimate: ratios.iter().sum::<f64>() / ratios.len() as f64,
        max_over_min: max / min,
        ratios,
    })
}

pub fn run_kernels_report(cfg: &CampaignConfig) -> Result<KernelsReport> {
    cfg.validate()?;
    let workers = cfg.workers.resolve();
    let report = thread_pool(workers)?.install(|| kernels_report(cfg.exponent(), cfg.t, cfg.r_ladder[0]))?;
    let mut out = Outputs::new(&cfg.output_dir);
    let mut table = Csv::new(&["quantity", "beta", "t", "R", "delta", "value", "reference", "tolerance", "status"]);
    for r in &report.rows {
        table.push(vec![
            r.quantity.clone().into(),
            r.beta.into(),
            r.t.into(),
            r.r.into(),
            r.delta.into(),
            r.value.into(),
            r.reference.into(),
            r.tolerance.into(),
            r.status.name().into(),
        ]);
    }
    out.csv("kernels.csv", &table)?;
    out.json("provenance.json", &Provenance::new("kernels", cfg, workers))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// noise-check

#[derive(Debug, Clone, Serialize)]
pub struct NoiseCheck {
    pub beta: f64,
    pub dx: f64,
    pub nx: usize,
    pub nt: usize,
    pub fields: usize,
    pub method: SamplingMethod,
    pub min_eigenvalue_ratio: f64,
    /// `dt·C(ℓ)` for `ℓ = 0..=max_lag`.
    pub expected: Vec<f64>,
    pub report: CovarianceReport,
    pub max_spatial_z: f64,
    pub max_time_lag_z: f64,
}

pub fn noise_check(beta: RieszExponent, dx: f64, nx: usize, nt: usize, fields: usize, seed: u64, max_lag: usize) -> Result<NoiseCheck> {
    let spec = NoiseSpec::new(beta, dx, dx, nx, nt, seed)?;
    let model = build_covariance(&spec)?;
    let samples: Vec<NoiseField> = (0..fields as u64)
        .into_par_iter()
        .map(|i| sample_field_stream(&model, &spec, DEFAULT_STREAM, i))
        .collect::<Result<_>>()?;
    let report = empirical_covariance(&samples, max_lag)?;
    let expected: Vec<f64> = model.row[..=max_lag].to_vec();
    Ok(NoiseCheck {
        beta: beta.beta(),
        dx,
        nx,
        nt,
        fields,
        method: model.method,
        min_eigenvalue_ratio: model.min_eigenvalue_ratio,
        max_spatial_z: report.max_z_against(&expected),
        max_time_lag_z: report.max_time_lag_z(),
        expected,
        report,
    })
}

pub fn run_noise_check(cfg: &CampaignConfig, dumps: &Dumps) -> Result<NoiseCheck> {
    cfg.validate()?;
    let workers = cfg.workers.resolve();
    let dx = cfg.dx(Purpose::Density);
    let check = thread_pool(workers)?
        .install(|| noise_check(cfg.exponent(), dx, cfg.noise_nx, 4, cfg.noise_fields, cfg.seed, cfg.max_lag))?;
    if let Some(p) = &dumps.noise {
        let spec = NoiseSpec::new(cfg.exponent(), dx, dx, cfg.noise_nx, 4, cfg.seed)?;
        dump::write_noise(p, &crate::noise::sample_field(&build_covariance(&spec)?, &spec, 0)?)?;
    }
    let mut out = Outputs::new(&cfg.output_dir);
    let mut table = Csv::new(&["kind", "lag", "empirical", "expected", "stderr", "z"]);
    let z = |d: f64, se: f64| if se > 0.0 { d / se } else { 0.0 };
    for s in &check.report.spatial {
        let e = check.expected[s.lag as usize];
        table.push(vec!["same-time".into(), Cell::Text(s.lag.to_string()), s.value.into(), e.into(), s.stderr.into(), z(s.value - e, s.stderr).into()]);
    }
    for s in &check.report.time_lag_one {
        table.push(vec!["time-lag-one".into(), Cell::Text(s.lag.to_string()), s.value.into(), 0.0.into(), s.stderr.into(), z(s.value, s.stderr).into()]);
    }
    out.csv("noise_covariance.csv", &table)?;
    out.json("noise_summary.json", &check)?;
    out.json("provenance.json", &Provenance::new("noise-check", cfg, workers))?;
    Ok(check)
}

// ---------------------------------------------------------------------------
// solver-check

#[derive(Debug, Clone, Serialize)]
pub struct SolverRow {
    pub dx: f64,
    pub replicate: u64,
    pub comparison: Comparison,
    pub max_abs: f64,
    pub rms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolverCheck {
    pub r: f64,
    pub rows: Vec<SolverRow>,
    /// Per comparison, `log mean max|Δu|` against `log dx`.
    pub fits: Vec<(Comparison, RateFit)>,
}

impl SolverCheck {
    pub fn slope(&self, c: Comparison) -> Option<f64> {
        self.fits.iter().find(|(k, _)| *k == c).map(|(_, f)| f.slope)
    }
}

/// Walsh-sum against leapfrog on shared noise across a refinement ladder
/// `dx = t/16, t/32, …`; coarse noise is aggregated from the finest grid.
pub fn solver_check(cfg: &CampaignConfig, r: f64, dumps: &Dumps) -> Result<SolverCheck> {
    let levels = cfg.solver_levels;
    let mut domains = vec![Domain::for_window(r, cfg.t, cfg.t / 16.0)?];
    for _ in 1..levels {
        let d = domains.last().expect("nonempty").refined();
        domains.push(d);
    }
    let finest = *domains.last().expect("nonempty");
    let spec = finest.noise_spec(cfg.exponent(), rng::derive_seed(cfg.seed, "solver-check", &[r.to_bits()]))?;
    let model = build_covariance(&spec)?;
    let region = Region { x_min: -r, x_max: r };
    let per_rep: Vec<Vec<SolverRow>> = (0..cfg.solver_replicates as u64)
        .into_par_iter()
        .map(|i| {
            let mut field = sample_field_stream(&model, &spec, DEFAULT_STREAM, i)?;
            let mut rows = Vec::new();
            for (level, d) in domains.iter().enumerate().rev() {
                if level + 1 < domains.len() {
                    field = field.coarsen(Domain::refinement_offset(), d.nx())?;
                }
                let walsh = solve(Scheme::WalshSum, &field, &cfg.diffusion, d.origin())?;
                let leap = solve(Scheme::Leapfrog, &field, &cfg.diffusion, d.origin())?;
                if i == 0 && level + 1 == domains.len() {
                    if let Some(p) = &dumps.noise {
                        dump::write_noise(p, &field)?;
                    }
                    if let Some(p) = &dumps.solution {
                        dump::write_solution(p, &walsh)?;
                    }
                }
                for c in [Comparison::Pointwise, Comparison::ParitySmoothed] {
                    let disc = cross_validate(&walsh, &leap, region, c)?;
                    rows.push(SolverRow {
                        dx: d.dx,
                        replicate: i,
                        comparison: c,
                        max_abs: disc.max_abs,
                        rms: disc.rms,
                    });
                }
            }
            rows.reverse();
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    let rows: Vec<SolverRow> = per_rep.into_iter().flatten().collect();
    let mut fits = Vec::new();
    for c in [Comparison::Pointwise, Comparison::ParitySmoothed] {
        let pts: Vec<(f64, f64)> = domains
            .iter()
            .map(|d| {
                let v: Vec<f64> = rows.iter().filter(|x| x.comparison == c && x.dx == d.dx).map(|x| x.max_abs).collect();
                (d.dx, v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect();
        fits.push((c, rate_fit(&pts)?));
    }
    Ok(SolverCheck { r, rows, fits })
}

pub fn run_solver_check(cfg: &CampaignConfig, dumps: &Dumps) -> Result<SolverCheck> {
    cfg.validate()?;
    let workers = cfg.workers.resolve();
    let r = cfg.r_ladder[0];
    let check = thread_pool(workers)?.install(|| solver_check(cfg, r, dumps))?;
    let mut out = Outputs::new(&cfg.output_dir);
    let mut table = Csv::new(&["dx", "replicate", "comparison", "max_abs", "rms"]);
    for row in &check.rows {
        let c = match row.comparison {
            Comparison::Pointwise => "pointwise",
            Comparison::ParitySmoothed => "parity-smoothed",
        };
        table.push(vec![row.dx.into(), row.replicate.into(), c.into(), row.max_abs.into(), row.rms.into()]);
    }
    out.csv("solver_check.csv", &table)?;
    out.json("solver_summary.json", &check.fits)?;
    out.json("provenance.json", &Provenance::new("solver-check", cfg, workers))?;
    Ok(check)
}

// ---------------------------------------------------------------------------
// Malliavin moment bounds

/// One probe of the first-derivative bound: base `(s, y)`, target `(t, x)`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FirstProbe {
    pub s: f64,
    pub y: f64,
    pub x: f64,
}

/// One probe of the second-derivative bound: bases `(r, z)`, `(s, y)`,
/// target `(t, x)`, with `(s, y)` inside the forward cone of `(r, z)`.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SecondProbe {
    pub r: f64,
    pub z: f64,
    pub s: f64,
    pub y: f64,
    pub x: f64,
}

/// Stratified probes in physical coordinates: `bases` strata in time, each
/// with `targets` targets spread across 90% of the cone at time `t`.
pub fn stratified_probes(t: f64, bases: usize, targets: usize) -> (Vec<FirstProbe>, Vec<SecondProbe>) {
    let frac = |k: usize, n: usize| (k as f64 + 0.5) / n as f64;
    let spread = |k: usize| -0.9 + 1.8 * frac(k, targets);
    let mut first = Vec::with_capacity(bases * targets);
    let mut second = Vec::with_capacity(bases * targets);
    for i in 0..bases {
        let s = 0.8 * t * frac(i, bases);
        let y = 0.1 * t * ((i % 5) as f64 - 2.0);
        for k in 0..targets {
            first.push(FirstProbe { s, y, x: y + (t - s) * spread(k) });
        }
        let r = 0.4 * t * frac(i, bases);
        let z = -y;
        let s2 = r + (t - r) * (0.2 + 0.6 * frac((i * 7) % bases, bases));
        let y2 = z + (s2 - r) * 0.8 * ((i % 3) as f64 - 1.0) * 0.5;
        for k in 0..targets {
            second.push(SecondProbe {
                r,
                z,
                s: s2,
                y: y2,
                x: y2 + (t - s2) * spread(k),
            });
        }
    }
    (first, second)
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentRatios {
    pub divisions: usize,
    pub replicates: usize,
    /// `‖D_{s,y}u(t,x)‖₄ / G(t−s, x−y)` per first-derivative probe.
    pub first: Vec<f64>,
    /// `‖D_{r,z}D_{s,y}u(t,x)‖₂ / (G(t−s, x−y) G(s−r, y−z))` per probe.
    pub second: Vec<f64>,
    pub max_first: f64,
    pub max_second: f64,
}

/// Empirical moment-bound ratios on a grid `dx = dt = t/divisions` padded
/// around the probes, using the Walsh-sum scheme whose discrete Green's
/// function is `G` itself.
pub fn moment_ratios(
    beta: RieszExponent,
    diffusion: &crate::solver::Diffusion,
    t: f64,
    divisions: usize,
    replicates: usize,
    seed: u64,
    first: &[FirstProbe],
    second: &[SecondProbe],
) -> Result<MomentRatios> {
    let dx = t / divisions as f64;
    let domain = Domain::for_window(0.0, t, dx)?;
    let spec = domain.noise_spec(beta, seed)?;
    let model = build_covariance(&spec)?;
    let nt = domain.nt;
    let time = |s: f64| ((s / dx).round() as usize).min(nt - 1);
    let space = |x: f64| -> Result<usize> {
        let j = (x / dx).round() + domain.half_cells as f64;
        if j < 0.0 || j as usize >= domain.nx() {
            return Err(invalid(format!("probe x = {x} is outside the domain")));
        }
        Ok(j as usize)
    };
    let inside = |base: (usize, usize), n: usize, j: usize| n > base.0 && j.abs_diff(base.1) < n - base.0;
    let green = |b: (usize, usize), n: usize, j: usize| {
        kernels::green((n - b.0) as f64 * dx, (j as f64 - b.1 as f64) * dx).expect("positive time")
    };
    let snap1: Vec<((usize, usize), usize)> = first
        .iter()
        .map(|p| {
            let b = (time(p.s), space(p.y)?);
            let j = space(p.x)?;
            if !inside(b, nt, j) {
                return Err(invalid(format!("first probe {p:?} is not inside the cone on this grid")));
            }
            Ok((b, j))
        })
        .collect::<Result<_>>()?;
    let snap2: Vec<((usize, usize), (usize, usize), usize)> = second
        .iter()
        .map(|p| {
            let a = (time(p.r), space(p.z)?);
            let b = (time(p.s), space(p.y)?);
            let j = space(p.x)?;
            if !(inside(a, b.0, b.1) && inside(b, nt, j)) {
                return Err(invalid(format!("second probe {p:?} is not nested inside the cones on this grid")));
            }
            Ok((a, b, j))
        })
        .collect::<Result<_>>()?;
    let mut bases: Vec<(usize, usize)> = snap1.iter().map(|p| p.0).chain(snap2.iter().flat_map(|p| [p.0, p.1])).collect();
    bases.sort_unstable();
    bases.dedup();
    let index = |b: &(usize, usize)| bases.binary_search(b).expect("base registered");

    // Per replicate: |D u|⁴ per first probe and |D²u|² per second probe.
    let per_rep: Vec<(Vec<f64>, Vec<f64>)> = (0..replicates as u64)
        .into_par_iter()
        .map(|i| {
            let noise = sample_field_stream(&model, &spec, DEFAULT_STREAM, i)?;
            let sol = solve(Scheme::WalshSum, &noise, diffusion, domain.origin())?;
            let fields: Vec<malliavin::DerivativeField> = bases
                .iter()
                .map(|&b| malliavin::first_derivative(&sol, &noise, diffusion, b))
                .collect::<Result<_>>()?;
            let f1 = snap1.iter().map(|&(b, j)| fields[index(&b)].at(nt, j).powi(4)).collect();
            let mut f2 = Vec::with_capacity(snap2.len());
            let mut cache: Option<((usize, usize), (usize, usize), malliavin::SecondDerivativeField)> = None;
            for &(a, b, j) in &snap2 {
                let fresh = !matches!(&cache, Some((ca, cb, _)) if *ca == a && *cb == b);
                if fresh {
                    let d2 = malliavin::second_derivative(&sol, &noise, diffusion, &fields[index(&a)], &fields[index(&b)])?;
                    cache = Some((a, b, d2));
                }
                let d2 = &cache.as_ref().expect("filled").2;
                f2.push(d2.at(nt, j).powi(2));
            }
            Ok((f1, f2))
        })
        .collect::<Result<_>>()?;
    let n = replicates as f64;
    let first_ratio: Vec<f64> = snap1
        .iter()
        .enumerate()
        .map(|(p, &(b, j))| {
            let m4 = per_rep.iter().map(|r| r.0[p]).sum::<f64>() / n;
            m4.powf(0.25) / green(b, nt, j)
        })
        .collect();
    let second_ratio: Vec<f64> = snap2
        .iter()
        .enumerate()
        .map(|(p, &(a, b, j))| {
            let m2 = per_rep.iter().map(|r| r.1[p]).sum::<f64>() / n;
            m2.sqrt() / (green(b, nt, j) * green(a, b.0, b.1))
        })
        .collect();
    Ok(MomentRatios {
        divisions,
        replicates,
        max_first: first_ratio.iter().copied().fold(0.0, f64::max),
        max_second: second_ratio.iter().copied().fold(0.0, f64::max),
        first: first_ratio,
        second: second_ratio,
    })
}
