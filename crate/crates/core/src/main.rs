use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use swe_clt::campaign::{self, CampaignConfig, Dumps, Overrides};
use swe_clt::stats::Metric;

#[derive(Parser)]
#[command(name = "swe-clt", version, about = "Spatial-average CLT experiments for the stochastic wave equation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Density of the normalised spatial average across an R ladder, with rate fits.
    CltScan(Common),
    /// Malliavin Gram/Stein diagnostics across an R ladder.
    MalliavinDiag(Common),
    /// Deterministic kernel tables.
    Kernels(Common),
    /// Empirical covariance of sampled noise against the exact cell covariance.
    NoiseCheck(Common),
    /// Walsh-sum against leapfrog on shared noise under refinement.
    SolverCheck(Common),
}

#[derive(Args)]
struct Common {
    /// TOML campaign file.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, env = "SWE_CLT_WORKERS")]
    workers: Option<usize>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dump_noise: Option<PathBuf>,
    #[arg(long)]
    dump_solution: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> swe_clt::Result<(CampaignConfig, Dumps)> {
        let mut cfg = CampaignConfig::load(&self.config)?;
        cfg.apply(&Overrides {
            seed: self.seed,
            workers: self.workers,
            output_dir: self.out.clone(),
        })?;
        let dumps = Dumps {
            noise: self.dump_noise.clone(),
            solution: self.dump_solution.clone(),
        };
        Ok((cfg, dumps))
    }
}

fn run(cli: Cli) -> swe_clt::Result<bool> {
    match cli.command {
        Command::CltScan(c) => {
            let (cfg, dumps) = c.load()?;
            let res = campaign::run_clt_scan(&cfg, &dumps)?;
            for l in &res.levels {
                println!(
                    "R={} n={} sigma2={:.6e} sup={:.4e} kolmogorov={:.4e} tv={:.4e} (floor sup {:.4e})",
                    l.r,
                    l.n,
                    l.variance.sigma2,
                    l.sup_distance,
                    l.kolmogorov,
                    l.tv_estimate,
                    l.floor(Metric::Sup).median
                );
            }
            for f in &res.failures {
                eprintln!("R={} failed: {}", f.r, f.error);
            }
            for f in &res.fits {
                match &f.fit {
                    Some(fit) => println!("{} slope {:.4} ± {:.4}", f.metric.name(), fit.slope, fit.slope_stderr),
                    None => println!("{} slope unavailable: {}", f.metric.name(), f.note.as_deref().unwrap_or("")),
                }
            }
            Ok(!res.partial)
        }
        Command::MalliavinDiag(c) => {
            let (cfg, dumps) = c.load()?;
            let res = campaign::run_malliavin_diag(&cfg, &dumps)?;
            for l in &res.levels {
                println!(
                    "R={} gram={:.5}±{:.5} stein={:.5}±{:.5} var(gram)={:.4e} cone={:e} d2={:.4e}",
                    l.r, l.gram_mean, l.gram_stderr, l.stein_mean, l.stein_stderr, l.gram_variance, l.cone_violation_max, l.d2_mean
                );
            }
            for f in &res.failures {
                eprintln!("R={} failed: {}", f.r, f.error);
            }
            if let Some(f) = &res.variance_fit {
                println!("var(gram) slope {:.4} ± {:.4}", f.slope, f.slope_stderr);
            }
            Ok(!res.partial)
        }
        Command::Kernels(c) => {
            let (cfg, _) = c.load()?;
            let rep = campaign::run_kernels_report(&cfg)?;
            println!("c_beta max/min {:.3e}", rep.c_beta.max_over_min - 1.0);
            println!("variance constant {:.6}", rep.variance_constant);
            println!("min g(delta)/delta^3 {:.4}", rep.g_ratio_min);
            println!("phi exponent {:.4}", rep.phi_fit.slope);
            Ok(true)
        }
        Command::NoiseCheck(c) => {
            let (cfg, dumps) = c.load()?;
            let chk = campaign::run_noise_check(&cfg, &dumps)?;
            println!(
                "beta={} method={:?} max spatial z={:.3} max time-lag z={:.3}",
                chk.beta, chk.method, chk.max_spatial_z, chk.max_time_lag_z
            );
            Ok(true)
        }
        Command::SolverCheck(c) => {
            let (cfg, dumps) = c.load()?;
            let chk = campaign::run_solver_check(&cfg, &dumps)?;
            for (comp, fit) in &chk.fits {
                println!("{comp:?} refinement slope {:.3}", fit.slope);
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("some levels failed; results are partial");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
