//! Campaign configuration: a TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::kernels::RieszExponent;
use crate::solver::{Diffusion, Domain, Scheme};
use crate::stats::BandwidthRule;

/// Grid choice: `"auto"` or explicit steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr", into = "GridRepr")]
pub enum GridChoice {
    Auto,
    Steps { dt: f64, dx: f64 },
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum GridRepr {
    Name(String),
    Steps { dt: f64, dx: f64 },
}

impl TryFrom<GridRepr> for GridChoice {
    type Error = String;
    fn try_from(g: GridRepr) -> std::result::Result<Self, String> {
        match g {
            GridRepr::Name(s) if s == "auto" => Ok(GridChoice::Auto),
            GridRepr::Name(s) => Err(format!("grid must be \"auto\" or {{dt, dx}}, got {s:?}")),
            GridRepr::Steps { dt, dx } => Ok(GridChoice::Steps { dt, dx }),
        }
    }
}

impl From<GridChoice> for GridRepr {
    fn from(g: GridChoice) -> Self {
        match g {
            GridChoice::Auto => GridRepr::Name("auto".into()),
            GridChoice::Steps { dt, dx } => GridRepr::Steps { dt, dx },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "WorkersRepr", into = "WorkersRepr")]
pub enum Workers {
    Auto,
    Count(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum WorkersRepr {
    Count(usize),
    Name(String),
}

impl TryFrom<WorkersRepr> for Workers {
    type Error = String;
    fn try_from(w: WorkersRepr) -> std::result::Result<Self, String> {
        match w {
            WorkersRepr::Count(0) => Err("workers must be at least 1".into()),
            WorkersRepr::Count(n) => Ok(Workers::Count(n)),
            WorkersRepr::Name(s) if s == "auto" => Ok(Workers::Auto),
            WorkersRepr::Name(s) => Err(format!("workers must be a count or \"auto\", got {s:?}")),
        }
    }
}

impl From<Workers> for WorkersRepr {
    fn from(w: Workers) -> Self {
        match w {
            Workers::Auto => WorkersRepr::Name("auto".into()),
            Workers::Count(n) => WorkersRepr::Count(n),
        }
    }
}

impl Workers {
    pub fn resolve(&self) -> usize {
        match *self {
            Workers::Count(n) => n,
            Workers::Auto => std::thread::available_parallelism().map_or(1, |n| n.get()),
        }
    }
}

/// What the grid is for; decides the `"auto"` step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Density,
    Malliavin,
}

impl Purpose {
    pub fn auto_divisions(&self) -> f64 {
        match self {
            Purpose::Density => 128.0,
            Purpose::Malliavin => 32.0,
        }
    }
}

fn default_scheme() -> Scheme {
    Scheme::WalshSum
}
fn default_oracle_runs() -> usize {
    100
}
fn default_bandwidth() -> BandwidthRule {
    BandwidthRule::Silverman
}
fn default_cone_bases() -> usize {
    4
}
fn default_hutchinson() -> usize {
    1
}
fn default_small_ball() -> Vec<f64> {
    vec![1e-3, 1e-2, 0.05, 0.1, 0.25, 0.5]
}
fn default_noise_nx() -> usize {
    64
}
fn default_noise_fields() -> usize {
    10_000
}
fn default_max_lag() -> usize {
    16
}
fn default_solver_levels() -> usize {
    4
}
fn default_solver_replicates() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CampaignConfig {
    pub beta: f64,
    pub t: f64,
    pub diffusion: Diffusion,
    pub r_ladder: Vec<f64>,
    pub replicates: usize,
    #[serde(default = "grid_auto")]
    pub grid: GridChoice,
    pub seed: u64,
    #[serde(default = "workers_auto")]
    pub workers: Workers,
    pub output_dir: PathBuf,
    #[serde(default = "default_scheme")]
    pub scheme: Scheme,
    /// Size of the independent variance pilot; defaults to `replicates`.
    #[serde(default)]
    pub pilot_replicates: Option<usize>,
    #[serde(default = "default_oracle_runs")]
    pub oracle_runs: usize,
    #[serde(default = "default_bandwidth")]
    pub bandwidth: BandwidthRule,
    #[serde(default = "default_cone_bases")]
    pub cone_bases: usize,
    #[serde(default = "default_hutchinson")]
    pub hutchinson_probes: usize,
    #[serde(default = "default_small_ball")]
    pub small_ball_eps: Vec<f64>,
    #[serde(default = "default_noise_nx")]
    pub noise_nx: usize,
    #[serde(default = "default_noise_fields")]
    pub noise_fields: usize,
    #[serde(default = "default_max_lag")]
    pub max_lag: usize,
    #[serde(default = "default_solver_levels")]
    pub solver_levels: usize,
    #[serde(default = "default_solver_replicates")]
    pub solver_replicates: usize,
}

fn grid_auto() -> GridChoice {
    GridChoice::Auto
}
fn workers_auto() -> Workers {
    Workers::Auto
}

/// Command-line overrides, applied after loading.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

impl CampaignConfig {
    /// A config with every optional field at its default.
    pub fn new(beta: f64, t: f64, diffusion: Diffusion, r_ladder: Vec<f64>, replicates: usize, seed: u64, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            beta,
            t,
            diffusion,
            r_ladder,
            replicates,
            grid: GridChoice::Auto,
            seed,
            workers: Workers::Auto,
            output_dir: output_dir.into(),
            scheme: default_scheme(),
            pilot_replicates: None,
            oracle_runs: default_oracle_runs(),
            bandwidth: default_bandwidth(),
            cone_bases: default_cone_bases(),
            hutchinson_probes: default_hutchinson(),
            small_ball_eps: default_small_ball(),
            noise_nx: default_noise_nx(),
            noise_fields: default_noise_fields(),
            max_lag: default_max_lag(),
            solver_levels: default_solver_levels(),
            solver_replicates: default_solver_replicates(),
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text)
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(w) = o.workers {
            if w == 0 {
                return Err(Error::Config("workers must be at least 1".into()));
            }
            self.workers = Workers::Count(w);
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        RieszExponent::new(self.beta).map_err(|e| Error::Config(e.to_string()))?;
        if !(self.t > 0.0 && self.t.is_finite()) {
            return bad(format!("t must be positive, got {}", self.t));
        }
        if self.r_ladder.is_empty() {
            return bad("r_ladder is empty".into());
        }
        if self.r_ladder.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return bad("r_ladder entries must be positive".into());
        }
        if self.r_ladder.windows(2).any(|w| w[1] <= w[0]) {
            return bad("r_ladder must be strictly increasing".into());
        }
        if self.replicates < 100 {
            return bad(format!("replicates must be at least 100, got {}", self.replicates));
        }
        if let Some(p) = self.pilot_replicates {
            if p < 100 {
                return bad(format!("pilot_replicates must be at least 100, got {p}"));
            }
        }
        if let GridChoice::Steps { dt, dx } = self.grid {
            if dt != dx {
                return bad(format!("both schemes need dt = dx, got dt={dt}, dx={dx}"));
            }
            Domain::for_window(self.r_ladder[0], self.t, dx).map_err(|e| Error::Config(e.to_string()))?;
        }
        self.diffusion.check_hypothesis().map_err(|e| Error::Config(e.to_string()))?;
        if self.oracle_runs == 0 {
            return bad("oracle_runs must be at least 1".into());
        }
        if self.noise_nx < 2 || self.max_lag >= self.noise_nx {
            return bad("need 2 ≤ noise_nx and max_lag < noise_nx".into());
        }
        if self.solver_levels < 3 {
            return bad("solver_levels must be at least 3".into());
        }
        if self.solver_replicates == 0 {
            return bad("solver_replicates must be at least 1".into());
        }
        Ok(())
    }

    pub fn exponent(&self) -> RieszExponent {
        RieszExponent::new(self.beta).expect("validated")
    }

    pub fn dx(&self, purpose: Purpose) -> f64 {
        match self.grid {
            GridChoice::Auto => self.t / purpose.auto_divisions(),
            GridChoice::Steps { dx, .. } => dx,
        }
    }

    pub fn pilot(&self) -> usize {
        self.pilot_replicates.unwrap_or(self.replicates)
    }

    /// SHA-256 of the canonical JSON form, as lowercase hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const REFERENCE: &str = r#"
beta = 0.5
t = 1.0
diffusion = "sin2"
r_ladder = [2.0, 4.0, 8.0, 16.0, 32.0]
replicates = 100000
seed = 7
output_dir = "out"
"#;

    #[test]
    fn parses_with_defaults() {
        let c = CampaignConfig::from_toml_str(REFERENCE).unwrap();
        assert_eq!(c.grid, GridChoice::Auto);
        assert_eq!(c.workers, Workers::Auto);
        assert_eq!(c.dx(Purpose::Density), 1.0 / 128.0);
        assert_eq!(c.dx(Purpose::Malliavin), 1.0 / 32.0);
        assert_eq!(c.pilot(), 100000);
        assert_eq!(c.scheme, Scheme::WalshSum);
    }

    #[test]
    fn explicit_grid_and_workers() {
        let s = format!("{REFERENCE}grid = {{ dt = 0.0625, dx = 0.0625 }}\nworkers = 3\n");
        let c = CampaignConfig::from_toml_str(&s).unwrap();
        assert_eq!(c.grid, GridChoice::Steps { dt: 0.0625, dx: 0.0625 });
        assert_eq!(c.workers.resolve(), 3);
        let s = format!("{REFERENCE}grid = {{ dt = 0.0625, dx = 0.125 }}\n");
        assert!(CampaignConfig::from_toml_str(&s).is_err());
    }

    #[test]
    fn validation_errors() {
        let empty = REFERENCE.replace("[2.0, 4.0, 8.0, 16.0, 32.0]", "[]");
        assert!(matches!(CampaignConfig::from_toml_str(&empty), Err(Error::Config(_))));
        let unsorted = REFERENCE.replace("[2.0, 4.0, 8.0, 16.0, 32.0]", "[4.0, 2.0]");
        assert!(CampaignConfig::from_toml_str(&unsorted).is_err());
        assert!(CampaignConfig::from_toml_str(&REFERENCE.replace("100000", "10")).is_err());
        assert!(CampaignConfig::from_toml_str(&REFERENCE.replace("0.5", "1.5")).is_err());
        assert!(CampaignConfig::from_toml_str(&format!("{REFERENCE}bogus = 1\n")).is_err());
    }

    #[test]
    fn overrides_and_hash() {
        let mut c = CampaignConfig::from_toml_str(REFERENCE).unwrap();
        let h = c.hash();
        c.apply(&Overrides {
            seed: Some(8),
            workers: Some(2),
            output_dir: None,
        })
        .unwrap();
        assert_eq!(c.seed, 8);
        assert_ne!(c.hash(), h);
        let mut d = c.clone();
        assert_eq!(d.hash(), c.hash());
        assert!(d.apply(&Overrides { workers: Some(0), ..Default::default() }).is_err());
    }
}
