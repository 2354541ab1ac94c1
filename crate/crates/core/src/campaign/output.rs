//! CSV and JSON emission.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::dump::atomic_write;
use crate::error::Result;

use super::config::CampaignConfig;

/// One CSV cell.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Float(f64),
    Int(u64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}
impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v)
    }
}
impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}
impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_owned())
    }
}
impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

/// In-memory CSV table (UTF-8, comma, header row).
#[derive(Debug, Clone)]
pub struct Csv {
    header: Vec<String>,
    body: String,
    rows: usize,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            body: String::new(),
            rows: 0,
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.header.len(), "CSV row width mismatch");
        for (i, c) in row.iter().enumerate() {
            if i > 0 {
                self.body.push(',');
            }
            match c {
                Cell::Float(v) => self.body.push_str(&format_float(*v)),
                Cell::Int(v) => write!(self.body, "{v}").expect("write to string"),
                Cell::Text(s) if s.contains([',', '"', '\n']) => {
                    write!(self.body, "\"{}\"", s.replace('"', "\"\"")).expect("write to string")
                }
                Cell::Text(s) => self.body.push_str(s),
            }
        }
        self.body.push('\n');
        self.rows += 1;
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    /// The rows without the header.
    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn render(&self) -> String {
        format!("{}\n{}", self.header.join(","), self.body)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.render().as_bytes())
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    atomic_write(path, s.as_bytes())
}

/// Run metadata. The timestamp lives here and nowhere else, so data files
/// are byte-identical across re-runs.
#[derive(Debug, Clone, Serialize)]
pub struct Provenance {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub workers: usize,
    pub unix_time: u64,
    pub config: CampaignConfig,
}

impl Provenance {
    pub fn new(command: &str, cfg: &CampaignConfig, workers: usize) -> Self {
        Self {
            command: command.into(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            version: env!("CARGO_PKG_VERSION").into(),
            workers,
            unix_time: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            config: cfg.clone(),
        }
    }
}

/// Collects the files a run writes.
#[derive(Debug, Default, Clone, Serialize)]
pub struct Outputs {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
}

impl Outputs {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    pub fn csv(&mut self, name: &str, table: &Csv) -> Result<()> {
        let p = self.dir.join(name);
        table.write(&p)?;
        self.files.push(p);
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let p = self.dir.join(name);
        write_json(&p, value)?;
        self.files.push(p);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE] {
            assert_eq!(format_float(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(format_float(1.0), "1.0000000000000000e0");
    }

    #[test]
    fn csv_layout() {
        let mut c = Csv::new(&["a", "b", "c"]);
        c.push(vec![1u64.into(), 0.5.into(), "x,y".into()]);
        assert_eq!(c.render(), "a,b,c\n1,5.0000000000000000e-1,\"x,y\"\n");
        assert_eq!(c.len(), 1);
    }
}
