//! Binary dumps of noise fields and solutions, and atomic file writes.
//!
//! Layout (all little-endian): an 8-byte magic, then `beta, dt, dx` as
//! `f64`, `nx, nt, seed` as `u64`; solutions append `origin` (`f64`) and the
//! scheme (`u64`, 0 = walsh-sum, 1 = leapfrog). The payload follows as
//! row-major `f64`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{invalid, Result};
use crate::kernels::RieszExponent;
use crate::noise::{NoiseField, NoiseSpec};
use crate::solver::{GridSolution, Scheme};

const NOISE_MAGIC: &[u8; 8] = b"SWENOIS1";
const SOLUTION_MAGIC: &[u8; 8] = b"SWESOLN1";

/// Write through a sibling temporary file and rename into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| invalid(format!("not a file path: {}", path.display())))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn header(magic: &[u8; 8], spec: &NoiseSpec) -> Vec<u8> {
    let mut out = Vec::with_capacity(56);
    out.extend_from_slice(magic);
    out.extend_from_slice(&spec.beta.beta().to_le_bytes());
    out.extend_from_slice(&spec.dt.to_le_bytes());
    out.extend_from_slice(&spec.dx.to_le_bytes());
    out.extend_from_slice(&(spec.nx as u64).to_le_bytes());
    out.extend_from_slice(&(spec.nt as u64).to_le_bytes());
    out.extend_from_slice(&spec.seed.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(invalid("dump is truncated"));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn spec(&mut self, magic: &[u8; 8]) -> Result<NoiseSpec> {
        if self.take(8)? != magic {
            return Err(invalid("dump has the wrong magic bytes"));
        }
        let beta = RieszExponent::new(self.f64()?)?;
        let (dt, dx) = (self.f64()?, self.f64()?);
        let (nx, nt, seed) = (self.u64()? as usize, self.u64()? as usize, self.u64()?);
        NoiseSpec::new(beta, dt, dx, nx, nt, seed)
    }

    fn payload(&mut self, len: usize) -> Result<Vec<f64>> {
        let raw = self.take(len * 8)?;
        if self.pos != self.bytes.len() {
            return Err(invalid("dump has trailing bytes"));
        }
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

fn push_payload(out: &mut Vec<u8>, values: &[f64]) {
    out.reserve(values.len() * 8);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn write_noise(path: &Path, field: &NoiseField) -> Result<()> {
    let mut out = header(NOISE_MAGIC, &field.spec);
    push_payload(&mut out, &field.increments);
    atomic_write(path, &out)
}

pub fn read_noise(path: &Path) -> Result<NoiseField> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let spec = r.spec(NOISE_MAGIC)?;
    let inc = r.payload(spec.nx * spec.nt)?;
    NoiseField::from_increments(spec, inc)
}

pub fn write_solution(path: &Path, sol: &GridSolution) -> Result<()> {
    let mut out = header(SOLUTION_MAGIC, &sol.spec);
    out.extend_from_slice(&sol.origin.to_le_bytes());
    let scheme: u64 = match sol.scheme {
        Scheme::WalshSum => 0,
        Scheme::Leapfrog => 1,
    };
    out.extend_from_slice(&scheme.to_le_bytes());
    push_payload(&mut out, &sol.u);
    atomic_write(path, &out)
}

/// Read a solution dump. The noise id is not stored and is returned as 0.
pub fn read_solution(path: &Path) -> Result<GridSolution> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    let spec = r.spec(SOLUTION_MAGIC)?;
    let origin = r.f64()?;
    let scheme = match r.u64()? {
        0 => Scheme::WalshSum,
        1 => Scheme::Leapfrog,
        s => return Err(invalid(format!("unknown scheme code {s} in dump"))),
    };
    let u = r.payload((spec.nt + 1) * spec.nx)?;
    Ok(GridSolution {
        u,
        spec,
        scheme,
        origin,
        noise_id: 0,
    })
}
