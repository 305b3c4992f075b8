//! CSV formatting helpers and the binary observation dump.
//!
//! The dump is a 16-byte header (`b"HRISOBS1"`, `K` as `u32`, `T` as `u32`,
//! little endian) followed by `Y_R` and then `Y_U`, each row-major `K × T`
//! with every entry written as two little-endian `f64` (re, im).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::signal::{CMatrix, ObservationSet, C64};

pub const OBSERVATION_MAGIC: &[u8; 8] = b"HRISOBS1";

/// Floats with 17 significant digits, so values round-trip exactly.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Joins a header and rows into CSV text with LF line endings.
pub fn csv_text(header: &str, rows: &[String]) -> String {
    let mut out = String::with_capacity(header.len() + rows.iter().map(|r| r.len() + 1).sum::<usize>() + 1);
    out.push_str(header);
    out.push('\n');
    for r in rows {
        out.push_str(r);
        out.push('\n');
    }
    out
}

pub fn write_observations(w: &mut impl Write, obs: &ObservationSet) -> Result<()> {
    let (k, t) = obs.y_r.shape();
    if obs.y_u.shape() != (k, t) {
        return Err(Error::DimensionMismatch(format!(
            "Y_R {:?} vs Y_U {:?}",
            obs.y_r.shape(),
            obs.y_u.shape()
        )));
    }
    let dim = |n: usize| {
        u32::try_from(n).map_err(|_| Error::DimensionMismatch(format!("{n} exceeds u32")))
    };
    let mut buf = Vec::with_capacity(16 + 32 * k * t);
    buf.extend_from_slice(OBSERVATION_MAGIC);
    buf.extend_from_slice(&dim(k)?.to_le_bytes());
    buf.extend_from_slice(&dim(t)?.to_le_bytes());
    for m in [&obs.y_r, &obs.y_u] {
        for row in 0..k {
            for col in 0..t {
                let z = m[(row, col)];
                buf.extend_from_slice(&z.re.to_le_bytes());
                buf.extend_from_slice(&z.im.to_le_bytes());
            }
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_observations(r: &mut impl Read) -> Result<ObservationSet> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header)
        .map_err(|_| Error::Format("observation header truncated".into()))?;
    if &header[..8] != OBSERVATION_MAGIC {
        return Err(Error::Format("bad observation magic".into()));
    }
    let k = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let t = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != 32 * k * t {
        return Err(Error::Format(format!(
            "expected {} payload bytes for K={k}, T={t}, found {}",
            32 * k * t,
            body.len()
        )));
    }
    let f = |i: usize| f64::from_le_bytes(body[8 * i..8 * i + 8].try_into().unwrap());
    let block = |offset: usize| {
        CMatrix::from_fn(k, t, |row, col| {
            let i = offset + 2 * (row * t + col);
            C64::new(f(i), f(i + 1))
        })
    };
    Ok(ObservationSet { y_r: block(0), y_u: block(2 * k * t) })
}

pub fn save_observations(path: impl AsRef<Path>, obs: &ObservationSet) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_observations(&mut f, obs)?;
    f.flush()?;
    Ok(())
}

pub fn load_observations(path: impl AsRef<Path>) -> Result<ObservationSet> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_observations(&mut f)
}
