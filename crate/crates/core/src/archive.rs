//! `LFS1` frame archives.
//!
//! Layout (all little-endian): `"LFS1"`, `u32 k`, `u32 T`, `f32 v`, then
//! `T·k·k` `f32` values, frames in time order, each row-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::ArchiveError;
use crate::field::{GridFrame, SimulationSeries, Source};
use crate::Scalar;

pub const MAGIC: [u8; 4] = *b"LFS1";
const HEADER_LEN: usize = 16;

/// Serializes a series. Values and velocity are narrowed to `f32`.
pub fn encode_archive<S: Scalar>(series: &SimulationSeries<S>) -> Vec<u8> {
    let k = series.k();
    let t = series.len();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t * k * k);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(k as u32).to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(series.inlet_velocity as f32).to_le_bytes());
    for f in series.frames() {
        for v in f.values() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice"))
}

/// Parses an archive. The result has `series_id` 0 and `Source::Ingested`;
/// callers holding a manifest overwrite both.
pub fn decode_archive<S: Scalar>(bytes: &[u8]) -> Result<SimulationSeries<S>, ArchiveError> {
    if bytes.len() < 4 {
        return Err(ArchiveError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4-byte slice");
    if magic != MAGIC {
        return Err(ArchiveError::BadMagic(magic));
    }
    if bytes.len() < HEADER_LEN {
        return Err(ArchiveError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let k = u32_at(bytes, 4) as usize;
    let t = u32_at(bytes, 8) as usize;
    let v = f32::from_le_bytes(bytes[12..16].try_into().expect("4-byte slice"));
    if k == 0 || t < 2 {
        return Err(ArchiveError::HeaderMismatch(format!("header declares k={k}, T={t}")));
    }
    let expected = k
        .checked_mul(k)
        .and_then(|kk| kk.checked_mul(t))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| ArchiveError::HeaderMismatch(format!("header k={k}, T={t} overflows")))?;
    if bytes.len() < expected {
        return Err(ArchiveError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(ArchiveError::HeaderMismatch(format!(
            "payload holds {} bytes beyond the k={k}, T={t} header",
            bytes.len() - expected
        )));
    }
    let frames = bytes[HEADER_LEN..]
        .chunks_exact(4 * k * k)
        .map(|chunk| {
            let values = chunk
                .chunks_exact(4)
                .map(|b| S::lit(f32::from_le_bytes(b.try_into().expect("4-byte chunk")) as f64))
                .collect();
            GridFrame::new(k, values).expect("chunk holds k*k values")
        })
        .collect();
    SimulationSeries::new(frames, v as f64, 0, Source::Ingested)
        .map_err(|e| ArchiveError::HeaderMismatch(e.to_string()))
}

pub fn write_archive<S: Scalar>(series: &SimulationSeries<S>, path: &Path) -> Result<(), ArchiveError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_archive(series))?;
    f.sync_all()?;
    Ok(())
}

pub fn read_archive<S: Scalar>(path: &Path) -> Result<SimulationSeries<S>, ArchiveError> {
    decode_archive(&fs::read(path)?)
}
