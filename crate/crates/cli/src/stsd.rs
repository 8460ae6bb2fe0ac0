//! STSD container: one binary format for datasets and single series.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "STSD" | version u32 | N u32 | T u32 | P u32 | N*T*P f64 row-major
//!        | optional: trailer_len u32 | trailer (JSON)
//! ```
//!
//! The JSON trailer carries labels, grid dimensions and generation
//! provenance. Floats are written bit-exactly, so write-then-read round-trips
//! reproduce tensors exactly.

use crate::{CliError, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"STSD";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize, Debug, Clone, Default, PartialEq)]
pub struct StsdMeta {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<[u32; 2]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

#[derive(Serialize, Deserialize, Debug, Clone, PartialEq)]
pub struct Provenance {
    pub classes: u32,
    pub per_class: u32,
    pub t: u32,
    pub h: u32,
    pub w: u32,
    pub spatial_shift_max: u32,
    pub temporal_crop_min: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StsdFile {
    pub n: u32,
    pub t: u32,
    pub p: u32,
    /// `n * t * p` values, sample-major then time then support.
    pub data: Vec<f64>,
    pub meta: Option<StsdMeta>,
}

pub fn write(path: &Path, file: &StsdFile) -> Result<()> {
    let expected = file.n as usize * file.t as usize * file.p as usize;
    if file.data.len() != expected {
        return Err(CliError::Format(format!(
            "tensor has {} values, header says {}",
            file.data.len(),
            expected
        )));
    }
    let mut out = Vec::with_capacity(16 + 8 * file.data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&file.n.to_le_bytes());
    out.extend_from_slice(&file.t.to_le_bytes());
    out.extend_from_slice(&file.p.to_le_bytes());
    for v in &file.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(meta) = &file.meta {
        let json = serde_json::to_vec(meta)
            .map_err(|e| CliError::Format(format!("trailer serialization: {e}")))?;
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
    }
    let mut f = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(&out).map_err(|e| CliError::io(path, e))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<StsdFile> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CliError::io(path, e))?;
    if bytes.len() < 20 || &bytes[0..4] != MAGIC {
        return Err(CliError::Format(format!("{}: not an STSD file", path.display())));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("bounds"));
    let version = u32_at(4);
    if version != VERSION {
        return Err(CliError::Format(format!(
            "{}: unsupported STSD version {version}",
            path.display()
        )));
    }
    let (n, t, p) = (u32_at(8), u32_at(12), u32_at(16));
    let count = n as usize * t as usize * p as usize;
    let data_end = 20 + 8 * count;
    if bytes.len() < data_end {
        return Err(CliError::Format(format!("{}: truncated tensor", path.display())));
    }
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        let o = 20 + 8 * i;
        data.push(f64::from_le_bytes(bytes[o..o + 8].try_into().expect("bounds")));
    }
    let meta = if bytes.len() > data_end {
        if bytes.len() < data_end + 4 {
            return Err(CliError::Format(format!("{}: truncated trailer", path.display())));
        }
        let len = u32::from_le_bytes(bytes[data_end..data_end + 4].try_into().expect("bounds")) as usize;
        let start = data_end + 4;
        if bytes.len() < start + len {
            return Err(CliError::Format(format!("{}: truncated trailer", path.display())));
        }
        Some(
            serde_json::from_slice(&bytes[start..start + len])
                .map_err(|e| CliError::Format(format!("{}: trailer: {e}", path.display())))?,
        )
    } else {
        None
    };
    Ok(StsdFile { n, t, p, data, meta })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.stsd");
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin() * 1e-3).collect();
        let file = StsdFile {
            n: 2,
            t: 3,
            p: 4,
            data,
            meta: Some(StsdMeta {
                labels: Some(vec![0, 1]),
                grid: Some([2, 2]),
                provenance: None,
            }),
        };
        write(&path, &file).unwrap();
        let back = read(&path).unwrap();
        assert_eq!(back, file);
        for (a, b) in back.data.iter().zip(&file.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn trailer_is_optional() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plain.stsd");
        let file = StsdFile { n: 1, t: 2, p: 2, data: vec![1.0, 0.0, 0.5, 0.25], meta: None };
        write(&path, &file).unwrap();
        assert_eq!(read(&path).unwrap(), file);
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.stsd");
        std::fs::write(&path, b"not a container").unwrap();
        assert!(matches!(read(&path), Err(CliError::Format(_))));
    }
}
