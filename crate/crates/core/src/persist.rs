//! On-disk formats shared by the pipeline: `.npy` float matrices, JSON
//! sidecars and content fingerprints.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{de::DeserializeOwned, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const NPY_MAGIC: &[u8] = b"\x93NUMPY";

/// Writes a little-endian float64 C-order `.npy` (format 1.0).
pub fn write_npy(path: &Path, a: ArrayView2<f64>) -> Result<()> {
    let (r, c) = a.dim();
    let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': ({r}, {c}), }}");
    // magic(6) + version(2) + len(2) + header + '\n' aligned to 64
    let unpadded = 10 + header.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    header.extend(std::iter::repeat_n(' ', pad));
    header.push('\n');
    let mut buf = Vec::with_capacity(10 + header.len() + r * c * 8);
    buf.extend_from_slice(NPY_MAGIC);
    buf.extend_from_slice(&[1, 0]);
    buf.extend_from_slice(&(header.len() as u16).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    for v in a.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads a 2-D (or 1-D, returned as one row) float64 `.npy`.
pub fn read_npy(path: &Path) -> Result<Array2<f64>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 10 || &bytes[..6] != NPY_MAGIC {
        return Err(Error::Npy(format!("{}: not an npy file", path.display())));
    }
    let (hlen, hstart) = match bytes[6] {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => (u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize, 12),
        v => return Err(Error::Npy(format!("unsupported npy version {v}"))),
    };
    let header = std::str::from_utf8(&bytes[hstart..hstart + hlen]).map_err(|e| Error::Npy(e.to_string()))?;
    if !header.contains("'descr': '<f8'") {
        return Err(Error::Npy(format!("expected <f8 data, header {header}")));
    }
    if header.contains("'fortran_order': True") {
        return Err(Error::Npy("fortran order not supported".into()));
    }
    let shape_start = header.find("'shape': (").ok_or_else(|| Error::Npy("missing shape".into()))? + "'shape': (".len();
    let shape_end = header[shape_start..].find(')').ok_or_else(|| Error::Npy("malformed shape".into()))? + shape_start;
    let dims: Vec<usize> = header[shape_start..shape_end]
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|e| Error::Npy(e.to_string())))
        .collect::<Result<_>>()?;
    let (r, c) = match dims.as_slice() {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => return Err(Error::Npy(format!("unsupported shape {dims:?}"))),
    };
    let data = &bytes[hstart + hlen..];
    if data.len() != r * c * 8 {
        return Err(Error::Npy(format!("payload has {} bytes, shape needs {}", data.len(), r * c * 8)));
    }
    let values: Vec<f64> = data.chunks_exact(8).map(|ch| f64::from_le_bytes(ch.try_into().unwrap())).collect();
    Ok(Array2::from_shape_vec((r, c), values).unwrap())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Short hex SHA-256 of any serializable value.
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("fingerprint input serializes");
    fingerprint_bytes(&bytes)
}

pub fn fingerprint_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(&digest[..8])
}
