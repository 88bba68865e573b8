//! `GSHFLD01` field files.
//!
//! Layout: the 8-byte magic `GSHFLD01`, a single-line UTF-8 JSON header
//! terminated by `\n`, then the samples as raw little-endian floats in the
//! voxel-major, channels-innermost order used in memory.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Field, Lattice};
use crate::shooting::{Deformation, DeformationKind};

pub const MAGIC: &[u8; 8] = b"GSHFLD01";
pub const LAYOUT: &str = "voxel-major-channels-inner";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldHeader {
    pub dims: Vec<usize>,
    pub channels: usize,
    pub dtype: Dtype,
    pub voxel_size: Vec<f64>,
    pub layout: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<DeformationKind>,
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::FieldFormat {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Encodes a field (and optional deformation kind) into bytes.
pub fn encode(field: &Field, dtype: Dtype, kind: Option<DeformationKind>) -> Vec<u8> {
    let lat = field.lattice();
    let header = FieldHeader {
        dims: lat.dims().to_vec(),
        channels: field.channels(),
        dtype,
        voxel_size: lat.voxel_size().to_vec(),
        layout: LAYOUT.to_string(),
        kind,
    };
    let mut out = Vec::with_capacity(64 + field.data().len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(serde_json::to_string(&header).expect("header serialises").as_bytes());
    out.push(b'\n');
    match dtype {
        Dtype::F64 => field
            .data()
            .iter()
            .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Dtype::F32 => field
            .data()
            .iter()
            .for_each(|x| out.extend_from_slice(&(*x as f32).to_le_bytes())),
    }
    out
}

/// Decodes bytes produced by [`encode`]. `path` is used for error messages only.
pub fn decode(bytes: &[u8], path: &Path) -> Result<(Field, FieldHeader)> {
    let mut reader = BufReader::new(bytes);
    let mut magic = [0u8; 8];
    reader
        .read_exact(&mut magic)
        .map_err(|_| format_err(path, "truncated magic"))?;
    if &magic != MAGIC {
        return Err(format_err(path, "bad magic"));
    }
    let mut line = String::new();
    reader
        .read_line(&mut line)
        .map_err(|e| format_err(path, format!("unreadable header: {e}")))?;
    if !line.ends_with('\n') {
        return Err(format_err(path, "header is not newline-terminated"));
    }
    let header: FieldHeader = serde_json::from_str(line.trim_end())
        .map_err(|e| format_err(path, format!("bad header: {e}")))?;
    if header.layout != LAYOUT {
        return Err(format_err(path, format!("unsupported layout {}", header.layout)));
    }
    let lattice = Lattice::with_voxel_size(&header.dims, &header.voxel_size)?;
    let n = lattice.len() * header.channels;
    let mut raw = Vec::new();
    reader
        .read_to_end(&mut raw)
        .map_err(|e| format_err(path, e.to_string()))?;
    let width = match header.dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    if raw.len() != n * width {
        return Err(format_err(
            path,
            format!("expected {} data bytes, found {}", n * width, raw.len()),
        ));
    }
    let data: Vec<f64> = match header.dtype {
        Dtype::F64 => raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect(),
        Dtype::F32 => raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
    };
    let field = Field::from_vec(&lattice, header.channels, data)?;
    Ok((field, header))
}

pub fn write_field(path: &Path, field: &Field, dtype: Dtype) -> Result<()> {
    write_bytes(path, &encode(field, dtype, None))
}

pub fn read_field(path: &Path) -> Result<Field> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes, path)?.0)
}

pub fn write_deformation(path: &Path, phi: &Deformation, dtype: Dtype) -> Result<()> {
    write_bytes(path, &encode(phi.map(), dtype, Some(phi.kind())))
}

pub fn read_deformation(path: &Path) -> Result<Deformation> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (map, header) = decode(&bytes, path)?;
    let kind = header
        .kind
        .ok_or_else(|| format_err(path, "field has no deformation kind"))?;
    Deformation::new(map, kind)
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn f64_round_trip_is_bit_exact(
            nx in 4usize..7, ny in 4usize..7, c in 1usize..4,
            seed in any::<u64>(),
        ) {
            let lat = Lattice::with_voxel_size(&[nx, ny], &[1.0, 0.5]).unwrap();
            let data: Vec<f64> = (0..nx * ny * c)
                .map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) >> 2))
                .map(|x| if x.is_finite() { x } else { 0.0 })
                .collect();
            let f = Field::from_vec(&lat, c, data).unwrap();
            let bytes = encode(&f, Dtype::F64, None);
            let (g, h) = decode(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(h.channels, c);
            prop_assert_eq!(g.lattice(), f.lattice());
            for (a, b) in f.data().iter().zip(g.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn header_and_errors() {
        let lat = Lattice::new(&[4, 4]).unwrap();
        let f = Field::constant(&lat, 2, 0.25);
        let bytes = encode(&f, Dtype::F32, Some(DeformationKind::Inverse));
        assert_eq!(&bytes[..8], MAGIC);
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&bytes[8..nl]).unwrap();
        assert_eq!(header["dtype"], "f32");
        assert_eq!(header["kind"], "inverse");
        assert_eq!(header["layout"], LAYOUT);
        assert_eq!(bytes.len() - nl - 1, 16 * 2 * 4);
        let (g, _) = decode(&bytes, Path::new("mem")).unwrap();
        assert_eq!(g.data(), f.data());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad, Path::new("mem")).is_err());
        assert!(decode(&bytes[..bytes.len() - 1], Path::new("mem")).is_err());
    }
}
