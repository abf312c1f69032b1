//! Artifact encoders: ASCII PLY, the binary feature dump and atomic writes.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::CliError;
use crate::epipolar::TriangulatedPoint;

/// ASCII PLY with one `x y z rmse` vertex per point.
pub fn ply_ascii<'a>(points: impl IntoIterator<Item = &'a TriangulatedPoint>) -> String {
    let points: Vec<_> = points.into_iter().collect();
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", points.len());
    for name in ["x", "y", "z", "rmse"] {
        let _ = writeln!(out, "property double {name}");
    }
    out.push_str("end_header\n");
    for p in points {
        let _ = writeln!(
            out,
            "{} {} {} {}",
            p.position.x, p.position.y, p.position.z, p.reprojection_rmse
        );
    }
    out
}

/// 16-byte header (`M`, `D` as little-endian u64) followed by `M·D`
/// little-endian f64 values in row-major order.
pub fn encode_feature_dump(features: &DMatrix<f64>) -> Vec<u8> {
    let (m, d) = features.shape();
    let mut out = Vec::with_capacity(16 + 8 * m * d);
    out.extend_from_slice(&(m as u64).to_le_bytes());
    out.extend_from_slice(&(d as u64).to_le_bytes());
    for i in 0..m {
        for j in 0..d {
            out.extend_from_slice(&features[(i, j)].to_le_bytes());
        }
    }
    out
}

pub fn decode_feature_dump(bytes: &[u8]) -> Option<DMatrix<f64>> {
    let word = |i: usize| -> Option<[u8; 8]> { bytes.get(i * 8..i * 8 + 8)?.try_into().ok() };
    let m = usize::try_from(u64::from_le_bytes(word(0)?)).ok()?;
    let d = usize::try_from(u64::from_le_bytes(word(1)?)).ok()?;
    if bytes.len() != 16 + 8 * m.checked_mul(d)? {
        return None;
    }
    let values: Option<Vec<f64>> = (0..m * d).map(|n| word(n + 2).map(f64::from_le_bytes)).collect();
    Some(DMatrix::from_row_slice(m, d, &values?))
}

/// Writes to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let result = std::fs::File::create(&tmp)
        .and_then(|mut f| {
            f.write_all(bytes)?;
            f.sync_all()
        })
        .and_then(|_| std::fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(CliError::io(path, e));
    }
    Ok(())
}

/// Nearest-rank percentile of unsorted values; `None` for an empty slice.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Percentiles {
    pub p50: Option<f64>,
    pub p90: Option<f64>,
    pub p99: Option<f64>,
}

impl Percentiles {
    pub fn of(values: &[f64]) -> Self {
        Self {
            p50: percentile(values, 50.0),
            p90: percentile(values, 90.0),
            p99: percentile(values, 99.0),
        }
    }
}
