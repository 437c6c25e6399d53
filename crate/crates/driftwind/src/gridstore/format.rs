//! On-disk grid-stack format: `<name>.json` header, `<name>.bin` payload of
//! little-endian f64, optional `<name>.mask.bin` of bytes (1 = missing), plus
//! a CSV import path for small hand-made fixtures.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridstore::{GridGeometry, GridStack};
use crate::util::with_suffix;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    width: usize,
    height: usize,
    n_times: usize,
    pixel_size: f64,
    time_step: f64,
    origin: [f64; 2],
    dtype: String,
    order: String,
    endianness: String,
}

/// Strips a trailing `.json` / `.bin` / `.mask.bin` so callers may pass any of
/// the sibling files or the bare stem.
fn stem(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    for suffix in [".mask.bin", ".json", ".bin"] {
        if let Some(base) = s.strip_suffix(suffix) {
            return PathBuf::from(base);
        }
    }
    path.to_path_buf()
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_gridstack(stack: &GridStack, path: &Path) -> Result<()> {
    let stem = stem(path);
    let g = &stack.geometry;
    let header = Header {
        width: g.width,
        height: g.height,
        n_times: g.n_times,
        pixel_size: g.pixel_size,
        time_step: g.time_step,
        origin: g.origin,
        dtype: "f64".into(),
        order: "t-major,row-major".into(),
        endianness: "little".into(),
    };
    let json_path = with_suffix(&stem, ".json");
    let text = serde_json::to_string_pretty(&header)
        .map_err(|e| Error::Config(format!("header serialization: {e}")))?;
    fs::write(&json_path, text).map_err(|e| io_err(&json_path, e))?;

    let bin_path = with_suffix(&stem, ".bin");
    let mut payload = Vec::with_capacity(stack.values.len() * 8);
    for v in stack.values.iter() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&bin_path, payload).map_err(|e| io_err(&bin_path, e))?;

    let mask_path = mask_path(&stem);
    if stack.has_missing() {
        let bytes: Vec<u8> = stack.missing.iter().map(|&m| u8::from(m)).collect();
        fs::write(&mask_path, bytes).map_err(|e| io_err(&mask_path, e))?;
    } else if mask_path.exists() {
        fs::remove_file(&mask_path).map_err(|e| io_err(&mask_path, e))?;
    }
    Ok(())
}

fn mask_path(stem: &Path) -> PathBuf {
    with_suffix(stem, ".mask.bin")
}

pub fn read_gridstack(path: &Path) -> Result<GridStack> {
    let stem = stem(path);
    let json_path = with_suffix(&stem, ".json");
    let text = fs::read_to_string(&json_path).map_err(|e| io_err(&json_path, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
        path: json_path.display().to_string(),
        detail: e.to_string(),
    })?;
    if header.dtype != "f64" || header.order != "t-major,row-major" || header.endianness != "little"
    {
        return Err(Error::MalformedHeader {
            path: json_path.display().to_string(),
            detail: format!(
                "unsupported dtype/order/endianness: {}/{}/{}",
                header.dtype, header.order, header.endianness
            ),
        });
    }
    let geometry = GridGeometry {
        width: header.width,
        height: header.height,
        n_times: header.n_times,
        pixel_size: header.pixel_size,
        time_step: header.time_step,
        origin: header.origin,
    };
    geometry.validate()?;

    let bin_path = with_suffix(&stem, ".bin");
    let bytes = fs::read(&bin_path).map_err(|e| io_err(&bin_path, e))?;
    let expected = geometry.n_values();
    if bytes.len() != expected * 8 {
        return Err(Error::PayloadMismatch {
            path: bin_path.display().to_string(),
            expected,
            actual: bytes.len() / 8,
        });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let values = Array3::from_shape_vec(
        (geometry.n_times, geometry.height, geometry.width),
        values,
    )
    .expect("length checked above");

    let mask_path = mask_path(&stem);
    let missing = if mask_path.exists() {
        let mbytes = fs::read(&mask_path).map_err(|e| io_err(&mask_path, e))?;
        if mbytes.len() != expected {
            return Err(Error::PayloadMismatch {
                path: mask_path.display().to_string(),
                expected,
                actual: mbytes.len(),
            });
        }
        Array3::from_shape_vec(
            (geometry.n_times, geometry.height, geometry.width),
            mbytes.into_iter().map(|b| b != 0).collect(),
        )
        .expect("length checked above")
    } else {
        Array3::from_elem(values.raw_dim(), false)
    };

    GridStack::with_mask(geometry, values, missing)
}

/// Imports a `t,i,j,value` CSV. Grid dimensions are inferred from the maximum
/// indices; cells absent from the file are marked missing.
pub fn read_gridstack_csv(path: &Path) -> Result<GridStack> {
    let csv_err = |detail: String| Error::Csv {
        path: path.display().to_string(),
        detail,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(e.to_string()))?;
    let mut rows: Vec<(usize, usize, usize, f64)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(e.to_string()))?;
        if record.len() != 4 {
            return Err(csv_err(format!("expected 4 columns, got {}", record.len())));
        }
        let parse_idx = |k: usize| -> Result<usize> {
            record[k]
                .trim()
                .parse()
                .map_err(|e| csv_err(format!("column {k}: {e}")))
        };
        let v: f64 = record[3]
            .trim()
            .parse()
            .map_err(|e| csv_err(format!("value column: {e}")))?;
        rows.push((parse_idx(0)?, parse_idx(1)?, parse_idx(2)?, v));
    }
    if rows.is_empty() {
        return Err(csv_err("no data rows".into()));
    }
    let n_times = rows.iter().map(|r| r.0).max().unwrap() + 1;
    let height = rows.iter().map(|r| r.1).max().unwrap() + 1;
    let width = rows.iter().map(|r| r.2).max().unwrap() + 1;
    let geometry = GridGeometry::new(width, height, n_times);
    let mut values = Array3::zeros((n_times, height, width));
    let mut missing = Array3::from_elem((n_times, height, width), true);
    for (t, i, j, v) in rows {
        values[[t, i, j]] = v;
        missing[[t, i, j]] = false;
    }
    GridStack::with_mask(geometry, values, missing)
}

/// Writes a per-pixel CSV dump (one row per unmasked cell) for external
/// plotting.
pub fn write_csv_dump(stack: &GridStack, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| io_err(path, e))?;
    writeln!(f, "t,i,j,value").map_err(|e| io_err(path, e))?;
    for ((t, i, j), v) in stack.values.indexed_iter() {
        if !stack.missing[[t, i, j]] {
            writeln!(f, "{t},{i},{j},{v}").map_err(|e| io_err(path, e))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};

    #[test]
    fn minimal_header_example() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("tiny");
        std::fs::write(
            crate::util::with_suffix(&stem, ".json"),
            r#"{"width":2,"height":2,"n_times":1,"pixel_size":1.0,"time_step":1.0,
                "origin":[0.0,0.0],"dtype":"f64","order":"t-major,row-major","endianness":"little"}"#,
        )
        .unwrap();
        let mut payload = Vec::new();
        for v in [1.0f64, 2.0, 3.0, 4.0] {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(crate::util::with_suffix(&stem, ".bin"), payload).unwrap();
        let stack = read_gridstack(&stem).unwrap();
        assert_eq!(stack.geometry.width, 2);
        assert_eq!(stack.values[[0, 1, 0]], 3.0);
    }

    #[test]
    fn round_trip_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let geom = GridGeometry::new(7, 7, 3).with_resolution(0.25, 2.0);
        let values = Array3::from_shape_fn((3, 7, 7), |_| rng.random::<f64>());
        let mut missing = Array3::from_elem((3, 7, 7), false);
        missing[[2, 6, 1]] = true;
        let stack = GridStack::with_mask(geom, values, missing).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt");
        write_gridstack(&stack, &path).unwrap();
        let back = read_gridstack(&path).unwrap();
        assert_eq!(back.geometry, stack.geometry);
        assert_eq!(back.values, stack.values);
        assert_eq!(back.missing, stack.missing);
    }

    #[test]
    fn payload_length_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("short");
        std::fs::write(
            crate::util::with_suffix(&stem, ".json"),
            r#"{"width":2,"height":2,"n_times":2,"pixel_size":1.0,"time_step":1.0,
                "origin":[0.0,0.0],"dtype":"f64","order":"t-major,row-major","endianness":"little"}"#,
        )
        .unwrap();
        let mut payload = Vec::new();
        for v in 0..7 {
            payload.extend_from_slice(&(v as f64).to_le_bytes());
        }
        std::fs::write(crate::util::with_suffix(&stem, ".bin"), payload).unwrap();
        match read_gridstack(&stem).unwrap_err() {
            Error::PayloadMismatch {
                expected, actual, ..
            } => {
                assert_eq!(expected, 8);
                assert_eq!(actual, 7);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn malformed_header_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("bad");
        std::fs::write(crate::util::with_suffix(&stem, ".json"), "{not json").unwrap();
        assert!(matches!(
            read_gridstack(&stem).unwrap_err(),
            Error::MalformedHeader { .. }
        ));
    }

    #[test]
    fn non_finite_unmasked_value_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("nan");
        std::fs::write(
            crate::util::with_suffix(&stem, ".json"),
            r#"{"width":2,"height":1,"n_times":1,"pixel_size":1.0,"time_step":1.0,
                "origin":[0.0,0.0],"dtype":"f64","order":"t-major,row-major","endianness":"little"}"#,
        )
        .unwrap();
        let mut payload = Vec::new();
        payload.extend_from_slice(&1.0f64.to_le_bytes());
        payload.extend_from_slice(&f64::NAN.to_le_bytes());
        std::fs::write(crate::util::with_suffix(&stem, ".bin"), payload).unwrap();
        assert!(matches!(
            read_gridstack(&stem).unwrap_err(),
            Error::NonFinite { t: 0, i: 0, j: 1 }
        ));
    }

    #[test]
    fn csv_import_marks_absent_cells_missing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fix.csv");
        std::fs::write(&path, "t,i,j,value\n0,0,0,1.5\n0,1,1,2.5\n1,0,1,-3.0\n").unwrap();
        let stack = read_gridstack_csv(&path).unwrap();
        assert_eq!(stack.geometry.n_times, 2);
        assert_eq!(stack.geometry.height, 2);
        assert_eq!(stack.geometry.width, 2);
        assert_eq!(stack.values[[0, 0, 0]], 1.5);
        assert!(stack.missing[[0, 0, 1]]);
        assert!(!stack.missing[[1, 0, 1]]);
    }
}
