//! Point-cloud and CSV encodings shared by the pipeline stages.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};

const POINTS_MAGIC: &[u8; 4] = b"SFPC";
const POINTS_VERSION: u32 = 1;

/// Binary point cloud: "SFPC", u32 version, u64 count, then `count` xyz
/// triples of f64, all little endian.
pub fn write_points(path: &Path, points: &[Vector3<f64>]) -> Result<()> {
    let mut out = Vec::with_capacity(16 + points.len() * 24);
    out.extend_from_slice(POINTS_MAGIC);
    out.extend_from_slice(&POINTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(points.len() as u64).to_le_bytes());
    for p in points {
        for v in p.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_bytes(path, &out)
}

pub fn read_points(path: &Path) -> Result<Vec<Vector3<f64>>> {
    let bytes = read_bytes(path)?;
    if bytes.len() < 16 || &bytes[..4] != POINTS_MAGIC {
        return Err(Error::format("point cloud", path, "bad header"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != POINTS_VERSION {
        return Err(Error::format("point cloud", path, format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + n * 24 {
        return Err(Error::format("point cloud", path, "payload size does not match count"));
    }
    let f = |i: usize| f64::from_le_bytes(bytes[i..i + 8].try_into().unwrap());
    Ok((0..n).map(|k| Vector3::new(f(16 + 24 * k), f(24 + 24 * k), f(32 + 24 * k))).collect())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::File::create(path).and_then(|mut f| f.write_all(bytes)).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    Ok(bytes)
}

/// Per-frame, per-bubble 3-vectors (velocities or centroids).
pub type FrameSeries = BTreeMap<usize, BTreeMap<u32, Vector3<f64>>>;

/// CSV with header `t,bubble_id,<x>,<y>,<z>`; rows sorted by frame then id.
pub fn write_series_csv(path: &Path, columns: [&str; 3], series: &FrameSeries) -> Result<()> {
    let mut out = format!("t,bubble_id,{},{},{}\n", columns[0], columns[1], columns[2]);
    for (t, row) in series {
        for (id, v) in row {
            out.push_str(&format!("{t},{id},{:.9},{:.9},{:.9}\n", v.x, v.y, v.z));
        }
    }
    write_bytes(path, out.as_bytes())
}

pub fn read_series_csv(path: &Path) -> Result<FrameSeries> {
    let text = String::from_utf8(read_bytes(path)?).map_err(|_| Error::format("csv", path, "not UTF-8"))?;
    let mut out = FrameSeries::new();
    for (k, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 5 {
            return Err(Error::format("csv", path, format!("line {} has {} columns", k + 1, cols.len())));
        }
        let bad = || Error::format("csv", path, format!("line {} is malformed", k + 1));
        let t: usize = cols[0].parse().map_err(|_| bad())?;
        let id: u32 = cols[1].parse().map_err(|_| bad())?;
        let v: Vec<f64> = cols[2..].iter().map(|c| c.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
        out.entry(t).or_default().insert(id, Vector3::new(v[0], v[1], v[2]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.bin");
        let pts = vec![Vector3::new(1.0, -2.5, 3.25), Vector3::new(0.1, 0.2, 0.3)];
        write_points(&p, &pts).unwrap();
        assert_eq!(read_points(&p).unwrap(), pts);
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 16 + 48);
    }

    #[test]
    fn series_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.csv");
        let mut s = FrameSeries::new();
        s.entry(2).or_default().insert(1, Vector3::new(0.0, 0.3, -0.125));
        s.entry(2).or_default().insert(0, Vector3::new(0.5, 0.0, 0.0));
        write_series_csv(&p, ["vx", "vy", "vz"], &s).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("t,bubble_id,vx,vy,vz\n2,0,"));
        assert_eq!(read_series_csv(&p).unwrap(), s);
    }
}
