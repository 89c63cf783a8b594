//! File formats: PLY point clouds, CSV trajectories, raw depth grids.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, LocalTactileMap, PoseSE3};
use crate::poisson::DepthMap;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.display().to_string(), source }
}

fn fmt_err(path: &Path, msg: impl Into<String>) -> IoError {
    IoError::Format { path: path.display().to_string(), msg: msg.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PlyFormat {
    Ascii,
    #[default]
    BinaryLittleEndian,
}

pub fn write_ply(path: &Path, map: &LocalTactileMap, format: PlyFormat) -> Result<(), IoError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let normals = map.normals();
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let mut header = format!("ply\nformat {fmt} 1.0\nelement vertex {}\n", map.len());
    header.push_str("property double x\nproperty double y\nproperty double z\n");
    if normals.is_some() {
        header.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    header.push_str("end_header\n");
    let mut body = || -> std::io::Result<()> {
        w.write_all(header.as_bytes())?;
        for (i, p) in map.points().iter().enumerate() {
            let n = normals.map(|ns| ns[i]);
            match format {
                PlyFormat::Ascii => {
                    write!(w, "{} {} {}", p.x, p.y, p.z)?;
                    if let Some(n) = n {
                        write!(w, " {} {} {}", n.x, n.y, n.z)?;
                    }
                    writeln!(w)?;
                }
                PlyFormat::BinaryLittleEndian => {
                    for c in p.iter().chain(n.iter().flat_map(|n| n.iter())) {
                        w.write_all(&c.to_le_bytes())?;
                    }
                }
            }
        }
        w.flush()
    };
    body().map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    F32,
    F64,
}

pub fn read_ply(path: &Path) -> Result<LocalTactileMap, IoError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);
    let mut line = String::new();
    let mut format = None;
    let mut count = None;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut in_vertex = false;
    loop {
        line.clear();
        if r.read_line(&mut line).map_err(io_err(path))? == 0 {
            return Err(fmt_err(path, "unexpected end of header"));
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["ply"] | [] => {}
            ["comment", ..] | ["obj_info", ..] => {}
            ["format", f, _] => {
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLittleEndian,
                    other => return Err(fmt_err(path, format!("unsupported format {other}"))),
                })
            }
            ["element", name, n] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    count = Some(n.parse::<usize>().map_err(|_| fmt_err(path, "bad vertex count"))?);
                } else if n.parse::<usize>().ok() != Some(0) {
                    return Err(fmt_err(path, format!("unsupported element {name}")));
                }
            }
            ["property", ty, name] if in_vertex => {
                let s = match *ty {
                    "float" | "float32" => Scalar::F32,
                    "double" | "float64" => Scalar::F64,
                    other => return Err(fmt_err(path, format!("unsupported property type {other}"))),
                };
                props.push((name.to_string(), s));
            }
            ["property", ..] => {}
            ["end_header"] => break,
            _ => return Err(fmt_err(path, format!("unrecognized header line: {}", line.trim()))),
        }
    }
    let format = format.ok_or_else(|| fmt_err(path, "missing format line"))?;
    let count = count.ok_or_else(|| fmt_err(path, "missing vertex element"))?;
    let col = |name: &str| props.iter().position(|(n, _)| n == name);
    let xyz = [col("x"), col("y"), col("z")];
    let nxyz = [col("nx"), col("ny"), col("nz")];
    if xyz.iter().any(Option::is_none) {
        return Err(fmt_err(path, "vertex lacks x/y/z"));
    }
    let has_normals = nxyz.iter().all(Option::is_some);

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    match format {
        PlyFormat::Ascii => {
            for _ in 0..count {
                line.clear();
                r.read_line(&mut line).map_err(io_err(path))?;
                let vals: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
                let vals = vals.map_err(|_| fmt_err(path, "bad vertex value"))?;
                if vals.len() != props.len() {
                    return Err(fmt_err(path, "vertex row length mismatch"));
                }
                rows.push(vals);
            }
        }
        PlyFormat::BinaryLittleEndian => {
            for _ in 0..count {
                let mut row = Vec::with_capacity(props.len());
                for (_, s) in &props {
                    row.push(match s {
                        Scalar::F32 => {
                            let mut b = [0u8; 4];
                            r.read_exact(&mut b).map_err(io_err(path))?;
                            f32::from_le_bytes(b) as f64
                        }
                        Scalar::F64 => {
                            let mut b = [0u8; 8];
                            r.read_exact(&mut b).map_err(io_err(path))?;
                            f64::from_le_bytes(b)
                        }
                    });
                }
                rows.push(row);
            }
        }
    }
    let pick = |row: &[f64], idx: &[Option<usize>; 3]| Vector3::new(row[idx[0].unwrap()], row[idx[1].unwrap()], row[idx[2].unwrap()]);
    let points = rows.iter().map(|row| pick(row, &xyz)).collect();
    let normals = has_normals.then(|| rows.iter().map(|row| pick(row, &nxyz).normalize()).collect());
    Ok(LocalTactileMap::new(points, normals, 0)?)
}

/// One pose per line as 12 comma-separated numbers `[R|t]` row-major.
pub fn write_trajectory(path: &Path, poses: &[PoseSE3]) -> Result<(), IoError> {
    fs::write(path, trajectory_to_string(poses)).map_err(io_err(path))
}

pub fn trajectory_to_string(poses: &[PoseSE3]) -> String {
    let mut s = String::new();
    for p in poses {
        let row: Vec<String> = p.to_row_major().iter().map(|v| format!("{v}")).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn read_trajectory(path: &Path) -> Result<Vec<PoseSE3>, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut poses = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Result<Vec<f64>, _> = line.split(',').map(|t| t.trim().parse::<f64>()).collect();
        let vals = vals.map_err(|_| fmt_err(path, format!("line {}: not numeric", lineno + 1)))?;
        let arr: [f64; 12] = vals
            .try_into()
            .map_err(|_| fmt_err(path, format!("line {}: expected 12 values", lineno + 1)))?;
        poses.push(PoseSE3::from_row_major(&arr)?);
    }
    Ok(poses)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DepthHeader {
    pub width: usize,
    pub height: usize,
    pub pixel_pitch: f64,
    pub dtype: String,
}

/// Writes `<stem>.bin` (little-endian f32, row-major) and `<stem>.json`.
pub fn write_depth(stem: &Path, d: &DepthMap) -> Result<(), IoError> {
    let bin = stem.with_extension("bin");
    let json = stem.with_extension("json");
    let bytes: Vec<u8> = d.z.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
    fs::write(&bin, bytes).map_err(io_err(&bin))?;
    let header = DepthHeader { width: d.width, height: d.height, pixel_pitch: d.pixel_pitch, dtype: "f32le".into() };
    fs::write(&json, serde_json::to_string_pretty(&header)?).map_err(io_err(&json))
}

pub fn read_depth(stem: &Path) -> Result<DepthMap, IoError> {
    let bin = stem.with_extension("bin");
    let json = stem.with_extension("json");
    let header: DepthHeader = serde_json::from_str(&fs::read_to_string(&json).map_err(io_err(&json))?)?;
    if header.dtype != "f32le" {
        return Err(fmt_err(&json, format!("unsupported dtype {}", header.dtype)));
    }
    let bytes = fs::read(&bin).map_err(io_err(&bin))?;
    if bytes.len() != header.width * header.height * 4 {
        return Err(fmt_err(&bin, "size does not match header"));
    }
    let z = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Ok(DepthMap { width: header.width, height: header.height, z, pixel_pitch: header.pixel_pitch })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_map() -> LocalTactileMap {
        let pts = vec![Vector3::new(0.1, -2.5, 3.0), Vector3::new(1e-9, 7.25, -0.125)];
        let ns = vec![Vector3::new(0.0, 0.6, 0.8), Vector3::z()];
        LocalTactileMap::new(pts, Some(ns), 0).unwrap()
    }

    #[test]
    fn ply_round_trip_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let map = sample_map();
        for fmt in [PlyFormat::Ascii, PlyFormat::BinaryLittleEndian] {
            let path = dir.path().join("m.ply");
            write_ply(&path, &map, fmt).unwrap();
            let back = read_ply(&path).unwrap();
            assert_eq!(back.points(), map.points());
            for (a, b) in back.normals().unwrap().iter().zip(map.normals().unwrap()) {
                assert!((a - b).norm() < 1e-15);
            }
        }
        let bare = map.without_normals();
        let path = dir.path().join("bare.ply");
        write_ply(&path, &bare, PlyFormat::Ascii).unwrap();
        assert!(read_ply(&path).unwrap().normals().is_none());
    }

    #[test]
    fn trajectory_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let poses = vec![
            PoseSE3::identity(),
            PoseSE3::from_axis_angle(&Vector3::new(0.2, 1.0, -0.4), 0.9, Vector3::new(1.5, -3.0, 0.25)),
        ];
        let path = dir.path().join("t.csv");
        write_trajectory(&path, &poses).unwrap();
        let back = read_trajectory(&path).unwrap();
        assert_eq!(back, poses);
    }

    #[test]
    fn depth_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = DepthMap { width: 3, height: 2, z: vec![0.0, 0.5, -1.25, 2.0, 3.0, 4.0], pixel_pitch: 0.05 };
        let stem = dir.path().join("d");
        write_depth(&stem, &d).unwrap();
        assert_eq!(read_depth(&stem).unwrap(), d);
    }

    #[test]
    fn bad_trajectory_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        fs::write(&path, "1,0,0,0,0,1,0,0,0,0,1\n").unwrap();
        let err = read_trajectory(&path).unwrap_err().to_string();
        assert!(err.contains("12 values"), "{err}");
    }
}
