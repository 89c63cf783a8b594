//! Pressure-dependent depth correction.
//!
//! Harder presses bend the gel into a deeper arc, which shows up as a bowl
//! superimposed on every reconstruction. The bowl is measured once on a flat
//! press at a standard force; each frame's own center-minus-annulus depth
//! statistic gives its force relative to the standard, and the scaled
//! standard depth is subtracted.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, GridShape, LocalTactileMap};
use crate::io::{read_ply, write_ply, IoError, PlyFormat};
use crate::poisson::grid_normals;

/// Largest accepted relative area mismatch between the center disk and the
/// annulus. The default 150/110 px geometry differs by about 14%.
pub const AREA_MISMATCH_LIMIT: f64 = 0.20;

/// Minimum |deviation| of a usable standard frame (mm).
pub const MIN_STANDARD_DEVIATION: f64 = 1e-4;

pub const DEFAULT_ALPHA_CLAMP: f64 = 1.1;

#[derive(Debug, Error)]
pub enum CorrectionError {
    #[error("invalid region partition: {0}")]
    Partition(String),
    #[error("map is not organized on a pixel grid")]
    Unorganized,
    #[error("{0} region contains no pixels")]
    EmptyRegion(&'static str),
    #[error("standard frame deviation {0:.3e} mm is too small to correct against")]
    WeakStandard(f64),
    #[error("grid {got:?} does not match the standard frame grid {expected:?}")]
    Shape { expected: (usize, usize), got: (usize, usize) },
    #[error("invalid alpha clamp {0}")]
    Clamp(f64),
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{path}: {msg}")]
    Sidecar { path: String, msg: String },
}

/// Central disk `C` (radius `inner_px`) and annulus `A` (between `inner_px`
/// and `outer_px`) around the image center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionPartition {
    pub outer_px: f64,
    pub inner_px: f64,
}

impl Default for RegionPartition {
    fn default() -> Self {
        Self { outer_px: 150.0, inner_px: 110.0 }
    }
}

impl RegionPartition {
    pub fn new(outer_px: f64, inner_px: f64) -> Result<Self, CorrectionError> {
        let p = Self { outer_px, inner_px };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), CorrectionError> {
        if !(self.inner_px > 0.0 && self.inner_px < self.outer_px && self.outer_px.is_finite()) {
            return Err(CorrectionError::Partition(format!(
                "need 0 < inner ({}) < outer ({})",
                self.inner_px, self.outer_px
            )));
        }
        let m = self.area_mismatch();
        if m >= AREA_MISMATCH_LIMIT {
            return Err(CorrectionError::Partition(format!("disk and annulus areas differ by {:.1}%", 100.0 * m)));
        }
        Ok(())
    }

    /// `|area(C) − area(A)| / area(C)` for the continuous regions.
    pub fn area_mismatch(&self) -> f64 {
        let c = self.inner_px * self.inner_px;
        let a = self.outer_px * self.outer_px - c;
        (c - a).abs() / c
    }

    /// Pixel indices of `C` and `A` on a `w × h` grid.
    pub fn masks(&self, w: usize, h: usize) -> (Vec<usize>, Vec<usize>) {
        let (cu, cv) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (r2, big2) = (self.inner_px * self.inner_px, self.outer_px * self.outer_px);
        let mut center = Vec::new();
        let mut annulus = Vec::new();
        for v in 0..h {
            for u in 0..w {
                let d2 = (u as f64 - cu).powi(2) + (v as f64 - cv).powi(2);
                if d2 < r2 {
                    center.push(v * w + u);
                } else if d2 <= big2 {
                    annulus.push(v * w + u);
                }
            }
        }
        (center, annulus)
    }
}

/// Mean depth over `C` minus mean depth over `A` (mm).
pub fn depth_deviation(map: &LocalTactileMap, part: &RegionPartition) -> Result<f64, CorrectionError> {
    let grid = map.grid().ok_or(CorrectionError::Unorganized)?;
    let (c, a) = part.masks(grid.width, grid.height);
    if c.is_empty() {
        return Err(CorrectionError::EmptyRegion("center"));
    }
    if a.is_empty() {
        return Err(CorrectionError::EmptyRegion("annulus"));
    }
    let pts = map.points();
    let mean = |idx: &[usize]| idx.iter().map(|&i| pts[i].z).sum::<f64>() / idx.len() as f64;
    Ok(mean(&c) - mean(&a))
}

/// Flat press at the standard force.
#[derive(Debug, Clone, PartialEq)]
pub struct StandardFrame {
    map: LocalTactileMap,
    deviation: f64,
    partition: RegionPartition,
    clamp: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StandardSidecar {
    deviation: f64,
    outer_px: f64,
    inner_px: f64,
    clamp: f64,
    width: usize,
    height: usize,
}

impl StandardFrame {
    pub fn new(map: LocalTactileMap, partition: RegionPartition, clamp: f64) -> Result<Self, CorrectionError> {
        partition.validate()?;
        if !(clamp >= 0.0 && clamp.is_finite()) {
            return Err(CorrectionError::Clamp(clamp));
        }
        let deviation = depth_deviation(&map, &partition)?;
        if deviation.abs() <= MIN_STANDARD_DEVIATION {
            return Err(CorrectionError::WeakStandard(deviation));
        }
        Ok(Self { map, deviation, partition, clamp })
    }

    pub fn map(&self) -> &LocalTactileMap {
        &self.map
    }

    pub fn deviation(&self) -> f64 {
        self.deviation
    }

    pub fn partition(&self) -> &RegionPartition {
        &self.partition
    }

    pub fn clamp(&self) -> f64 {
        self.clamp
    }

    fn grid(&self) -> GridShape {
        self.map.grid().expect("standard frames are organized")
    }

    /// Writes `<stem>.ply` and `<stem>.json`.
    pub fn save(&self, stem: &Path) -> Result<(), CorrectionError> {
        let (ply, json) = paths(stem);
        write_ply(&ply, &self.map, PlyFormat::BinaryLittleEndian)?;
        let g = self.grid();
        let side = StandardSidecar {
            deviation: self.deviation,
            outer_px: self.partition.outer_px,
            inner_px: self.partition.inner_px,
            clamp: self.clamp,
            width: g.width,
            height: g.height,
        };
        let text = serde_json::to_string_pretty(&side).expect("sidecar serializes");
        fs::write(&json, text).map_err(|e| sidecar_err(&json, e))
    }

    pub fn load(stem: &Path) -> Result<Self, CorrectionError> {
        let (ply, json) = paths(stem);
        let text = fs::read_to_string(&json).map_err(|e| sidecar_err(&json, e))?;
        let side: StandardSidecar = serde_json::from_str(&text).map_err(|e| sidecar_err(&json, e))?;
        let raw = read_ply(&ply)?;
        let grid = GridShape { width: side.width, height: side.height };
        let map = LocalTactileMap::organized(raw.points().to_vec(), raw.normals().map(|n| n.to_vec()), grid, raw.frame_id)?;
        let frame = Self::new(map, RegionPartition { outer_px: side.outer_px, inner_px: side.inner_px }, side.clamp)?;
        if (frame.deviation - side.deviation).abs() > 1e-9 * side.deviation.abs().max(1.0) {
            return Err(sidecar_err(&json, "recorded deviation does not match the point cloud"));
        }
        Ok(frame)
    }
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("ply"), stem.with_extension("json"))
}

fn sidecar_err(path: &Path, e: impl std::fmt::Display) -> CorrectionError {
    CorrectionError::Sidecar { path: path.display().to_string(), msg: e.to_string() }
}

/// Unclamped ratio `Δd̂ᵢ / Δd̂ₛ`, both measured with `part`.
pub fn raw_alpha(map: &LocalTactileMap, std: &StandardFrame, part: &RegionPartition) -> Result<f64, CorrectionError> {
    let ds = if *part == std.partition { std.deviation } else { depth_deviation(&std.map, part)? };
    if ds.abs() <= MIN_STANDARD_DEVIATION {
        return Err(CorrectionError::WeakStandard(ds));
    }
    Ok(depth_deviation(map, part)? / ds)
}

/// Relative force coefficient, clamped to `[0, clamp]`. Negative ratios
/// (an inverted bowl) mean no correction.
pub fn estimate_alpha(
    map: &LocalTactileMap,
    std: &StandardFrame,
    part: &RegionPartition,
    clamp: f64,
) -> Result<f64, CorrectionError> {
    if !(clamp >= 0.0 && clamp.is_finite()) {
        return Err(CorrectionError::Clamp(clamp));
    }
    Ok(raw_alpha(map, std, part)?.clamp(0.0, clamp))
}

/// `z' = z − α·z_s` per pixel; x and y are kept and normals recomputed.
pub fn correct(map: &LocalTactileMap, std: &StandardFrame, alpha: f64) -> Result<LocalTactileMap, CorrectionError> {
    let g = map.grid().ok_or(CorrectionError::Unorganized)?;
    let sg = std.grid();
    if g != sg {
        return Err(CorrectionError::Shape { expected: (sg.width, sg.height), got: (g.width, g.height) });
    }
    let points: Vec<Vector3<f64>> = map
        .points()
        .iter()
        .zip(std.map.points())
        .map(|(p, s)| Vector3::new(p.x, p.y, p.z - alpha * s.z))
        .collect();
    let normals = map.normals().map(|_| {
        let z: Vec<f64> = points.iter().map(|p| p.z).collect();
        grid_normals(&z, g.width, g.height, grid_pitch(&points, g))
    });
    Ok(LocalTactileMap::organized(points, normals, g, map.frame_id)?)
}

/// Estimate α with the standard frame's own partition and clamp, then correct.
pub fn correct_frame(map: &LocalTactileMap, std: &StandardFrame) -> Result<(LocalTactileMap, f64), CorrectionError> {
    let alpha = estimate_alpha(map, std, &std.partition, std.clamp)?;
    Ok((correct(map, std, alpha)?, alpha))
}

fn grid_pitch(points: &[Vector3<f64>], g: GridShape) -> f64 {
    if g.width > 1 {
        (points[1].x - points[0].x).abs()
    } else if g.height > 1 {
        (points[g.width].y - points[0].y).abs()
    } else {
        1.0
    }
}
