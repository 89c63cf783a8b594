//! Loop-closure detection: frame descriptors compared by cosine similarity,
//! a three-stage candidate filter, and geometric verification.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GradientField, PoseSE3, TactileImage};
use crate::registration::{global_register, icp_refine, mutual_structure_agreement, PreparedCloud, RegistrationParams, RegistrationResult};
use crate::sim::central_differences;

pub const ORIENTATION_BINS: usize = 8;
pub const CELLS: usize = 4;
pub const DESCRIPTOR_LEN: usize = ORIENTATION_BINS * CELLS * CELLS + CELLS * CELLS;

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("descriptor lengths differ ({0} vs {1})")]
    Dimension(usize, usize),
    #[error("need at least 3 frames, got {0}")]
    TooFewFrames(usize),
    #[error("{descriptors} descriptors but {poses} poses")]
    Count { descriptors: usize, poses: usize },
    #[error("frame {0} is out of range")]
    Frame(usize),
    #[error("invalid loop configuration: {0}")]
    Config(String),
    #[error("{path}: {msg}")]
    File { path: String, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDescriptor {
    values: Vec<f64>,
    /// The frame had no gradient energy; the descriptor is uniform.
    pub textureless: bool,
}

impl FrameDescriptor {
    /// Normalizes `values`; a zero vector becomes the uniform unit vector.
    pub fn from_values(values: Vec<f64>) -> Result<Self, LoopError> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(LoopError::Config("descriptor entries must be finite and non-negative".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            let u = 1.0 / (values.len() as f64).sqrt();
            return Ok(Self { values: vec![u; values.len()], textureless: true });
        }
        Ok(Self { values: values.iter().map(|v| v / norm).collect(), textureless: false })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Magnitude-weighted orientation histograms on a 4×4 cell grid followed by
/// the mean gradient magnitude of each cell.
pub fn encode(g: &GradientField) -> FrameDescriptor {
    let (w, h) = (g.width(), g.height());
    let mut hist = vec![0.0; ORIENTATION_BINS * CELLS * CELLS];
    let mut mag = vec![0.0; CELLS * CELLS];
    let mut count = vec![0usize; CELLS * CELLS];
    for v in 0..h {
        for u in 0..w {
            let (gx, gy) = g.at(u, v);
            let m = gx.hypot(gy);
            let cell = (v * CELLS / h) * CELLS + u * CELLS / w;
            count[cell] += 1;
            mag[cell] += m;
            if m > 0.0 {
                let a = gy.atan2(gx).rem_euclid(std::f64::consts::TAU);
                let b = ((a / std::f64::consts::TAU * ORIENTATION_BINS as f64) as usize).min(ORIENTATION_BINS - 1);
                hist[cell * ORIENTATION_BINS + b] += m;
            }
        }
    }
    let total: f64 = hist.iter().sum();
    // orientation part and magnitude part carry equal weight
    let mut values: Vec<f64> = hist.iter().map(|v| if total > 0.0 { v / total } else { 0.0 }).collect();
    let means: Vec<f64> = mag.iter().zip(&count).map(|(m, &c)| if c > 0 { m / c as f64 } else { 0.0 }).collect();
    let msum: f64 = means.iter().sum();
    values.extend(means.iter().map(|v| if msum > 0.0 { v / msum } else { 0.0 }));
    FrameDescriptor::from_values(values).expect("histogram entries are finite and non-negative")
}

/// Descriptor of a raw image: the gradient of its mean intensity change
/// from the background.
pub fn encode_image(img: &TactileImage, background: &TactileImage) -> FrameDescriptor {
    let (w, h) = (img.width(), img.height());
    let diff: Vec<f64> = img
        .pixels()
        .iter()
        .zip(background.pixels())
        .map(|(p, b)| (p[0] + p[1] + p[2] - b[0] - b[1] - b[2]) / 3.0)
        .collect();
    let (gx, gy) = central_differences(&diff, w, h, img.pixel_pitch());
    encode(&GradientField::new(w, h, gx, gy, img.pixel_pitch()).expect("finite differences of finite values"))
}

/// Cosine similarity of two unit descriptors.
pub fn similarity(a: &FrameDescriptor, b: &FrameDescriptor) -> Result<f64, LoopError> {
    if a.len() != b.len() {
        return Err(LoopError::Dimension(a.len(), b.len()));
    }
    Ok(a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    pub retain_fraction: f64,
    pub min_gap: usize,
    /// Largest odometry distance (mm) between loop frames; `None` uses
    /// 1.5 × the footprint width.
    pub max_loop_distance: Option<f64>,
    pub min_fitness: f64,
    /// Mutual structure agreement a verified loop must reach.
    pub min_structure_agreement: f64,
    pub min_structure_points: usize,
    pub max_candidates: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self { retain_fraction: 0.2, min_gap: 5, max_loop_distance: None, min_fitness: 0.4, min_structure_agreement: 0.75, min_structure_points: 30, max_candidates: 20 }
    }
}

impl LoopConfig {
    pub fn validate(&self) -> Result<(), LoopError> {
        if !(self.retain_fraction > 0.0 && self.retain_fraction <= 1.0) {
            return Err(LoopError::Config("retain_fraction must lie in (0, 1]".into()));
        }
        if self.min_gap == 0 {
            return Err(LoopError::Config("min_gap must be at least 1".into()));
        }
        if self.max_loop_distance.is_some_and(|d| !(d > 0.0)) {
            return Err(LoopError::Config("max_loop_distance must be positive".into()));
        }
        Ok(())
    }

    pub fn max_distance(&self, footprint_width: f64) -> f64 {
        self.max_loop_distance.unwrap_or(1.5 * footprint_width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopCandidate {
    /// Later frame.
    pub i: usize,
    /// Earlier frame.
    pub j: usize,
    pub similarity: f64,
    /// Registration of frame `i` onto frame `j`, once verified.
    pub registration: Option<RegistrationResult>,
}

/// Survivors of each filter stage, for diagnostics.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectReport {
    pub ranked: usize,
    pub after_similarity: usize,
    pub after_gap: usize,
    pub after_distance: usize,
}

/// Ranks all pairs `j ≤ i − min_gap` by similarity and keeps the top
/// `retain_fraction`, then applies the index-gap and odometry-distance
/// filters. Survivors are sorted by decreasing similarity.
pub fn detect(
    descriptors: &[FrameDescriptor],
    poses: &[PoseSE3],
    cfg: &LoopConfig,
    footprint_width: f64,
) -> Result<(Vec<LoopCandidate>, DetectReport), LoopError> {
    cfg.validate()?;
    if descriptors.len() != poses.len() {
        return Err(LoopError::Count { descriptors: descriptors.len(), poses: poses.len() });
    }
    if descriptors.len() < 3 {
        return Err(LoopError::TooFewFrames(descriptors.len()));
    }
    let mut ranked = Vec::new();
    for i in 0..descriptors.len() {
        for j in 0..i.saturating_sub(cfg.min_gap - 1) {
            ranked.push(LoopCandidate { i, j, similarity: similarity(&descriptors[i], &descriptors[j])?, registration: None });
        }
    }
    ranked.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then(a.i.cmp(&b.i)).then(a.j.cmp(&b.j)));
    let mut report = DetectReport { ranked: ranked.len(), ..Default::default() };
    let keep = (cfg.retain_fraction * ranked.len() as f64).ceil() as usize;
    ranked.truncate(keep);
    report.after_similarity = ranked.len();
    ranked.retain(|c| c.i - c.j >= cfg.min_gap);
    report.after_gap = ranked.len();
    let max_d = cfg.max_distance(footprint_width);
    ranked.retain(|c| (poses[c.i].translation() - poses[c.j].translation()).norm() <= max_d);
    report.after_distance = ranked.len();
    Ok((ranked, report))
}

/// Coarse-to-fine registration of the pair; accepted when fitness reaches
/// `min_fitness`. Failures reject the candidate.
pub fn verify(c: &LoopCandidate, frames: &[PreparedCloud], params: &RegistrationParams, cfg: &LoopConfig) -> Result<Option<LoopCandidate>, LoopError> {
    if c.i == c.j {
        return Err(LoopError::Config("a frame cannot close a loop with itself".into()));
    }
    let src = frames.get(c.i).ok_or(LoopError::Frame(c.i))?;
    let tgt = frames.get(c.j).ok_or(LoopError::Frame(c.j))?;
    let global = global_register(src, tgt, params);
    if !global.converged {
        return Ok(None);
    }
    let r = icp_refine(src, tgt, &global.transform, &params.icp);
    if !(r.objective.len() > 0 && r.fitness >= cfg.min_fitness) {
        return Ok(None);
    }
    let agreement = mutual_structure_agreement(src, tgt, &r.transform, params.voxel_size);
    if agreement.fraction < cfg.min_structure_agreement || agreement.points < cfg.min_structure_points {
        return Ok(None);
    }
    Ok(Some(LoopCandidate { registration: Some(r), ..c.clone() }))
}

/// Verify up to `max_candidates` detections, best similarity first.
pub fn verify_all(
    candidates: &[LoopCandidate],
    frames: &[PreparedCloud],
    params: &RegistrationParams,
    cfg: &LoopConfig,
) -> Result<Vec<LoopCandidate>, LoopError> {
    let mut out = Vec::new();
    for c in candidates.iter().take(cfg.max_candidates) {
        if let Some(v) = verify(c, frames, params, cfg)? {
            out.push(v);
        }
    }
    Ok(out)
}

#[derive(Serialize)]
struct LoopLine<'a> {
    i: usize,
    j: usize,
    similarity: f64,
    fitness: f64,
    transform: [f64; 12],
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<&'a str>,
}

/// One JSON object per accepted loop.
pub fn write_loops_jsonl(path: &Path, loops: &[LoopCandidate]) -> Result<(), LoopError> {
    let err = |e: std::io::Error| LoopError::File { path: path.display().to_string(), msg: e.to_string() };
    let mut f = fs::File::create(path).map_err(err)?;
    for c in loops {
        let r = c.registration.as_ref();
        let line = LoopLine {
            i: c.i,
            j: c.j,
            similarity: c.similarity,
            fitness: r.map_or(0.0, |r| r.fitness),
            transform: r.map_or(PoseSE3::identity(), |r| r.transform).to_row_major(),
            note: r.is_none().then_some("unverified"),
        };
        writeln!(f, "{}", serde_json::to_string(&line).expect("loop line serializes")).map_err(err)?;
    }
    Ok(())
}

/// Descriptor cache: `u32` count, `u32` length, then little-endian f64 rows
/// (a textureless flag byte precedes each row).
pub fn write_descriptors(path: &Path, ds: &[FrameDescriptor]) -> Result<(), LoopError> {
    let len = ds.first().map_or(0, |d| d.len());
    let mut buf = Vec::with_capacity(8 + ds.len() * (1 + 8 * len));
    buf.extend((ds.len() as u32).to_le_bytes());
    buf.extend((len as u32).to_le_bytes());
    for d in ds {
        if d.len() != len {
            return Err(LoopError::Dimension(len, d.len()));
        }
        buf.push(d.textureless as u8);
        for v in &d.values {
            buf.extend(v.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| LoopError::File { path: path.display().to_string(), msg: e.to_string() })
}

pub fn read_descriptors(path: &Path) -> Result<Vec<FrameDescriptor>, LoopError> {
    let err = |m: String| LoopError::File { path: path.display().to_string(), msg: m };
    let bytes = fs::read(path).map_err(|e| err(e.to_string()))?;
    if bytes.len() < 8 {
        return Err(err("truncated descriptor cache".into()));
    }
    let n = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let row = 1 + 8 * len;
    if bytes.len() != 8 + n * row {
        return Err(err("descriptor cache size mismatch".into()));
    }
    Ok((0..n)
        .map(|k| {
            let r = &bytes[8 + k * row..8 + (k + 1) * row];
            let values = r[1..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            FrameDescriptor { values, textureless: r[0] != 0 }
        })
        .collect())
}
