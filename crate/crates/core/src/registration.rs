//! Pairwise registration of local tactile maps: voxel downsampling and
//! pitch-angle ROI, FPFH + RANSAC for a global estimate, then point-to-plane
//! ICP. Chaining consecutive pairs gives the odometry.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Matrix6, SymmetricEigen, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{so3_exp, GeometryError, LocalTactileMap, PoseSE3};
use crate::spatial::KdTree;

pub const FPFH_BINS: usize = 33;
pub type Fpfh = [f64; FPFH_BINS];

#[derive(Debug, Error)]
pub enum RegistrationError {
    #[error("invalid registration parameters: {0}")]
    Params(String),
    #[error("map has no normals")]
    MissingNormals,
    #[error("need at least {min} points, got {got}")]
    TooFewPoints { min: usize, got: usize },
    #[error("no frames to register")]
    NoFrames,
    #[error("registration of frame {from} onto frame {onto} failed: {reason}")]
    PairFailed { from: usize, onto: usize, reason: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacParams {
    pub max_iterations: usize,
    /// Correspondence inlier distance (mm).
    pub inlier_distance: f64,
    pub min_inliers: usize,
    /// Early exit once this probability of having drawn an all-inlier
    /// sample is reached.
    pub confidence: f64,
    /// Samples whose pairwise edge lengths disagree by more than this ratio
    /// are rejected before fitting.
    pub edge_length_ratio: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            max_iterations: 100_000,
            inlier_distance: 1.5 * DEFAULT_VOXEL,
            min_inliers: 30,
            confidence: 0.999,
            edge_length_ratio: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcpParams {
    pub max_iterations: usize,
    /// Stop when the relative objective decrease falls below this.
    pub convergence_delta: f64,
    pub max_correspondence_distance: f64,
    /// Odometry rejects a pair whose final fitness is below this.
    pub min_fitness: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self { max_iterations: 60, convergence_delta: 1e-4, max_correspondence_distance: 1.0, min_fitness: 0.3 }
    }
}

pub const DEFAULT_VOXEL: f64 = 0.35;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationParams {
    pub voxel_size: f64,
    pub pitch_threshold_deg: f64,
    pub use_roi: bool,
    pub fpfh_radius: f64,
    /// Neighbors of the plane fit used to re-estimate normals.
    pub normal_neighbors: usize,
    pub ransac: RansacParams,
    pub icp: IcpParams,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        Self {
            voxel_size: DEFAULT_VOXEL,
            pitch_threshold_deg: 70.0,
            use_roi: true,
            fpfh_radius: 5.0 * DEFAULT_VOXEL,
            normal_neighbors: 20,
            ransac: RansacParams::default(),
            icp: IcpParams::default(),
        }
    }
}

impl RegistrationParams {
    pub fn validate(&self) -> Result<(), RegistrationError> {
        let bad = |m: &str| Err(RegistrationError::Params(m.to_string()));
        if !(self.voxel_size > 0.0) {
            return bad("voxel_size must be positive");
        }
        if !(self.pitch_threshold_deg > 0.0 && self.pitch_threshold_deg < 90.0) {
            return bad("pitch_threshold_deg must lie in (0, 90)");
        }
        if !(self.fpfh_radius > 0.0 && self.ransac.inlier_distance > 0.0 && self.icp.max_correspondence_distance > 0.0) {
            return bad("radii and distances must be positive");
        }
        if self.normal_neighbors < 3 {
            return bad("normal_neighbors must be at least 3");
        }
        if !(self.ransac.confidence > 0.0 && self.ransac.confidence < 1.0) {
            return bad("ransac confidence must lie in (0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    /// Maps source coordinates into the target frame.
    pub transform: PoseSE3,
    /// Fraction of source points with a target neighbor within the inlier
    /// distance.
    pub fitness: f64,
    /// Point-to-plane RMS of those inlier pairs (mm).
    pub rmse: f64,
    pub converged: bool,
    /// RANSAC correspondence inliers (global) or ICP correspondences.
    pub inliers: usize,
    pub iterations: usize,
    /// ICP objective after each accepted iteration, starting at the initial
    /// pose. Empty for global registration.
    pub objective: Vec<f64>,
}

/// One point per occupied voxel at the centroid of its members. Normals,
/// if present, are averaged and renormalized.
pub fn voxel_downsample(m: &LocalTactileMap, voxel: f64) -> LocalTactileMap {
    assert!(voxel > 0.0, "voxel size must be positive");
    let mut cells: BTreeMap<(i64, i64, i64), (Vector3<f64>, Vector3<f64>, usize)> = BTreeMap::new();
    let normals = m.normals();
    for (i, p) in m.points().iter().enumerate() {
        let key = voxel_key(p, voxel);
        let e = cells.entry(key).or_insert((Vector3::zeros(), Vector3::zeros(), 0));
        e.0 += p;
        if let Some(ns) = normals {
            e.1 += ns[i];
        }
        e.2 += 1;
    }
    let points = cells.values().map(|(s, _, n)| s / *n as f64).collect();
    let normals = normals.map(|_| {
        cells.values().map(|(_, s, _)| if s.norm() > 1e-12 { s.normalize() } else { Vector3::z() }).collect()
    });
    LocalTactileMap::new(points, normals, m.frame_id).expect("centroids of finite points are finite")
}

pub fn voxel_key(p: &Vector3<f64>, voxel: f64) -> (i64, i64, i64) {
    ((p.x / voxel).floor() as i64, (p.y / voxel).floor() as i64, (p.z / voxel).floor() as i64)
}

/// Plane-fit normals from the `k` nearest neighbors, oriented toward +z.
pub fn estimate_normals(points: &[Vector3<f64>], k: usize) -> Vec<Vector3<f64>> {
    let tree = KdTree::new(points);
    points
        .iter()
        .map(|p| {
            let nb = tree.knn(p, k.max(3));
            if nb.len() < 3 {
                return Vector3::z();
            }
            let c = nb.iter().map(|&(j, _)| points[j]).sum::<Vector3<f64>>() / nb.len() as f64;
            let mut cov = Matrix3::zeros();
            for &(j, _) in &nb {
                let d = points[j] - c;
                cov += d * d.transpose();
            }
            let eig = SymmetricEigen::new(cov);
            let k = eig.eigenvalues.imin();
            let n: Vector3<f64> = eig.eigenvectors.column(k).into_owned();
            if n.z < 0.0 {
                -n
            } else {
                n
            }
        })
        .collect()
}

/// Elevation of a normal above the sensor plane, in degrees; a flat
/// surface gives 90°.
pub fn normal_pitch_deg(n: &Vector3<f64>) -> f64 {
    n.z.atan2(n.x.hypot(n.y)).to_degrees()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Roi {
    pub map: LocalTactileMap,
    /// No point was tilted enough; the full cloud was returned.
    pub fallback: bool,
}

/// Keep the region of significant deformation: the xy bounding box of all
/// points whose normal pitch is below the threshold.
pub fn extract_roi(m: &LocalTactileMap, pitch_threshold_deg: f64) -> Result<Roi, RegistrationError> {
    let normals = m.normals().ok_or(RegistrationError::MissingNormals)?;
    let pts = m.points();
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    let mut any = false;
    for (p, n) in pts.iter().zip(normals) {
        if normal_pitch_deg(n) < pitch_threshold_deg {
            any = true;
            lo = [lo[0].min(p.x), lo[1].min(p.y)];
            hi = [hi[0].max(p.x), hi[1].max(p.y)];
        }
    }
    if !any {
        log::warn!("no deformed region found in frame {}; using the whole map", m.frame_id);
        return Ok(Roi { map: m.clone(), fallback: true });
    }
    let keep: Vec<usize> =
        (0..pts.len()).filter(|&i| (lo[0]..=hi[0]).contains(&pts[i].x) && (lo[1]..=hi[1]).contains(&pts[i].y)).collect();
    Ok(Roi { map: m.select(&keep), fallback: false })
}

/// Darboux-frame pair features `(alpha, phi, theta)` in the usual FPFH
/// convention, or `None` for coincident points.
fn pair_features(p1: &Vector3<f64>, n1: &Vector3<f64>, p2: &Vector3<f64>, n2: &Vector3<f64>) -> Option<[f64; 3]> {
    let mut dp = p2 - p1;
    let f4 = dp.norm();
    if f4 == 0.0 {
        return None;
    }
    let (mut a, mut b) = (n1, n2);
    let angle1 = n1.dot(&dp) / f4;
    let angle2 = n2.dot(&dp) / f4;
    let f3;
    // near-ties (e.g. equal normals) keep the given order so the feature
    // does not depend on rounding
    if angle1.abs().acos() > angle2.abs().acos() + 1e-9 {
        std::mem::swap(&mut a, &mut b);
        dp = -dp;
        f3 = -angle2;
    } else {
        f3 = angle1;
    }
    let v = dp.cross(a);
    let vn = v.norm();
    if vn == 0.0 {
        return Some([0.0, 0.0, f3]);
    }
    let v = v / vn;
    let w = a.cross(&v);
    let f2 = v.dot(b);
    let f1 = w.dot(b).atan2(a.dot(b));
    Some([f1, f2, f3])
}

fn bin(value: f64, lo: f64, hi: f64) -> usize {
    ((11.0 * (value - lo) / (hi - lo)).floor().max(0.0) as usize).min(10)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpfhFeatures {
    pub histograms: Vec<Fpfh>,
    /// Points with no neighbor within the radius (zero histogram).
    pub isolated: Vec<bool>,
}

pub const MIN_FEATURE_POINTS: usize = 10;

pub fn compute_fpfh(m: &LocalTactileMap, radius: f64) -> Result<FpfhFeatures, RegistrationError> {
    let normals = m.normals().ok_or(RegistrationError::MissingNormals)?;
    let pts = m.points();
    if pts.len() < MIN_FEATURE_POINTS {
        return Err(RegistrationError::TooFewPoints { min: MIN_FEATURE_POINTS, got: pts.len() });
    }
    let tree = KdTree::new(pts);
    let neighbors: Vec<Vec<(usize, f64)>> = pts
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut nb: Vec<(usize, f64)> = tree.within(p, radius).into_iter().filter(|&(j, _)| j != i).collect();
            nb.sort_by_key(|&(j, _)| j);
            nb
        })
        .collect();

    let spfh: Vec<Fpfh> = (0..pts.len())
        .map(|i| {
            let mut h = [0.0; FPFH_BINS];
            let nb = &neighbors[i];
            if nb.is_empty() {
                return h;
            }
            let incr = 100.0 / nb.len() as f64;
            for &(j, _) in nb {
                if let Some([f1, f2, f3]) = pair_features(&pts[i], &normals[i], &pts[j], &normals[j]) {
                    h[bin(f1, -std::f64::consts::PI, std::f64::consts::PI)] += incr;
                    h[11 + bin(f2, -1.0, 1.0)] += incr;
                    h[22 + bin(f3, -1.0, 1.0)] += incr;
                }
            }
            h
        })
        .collect();

    let mut histograms = Vec::with_capacity(pts.len());
    let mut isolated = Vec::with_capacity(pts.len());
    for i in 0..pts.len() {
        let mut f = [0.0; FPFH_BINS];
        let mut sums = [0.0; 3];
        for &(j, d2) in &neighbors[i] {
            let d = d2.sqrt();
            if d == 0.0 {
                continue;
            }
            for k in 0..FPFH_BINS {
                let val = spfh[j][k] / d;
                sums[k / 11] += val;
                f[k] += val;
            }
        }
        for k in 0..FPFH_BINS {
            if sums[k / 11] != 0.0 {
                f[k] *= 100.0 / sums[k / 11];
            }
            f[k] += spfh[i][k];
        }
        isolated.push(neighbors[i].is_empty());
        histograms.push(f);
    }
    Ok(FpfhFeatures { histograms, isolated })
}

/// A map ready for registration: downsampled, normals re-estimated,
/// optionally cropped to its ROI, with FPFH features and a search tree.
#[derive(Debug, Clone)]
pub struct PreparedCloud {
    pub map: LocalTactileMap,
    pub features: FpfhFeatures,
    pub roi_fallback: bool,
    tree: KdTree,
}

impl PreparedCloud {
    pub fn tree(&self) -> &KdTree {
        &self.tree
    }
}

pub fn prepare(m: &LocalTactileMap, params: &RegistrationParams) -> Result<PreparedCloud, RegistrationError> {
    params.validate()?;
    // the ROI is chosen on voxel-averaged normals: single-pixel normals are
    // too noisy, and the plane-fit normals below smooth away steep flanks
    let with = match m.normals() {
        Some(_) => m.clone(),
        None => m.clone().with_normals(estimate_normals(m.points(), params.normal_neighbors))?,
    };
    let down = voxel_downsample(&with, params.voxel_size);
    let (down, roi_fallback) = if params.use_roi {
        let roi = extract_roi(&down, params.pitch_threshold_deg)?;
        (roi.map, roi.fallback)
    } else {
        (down, false)
    };
    let normals = estimate_normals(down.points(), params.normal_neighbors);
    let map = down.with_normals(normals)?;
    let features = compute_fpfh(&map, params.fpfh_radius)?;
    let tree = KdTree::new(map.points());
    Ok(PreparedCloud { map, features, roi_fallback, tree })
}

/// Source points tilted at least this much (degrees) count as structure.
pub const STRUCTURE_TILT_DEG: f64 = 8.0;
const STRUCTURE_NORMAL_DEG: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructureAgreement {
    /// Fraction of counted structure points that meet target structure.
    pub fraction: f64,
    /// Structure points that land inside the target's coverage.
    pub points: usize,
}

/// How well the raised structure of `src` lands on structure of `tgt` under
/// `transform`. A structure point agrees when a target point within one
/// voxel is itself tilted and its normal is within 20°. Flat regions match
/// under any in-plane motion, so fitness alone cannot tell a true overlap
/// from a slid one; this can.
pub fn structure_agreement(src: &PreparedCloud, tgt: &PreparedCloud, transform: &PoseSE3, voxel: f64) -> StructureAgreement {
    let tilt = |n: &Vector3<f64>| 90.0 - normal_pitch_deg(n);
    let (Some(sn), Some(tn)) = (src.map.normals(), tgt.map.normals()) else {
        return StructureAgreement { fraction: 0.0, points: 0 };
    };
    let cos_max = STRUCTURE_NORMAL_DEG.to_radians().cos();
    let (mut counted, mut agree) = (0usize, 0usize);
    for (p, n) in src.map.points().iter().zip(sn) {
        if tilt(n) < STRUCTURE_TILT_DEG {
            continue;
        }
        let q = transform.transform_point(p);
        if tgt.tree.nearest_within(&q, 2.0 * voxel).is_none() {
            continue;
        }
        counted += 1;
        let m = transform.rotate_vector(n);
        let ok = tgt.tree.within(&q, voxel).iter().any(|&(j, _)| tilt(&tn[j]) >= 0.5 * STRUCTURE_TILT_DEG && tn[j].dot(&m) >= cos_max);
        agree += ok as usize;
    }
    StructureAgreement { fraction: if counted == 0 { 0.0 } else { agree as f64 / counted as f64 }, points: counted }
}

/// Agreement in both directions; the weaker side is reported.
pub fn mutual_structure_agreement(src: &PreparedCloud, tgt: &PreparedCloud, transform: &PoseSE3, voxel: f64) -> StructureAgreement {
    let a = structure_agreement(src, tgt, transform, voxel);
    let b = structure_agreement(tgt, src, &transform.inverse(), voxel);
    StructureAgreement { fraction: a.fraction.min(b.fraction), points: a.points.min(b.points) }
}

/// Least-squares rigid transform taking `src` onto `tgt`.
pub fn kabsch(src: &[Vector3<f64>], tgt: &[Vector3<f64>]) -> Option<PoseSE3> {
    if src.len() < 3 || src.len() != tgt.len() {
        return None;
    }
    let n = src.len() as f64;
    let cs = src.iter().sum::<Vector3<f64>>() / n;
    let ct = tgt.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, t) in src.iter().zip(tgt) {
        h += (s - cs) * (t - ct).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut d = Matrix3::identity();
    if (vt.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = vt.transpose() * d * u.transpose();
    let t = ct - r * cs;
    Some(PoseSE3::from_parts_projected(r, t))
}

fn feature_dist2(a: &Fpfh, b: &Fpfh) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest target feature for every source point.
fn feature_matches(src: &FpfhFeatures, tgt: &FpfhFeatures) -> Vec<(usize, usize)> {
    src.histograms
        .iter()
        .enumerate()
        .filter(|(i, _)| !src.isolated[*i])
        .filter_map(|(i, f)| {
            tgt.histograms
                .iter()
                .enumerate()
                .filter(|(j, _)| !tgt.isolated[*j])
                .map(|(j, g)| (j, feature_dist2(f, g)))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(j, _)| (i, j))
        })
        .collect()
}

/// Fitness and point-to-plane RMS of `src` moved by `t` onto `tgt`, over
/// source points with a target neighbor within `dist`.
pub fn score_alignment(src: &PreparedCloud, tgt: &PreparedCloud, t: &PoseSE3, dist: f64) -> (f64, f64) {
    let pts = src.map.points();
    let normals = tgt.map.normals();
    let mut n = 0;
    let mut sum = 0.0;
    for p in pts {
        let q = t.transform_point(p);
        if let Some((j, d2)) = tgt.tree.nearest_within(&q, dist) {
            n += 1;
            sum += match normals {
                Some(ns) => (q - tgt.map.points()[j]).dot(&ns[j]).powi(2),
                None => d2,
            };
        }
    }
    let fitness = if pts.is_empty() { 0.0 } else { n as f64 / pts.len() as f64 };
    (fitness, if n > 0 { (sum / n as f64).sqrt() } else { 0.0 })
}

/// RANSAC over feature-matched triples. The best hypothesis (most
/// correspondence inliers, then lowest inlier RMS) is refit on its inliers.
pub fn global_register(src: &PreparedCloud, tgt: &PreparedCloud, params: &RegistrationParams) -> RegistrationResult {
    let rp = &params.ransac;
    let sp = src.map.points();
    let tp = tgt.map.points();
    let corr = feature_matches(&src.features, &tgt.features);
    let failed = |iterations| RegistrationResult {
        transform: PoseSE3::identity(),
        fitness: 0.0,
        rmse: 0.0,
        converged: false,
        inliers: 0,
        iterations,
        objective: Vec::new(),
    };
    if corr.len() < 3 {
        return failed(0);
    }
    let d2max = rp.inlier_distance * rp.inlier_distance;
    let score = |t: &PoseSE3| -> (usize, f64) {
        let mut n = 0;
        let mut s = 0.0;
        for &(i, j) in &corr {
            let d2 = (t.transform_point(&sp[i]) - tp[j]).norm_squared();
            if d2 < d2max {
                n += 1;
                s += d2;
            }
        }
        (n, s)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(rp.seed);
    let mut best: Option<(PoseSE3, usize, f64)> = None;
    let mut budget = rp.max_iterations;
    let mut it = 0;
    while it < budget {
        it += 1;
        let k: [usize; 3] = [rng.random_range(0..corr.len()), rng.random_range(0..corr.len()), rng.random_range(0..corr.len())];
        if k[0] == k[1] || k[1] == k[2] || k[0] == k[2] {
            continue;
        }
        let s: Vec<Vector3<f64>> = k.iter().map(|&c| sp[corr[c].0]).collect();
        let t: Vec<Vector3<f64>> = k.iter().map(|&c| tp[corr[c].1]).collect();
        let consistent = (0..3).all(|a| {
            let b = (a + 1) % 3;
            let (ls, lt) = ((s[a] - s[b]).norm(), (t[a] - t[b]).norm());
            ls.min(lt) >= rp.edge_length_ratio * ls.max(lt)
        });
        if !consistent {
            continue;
        }
        let Some(hyp) = kabsch(&s, &t) else { continue };
        let (n, sum) = score(&hyp);
        let better = match &best {
            None => n > 0,
            Some((_, bn, bs)) => n > *bn || (n == *bn && sum < *bs),
        };
        if better {
            best = Some((hyp, n, sum));
            let w = n as f64 / corr.len() as f64;
            let p_fail = 1.0 - w.powi(3);
            if p_fail <= 0.0 {
                break;
            }
            let needed = ((1.0 - rp.confidence).ln() / p_fail.ln()).ceil();
            if needed.is_finite() && needed >= 0.0 {
                budget = budget.min(needed as usize);
            }
        }
    }
    let Some((mut transform, mut inliers, _)) = best else { return failed(it) };
    // refit on the inlier set; keep it only if it does not lose inliers
    let (s, t): (Vec<_>, Vec<_>) = corr
        .iter()
        .filter(|&&(i, j)| (transform.transform_point(&sp[i]) - tp[j]).norm_squared() < d2max)
        .map(|&(i, j)| (sp[i], tp[j]))
        .unzip();
    if let Some(refit) = kabsch(&s, &t) {
        let (n, _) = score(&refit);
        if n >= inliers {
            transform = refit;
            inliers = n;
        }
    }
    let (fitness, rmse) = score_alignment(src, tgt, &transform, rp.inlier_distance);
    RegistrationResult { transform, fitness, rmse, converged: inliers >= rp.min_inliers, inliers, iterations: it, objective: Vec::new() }
}

/// Trimmed point-to-plane objective at `t`: source points are matched to
/// their nearest target point within `tau`, and the `keep` smallest squared
/// plane distances are summed (missing matches count `tau²`). A fixed count
/// keeps the objective from rewarding a change in overlap.
fn icp_objective(
    src: &[Vector3<f64>],
    tgt: &[Vector3<f64>],
    tgt_normals: &[Vector3<f64>],
    tree: &KdTree,
    t: &PoseSE3,
    tau: f64,
    keep: usize,
) -> (f64, Vec<(usize, usize)>) {
    let mut matched: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in src.iter().enumerate() {
        let q = t.transform_point(p);
        if let Some((j, _)) = tree.nearest_within(&q, tau) {
            let r = tgt_normals[j].dot(&(q - tgt[j]));
            matched.push((r * r, i, j));
        }
    }
    matched.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    matched.truncate(keep);
    let missing = keep - matched.len();
    let e = matched.iter().map(|m| m.0).sum::<f64>() + missing as f64 * tau * tau;
    (e, matched.into_iter().map(|(_, i, j)| (i, j)).collect())
}

/// Fraction of the initial correspondences kept by the trimmed objective.
const ICP_TRIM: f64 = 0.9;

/// Point-to-plane ICP on a trimmed objective. Each Gauss–Newton step is
/// backtracked until the objective does not increase, so the recorded
/// objective is non-increasing.
pub fn icp_refine(src: &PreparedCloud, tgt: &PreparedCloud, init: &PoseSE3, params: &IcpParams) -> RegistrationResult {
    let sp = src.map.points();
    let tp = tgt.map.points();
    let tn = tgt.map.normals().expect("prepared clouds carry normals");
    let tau = params.max_correspondence_distance;
    let mut t = *init;
    let initial = sp.iter().filter(|p| tgt.tree.nearest_within(&t.transform_point(p), tau).is_some()).count();
    let keep = ((initial as f64 * ICP_TRIM).floor() as usize).max(initial.min(6));
    if initial == 0 {
        return RegistrationResult {
            transform: t,
            fitness: 0.0,
            rmse: 0.0,
            converged: false,
            inliers: 0,
            iterations: 0,
            objective: Vec::new(),
        };
    }
    let (mut e, mut corr) = icp_objective(sp, tp, tn, &tgt.tree, &t, tau, keep);
    let mut objective = vec![e];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < params.max_iterations {
        iterations += 1;
        let mut ata = Matrix6::<f64>::zeros();
        let mut atb = Vector6::<f64>::zeros();
        for &(i, j) in &corr {
            let q = t.transform_point(&sp[i]);
            let n = tn[j];
            let c = q.cross(&n);
            let row = Vector6::new(c.x, c.y, c.z, n.x, n.y, n.z);
            let r = n.dot(&(q - tp[j]));
            ata += row * row.transpose();
            atb -= row * r;
        }
        let x = match ata.cholesky() {
            Some(ch) => ch.solve(&atb),
            None => match (ata + Matrix6::identity() * 1e-12).cholesky() {
                Some(ch) => ch.solve(&atb),
                None => break,
            },
        };
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..12 {
            let dx = x * step;
            let omega = Vector3::new(dx[0], dx[1], dx[2]);
            let delta = PoseSE3::from_parts_projected(so3_exp(&omega), Vector3::new(dx[3], dx[4], dx[5]));
            let cand = delta.compose(&t);
            let (ec, cc) = icp_objective(sp, tp, tn, &tgt.tree, &cand, tau, keep);
            if ec <= e {
                accepted = Some((cand, ec, cc, dx.norm()));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, ec, cc, norm)) = accepted else {
            // no descent direction left
            converged = true;
            break;
        };
        let rel = (e - ec) / e.max(1e-300);
        t = cand;
        e = ec;
        corr = cc;
        objective.push(e);
        if rel < params.convergence_delta || norm < 1e-12 {
            converged = true;
            break;
        }
    }
    let (fitness, rmse) = score_alignment(src, tgt, &t, tau);
    RegistrationResult { transform: t, fitness, rmse, converged, inliers: corr.len(), iterations, objective }
}

/// Global estimate refined by ICP. The global result is returned
/// unchanged when it did not converge.
pub fn register(src: &PreparedCloud, tgt: &PreparedCloud, params: &RegistrationParams) -> RegistrationResult {
    let global = global_register(src, tgt, params);
    if !global.converged {
        return global;
    }
    icp_refine(src, tgt, &global.transform, &params.icp)
}

/// Register already-prepared maps and apply the odometry acceptance rules.
pub fn register_checked(
    src: &PreparedCloud,
    tgt: &PreparedCloud,
    params: &RegistrationParams,
) -> Result<RegistrationResult, String> {
    let global = global_register(src, tgt, params);
    if !global.converged {
        return Err(format!("global registration found {} inliers (need {})", global.inliers, params.ransac.min_inliers));
    }
    let r = icp_refine(src, tgt, &global.transform, &params.icp);
    if r.fitness < params.icp.min_fitness {
        return Err(format!("ICP fitness {:.3} below {:.3}", r.fitness, params.icp.min_fitness));
    }
    Ok(r)
}

#[derive(Debug, Clone)]
pub struct PairRegistration {
    pub source: usize,
    pub target: usize,
    pub result: RegistrationResult,
}

#[derive(Debug, Clone)]
pub struct Odometry {
    pub poses: Vec<PoseSE3>,
    pub pairs: Vec<PairRegistration>,
}

/// Poses of every frame in the first frame's coordinates:
/// `pose[k] = pose[k−1] · T(k → k−1)`.
pub fn sequential_odometry(frames: &[LocalTactileMap], params: &RegistrationParams) -> Result<Odometry, RegistrationError> {
    let prepared = frames.iter().map(|f| prepare(f, params)).collect::<Result<Vec<_>, _>>()?;
    sequential_odometry_prepared(&prepared, params)
}

pub fn sequential_odometry_prepared(prepared: &[PreparedCloud], params: &RegistrationParams) -> Result<Odometry, RegistrationError> {
    if prepared.is_empty() {
        return Err(RegistrationError::NoFrames);
    }
    let mut poses = vec![PoseSE3::identity()];
    let mut pairs = Vec::new();
    for k in 1..prepared.len() {
        let result = register_checked(&prepared[k], &prepared[k - 1], params)
            .map_err(|reason| RegistrationError::PairFailed { from: k, onto: k - 1, reason })?;
        poses.push(poses[k - 1].compose(&result.transform));
        pairs.push(PairRegistration { source: k, target: k - 1, result });
    }
    Ok(Odometry { poses, pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn grid_cloud(n: usize, spacing: f64, f: impl Fn(f64, f64) -> f64) -> LocalTactileMap {
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let (x, y) = (i as f64 * spacing, j as f64 * spacing);
                pts.push(Vector3::new(x, y, f(x, y)));
            }
        }
        LocalTactileMap::new(pts, None, 0).unwrap()
    }

    fn bumpy(x: f64, y: f64) -> f64 {
        0.4 * (x * 0.9).sin() * (y * 0.7).cos() + 0.2 * (0.5 * x + 1.3 * y).sin()
    }

    fn with_pca_normals(m: LocalTactileMap) -> LocalTactileMap {
        let n = estimate_normals(m.points(), 20);
        m.with_normals(n).unwrap()
    }

    #[test]
    fn downsample_examples() {
        let c = grid_cloud(10, 0.1, |_, _| 0.0);
        assert_eq!(voxel_downsample(&c, 100.0).len(), 1);
        // lattice offset by half a cell so no point sits on a voxel face
        let pts: Vec<Vector3<f64>> = c.points().iter().map(|p| p + Vector3::new(0.05, 0.05, 0.05)).collect();
        let lattice = LocalTactileMap::new(pts, None, 0).unwrap();
        assert_eq!(voxel_downsample(&lattice, 0.1).len(), 100);
    }

    proptest! {
        #[test]
        fn downsampled_points_occupy_distinct_voxels(
            pts in prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64, -1.0..1.0f64), 1..300),
            voxel in 0.2..2.0f64,
        ) {
            let m = LocalTactileMap::new(pts.iter().map(|&(x, y, z)| Vector3::new(x, y, z)).collect(), None, 0).unwrap();
            let d = voxel_downsample(&m, voxel);
            prop_assert!(d.len() <= m.len());
            let occupied: std::collections::BTreeSet<_> = m.points().iter().map(|p| voxel_key(p, voxel)).collect();
            prop_assert_eq!(d.len(), occupied.len());
            let keys: std::collections::BTreeSet<_> = d.points().iter().map(|p| voxel_key(p, voxel)).collect();
            prop_assert_eq!(keys.len(), d.len());
        }
    }

    #[test]
    fn roi_examples() {
        let flat = with_pca_normals(grid_cloud(20, 0.2, |_, _| 1.0));
        let r = extract_roi(&flat, 70.0).unwrap();
        assert!(r.fallback && r.map.len() == flat.len());
        let ridge = with_pca_normals(grid_cloud(40, 0.2, |x, _| (-(x - 4.0).powi(2) / 0.2).exp()));
        let r = extract_roi(&ridge, 70.0).unwrap();
        assert!(!r.fallback);
        assert!(r.map.points().iter().all(|p| (p.x - 4.0).abs() < 1.5));
        assert!(r.map.len() < ridge.len() / 2);
        let all = extract_roi(&ridge, 90.0 - 1e-9).unwrap();
        assert!(all.map.len() >= r.map.len());
        assert!(matches!(extract_roi(&grid_cloud(3, 1.0, |_, _| 0.0), 70.0), Err(RegistrationError::MissingNormals)));
    }

    #[test]
    fn coplanar_interior_histograms_agree() {
        let c = grid_cloud(20, 0.25, |x, y| 0.1 * x - 0.2 * y);
        let n = Vector3::new(-0.1, 0.2, 1.0).normalize();
        let len = c.len();
        let c = c.with_normals(vec![n; len]).unwrap();
        let f = compute_fpfh(&c, 0.6).unwrap();
        let interior: Vec<usize> = (0..c.len()).filter(|&k| (4..16).contains(&(k / 20)) && (4..16).contains(&(k % 20))).collect();
        let first = f.histograms[interior[0]];
        for &k in &interior {
            assert!(f.histograms[k].iter().zip(&first).all(|(a, b)| (a - b).abs() < 1e-6));
        }
        assert!(f.histograms.iter().flatten().all(|&v| v >= 0.0));
    }

    #[test]
    fn fpfh_is_rigid_invariant() {
        // jittered samples: exact ties in the pair ordering flip a feature's sign
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vector3<f64>> = grid_cloud(16, 0.3, bumpy)
            .points()
            .iter()
            .map(|p| {
                let (x, y) = (p.x + rng.random_range(-0.1..0.1), p.y + rng.random_range(-0.1..0.1));
                Vector3::new(x, y, bumpy(x, y))
            })
            .collect();
        let c = with_pca_normals(LocalTactileMap::new(pts, None, 0).unwrap());
        let t = PoseSE3::from_axis_angle(&Vector3::new(0.3, -0.5, 1.0).normalize(), 0.7, Vector3::new(3.0, -1.0, 2.0));
        let moved = c.transformed(&t);
        let a = compute_fpfh(&c, 1.0).unwrap();
        let b = compute_fpfh(&moved, 1.0).unwrap();
        for (k, (x, y)) in a.histograms.iter().zip(&b.histograms).enumerate() {
            let d = x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
            assert!(d < 1e-6, "point {k}: {d} {:?} {:?}", x, y);
        }
    }

    #[test]
    fn isolated_points_get_zero_histograms() {
        let mut pts: Vec<Vector3<f64>> = (0..12).map(|k| Vector3::new(k as f64 * 0.1, 0.0, 0.0)).collect();
        pts.push(Vector3::new(50.0, 50.0, 0.0));
        let m = LocalTactileMap::new(pts.clone(), Some(vec![Vector3::z(); pts.len()]), 0).unwrap();
        let f = compute_fpfh(&m, 0.25).unwrap();
        assert!(f.isolated[12] && f.histograms[12].iter().all(|&v| v == 0.0));
        assert!(!f.isolated[0]);
    }

    #[test]
    fn kabsch_recovers_transform() {
        let src: Vec<Vector3<f64>> = (0..10).map(|k| Vector3::new(k as f64, (k * k) as f64 * 0.1, (k as f64).sin())).collect();
        let t = PoseSE3::from_axis_angle(&Vector3::new(1.0, 2.0, 3.0).normalize(), 0.4, Vector3::new(1.0, 2.0, 3.0));
        let tgt: Vec<Vector3<f64>> = src.iter().map(|p| t.transform_point(p)).collect();
        let est = kabsch(&src, &tgt).unwrap();
        let (dt, dr) = est.distance_to(&t);
        assert!(dt < 1e-9 && dr < 1e-9);
    }

    fn prepared(m: &LocalTactileMap, params: &RegistrationParams) -> PreparedCloud {
        prepare(m, params).unwrap()
    }

    #[test]
    fn self_registration_is_identity() {
        let params = RegistrationParams { use_roi: false, ..Default::default() };
        let c = grid_cloud(60, 0.1, bumpy);
        let p = prepared(&c, &params);
        let r = global_register(&p, &p, &params);
        assert!(r.converged && r.fitness > 0.99);
        let (dt, dr) = r.transform.distance_to(&PoseSE3::identity());
        assert!(dt < 1e-6 && dr < 1e-6);
        let i = icp_refine(&p, &p, &PoseSE3::identity(), &params.icp);
        assert!(i.rmse < 1e-12 && i.transform.distance_to(&PoseSE3::identity()).0 < 1e-12);
    }

    #[test]
    fn icp_objective_never_increases_and_recovers_offset() {
        let params = RegistrationParams { use_roi: false, ..Default::default() };
        let c = grid_cloud(80, 0.1, bumpy);
        let truth = PoseSE3::from_axis_angle(&Vector3::z(), 3f64.to_radians(), Vector3::new(0.5, -0.3, 0.05));
        let tgt = prepared(&c.transformed(&truth), &params);
        let src = prepared(&c, &params);
        let init = PoseSE3::from_translation(Vector3::new(0.3, -0.1, 0.0));
        let r = icp_refine(&src, &tgt, &init, &params.icp);
        assert!(r.objective.windows(2).all(|w| w[1] <= w[0]));
        let (dt, dr) = r.transform.distance_to(&truth);
        assert!(dt < 0.05 && dr.to_degrees() < 0.3, "{dt} {}", dr.to_degrees());
    }

    #[test]
    fn icp_without_correspondences_does_not_converge() {
        let params = RegistrationParams { use_roi: false, ..Default::default() };
        let c = prepared(&grid_cloud(30, 0.1, bumpy), &params);
        let far = PoseSE3::from_translation(Vector3::new(100.0, 0.0, 0.0));
        let r = icp_refine(&c, &c, &far, &params.icp);
        assert!(!r.converged && r.fitness == 0.0);
    }

    #[test]
    fn ransac_is_deterministic() {
        let params = RegistrationParams { use_roi: false, ..Default::default() };
        let c = grid_cloud(50, 0.1, bumpy);
        let t = PoseSE3::from_axis_angle(&Vector3::z(), 0.2, Vector3::new(0.4, 0.2, 0.0));
        let a = prepared(&c, &params);
        let b = prepared(&c.transformed(&t), &params);
        assert_eq!(global_register(&a, &b, &params), global_register(&a, &b, &params));
    }

    #[test]
    fn odometry_of_single_frame_is_identity() {
        let params = RegistrationParams { use_roi: false, ..Default::default() };
        let o = sequential_odometry(&[grid_cloud(30, 0.1, bumpy)], &params).unwrap();
        assert_eq!(o.poses, vec![PoseSE3::identity()]);
        assert!(matches!(sequential_odometry(&[], &params), Err(RegistrationError::NoFrames)));
    }

    #[test]
    fn params_are_validated() {
        let p = RegistrationParams { pitch_threshold_deg: 90.0, ..Default::default() };
        assert!(p.validate().is_err());
        let p = RegistrationParams { voxel_size: 0.0, ..Default::default() };
        assert!(p.validate().is_err());
    }
}
