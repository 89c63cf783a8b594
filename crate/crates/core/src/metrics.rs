//! Evaluation: flatness, relative pose error, robust plane/sphere fits and
//! cloud-to-reference deviation.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::PoseSE3;
use crate::registration::kabsch;
use crate::spatial::KdTree;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { need: usize, got: usize },
    #[error("every sample was degenerate")]
    Degenerate,
    #[error("empty cloud")]
    Empty,
    #[error("invalid parameter: {0}")]
    Param(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_distance: f64,
    pub seed: u64,
}

impl RansacConfig {
    pub fn plane(seed: u64) -> Self {
        Self { iterations: 1000, inlier_distance: 0.1, seed }
    }

    pub fn sphere(seed: u64) -> Self {
        Self { iterations: 1000, inlier_distance: 0.3, seed }
    }

    fn validate(&self) -> Result<(), MetricsError> {
        if self.iterations == 0 || !(self.inlier_distance > 0.0) {
            return Err(MetricsError::Param(format!("{self:?}")));
        }
        Ok(())
    }
}

/// `n · p + d = 0` with unit `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneModel {
    pub normal: Vector3<f64>,
    pub offset: f64,
    pub inliers: usize,
}

impl PlaneModel {
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal.dot(p) + self.offset
    }

    pub fn transformed(&self, pose: &PoseSE3) -> PlaneModel {
        let n = pose.rotate_vector(&self.normal);
        PlaneModel { normal: n, offset: self.offset - n.dot(pose.translation()), inliers: self.inliers }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphereModel {
    pub center: Vector3<f64>,
    pub radius: f64,
    pub inliers: usize,
}

impl SphereModel {
    pub fn distance(&self, p: &Vector3<f64>) -> f64 {
        ((p - self.center).norm() - self.radius).abs()
    }
}

/// Total least squares plane through the points.
pub fn fit_plane_lsq(points: &[Vector3<f64>]) -> Result<PlaneModel, MetricsError> {
    if points.len() < 3 {
        return Err(MetricsError::TooFewPoints { need: 3, got: points.len() });
    }
    let c = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - c;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigen();
    let (k, _) = eig.eigenvalues.iter().enumerate().fold((0, f64::INFINITY), |b, (i, &v)| if v < b.1 { (i, v) } else { b });
    let sorted = {
        let mut v: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        v.sort_by(f64::total_cmp);
        v
    };
    if sorted[1] <= 1e-12 * sorted[2].max(1e-300) {
        return Err(MetricsError::Degenerate);
    }
    let mut n = eig.eigenvectors.column(k).into_owned().normalize();
    if n.z < 0.0 {
        n = -n;
    }
    Ok(PlaneModel { normal: n, offset: -n.dot(&c), inliers: points.len() })
}

fn plane_from_three(a: &Vector3<f64>, b: &Vector3<f64>, c: &Vector3<f64>) -> Option<(Vector3<f64>, f64)> {
    let n = (b - a).cross(&(c - a));
    let scale = (b - a).norm() * (c - a).norm();
    if n.norm() <= 1e-9 * scale.max(1e-300) {
        return None;
    }
    let n = n.normalize();
    Some((n, -n.dot(a)))
}

/// Best-consensus plane from 3-point samples, refit on its inliers.
pub fn fit_plane_ransac(cloud: &[Vector3<f64>], cfg: &RansacConfig) -> Result<PlaneModel, MetricsError> {
    cfg.validate()?;
    if cloud.len() < 3 {
        return Err(MetricsError::TooFewPoints { need: 3, got: cloud.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, Vector3<f64>, f64)> = None;
    for _ in 0..cfg.iterations {
        let s = sample(&mut rng, cloud.len(), 3);
        let Some((n, d)) = plane_from_three(&cloud[s.index(0)], &cloud[s.index(1)], &cloud[s.index(2)]) else { continue };
        let count = cloud.iter().filter(|p| (n.dot(p) + d).abs() <= cfg.inlier_distance).count();
        if best.is_none_or(|b| count > b.0) {
            best = Some((count, n, d));
        }
        if count == cloud.len() {
            break;
        }
    }
    let (_, n, d) = best.ok_or(MetricsError::Degenerate)?;
    let inl: Vec<Vector3<f64>> = cloud.iter().copied().filter(|p| (n.dot(p) + d).abs() <= cfg.inlier_distance).collect();
    let mut model = fit_plane_lsq(&inl).unwrap_or(PlaneModel { normal: n, offset: d, inliers: inl.len() });
    model.inliers = cloud.iter().filter(|p| model.distance(p).abs() <= cfg.inlier_distance).count();
    Ok(model)
}

/// Algebraic sphere through ≥ 4 points: `|p|² + a·p + b = 0`.
fn sphere_algebraic(points: &[Vector3<f64>]) -> Option<(Vector3<f64>, f64)> {
    let mut ata = Matrix4::<f64>::zeros();
    let mut atb = Vector4::<f64>::zeros();
    let c = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    for p in points {
        let q = p - c;
        let row = Vector4::new(q.x, q.y, q.z, 1.0);
        ata += row * row.transpose();
        atb += row * (-q.norm_squared());
    }
    let sol = ata.lu().solve(&atb)?;
    let center = Vector3::new(-sol[0] / 2.0, -sol[1] / 2.0, -sol[2] / 2.0);
    let r2 = center.norm_squared() - sol[3];
    if !(r2 > 0.0) || !r2.is_finite() {
        return None;
    }
    Some((center + c, r2.sqrt()))
}

/// Geometric least squares refinement (Gauss–Newton on `|p − c| − r`).
pub fn fit_sphere_lsq(points: &[Vector3<f64>]) -> Result<SphereModel, MetricsError> {
    if points.len() < 4 {
        return Err(MetricsError::TooFewPoints { need: 4, got: points.len() });
    }
    let (mut c, mut r) = sphere_algebraic(points).ok_or(MetricsError::Degenerate)?;
    for _ in 0..20 {
        let mut jtj = Matrix4::<f64>::zeros();
        let mut jtr = Vector4::<f64>::zeros();
        for p in points {
            let d = p - c;
            let dist = d.norm();
            if dist < 1e-12 {
                continue;
            }
            let u = d / dist;
            let jrow = Vector4::new(-u.x, -u.y, -u.z, -1.0);
            let res = dist - r;
            jtj += jrow * jrow.transpose();
            jtr += jrow * res;
        }
        let Some(step) = jtj.cholesky().map(|ch| ch.solve(&(-jtr))) else { break };
        c += Vector3::new(step[0], step[1], step[2]);
        r += step[3];
        if step.norm() < 1e-12 * (1.0 + r) {
            break;
        }
    }
    if !(r > 0.0) || !r.is_finite() {
        return Err(MetricsError::Degenerate);
    }
    Ok(SphereModel { center: c, radius: r, inliers: points.len() })
}

fn sphere_from_four(p: [&Vector3<f64>; 4]) -> Option<(Vector3<f64>, f64)> {
    // |x − c|² = r² differenced against the first point
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for k in 0..3 {
        let d = p[k + 1] - p[0];
        a.set_row(k, &(2.0 * d).transpose());
        b[k] = p[k + 1].norm_squared() - p[0].norm_squared();
    }
    let scale = (1..4).map(|k| (p[k] - p[0]).norm()).fold(0.0, f64::max);
    if a.determinant().abs() <= 1e-9 * (2.0 * scale).powi(3).max(1e-300) {
        return None;
    }
    let c = a.lu().solve(&b)?;
    let r = (p[0] - c).norm();
    r.is_finite().then_some((c, r))
}

/// Best-consensus sphere from 4-point samples, refit on its inliers.
pub fn fit_sphere_ransac(cloud: &[Vector3<f64>], cfg: &RansacConfig) -> Result<SphereModel, MetricsError> {
    cfg.validate()?;
    if cloud.len() < 4 {
        return Err(MetricsError::TooFewPoints { need: 4, got: cloud.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(usize, Vector3<f64>, f64)> = None;
    for _ in 0..cfg.iterations {
        let s = sample(&mut rng, cloud.len(), 4);
        let Some((c, r)) = sphere_from_four([&cloud[s.index(0)], &cloud[s.index(1)], &cloud[s.index(2)], &cloud[s.index(3)]]) else {
            continue;
        };
        let count = cloud.iter().filter(|p| ((*p - c).norm() - r).abs() <= cfg.inlier_distance).count();
        if best.is_none_or(|b| count > b.0) {
            best = Some((count, c, r));
        }
        if count == cloud.len() {
            break;
        }
    }
    let (_, c, r) = best.ok_or(MetricsError::Degenerate)?;
    let inl: Vec<Vector3<f64>> = cloud.iter().copied().filter(|p| ((p - c).norm() - r).abs() <= cfg.inlier_distance).collect();
    let mut model = fit_sphere_lsq(&inl).unwrap_or(SphereModel { center: c, radius: r, inliers: 0 });
    model.inliers = cloud.iter().filter(|p| model.distance(p) <= cfg.inlier_distance).count();
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlatnessNorm {
    /// Mean absolute point-to-plane distance.
    #[default]
    L1,
    Rms,
}

pub fn flatness(cloud: &[Vector3<f64>], plane: &PlaneModel) -> Result<f64, MetricsError> {
    flatness_with(cloud, plane, FlatnessNorm::L1)
}

pub fn flatness_with(cloud: &[Vector3<f64>], plane: &PlaneModel, norm: FlatnessNorm) -> Result<f64, MetricsError> {
    if cloud.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = cloud.len() as f64;
    Ok(match norm {
        FlatnessNorm::L1 => cloud.iter().map(|p| plane.distance(p).abs()).sum::<f64>() / n,
        FlatnessNorm::Rms => (cloud.iter().map(|p| plane.distance(p).powi(2)).sum::<f64>() / n).sqrt(),
    })
}

/// Translation length of `(Q_f⁻¹ Q_l)⁻¹ (P_f⁻¹ P_l)`, with `Q` ground truth
/// and `P` estimate.
pub fn rpe_first_last(q_first: &PoseSE3, q_last: &PoseSE3, p_first: &PoseSE3, p_last: &PoseSE3) -> f64 {
    let q = q_first.inverse().compose(q_last);
    let p = p_first.inverse().compose(p_last);
    q.inverse().compose(&p).translation().norm()
}

pub fn rpe_trajectory(truth: &[PoseSE3], estimate: &[PoseSE3]) -> Result<f64, MetricsError> {
    if truth.is_empty() || truth.len() != estimate.len() {
        return Err(MetricsError::Param(format!("trajectory lengths {} and {}", truth.len(), estimate.len())));
    }
    Ok(rpe_first_last(&truth[0], &truth[truth.len() - 1], &estimate[0], &estimate[estimate.len() - 1]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Deviation {
    pub mean: f64,
    pub std: f64,
}

/// Nearest-neighbour distance statistics of `cloud` against `reference`;
/// the clouds must already be aligned.
pub fn cloud_deviation(cloud: &[Vector3<f64>], reference: &KdTree) -> Result<Deviation, MetricsError> {
    if cloud.is_empty() || reference.is_empty() {
        return Err(MetricsError::Empty);
    }
    let d: Vec<f64> = cloud.iter().map(|p| reference.nearest(p).expect("non-empty tree").1.sqrt()).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok(Deviation { mean, std: var.sqrt() })
}

/// Point-to-point ICP of `cloud` onto `reference`; returns the aligning pose.
pub fn align_to_reference(cloud: &[Vector3<f64>], reference: &[Vector3<f64>], tree: &KdTree, max_distance: f64, iterations: usize) -> PoseSE3 {
    let mut pose = PoseSE3::identity();
    let mut last = f64::INFINITY;
    for _ in 0..iterations {
        let mut src = Vec::new();
        let mut tgt = Vec::new();
        let mut err = 0.0;
        for p in cloud {
            let q = pose.transform_point(p);
            if let Some((j, d2)) = tree.nearest_within(&q, max_distance) {
                src.push(*p);
                tgt.push(reference[j]);
                err += d2;
            }
        }
        if src.len() < 3 {
            break;
        }
        let Some(next) = kabsch(&src, &tgt) else { break };
        pose = next;
        let mse = err / src.len() as f64;
        if (last - mse).abs() <= 1e-10 * last.max(1e-12) {
            break;
        }
        last = mse;
    }
    pose
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn grid_plane(n: usize, f: impl Fn(f64, f64) -> f64) -> Vec<Vector3<f64>> {
        let mut v = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let (x, y) = (i as f64 * 0.5, j as f64 * 0.5);
                v.push(Vector3::new(x, y, f(x, y)));
            }
        }
        v
    }

    #[test]
    fn exact_plane() {
        let pts = grid_plane(20, |_, _| 0.0);
        let m = fit_plane_ransac(&pts, &RansacConfig::plane(1)).unwrap();
        assert!((m.normal.z.abs() - 1.0).abs() < 1e-12);
        assert!(m.offset.abs() < 1e-12);
        assert_eq!(m.inliers, pts.len());
        assert!((m.normal.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn three_points_interpolated() {
        let pts = vec![Vector3::new(0.0, 0.0, 1.0), Vector3::new(1.0, 0.0, 2.0), Vector3::new(0.0, 1.0, 0.5)];
        let m = fit_plane_ransac(&pts, &RansacConfig::plane(0)).unwrap();
        assert!(pts.iter().all(|p| m.distance(p).abs() < 1e-12));
    }

    #[test]
    fn plane_with_outliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let truth = Vector3::new(0.1, -0.2, 1.0).normalize();
        let mut pts: Vec<Vector3<f64>> = grid_plane(30, |x, y| -(truth.x * x + truth.y * y) / truth.z + 2.0)
            .into_iter()
            .map(|p| p + truth * rng.random_range(-0.02..0.02))
            .collect();
        let n_out = pts.len() / 4;
        for _ in 0..n_out {
            pts.push(Vector3::new(rng.random_range(0.0..15.0), rng.random_range(0.0..15.0), rng.random_range(-10.0..10.0)));
        }
        let m = fit_plane_ransac(&pts, &RansacConfig::plane(3)).unwrap();
        let ang = m.normal.dot(&truth).abs().min(1.0).acos().to_degrees();
        assert!(ang < 0.5, "{ang}");
    }

    #[test]
    fn collinear_cloud_is_degenerate() {
        let pts: Vec<_> = (0..10).map(|k| Vector3::new(k as f64, 0.0, 0.0)).collect();
        assert_eq!(fit_plane_ransac(&pts, &RansacConfig::plane(0)), Err(MetricsError::Degenerate));
    }

    fn sphere_points(c: Vector3<f64>, r: f64, n: usize, cap: f64) -> Vec<Vector3<f64>> {
        // deterministic spiral over a cap of polar angle `cap`
        (0..n)
            .map(|k| {
                let t = (k as f64 + 0.5) / n as f64;
                let polar = cap * t.sqrt();
                let az = k as f64 * 2.399963229728653;
                c + r * Vector3::new(polar.sin() * az.cos(), polar.sin() * az.sin(), polar.cos())
            })
            .collect()
    }

    #[test]
    fn exact_sphere_radius_20() {
        let pts = sphere_points(Vector3::new(1.0, 2.0, -20.0), 20.0, 500, 1.2);
        let m = fit_sphere_ransac(&pts, &RansacConfig::sphere(5)).unwrap();
        assert!((m.radius - 20.0).abs() < 1e-6);
        assert_eq!(m.inliers, 500);
    }

    #[test]
    fn shallow_cap_radius() {
        // 193.3 mm cap over a 16 × 12 mm footprint, 10 µm noise
        let r = 193.3;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pts = Vec::new();
        for i in 0..81 {
            for j in 0..61 {
                let (x, y) = (-8.0 + i as f64 * 0.2, -6.0 + j as f64 * 0.2);
                let z = -(r * r - x * x - y * y).sqrt() + r + rng.random_range(-0.01..0.01);
                pts.push(Vector3::new(x, y, z));
            }
        }
        let m = fit_sphere_ransac(&pts, &RansacConfig { iterations: 1000, inlier_distance: 0.02, seed: 1 }).unwrap();
        assert!((m.radius - r).abs() / r < 0.02, "{}", m.radius);
    }

    #[test]
    fn coplanar_cloud_has_no_sphere() {
        let pts = grid_plane(10, |_, _| 1.0);
        assert!(fit_sphere_ransac(&pts, &RansacConfig::sphere(0)).is_err());
    }

    #[test]
    fn flatness_hand_values() {
        let plane = PlaneModel { normal: Vector3::z(), offset: 0.0, inliers: 0 };
        assert_eq!(flatness(&grid_plane(5, |_, _| 0.0), &plane).unwrap(), 0.0);
        let alt: Vec<_> = (0..10).map(|k| Vector3::new(k as f64, 0.0, if k % 2 == 0 { 1.0 } else { -1.0 })).collect();
        assert_eq!(flatness(&alt, &plane).unwrap(), 1.0);
        let alt2: Vec<_> = (0..4).map(|k| Vector3::new(0.0, 0.0, [1.0, -1.0, 3.0, -3.0][k])).collect();
        assert_eq!(flatness(&alt2, &plane).unwrap(), 2.0);
        assert_eq!(flatness_with(&alt2, &plane, FlatnessNorm::Rms).unwrap(), 5f64.sqrt());
        assert_eq!(flatness(&[], &plane), Err(MetricsError::Empty));
    }

    #[test]
    fn rpe_three_four_five() {
        let step = PoseSE3::from_translation(Vector3::new(10.0, 0.0, 0.0));
        let q0 = PoseSE3::identity();
        let q1 = q0.compose(&step).compose(&step);
        assert_eq!(rpe_first_last(&q0, &q1, &q0, &q1), 0.0);
        let p1 = PoseSE3::from_translation(q1.translation() + Vector3::new(3.0, 4.0, 0.0));
        assert!((rpe_first_last(&q0, &q1, &q0, &p1) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn deviation_of_offset_plane() {
        let reference = grid_plane(40, |_, _| 0.0);
        let tree = KdTree::new(&reference);
        assert_eq!(cloud_deviation(&reference, &tree).unwrap(), Deviation { mean: 0.0, std: 0.0 });
        let shifted: Vec<_> = grid_plane(20, |_, _| 0.5).into_iter().map(|p| p + Vector3::new(2.0, 2.0, 0.0)).collect();
        let d = cloud_deviation(&shifted, &tree).unwrap();
        assert!((d.mean - 0.5).abs() < 1e-12 && d.std < 1e-12);
    }

    #[test]
    fn alignment_recovers_small_offset() {
        let reference = grid_plane(40, |x, y| 0.3 * (x * 0.7).sin() + 0.2 * (y * 0.5).cos());
        let tree = KdTree::new(&reference);
        let t = PoseSE3::from_rotation_vector(&Vector3::new(0.0, 0.0, 0.02), Vector3::new(0.2, -0.1, 0.1));
        let cloud: Vec<_> = reference[300..1200].iter().map(|p| t.transform_point(p)).collect();
        let pose = align_to_reference(&cloud, &reference, &tree, 2.0, 100);
        let aligned: Vec<_> = cloud.iter().map(|p| pose.transform_point(p)).collect();
        let d = cloud_deviation(&aligned, &tree).unwrap();
        assert!(d.mean < 1e-3, "{d:?}");
    }

    proptest! {
        #[test]
        fn flatness_rigid_invariance(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<_> = (0..50).map(|_| Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-0.3..0.3))).collect();
            let plane = PlaneModel { normal: Vector3::new(0.05, 0.0, 1.0).normalize(), offset: 0.1, inliers: 0 };
            let t = PoseSE3::from_rotation_vector(
                &Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                Vector3::new(rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0)),
            );
            let moved: Vec<_> = pts.iter().map(|p| t.transform_point(p)).collect();
            let a = flatness(&pts, &plane).unwrap();
            let b = flatness(&moved, &plane.transformed(&t)).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn rpe_left_invariance(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pose = || PoseSE3::from_rotation_vector(
                &Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                Vector3::new(rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0)),
            );
            let (a, b, c, d, g) = (pose(), pose(), pose(), pose(), pose());
            let base = rpe_first_last(&a, &b, &c, &d);
            let moved = rpe_first_last(&g.compose(&a), &g.compose(&b), &g.compose(&c), &g.compose(&d));
            prop_assert!((base - moved).abs() < 1e-9);
        }

        #[test]
        fn noiseless_sphere_any_seed(seed in 0u64..200, r in 2.0f64..50.0) {
            let pts = sphere_points(Vector3::new(0.5, -0.5, 3.0), r, 200, 0.8);
            let m = fit_sphere_ransac(&pts, &RansacConfig::sphere(seed)).unwrap();
            prop_assert!((m.radius - r).abs() < 1e-8 * r);
        }

        #[test]
        fn self_deviation_zero(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<_> = (0..100).map(|_| Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0))).collect();
            let d = cloud_deviation(&pts, &KdTree::new(&pts)).unwrap();
            prop_assert_eq!(d, Deviation { mean: 0.0, std: 0.0 });
        }
    }
}
