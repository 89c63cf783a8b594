//! Shared geometric and image types.
//!
//! Units are millimeters for all metric quantities; gradients are
//! dimensionless slopes. `pixel_pitch` is the only bridge between image
//! coordinates and metric coordinates.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default physical size of one sensor pixel (mm).
pub const DEFAULT_PIXEL_PITCH: f64 = 0.05;

const ORTHO_TOLERANCE: f64 = 1e-9;
const REORTHO_THRESHOLD: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("image dimensions must be positive (got {width}x{height})")]
    EmptyImage { width: usize, height: usize },
    #[error("buffer length {got} does not match {width}x{height}")]
    BufferSize { width: usize, height: usize, got: usize },
    #[error("pixel pitch must be positive and finite (got {0})")]
    PixelPitch(f64),
    #[error("intensity {value} at pixel {index} is outside [0, 1]")]
    Intensity { index: usize, value: f64 },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("normal {index} is not unit length (norm {norm})")]
    NormalLength { index: usize, norm: f64 },
    #[error("normals count {normals} does not match points count {points}")]
    NormalCount { points: usize, normals: usize },
    #[error("rotation is not orthonormal (residual {residual:.3e}, det {det:.6})")]
    NotRotation { residual: f64, det: f64 },
    #[error("translation is not finite")]
    Translation,
}

/// Raw sensor frame: three color intensities per pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TactileImage {
    width: usize,
    height: usize,
    pixels: Vec<[f64; 3]>,
    pixel_pitch: f64,
}

impl TactileImage {
    pub fn new(
        width: usize,
        height: usize,
        pixels: Vec<[f64; 3]>,
        pixel_pitch: f64,
    ) -> Result<Self, GeometryError> {
        check_dims(width, height, pixels.len())?;
        check_pitch(pixel_pitch)?;
        for (index, px) in pixels.iter().enumerate() {
            for &value in px {
                if !(0.0..=1.0).contains(&value) {
                    return Err(GeometryError::Intensity { index, value });
                }
            }
        }
        Ok(Self { width, height, pixels, pixel_pitch })
    }

    /// Image filled with a single color.
    pub fn uniform(
        width: usize,
        height: usize,
        color: [f64; 3],
        pixel_pitch: f64,
    ) -> Result<Self, GeometryError> {
        Self::new(width, height, vec![color; width * height], pixel_pitch)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_pitch(&self) -> f64 {
        self.pixel_pitch
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.pixels
    }

    pub fn get(&self, u: usize, v: usize) -> [f64; 3] {
        self.pixels[v * self.width + u]
    }
}

/// Per-pixel surface gradient (dz/dx, dz/dy) on the sensor image grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    width: usize,
    height: usize,
    gx: Vec<f64>,
    gy: Vec<f64>,
    pixel_pitch: f64,
}

impl GradientField {
    pub fn new(
        width: usize,
        height: usize,
        gx: Vec<f64>,
        gy: Vec<f64>,
        pixel_pitch: f64,
    ) -> Result<Self, GeometryError> {
        check_dims(width, height, gx.len())?;
        check_dims(width, height, gy.len())?;
        check_pitch(pixel_pitch)?;
        if let Some(i) = gx.iter().chain(gy.iter()).position(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite(i % (width * height)));
        }
        Ok(Self { width, height, gx, gy, pixel_pitch })
    }

    pub fn zeros(width: usize, height: usize, pixel_pitch: f64) -> Result<Self, GeometryError> {
        let n = width * height;
        Self::new(width, height, vec![0.0; n], vec![0.0; n], pixel_pitch)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_pitch(&self) -> f64 {
        self.pixel_pitch
    }

    pub fn gx(&self) -> &[f64] {
        &self.gx
    }

    pub fn gy(&self) -> &[f64] {
        &self.gy
    }

    pub fn at(&self, u: usize, v: usize) -> (f64, f64) {
        let i = v * self.width + u;
        (self.gx[i], self.gy[i])
    }

    /// Linear combination `a * self + b * other`; shapes must agree.
    pub fn combine(&self, a: f64, other: &GradientField, b: f64) -> Option<GradientField> {
        if self.width != other.width || self.height != other.height {
            return None;
        }
        let gx = self.gx.iter().zip(&other.gx).map(|(p, q)| a * p + b * q).collect();
        let gy = self.gy.iter().zip(&other.gy).map(|(p, q)| a * p + b * q).collect();
        GradientField::new(self.width, self.height, gx, gy, self.pixel_pitch).ok()
    }

    pub fn scaled(&self, c: f64) -> GradientField {
        GradientField {
            width: self.width,
            height: self.height,
            gx: self.gx.iter().map(|v| v * c).collect(),
            gy: self.gy.iter().map(|v| v * c).collect(),
            pixel_pitch: self.pixel_pitch,
        }
    }
}

/// Shape of the image grid an organized map was lifted from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape {
    pub width: usize,
    pub height: usize,
}

/// Point cloud of one press, in the sensor frame.
///
/// When `grid` is set the map is organized: `points[v * width + u]` is the
/// point lifted from pixel `(u, v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalTactileMap {
    points: Vec<Vector3<f64>>,
    normals: Option<Vec<Vector3<f64>>>,
    grid: Option<GridShape>,
    pub frame_id: usize,
}

impl LocalTactileMap {
    pub fn new(
        points: Vec<Vector3<f64>>,
        normals: Option<Vec<Vector3<f64>>>,
        frame_id: usize,
    ) -> Result<Self, GeometryError> {
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(GeometryError::NonFinite(i));
        }
        if let Some(ns) = &normals {
            if ns.len() != points.len() {
                return Err(GeometryError::NormalCount { points: points.len(), normals: ns.len() });
            }
            for (index, n) in ns.iter().enumerate() {
                let norm = n.norm();
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(GeometryError::NormalLength { index, norm });
                }
            }
        }
        Ok(Self { points, normals, grid: None, frame_id })
    }

    /// Organized map; `points.len()` must equal `width * height`.
    pub fn organized(
        points: Vec<Vector3<f64>>,
        normals: Option<Vec<Vector3<f64>>>,
        grid: GridShape,
        frame_id: usize,
    ) -> Result<Self, GeometryError> {
        check_dims(grid.width, grid.height, points.len())?;
        let mut map = Self::new(points, normals, frame_id)?;
        map.grid = Some(grid);
        Ok(map)
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn normals(&self) -> Option<&[Vector3<f64>]> {
        self.normals.as_deref()
    }

    pub fn grid(&self) -> Option<GridShape> {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        if self.points.is_empty() {
            return Vector3::zeros();
        }
        self.points.iter().sum::<Vector3<f64>>() / self.points.len() as f64
    }

    /// Drop the normals (e.g. after the geometry changed).
    pub fn without_normals(mut self) -> Self {
        self.normals = None;
        self
    }

    pub fn with_normals(mut self, normals: Vec<Vector3<f64>>) -> Result<Self, GeometryError> {
        let grid = self.grid;
        self = Self::new(self.points, Some(normals), self.frame_id)?;
        self.grid = grid;
        Ok(self)
    }

    /// Subset by index; the result is unorganized.
    pub fn select(&self, indices: &[usize]) -> LocalTactileMap {
        LocalTactileMap {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            normals: self.normals.as_ref().map(|ns| indices.iter().map(|&i| ns[i]).collect()),
            grid: None,
            frame_id: self.frame_id,
        }
    }

    /// Apply `x' = R x + t` to every point and rotate the normals.
    pub fn transformed(&self, pose: &PoseSE3) -> LocalTactileMap {
        LocalTactileMap {
            points: self.points.iter().map(|p| pose.transform_point(p)).collect(),
            normals: self
                .normals
                .as_ref()
                .map(|ns| ns.iter().map(|n| pose.rotate_vector(n)).collect()),
            grid: self.grid,
            frame_id: self.frame_id,
        }
    }

    /// Concatenate several maps into one unorganized map. Normals survive only
    /// if every input has them.
    pub fn concat(maps: &[LocalTactileMap], frame_id: usize) -> LocalTactileMap {
        let points = maps.iter().flat_map(|m| m.points.iter().copied()).collect();
        let normals = if maps.iter().all(|m| m.normals.is_some()) {
            Some(maps.iter().flat_map(|m| m.normals.as_ref().unwrap().iter().copied()).collect())
        } else {
            None
        };
        LocalTactileMap { points, normals, grid: None, frame_id }
    }
}

/// `transform_map`: rigidly move a map by `pose`.
pub fn transform_map(map: &LocalTactileMap, pose: &PoseSE3) -> LocalTactileMap {
    map.transformed(pose)
}

/// Rigid transform stored as (R, t).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSE3 {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::Translation);
        }
        let residual = orthogonality_residual(&rotation);
        let det = rotation.determinant();
        if !residual.is_finite() || residual > ORTHO_TOLERANCE || (det - 1.0).abs() > ORTHO_TOLERANCE {
            return Err(GeometryError::NotRotation { residual, det });
        }
        Ok(Self { rotation, translation })
    }

    /// Build from an approximately orthonormal matrix by projecting onto SO(3).
    pub fn from_parts_projected(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation: nearest_rotation(&rotation), translation }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation: t }
    }

    /// Rotation of `angle` radians about `axis` (need not be unit), then translation `t`.
    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, t: Vector3<f64>) -> Self {
        Self { rotation: so3_exp(&(axis.normalize() * angle)), translation: t }
    }

    pub fn rot_z(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::z(), angle, Vector3::zeros())
    }

    /// Rotation from a rotation vector (axis * angle).
    pub fn from_rotation_vector(omega: &Vector3<f64>, t: Vector3<f64>) -> Self {
        Self { rotation: so3_exp(omega), translation: t }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        let mut rotation = self.rotation * other.rotation;
        if orthogonality_residual(&rotation) > REORTHO_THRESHOLD {
            rotation = nearest_rotation(&rotation);
        }
        PoseSE3 { rotation, translation: self.rotation * other.translation + self.translation }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3 { rotation: rt, translation: -(rt * self.translation) }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn rotate_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Rotation angle in radians, in [0, π].
    pub fn rotation_angle(&self) -> f64 {
        ((self.rotation.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
    }

    pub fn rotation_vector(&self) -> Vector3<f64> {
        so3_log(&self.rotation)
    }

    /// Translation distance and rotation angle (radians) between two poses.
    pub fn distance_to(&self, other: &PoseSE3) -> (f64, f64) {
        let d = self.inverse().compose(other);
        (d.translation.norm(), d.rotation_angle())
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Result<PoseSE3, GeometryError> {
        PoseSE3::new(m.fixed_view::<3, 3>(0, 0).into_owned(), m.fixed_view::<3, 1>(0, 3).into_owned())
    }

    /// Row-major `[R | t]`, 12 numbers.
    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z,
        ]
    }

    /// Inverse of [`to_row_major`](Self::to_row_major). Rotations read back
    /// from text are projected onto SO(3) if they drifted by rounding.
    pub fn from_row_major(v: &[f64; 12]) -> Result<PoseSE3, GeometryError> {
        let rotation = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let translation = Vector3::new(v[3], v[7], v[11]);
        match PoseSE3::new(rotation, translation) {
            Ok(p) => Ok(p),
            Err(GeometryError::NotRotation { residual, det }) if residual < 1e-4 && (det - 1.0).abs() < 1e-4 => {
                Ok(PoseSE3::from_parts_projected(rotation, translation))
            }
            Err(e) => Err(e),
        }
    }
}

/// ‖R Rᵀ − I‖ (max abs entry).
pub fn orthogonality_residual(r: &Matrix3<f64>) -> f64 {
    (r * r.transpose() - Matrix3::identity()).abs().max()
}

/// Closest rotation in the Frobenius sense (polar decomposition via SVD).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * v_t;
    }
    r
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues formula.
pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta = omega.norm();
    let k = skew(omega);
    if theta < 1e-8 {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / (theta * theta);
    Matrix3::identity() + a * k + b * k * k
}

pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let w = Vector3::new(r[(2, 1)] - r[(1, 2)], r[(0, 2)] - r[(2, 0)], r[(1, 0)] - r[(0, 1)]);
    if theta < 1e-8 {
        return 0.5 * w;
    }
    if std::f64::consts::PI - theta < 1e-6 {
        // near π: axis from the dominant column of (R + I)/2
        let b = (r + Matrix3::identity()) * 0.5;
        let (mut best, mut col) = (0.0, 0);
        for c in 0..3 {
            if b[(c, c)] > best {
                best = b[(c, c)];
                col = c;
            }
        }
        let axis = b.column(col).into_owned() / best.sqrt();
        let mut axis = axis.normalize();
        if axis.dot(&w) < 0.0 {
            axis = -axis;
        }
        return axis * theta;
    }
    w * (theta / (2.0 * theta.sin()))
}

fn check_dims(width: usize, height: usize, len: usize) -> Result<(), GeometryError> {
    if width == 0 || height == 0 {
        return Err(GeometryError::EmptyImage { width, height });
    }
    if len != width * height {
        return Err(GeometryError::BufferSize { width, height, got: len });
    }
    Ok(())
}

fn check_pitch(pitch: f64) -> Result<(), GeometryError> {
    if pitch.is_finite() && pitch > 0.0 {
        Ok(())
    } else {
        Err(GeometryError::PixelPitch(pitch))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn assert_pose_close(a: &PoseSE3, b: &PoseSE3, tol: f64) {
        let diff = (a.to_homogeneous() - b.to_homogeneous()).abs().max();
        assert!(diff <= tol, "poses differ by {diff}:\n{a:?}\n{b:?}");
    }

    #[test]
    fn compose_identity_and_inverse() {
        let t = PoseSE3::from_axis_angle(&Vector3::new(1.0, 2.0, 0.5), 0.7, Vector3::new(1.0, -2.0, 3.0));
        assert_pose_close(&PoseSE3::identity().compose(&t), &t, 1e-12);
        assert_pose_close(&t.compose(&t.inverse()), &PoseSE3::identity(), 1e-9);
    }

    #[test]
    fn compose_z_rotations_adds_angles() {
        let a = PoseSE3::rot_z(30f64.to_radians());
        let b = PoseSE3::rot_z(60f64.to_radians());
        // analytic Rz(90°)
        let expected = PoseSE3::new(
            Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0),
            Vector3::zeros(),
        )
        .unwrap();
        assert_pose_close(&a.compose(&b), &expected, 1e-12);
    }

    #[test]
    fn inverse_of_translation_and_identity() {
        assert_pose_close(&PoseSE3::identity().inverse(), &PoseSE3::identity(), 0.0);
        let t = PoseSE3::from_translation(Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(*t.inverse().translation(), Vector3::new(-1.0, -2.0, -3.0));
        let p = PoseSE3::from_axis_angle(&Vector3::z(), PI / 4.0, Vector3::new(1.0, 0.0, 2.0));
        assert_pose_close(&p.compose(&p.inverse()), &PoseSE3::identity(), 1e-12);
        assert_pose_close(&p.inverse().compose(&p), &PoseSE3::identity(), 1e-12);
    }

    #[test]
    fn rejects_non_rotation() {
        let m = Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!(matches!(PoseSE3::new(m, Vector3::zeros()), Err(GeometryError::NotRotation { .. })));
        assert!(PoseSE3::new(Matrix3::identity() * 1.01, Vector3::zeros()).is_err());
    }

    #[test]
    fn transform_by_identity_and_translation() {
        let pts = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 2.0, 3.0)];
        let map = LocalTactileMap::new(pts.clone(), None, 0).unwrap();
        assert_eq!(transform_map(&map, &PoseSE3::identity()), map);
        let moved = transform_map(&map, &PoseSE3::from_translation(Vector3::new(5.0, 0.0, 0.0)));
        for (a, b) in moved.points().iter().zip(&pts) {
            assert_eq!(a.x, b.x + 5.0);
            assert_eq!((a.y, a.z), (b.y, b.z));
        }
    }

    #[test]
    fn transformed_centroid_matches() {
        let pts: Vec<_> = (0..20).map(|i| Vector3::new(i as f64, (i * i) as f64 * 0.1, -(i as f64))).collect();
        let map = LocalTactileMap::new(pts, None, 3).unwrap();
        let pose = PoseSE3::from_axis_angle(&Vector3::new(0.3, -1.0, 0.2), 1.1, Vector3::new(4.0, 5.0, 6.0));
        let c = map.centroid();
        let moved = map.transformed(&pose);
        assert!((moved.centroid() - (pose.rotation() * c + pose.translation())).norm() < 1e-9);
    }

    #[test]
    fn row_major_round_trip() {
        let p = PoseSE3::from_axis_angle(&Vector3::new(1.0, 1.0, 0.0), 0.3, Vector3::new(1.0, 2.0, 3.0));
        let back = PoseSE3::from_row_major(&p.to_row_major()).unwrap();
        assert_pose_close(&p, &back, 0.0);
        assert_pose_close(&PoseSE3::from_homogeneous(&p.to_homogeneous()).unwrap(), &p, 0.0);
    }

    #[test]
    fn so3_log_exp_round_trip_near_pi() {
        let w = Vector3::new(0.0, 1.0, 1.0).normalize() * (PI - 1e-7);
        let back = so3_log(&so3_exp(&w));
        assert!((back - w).norm() < 1e-5);
    }

    #[test]
    fn map_rejects_bad_normals() {
        let r = LocalTactileMap::new(vec![Vector3::zeros()], Some(vec![Vector3::new(0.0, 0.0, 2.0)]), 0);
        assert!(matches!(r, Err(GeometryError::NormalLength { .. })));
    }

    #[test]
    fn rotations_stay_orthonormal_over_long_chains() {
        let step = PoseSE3::from_axis_angle(&Vector3::new(0.3, 0.5, 0.8), 0.123456, Vector3::new(0.1, 0.0, 0.0));
        let mut acc = PoseSE3::identity();
        for _ in 0..1000 {
            acc = acc.compose(&step);
        }
        assert!(orthogonality_residual(acc.rotation()) < 1e-9);
        assert!((acc.rotation().determinant() - 1.0).abs() < 1e-9);
    }

    fn arb_pose() -> impl Strategy<Value = PoseSE3> {
        (
            prop::array::uniform3(-3.0f64..3.0),
            prop::array::uniform3(-10.0f64..10.0),
        )
            .prop_map(|(w, t)| PoseSE3::from_rotation_vector(&Vector3::from(w), Vector3::from(t)))
    }

    proptest! {
        #[test]
        fn composition_is_associative(a in arb_pose(), b in arb_pose(), c in arb_pose()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!((l.to_homogeneous() - r.to_homogeneous()).abs().max() < 1e-9);
        }

        #[test]
        fn transform_preserves_distances(p in arb_pose(), pts in prop::collection::vec(prop::array::uniform3(-20.0f64..20.0), 2..12)) {
            let pts: Vec<_> = pts.into_iter().map(Vector3::from).collect();
            let map = LocalTactileMap::new(pts, None, 0).unwrap();
            let moved = map.transformed(&p);
            for i in 0..map.len() {
                for j in 0..map.len() {
                    let d0 = (map.points()[i] - map.points()[j]).norm();
                    let d1 = (moved.points()[i] - moved.points()[j]).norm();
                    prop_assert!((d0 - d1).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn random_compositions_stay_orthonormal(poses in prop::collection::vec(arb_pose(), 1000)) {
            let acc = poses.iter().fold(PoseSE3::identity(), |acc, p| acc.compose(p));
            prop_assert!(orthogonality_residual(acc.rotation()) < 1e-9);
            prop_assert!((acc.rotation().determinant() - 1.0).abs() < 1e-9);
        }
    }
}
