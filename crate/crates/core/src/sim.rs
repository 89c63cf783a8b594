//! Synthetic vision-based tactile sensor.
//!
//! A press renders the depth of gel indentation over the sensor image,
//! adds the curved-gel arc bias (a spherical cap whose radius shrinks as the
//! press force grows) and white depth noise, and returns the gradient field of
//! that depth. Gradients of the object and of the arc are analytic; only the
//! noise is differentiated numerically.
//!
//! Sensor frame: origin at the image center on the undeformed gel surface,
//! x/y along image columns/rows, z pointing from the object toward the
//! sensor. A pose maps sensor coordinates to object (world) coordinates.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, GradientField, PoseSE3, TactileImage};
use crate::object::ObjectHeightfield;
use crate::poisson::pixel_to_metric;
use crate::seed;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("force level {0} outside [0.5, 2.0]")]
    Force(f64),
    #[error("sensor footprint leaves the object support at pixel ({u}, {v}) -> world ({x:.3}, {y:.3})")]
    OutOfBounds { u: usize, v: usize, x: f64, y: f64 },
    #[error("invalid sensor profile: {0}")]
    Profile(String),
    #[error("frames {i} and {j} overlap by {overlap:.3}, below the required {required:.3}")]
    Overlap { i: usize, j: usize, overlap: f64, required: f64 },
    #[error("{poses} poses but {forces} forces")]
    Length { poses: usize, forces: usize },
    #[error("surface intersection did not converge at pixel ({u}, {v})")]
    Intersection { u: usize, v: usize },
    #[error("invalid calibration request: {0}")]
    Calibration(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub const FORCE_RANGE: (f64, f64) = (0.5, 2.0);

/// Force level → fitted arc radius (mm); low → high pressure.
pub const DEFAULT_ARC_ANCHORS: [[f64; 2]; 6] =
    [[1.0, 193.3], [1.2, 183.1], [1.4, 174.9], [1.6, 162.2], [1.8, 143.7], [2.0, 117.8]];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShadingParams {
    /// Per-channel intensity of the undeformed gel.
    pub background: [f64; 3],
    /// Intensity change per unit slope toward a light.
    pub gain: f64,
    pub light_azimuth_deg: [f64; 3],
    pub image_noise_sigma: f64,
}

impl Default for ShadingParams {
    fn default() -> Self {
        Self { background: [0.55, 0.5, 0.45], gain: 0.2, light_azimuth_deg: [90.0, 210.0, 330.0], image_noise_sigma: 0.002 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorProfile {
    pub width: usize,
    pub height: usize,
    pub pixel_pitch: f64,
    /// Half-width of the square sampling area used by pressure correction.
    pub region_outer_px: f64,
    /// Radius of the central circle used by pressure correction.
    pub region_inner_px: f64,
    /// Strictly decreasing `[force, radius]` anchors, sorted by force.
    pub arc_anchors: Vec<[f64; 2]>,
    pub arc_enabled: bool,
    /// Gel indentation (mm) at force 1.0; scales linearly with force.
    pub press_depth: f64,
    pub depth_noise_sigma: f64,
    /// Binomial smoothing of the indentation (taps, odd); ≤ 1 disables.
    pub compliance_kernel_px: usize,
    pub shading: ShadingParams,
}

impl Default for SensorProfile {
    fn default() -> Self {
        Self {
            width: 320,
            height: 320,
            pixel_pitch: crate::geometry::DEFAULT_PIXEL_PITCH,
            region_outer_px: 150.0,
            region_inner_px: 110.0,
            arc_anchors: DEFAULT_ARC_ANCHORS.to_vec(),
            arc_enabled: true,
            press_depth: 0.6,
            depth_noise_sigma: 0.01,
            compliance_kernel_px: 5,
            shading: ShadingParams::default(),
        }
    }
}

impl SensorProfile {
    /// Noise-free, blur-free, arc-free profile for analytic checks.
    pub fn ideal() -> Self {
        Self { arc_enabled: false, depth_noise_sigma: 0.0, compliance_kernel_px: 0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Profile(m.to_string()));
        if self.width < 3 || self.height < 3 {
            return bad("image must be at least 3x3");
        }
        if !(self.pixel_pitch > 0.0 && self.pixel_pitch.is_finite()) {
            return bad("pixel_pitch must be positive");
        }
        if self.arc_anchors.len() < 2 {
            return bad("need at least two arc anchors");
        }
        for w in self.arc_anchors.windows(2) {
            if !(w[1][0] > w[0][0]) {
                return bad("arc anchors must be sorted by increasing force");
            }
            if !(w[1][1] < w[0][1]) {
                return bad("arc radius must strictly decrease with force");
            }
        }
        if self.arc_radius(FORCE_RANGE.1) <= 0.0 || self.arc_radius(FORCE_RANGE.0) <= 0.0 {
            return bad("arc radius must stay positive over the force range");
        }
        let half_diag = 0.5 * self.pixel_pitch * ((self.width * self.width + self.height * self.height) as f64).sqrt();
        if self.arc_enabled && self.arc_radius(FORCE_RANGE.1) <= half_diag {
            return bad("arc radius smaller than the image half-diagonal");
        }
        if !(self.press_depth >= 0.0) || !(self.depth_noise_sigma >= 0.0) {
            return bad("press_depth and depth_noise_sigma must be non-negative");
        }
        if self.compliance_kernel_px > 1 && self.compliance_kernel_px % 2 == 0 {
            return bad("compliance_kernel_px must be odd");
        }
        if !(self.region_inner_px > 0.0 && self.region_inner_px < self.region_outer_px) {
            return bad("need 0 < region_inner_px < region_outer_px");
        }
        Ok(())
    }

    /// Fitted arc radius at a force level (piecewise linear, linear
    /// extrapolation beyond the end anchors).
    pub fn arc_radius(&self, force: f64) -> f64 {
        let a = &self.arc_anchors;
        let k = a.windows(2).position(|w| force <= w[1][0]).unwrap_or(a.len() - 2);
        let (f0, r0, f1, r1) = (a[k][0], a[k][1], a[k + 1][0], a[k + 1][1]);
        r0 + (force - f0) * (r1 - r0) / (f1 - f0)
    }

    pub fn arc_radius_at_standard_force(&self) -> f64 {
        self.arc_radius(1.0)
    }

    /// Footprint size (mm) in x and y.
    pub fn footprint(&self) -> (f64, f64) {
        (self.width as f64 * self.pixel_pitch, self.height as f64 * self.pixel_pitch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PressSpec {
    pub pose: PoseSE3,
    pub force_level: f64,
    pub noise_seed: u64,
}

impl PressSpec {
    pub fn new(pose: PoseSE3, force_level: f64, noise_seed: u64) -> Result<Self, SimError> {
        if !(FORCE_RANGE.0..=FORCE_RANGE.1).contains(&force_level) {
            return Err(SimError::Force(force_level));
        }
        Ok(Self { pose, force_level, noise_seed })
    }
}

/// Everything a press produces, including ground truth used by tests.
#[derive(Debug, Clone)]
pub struct Press {
    pub gradient: GradientField,
    /// Rendered depth (mm), the field whose gradient is `gradient`.
    pub depth: Vec<f64>,
    /// Pixels where the gel touches the object.
    pub contact: Vec<bool>,
    /// Pixels that image a raised feature (object above its base).
    pub feature: Vec<bool>,
}

pub fn render_press(obj: &ObjectHeightfield, spec: &PressSpec, prof: &SensorProfile) -> Result<GradientField, SimError> {
    Ok(render_press_detailed(obj, spec, prof)?.gradient)
}

pub fn render_press_detailed(obj: &ObjectHeightfield, spec: &PressSpec, prof: &SensorProfile) -> Result<Press, SimError> {
    prof.validate()?;
    if !(FORCE_RANGE.0..=FORCE_RANGE.1).contains(&spec.force_level) {
        return Err(SimError::Force(spec.force_level));
    }
    let (w, h, pitch) = (prof.width, prof.height, prof.pixel_pitch);
    let n = w * h;
    let r = spec.pose.rotation();
    let col2 = Vector3::new(r[(0, 2)], r[(1, 2)], r[(2, 2)]);
    let delta = prof.press_depth * spec.force_level;
    let base = obj.base_height();

    let mut depth = vec![0.0; n];
    let mut gx = vec![0.0; n];
    let mut gy = vec![0.0; n];
    let mut contact = vec![false; n];
    let mut feature = vec![false; n];
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            let (x, y) = pixel_to_metric(u, v, w, h, pitch);
            // solve h(p_w(s)) = z_w(s) for the surface height s along sensor z
            let mut s = 0.0;
            let mut hit = None;
            for _ in 0..20 {
                let pw = spec.pose.transform_point(&Vector3::new(x, y, s));
                if !obj.contains(pw.x, pw.y) {
                    return Err(SimError::OutOfBounds { u, v, x: pw.x, y: pw.y });
                }
                let (hh, hx, hy) = obj.sample(pw.x, pw.y);
                let g = hh - pw.z;
                let dg = hx * col2.x + hy * col2.y - col2.z;
                if g.abs() < 1e-12 {
                    hit = Some((hh, hx, hy, dg));
                    break;
                }
                s -= g / dg;
            }
            let (hh, hx, hy, dg) = hit.ok_or(SimError::Intersection { u, v })?;
            feature[i] = hh - base > 1e-3;
            let indentation = s + delta;
            if indentation > 0.0 {
                // implicit differentiation of F(x, y, s) = h(p_w) − z_w
                let fx = hx * r[(0, 0)] + hy * r[(1, 0)] - r[(2, 0)];
                let fy = hx * r[(0, 1)] + hy * r[(1, 1)] - r[(2, 1)];
                depth[i] = indentation;
                gx[i] = -fx / dg;
                gy[i] = -fy / dg;
                contact[i] = true;
            }
        }
    }

    if prof.compliance_kernel_px > 1 {
        let k = binomial_kernel(prof.compliance_kernel_px);
        for field in [&mut depth, &mut gx, &mut gy] {
            *field = separable_blur(field, w, h, &k);
        }
    }

    if prof.arc_enabled {
        let ra = prof.arc_radius(spec.force_level);
        for v in 0..h {
            for u in 0..w {
                let i = v * w + u;
                let (x, y) = pixel_to_metric(u, v, w, h, pitch);
                let q = (ra * ra - x * x - y * y).sqrt();
                depth[i] += q - ra;
                gx[i] -= x / q;
                gy[i] -= y / q;
            }
        }
    }

    if prof.depth_noise_sigma > 0.0 {
        let (noise, nx, ny) = depth_noise(prof, spec.noise_seed);
        for i in 0..n {
            depth[i] += noise[i];
            gx[i] += nx[i];
            gy[i] += ny[i];
        }
    }

    let gradient = GradientField::new(w, h, gx, gy, pitch)?;
    Ok(Press { gradient, depth, contact, feature })
}

/// Gaussian depth noise of the profile's sigma and its gradient.
fn depth_noise(prof: &SensorProfile, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, prof.depth_noise_sigma).expect("sigma is finite");
    let noise: Vec<f64> = (0..prof.width * prof.height).map(|_| normal.sample(&mut rng)).collect();
    let (nx, ny) = central_differences(&noise, prof.width, prof.height, prof.pixel_pitch);
    (noise, nx, ny)
}

/// Second-order central differences, one-sided at the borders.
pub fn central_differences(z: &[f64], w: usize, h: usize, pitch: f64) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            gx[i] = if u == 0 {
                (z[i + 1] - z[i]) / pitch
            } else if u == w - 1 {
                (z[i] - z[i - 1]) / pitch
            } else {
                (z[i + 1] - z[i - 1]) / (2.0 * pitch)
            };
            gy[i] = if v == 0 {
                (z[i + w] - z[i]) / pitch
            } else if v == h - 1 {
                (z[i] - z[i - w]) / pitch
            } else {
                (z[i + w] - z[i - w]) / (2.0 * pitch)
            };
        }
    }
    (gx, gy)
}

fn binomial_kernel(taps: usize) -> Vec<f64> {
    let mut k = vec![1.0];
    for _ in 1..taps {
        let mut next = vec![1.0; k.len() + 1];
        for j in 1..k.len() {
            next[j] = k[j - 1] + k[j];
        }
        k = next;
    }
    let s: f64 = k.iter().sum();
    k.iter().map(|v| v / s).collect()
}

/// Separable convolution with edge clamping.
fn separable_blur(f: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for v in 0..h {
        for u in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let uu = (u as isize + j as isize - r).clamp(0, w as isize - 1) as usize;
                acc += kv * f[v * w + uu];
            }
            tmp[v * w + u] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for v in 0..h {
        for u in 0..w {
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let vv = (v as isize + j as isize - r).clamp(0, h as isize - 1) as usize;
                acc += kv * tmp[vv * w + u];
            }
            out[v * w + u] = acc;
        }
    }
    out
}

/// Linear three-light shading: `I_k = b_k − gain · (cos φ_k, sin φ_k)·∇z`,
/// plus optional image noise, clipped to [0, 1].
pub fn shade(g: &GradientField, shading: &ShadingParams, noise_seed: u64) -> TactileImage {
    let dirs: Vec<(f64, f64)> = shading.light_azimuth_deg.iter().map(|a| (a.to_radians().cos(), a.to_radians().sin())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let noise = (shading.image_noise_sigma > 0.0).then(|| Normal::new(0.0, shading.image_noise_sigma).expect("finite sigma"));
    let pixels = g
        .gx()
        .iter()
        .zip(g.gy())
        .map(|(&a, &b)| {
            let mut px = [0.0; 3];
            for k in 0..3 {
                let mut val = shading.background[k] - shading.gain * (dirs[k].0 * a + dirs[k].1 * b);
                if let Some(nd) = &noise {
                    val += nd.sample(&mut rng);
                }
                px[k] = val.clamp(0.0, 1.0);
            }
            px
        })
        .collect();
    TactileImage::new(g.width(), g.height(), pixels, g.pixel_pitch()).expect("clamped intensities")
}

/// The zero-press frame: the gel's own color.
pub fn background_image(prof: &SensorProfile) -> TactileImage {
    TactileImage::uniform(prof.width, prof.height, prof.shading.background, prof.pixel_pitch).expect("valid profile")
}

/// Contact circle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircleLabel {
    pub center: [f64; 2],
    pub radius: f64,
}

#[derive(Debug, Clone)]
pub struct CalibrationSample {
    pub image: TactileImage,
    /// `None` for the zero-press frame.
    pub label: Option<CircleLabel>,
    /// Exact gradient of the imaged sphere cap.
    pub gradient: GradientField,
}

/// Gradient of a sphere cap of radius `sphere_radius` (mm) whose contact
/// circle is `label`; zero outside the circle.
pub fn sphere_cap_gradient(
    label: &CircleLabel,
    sphere_radius: f64,
    width: usize,
    height: usize,
    pitch: f64,
) -> Result<GradientField, GeometryError> {
    let mut gx = vec![0.0; width * height];
    let mut gy = vec![0.0; width * height];
    let r2 = sphere_radius * sphere_radius;
    let c2 = (label.radius * pitch).powi(2);
    for v in 0..height {
        for u in 0..width {
            let x = (u as f64 - label.center[0]) * pitch;
            let y = (v as f64 - label.center[1]) * pitch;
            let rho2 = x * x + y * y;
            if rho2 < c2 {
                let q = (r2 - rho2).sqrt();
                gx[v * width + u] = -x / q;
                gy[v * width + u] = -y / q;
            }
        }
    }
    GradientField::new(width, height, gx, gy, pitch)
}

/// Presses of a sphere of `diameter` (mm) at random in-plane positions and
/// random indentations (5–15% of the radius). Images use the profile's
/// shading; geometry is exact (no arc, blur or depth noise).
pub fn render_sphere_calibration_set(
    diameter: f64,
    count: usize,
    prof: &SensorProfile,
    seed: u64,
) -> Result<Vec<CalibrationSample>, SimError> {
    if !(diameter > 0.0) {
        return Err(SimError::Calibration(format!("diameter must be positive (got {diameter})")));
    }
    let (w, h, pitch) = (prof.width, prof.height, prof.pixel_pitch);
    let radius = 0.5 * diameter;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let delta = rng.random_range(0.05..0.15) * radius;
        let contact_px = (2.0 * radius * delta - delta * delta).sqrt() / pitch;
        let margin = contact_px + 4.0;
        if 2.0 * margin >= w.min(h) as f64 {
            return Err(SimError::Calibration(format!("a {diameter} mm sphere does not fit in the image")));
        }
        let center = [rng.random_range(margin..w as f64 - 1.0 - margin), rng.random_range(margin..h as f64 - 1.0 - margin)];
        let label = CircleLabel { center, radius: contact_px };
        let gradient = sphere_cap_gradient(&label, radius, w, h, pitch)?;
        let image = shade(&gradient, &prof.shading, seed::derive(seed, k as u64));
        out.push(CalibrationSample { image, label: Some(label), gradient });
    }
    Ok(out)
}

/// The zero-press sample: background image with image noise, empty label.
pub fn zero_press_sample(prof: &SensorProfile, seed: u64) -> CalibrationSample {
    let gradient = GradientField::zeros(prof.width, prof.height, prof.pixel_pitch).expect("valid profile");
    let image = shade(&gradient, &prof.shading, seed);
    CalibrationSample { image, label: None, gradient }
}

/// Gradient seen with nothing pressed: depth noise only.
pub fn zero_press_gradient(prof: &SensorProfile, seed: u64) -> Result<GradientField, SimError> {
    prof.validate()?;
    let (_, gx, gy) = depth_noise(prof, seed);
    Ok(GradientField::new(prof.width, prof.height, gx, gy, prof.pixel_pitch)?)
}

/// Fraction of footprint `a` that falls inside footprint `b` (both at the
/// gel plane), estimated on a 32×32 sample grid.
pub fn footprint_overlap(a: &PoseSE3, b: &PoseSE3, prof: &SensorProfile) -> f64 {
    let (fw, fh) = prof.footprint();
    let rel = b.inverse().compose(a);
    let n = 32;
    let mut inside = 0;
    for j in 0..n {
        for i in 0..n {
            let x = ((i as f64 + 0.5) / n as f64 - 0.5) * fw;
            let y = ((j as f64 + 0.5) / n as f64 - 0.5) * fh;
            let p = rel.transform_point(&Vector3::new(x, y, 0.0));
            if p.x.abs() <= 0.5 * fw && p.y.abs() <= 0.5 * fh {
                inside += 1;
            }
        }
    }
    inside as f64 / (n * n) as f64
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub frames: Vec<Press>,
    pub poses: Vec<PoseSE3>,
    pub forces: Vec<f64>,
}

/// Render one press per pose. Consecutive footprints must overlap by at
/// least `min_overlap`. Frame `k` draws noise from stream `k` of `seed`.
pub fn render_trajectory(
    obj: &ObjectHeightfield,
    poses: &[PoseSE3],
    forces: &[f64],
    prof: &SensorProfile,
    seed: u64,
    min_overlap: f64,
) -> Result<Trajectory, SimError> {
    if poses.len() != forces.len() {
        return Err(SimError::Length { poses: poses.len(), forces: forces.len() });
    }
    for (k, w) in poses.windows(2).enumerate() {
        let overlap = footprint_overlap(&w[0], &w[1], prof);
        if overlap < min_overlap {
            return Err(SimError::Overlap { i: k, j: k + 1, overlap, required: min_overlap });
        }
    }
    let frames = poses
        .iter()
        .zip(forces)
        .enumerate()
        .map(|(k, (pose, &f))| {
            let spec = PressSpec::new(*pose, f, seed::derive(seed, k as u64))?;
            render_press_detailed(obj, &spec, prof)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Trajectory { frames, poses: poses.to_vec(), forces: forces.to_vec() })
}

/// `n` poses along a straight line from `start` with spacing `step` (mm) in
/// direction `heading` (radians), sensor yaw fixed at `yaw`.
pub fn straight_scan(n: usize, start: [f64; 2], step: f64, heading: f64, yaw: f64) -> Vec<PoseSE3> {
    (0..n)
        .map(|k| {
            let d = k as f64 * step;
            let t = Vector3::new(start[0] + d * heading.cos(), start[1] + d * heading.sin(), 0.0);
            PoseSE3::from_axis_angle(&Vector3::z(), yaw, t)
        })
        .collect()
}

/// `n` poses on a circle of `radius` through `start`; the last pose returns
/// to the start. Yaw oscillates with amplitude `yaw_amplitude` and every
/// pose except the first gets uniform in-plane jitter of `jitter` mm.
pub fn loop_scan(n: usize, start: [f64; 2], radius: f64, yaw_amplitude: f64, jitter: f64, seed: u64) -> Vec<PoseSE3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = [start[0] - radius, start[1]];
    (0..n)
        .map(|k| {
            let th = if n > 1 { 2.0 * std::f64::consts::PI * k as f64 / (n - 1) as f64 } else { 0.0 };
            let (jx, jy) = if k == 0 || jitter == 0.0 {
                (0.0, 0.0)
            } else {
                (rng.random_range(-jitter..=jitter), rng.random_range(-jitter..=jitter))
            };
            let t = Vector3::new(center[0] + radius * th.cos() + jx, center[1] + radius * th.sin() + jy, 0.0);
            PoseSE3::from_axis_angle(&Vector3::z(), yaw_amplitude * th.sin(), t)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::object::{relief_plate, ReliefParams};

    fn small_profile() -> SensorProfile {
        SensorProfile { width: 96, height: 80, region_outer_px: 40.0, region_inner_px: 29.0, ..SensorProfile::ideal() }
    }

    #[test]
    fn default_profile_is_valid() {
        SensorProfile::default().validate().unwrap();
        assert_eq!(SensorProfile::default().arc_radius_at_standard_force(), 193.3);
    }

    #[test]
    fn arc_curve_interpolates_and_extrapolates() {
        let p = SensorProfile::default();
        assert!((p.arc_radius(1.1) - 188.2).abs() < 1e-9);
        assert!((p.arc_radius(0.5) - 218.8).abs() < 1e-9);
        let mut prev = f64::INFINITY;
        for k in 0..=30 {
            let r = p.arc_radius(0.5 + 0.05 * k as f64);
            assert!(r < prev);
            prev = r;
        }
    }

    #[test]
    fn rejects_non_decreasing_anchors() {
        let p = SensorProfile { arc_anchors: vec![[1.0, 100.0], [2.0, 120.0]], ..SensorProfile::default() };
        assert!(p.validate().is_err());
    }

    #[test]
    fn flat_press_with_arc_is_pure_cap() {
        let prof = SensorProfile { arc_enabled: true, ..small_profile() };
        let obj = ObjectHeightfield::flat([-20.0, -20.0, 20.0, 20.0]);
        let g = render_press(&obj, &PressSpec::new(PoseSE3::identity(), 1.0, 0).unwrap(), &prof).unwrap();
        let r = 193.3;
        for v in (0..prof.height).step_by(7) {
            for u in (0..prof.width).step_by(5) {
                let (x, y) = pixel_to_metric(u, v, prof.width, prof.height, prof.pixel_pitch);
                let q = (r * r - x * x - y * y).sqrt();
                let (a, b) = g.at(u, v);
                assert!((a + x / q).abs() < 1e-12 && (b + y / q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn flat_press_without_arc_is_zero() {
        let obj = ObjectHeightfield::flat([-20.0, -20.0, 20.0, 20.0]);
        let g = render_press(&obj, &PressSpec::new(PoseSE3::identity(), 1.3, 0).unwrap(), &small_profile()).unwrap();
        assert!(g.gx().iter().chain(g.gy()).all(|&v| v == 0.0));
    }

    #[test]
    fn hemisphere_press_matches_analytic_gradient() {
        let prof = small_profile();
        let obj = ObjectHeightfield::hemisphere(20.0, 5.0);
        let pose = PoseSE3::from_translation(Vector3::new(0.3, -0.2, 20.0));
        let press = render_press_detailed(&obj, &PressSpec::new(pose, 1.0, 0).unwrap(), &prof).unwrap();
        let mut n_contact = 0;
        for v in 0..prof.height {
            for u in 0..prof.width {
                let i = v * prof.width + u;
                if !press.contact[i] {
                    continue;
                }
                n_contact += 1;
                let (x, y) = pixel_to_metric(u, v, prof.width, prof.height, prof.pixel_pitch);
                let (wx, wy) = (x + 0.3, y - 0.2);
                let q = (400.0 - wx * wx - wy * wy).sqrt();
                let (a, b) = press.gradient.at(u, v);
                assert!((a + wx / q).abs() < 1e-6 && (b + wy / q).abs() < 1e-6);
            }
        }
        assert!(n_contact > 100);
    }

    #[test]
    fn tilted_press_surface_is_consistent() {
        // flat plate seen from a tilted sensor: depth is a plane whose slope
        // equals the analytic gradient
        let prof = small_profile();
        let obj = ObjectHeightfield::flat([-20.0, -20.0, 20.0, 20.0]);
        let pose = PoseSE3::from_axis_angle(&Vector3::new(1.0, 0.5, 0.0), 0.05, Vector3::new(0.0, 0.0, 0.1));
        let press = render_press_detailed(&obj, &PressSpec::new(pose, 2.0, 0).unwrap(), &prof).unwrap();
        let (gx, gy) = central_differences(&press.depth, prof.width, prof.height, prof.pixel_pitch);
        let i = 40 * prof.width + 48;
        assert!((gx[i] - press.gradient.gx()[i]).abs() < 1e-9);
        assert!((gy[i] - press.gradient.gy()[i]).abs() < 1e-9);
        assert!(press.gradient.gx()[i].abs() > 1e-3);
    }

    #[test]
    fn rendering_is_deterministic_per_seed() {
        let prof = SensorProfile { depth_noise_sigma: 0.01, compliance_kernel_px: 5, arc_enabled: true, ..small_profile() };
        let obj = relief_plate(&ReliefParams { extent: [-10.0, -10.0, 10.0, 10.0], ..Default::default() }).unwrap();
        let spec = PressSpec::new(PoseSE3::rot_z(0.3), 1.4, 42).unwrap();
        let a = render_press(&obj, &spec, &prof).unwrap();
        let b = render_press(&obj, &spec, &prof).unwrap();
        assert_eq!(a, b);
        let c = render_press(&obj, &PressSpec { noise_seed: 43, ..spec }, &prof).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn out_of_support_is_an_error() {
        let obj = ObjectHeightfield::flat([-2.0, -2.0, 2.0, 2.0]);
        let err = render_press(&obj, &PressSpec::new(PoseSE3::identity(), 1.0, 0).unwrap(), &small_profile());
        assert!(matches!(err, Err(SimError::OutOfBounds { .. })));
        assert!(matches!(PressSpec::new(PoseSE3::identity(), 2.5, 0), Err(SimError::Force(_))));
    }

    #[test]
    fn calibration_set_labels_fit_inside_image() {
        let prof = SensorProfile::default();
        let set = render_sphere_calibration_set(6.0, 60, &prof, 5).unwrap();
        assert_eq!(set.len(), 60);
        for s in &set {
            let l = s.label.unwrap();
            assert!(l.center[0] - l.radius >= 0.0 && l.center[0] + l.radius <= (prof.width - 1) as f64);
            assert!(l.center[1] - l.radius >= 0.0 && l.center[1] + l.radius <= (prof.height - 1) as f64);
        }
        let blank = zero_press_sample(&SensorProfile { shading: ShadingParams { image_noise_sigma: 0.0, ..Default::default() }, ..prof }, 0);
        assert!(blank.label.is_none());
        assert!(blank.image.pixels().iter().all(|p| *p == [0.55, 0.5, 0.45]));
    }

    #[test]
    fn trajectory_overlap_rules() {
        let prof = small_profile();
        let obj = ObjectHeightfield::flat([-30.0, -30.0, 30.0, 30.0]);
        let one = render_trajectory(&obj, &[PoseSE3::identity()], &[1.0], &prof, 0, 0.3).unwrap();
        assert_eq!(one.poses, vec![PoseSE3::identity()]);
        let far = straight_scan(3, [0.0, 0.0], 4.0, 0.0, 0.0);
        let err = render_trajectory(&obj, &far, &[1.0; 3], &prof, 0, 0.3).unwrap_err();
        assert!(matches!(err, SimError::Overlap { i: 0, j: 1, .. }), "{err}");
        let full = SensorProfile::default();
        let lp = loop_scan(20, [0.0, 0.0], 8.0, 0.1, 0.2, 3);
        assert!(footprint_overlap(&lp[19], &lp[0], &full) >= 0.9);
    }

    #[test]
    fn shading_is_linear_in_gradient() {
        let g = GradientField::new(2, 1, vec![0.1, -0.2], vec![0.05, 0.3], 0.05).unwrap();
        let s = ShadingParams { image_noise_sigma: 0.0, ..Default::default() };
        let img = shade(&g, &s, 0);
        let p = img.get(1, 0);
        let expect = 0.5 - 0.2 * ((210f64).to_radians().cos() * -0.2 + (210f64).to_radians().sin() * 0.3);
        assert!((p[1] - expect).abs() < 1e-12);
    }
}
