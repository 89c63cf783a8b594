//! Gradient-field integration into depth maps.
//!
//! The depth `z` minimizes `Σ (z[i+1] − z[i] − h·p)²` over every horizontal
//! and vertical pixel edge, where `p` is the gradient averaged over the two
//! pixels of the edge (trapezoid rule, exact for quadratic surfaces). The
//! normal equations are the Neumann-boundary Poisson problem
//! `L z = Dᵀ q`, diagonalized by the type-II DCT.

use std::sync::Arc;

use nalgebra::Vector3;
use rustdct::{DctPlanner, TransformType2And3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, GradientField, GridShape, LocalTactileMap};

#[derive(Debug, Error)]
pub enum PoissonError {
    #[error("gradient field contains non-finite values")]
    NonFinite,
    #[error("conjugate gradient did not converge in {iterations} iterations (residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoissonSolver {
    /// Direct solve by cosine transform, O(N log N).
    #[default]
    Dct,
    /// Conjugate gradient on the same normal equations.
    ConjugateGradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoissonConfig {
    pub solver: PoissonSolver,
    /// Fraction of lowest-gradient pixels whose median depth is pinned to 0.
    pub background_fraction: f64,
    pub cg_tolerance: f64,
    pub cg_max_iterations: usize,
}

impl Default for PoissonConfig {
    fn default() -> Self {
        Self { solver: PoissonSolver::Dct, background_fraction: 0.1, cg_tolerance: 1e-12, cg_max_iterations: 20_000 }
    }
}

/// Depth grid (mm) with the same shape as its gradient field.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub z: Vec<f64>,
    pub pixel_pitch: f64,
}

impl DepthMap {
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.z[v * self.width + u]
    }

    /// Metric coordinates of pixel `(u, v)`; the image center is the origin.
    pub fn pixel_xy(&self, u: usize, v: usize) -> (f64, f64) {
        pixel_to_metric(u, v, self.width, self.height, self.pixel_pitch)
    }
}

/// Sensor-frame (x, y) of a pixel center. The optical center of the image is
/// the origin of the sensor frame.
pub fn pixel_to_metric(u: usize, v: usize, width: usize, height: usize, pitch: f64) -> (f64, f64) {
    (
        (u as f64 - (width as f64 - 1.0) / 2.0) * pitch,
        (v as f64 - (height as f64 - 1.0) / 2.0) * pitch,
    )
}

pub fn integrate(g: &GradientField) -> Result<DepthMap, PoissonError> {
    integrate_with(g, &PoissonConfig::default())
}

pub fn integrate_with(g: &GradientField, cfg: &PoissonConfig) -> Result<DepthMap, PoissonError> {
    if !g.gx().iter().chain(g.gy()).all(|v| v.is_finite()) {
        return Err(PoissonError::NonFinite);
    }
    let (w, h) = (g.width(), g.height());
    let rhs = divergence(g);
    let mut z = match cfg.solver {
        PoissonSolver::Dct => solve_dct(&rhs, w, h),
        PoissonSolver::ConjugateGradient => solve_cg(&rhs, w, h, cfg.cg_tolerance, cfg.cg_max_iterations)?,
    };
    let offset = background_level(&z, g, cfg.background_fraction);
    z.iter_mut().for_each(|v| *v -= offset);
    Ok(DepthMap { width: w, height: h, z, pixel_pitch: g.pixel_pitch() })
}

/// `Dᵀ q`: the discrete divergence of the edge depth increments.
pub fn divergence(g: &GradientField) -> Vec<f64> {
    let (w, h, pitch) = (g.width(), g.height(), g.pixel_pitch());
    let (gx, gy) = (g.gx(), g.gy());
    let mut b = vec![0.0; w * h];
    for v in 0..h {
        for u in 0..w.saturating_sub(1) {
            let i = v * w + u;
            let q = 0.5 * (gx[i] + gx[i + 1]) * pitch;
            b[i] -= q;
            b[i + 1] += q;
        }
    }
    for v in 0..h.saturating_sub(1) {
        for u in 0..w {
            let i = v * w + u;
            let q = 0.5 * (gy[i] + gy[i + w]) * pitch;
            b[i] -= q;
            b[i + w] += q;
        }
    }
    b
}

/// Apply the Neumann graph Laplacian `DᵀD` (positive semi-definite).
pub fn apply_laplacian(z: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            let mut acc = 0.0;
            if u > 0 {
                acc += z[i] - z[i - 1];
            }
            if u + 1 < w {
                acc += z[i] - z[i + 1];
            }
            if v > 0 {
                acc += z[i] - z[i - w];
            }
            if v + 1 < h {
                acc += z[i] - z[i + w];
            }
            out[i] = acc;
        }
    }
    out
}

/// Max-norm residual of the normal equations relative to the max-norm of the
/// divergence.
pub fn relative_residual(depth: &DepthMap, g: &GradientField) -> f64 {
    let b = divergence(g);
    let lz = apply_laplacian(&depth.z, depth.width, depth.height);
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let r = lz.iter().zip(&b).fold(0.0f64, |m, (a, c)| m.max((a - c).abs()));
    if scale == 0.0 {
        r
    } else {
        r / scale
    }
}

/// Forward-difference depth increments along x and y edges, divided by the
/// pitch; compare with the trapezoid-averaged input gradients.
pub fn edge_gradients(depth: &DepthMap) -> (Vec<f64>, Vec<f64>) {
    let (w, h, p) = (depth.width, depth.height, depth.pixel_pitch);
    let mut ex = Vec::with_capacity((w - 1) * h);
    for v in 0..h {
        for u in 0..w - 1 {
            ex.push((depth.at(u + 1, v) - depth.at(u, v)) / p);
        }
    }
    let mut ey = Vec::with_capacity(w * (h - 1));
    for v in 0..h - 1 {
        for u in 0..w {
            ey.push((depth.at(u, v + 1) - depth.at(u, v)) / p);
        }
    }
    (ex, ey)
}

/// Input gradients averaged onto the same edges as [`edge_gradients`].
pub fn averaged_edge_gradients(g: &GradientField) -> (Vec<f64>, Vec<f64>) {
    let (w, h) = (g.width(), g.height());
    let (gx, gy) = (g.gx(), g.gy());
    let mut ex = Vec::with_capacity((w - 1) * h);
    for v in 0..h {
        for u in 0..w - 1 {
            let i = v * w + u;
            ex.push(0.5 * (gx[i] + gx[i + 1]));
        }
    }
    let mut ey = Vec::with_capacity(w * (h - 1));
    for v in 0..h - 1 {
        for u in 0..w {
            let i = v * w + u;
            ey.push(0.5 * (gy[i] + gy[i + w]));
        }
    }
    (ex, ey)
}

fn solve_dct(rhs: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut planner = DctPlanner::new();
    let row_fwd = planner.plan_dct2(w);
    let col_fwd = planner.plan_dct2(h);
    let row_inv = planner.plan_dct3(w);
    let col_inv = planner.plan_dct3(h);

    let mut buf = rhs.to_vec();
    transform_2d(&mut buf, w, h, &row_fwd, &col_fwd, true);

    let lx: Vec<f64> = (0..w).map(|k| laplacian_eigenvalue(k, w)).collect();
    let ly: Vec<f64> = (0..h).map(|k| laplacian_eigenvalue(k, h)).collect();
    for l in 0..h {
        for k in 0..w {
            let denom = lx[k] + ly[l];
            let i = l * w + k;
            buf[i] = if denom > 0.0 { buf[i] / denom } else { 0.0 };
        }
    }

    transform_2d(&mut buf, w, h, &row_inv, &col_inv, false);
    let scale = 4.0 / (w as f64 * h as f64);
    buf.iter_mut().for_each(|v| *v *= scale);
    buf
}

fn laplacian_eigenvalue(k: usize, n: usize) -> f64 {
    let s = (std::f64::consts::PI * k as f64 / (2.0 * n as f64)).sin();
    4.0 * s * s
}

fn transform_2d(
    buf: &mut [f64],
    w: usize,
    h: usize,
    rows: &Arc<dyn TransformType2And3<f64>>,
    cols: &Arc<dyn TransformType2And3<f64>>,
    forward: bool,
) {
    for row in buf.chunks_exact_mut(w) {
        if forward {
            rows.process_dct2(row);
        } else {
            rows.process_dct3(row);
        }
    }
    let mut col = vec![0.0; h];
    for u in 0..w {
        for v in 0..h {
            col[v] = buf[v * w + u];
        }
        if forward {
            cols.process_dct2(&mut col);
        } else {
            cols.process_dct3(&mut col);
        }
        for v in 0..h {
            buf[v * w + u] = col[v];
        }
    }
}

fn solve_cg(b: &[f64], w: usize, h: usize, tol: f64, max_iter: usize) -> Result<Vec<f64>, PoissonError> {
    let n = b.len();
    // project the right-hand side onto the range (zero mean)
    let mean = b.iter().sum::<f64>() / n as f64;
    let b: Vec<f64> = b.iter().map(|v| v - mean).collect();
    let bnorm = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut x = vec![0.0; n];
    if bnorm == 0.0 {
        return Ok(x);
    }
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rr = bnorm * bnorm;
    for it in 0..max_iter {
        let ap = apply_laplacian(&p, w, h);
        let pap: f64 = p.iter().zip(&ap).map(|(a, c)| a * c).sum();
        if pap <= 0.0 {
            break;
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        let rr_new: f64 = r.iter().map(|v| v * v).sum();
        if rr_new.sqrt() <= tol * bnorm {
            return Ok(x);
        }
        let beta = rr_new / rr;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
        rr = rr_new;
        if it + 1 == max_iter {
            return Err(PoissonError::NotConverged { iterations: max_iter, residual: rr.sqrt() / bnorm });
        }
    }
    Ok(x)
}

/// Median depth over the `fraction` of pixels with the smallest gradient
/// magnitude.
fn background_level(z: &[f64], g: &GradientField, fraction: f64) -> f64 {
    let n = z.len();
    let take = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    let mag = |i: usize| g.gx()[i].hypot(g.gy()[i]);
    idx.select_nth_unstable_by(take - 1, |&a, &b| mag(a).total_cmp(&mag(b)).then(a.cmp(&b)));
    let mut vals: Vec<f64> = idx[..take].iter().map(|&i| z[i]).collect();
    median_in_place(&mut vals)
}

pub(crate) fn median_in_place(vals: &mut [f64]) -> f64 {
    let n = vals.len();
    vals.sort_by(|a, b| a.total_cmp(b));
    if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    }
}

/// Lift a depth grid to an organized point cloud with central-difference
/// normals.
pub fn depth_to_map(d: &DepthMap, frame_id: usize) -> LocalTactileMap {
    let (w, h) = (d.width, d.height);
    let mut points = Vec::with_capacity(w * h);
    for v in 0..h {
        for u in 0..w {
            let (x, y) = d.pixel_xy(u, v);
            points.push(Vector3::new(x, y, d.at(u, v)));
        }
    }
    let normals = grid_normals(&d.z, w, h, d.pixel_pitch);
    LocalTactileMap::organized(points, Some(normals), GridShape { width: w, height: h }, frame_id)
        .expect("depth map values are finite")
}

/// Unit normals `(−∂z/∂x, −∂z/∂y, 1)/‖·‖` of a depth grid.
pub fn grid_normals(z: &[f64], w: usize, h: usize, pitch: f64) -> Vec<Vector3<f64>> {
    let mut normals = Vec::with_capacity(w * h);
    for v in 0..h {
        for u in 0..w {
            let zx = if w < 2 {
                0.0
            } else if u == 0 {
                (z[v * w + 1] - z[v * w]) / pitch
            } else if u == w - 1 {
                (z[v * w + u] - z[v * w + u - 1]) / pitch
            } else {
                (z[v * w + u + 1] - z[v * w + u - 1]) / (2.0 * pitch)
            };
            let zy = if h < 2 {
                0.0
            } else if v == 0 {
                (z[w + u] - z[u]) / pitch
            } else if v == h - 1 {
                (z[v * w + u] - z[(v - 1) * w + u]) / pitch
            } else {
                (z[(v + 1) * w + u] - z[(v - 1) * w + u]) / (2.0 * pitch)
            };
            normals.push(Vector3::new(-zx, -zy, 1.0).normalize());
        }
    }
    normals
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field_from_fn(w: usize, h: usize, pitch: f64, grad: impl Fn(f64, f64) -> (f64, f64)) -> GradientField {
        let mut gx = Vec::with_capacity(w * h);
        let mut gy = Vec::with_capacity(w * h);
        for v in 0..h {
            for u in 0..w {
                let (x, y) = pixel_to_metric(u, v, w, h, pitch);
                let (a, b) = grad(x, y);
                gx.push(a);
                gy.push(b);
            }
        }
        GradientField::new(w, h, gx, gy, pitch).unwrap()
    }

    #[test]
    fn zero_field_integrates_to_zero() {
        let g = GradientField::zeros(17, 9, 0.05).unwrap();
        let d = integrate(&g).unwrap();
        assert!(d.z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_non_finite() {
        // bypass constructor validation through combine of a valid field
        let g = GradientField::zeros(4, 4, 0.05).unwrap();
        let bad = g.scaled(f64::NAN);
        assert!(matches!(integrate(&bad), Err(PoissonError::NonFinite)));
    }

    #[test]
    fn paraboloid_is_recovered_exactly() {
        let (w, h, pitch, r) = (64, 48, 0.05, 20.0);
        let g = field_from_fn(w, h, pitch, |x, y| (-x / r, -y / r));
        let d = integrate(&g).unwrap();
        // compare modulo the additive gauge
        let truth: Vec<f64> = (0..w * h)
            .map(|i| {
                let (x, y) = pixel_to_metric(i % w, i / w, w, h, pitch);
                -(x * x + y * y) / (2.0 * r)
            })
            .collect();
        let off = d.z[0] - truth[0];
        let err = d.z.iter().zip(&truth).map(|(a, b)| (a - b - off).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "err {err}");
        assert!(relative_residual(&d, &g) < 1e-9);
    }

    #[test]
    fn dct_and_cg_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h) = (23, 17);
        let gx: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gy: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = GradientField::new(w, h, gx, gy, 0.1).unwrap();
        let a = integrate(&g).unwrap();
        let cfg = PoissonConfig { solver: PoissonSolver::ConjugateGradient, ..Default::default() };
        let b = integrate_with(&g, &cfg).unwrap();
        let diff = a.z.iter().zip(&b.z).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-8, "diff {diff}");
        assert!(relative_residual(&a, &g) < 1e-9);
    }

    #[test]
    fn conservative_round_trip() {
        // a discrete potential sampled on the grid; its gradient at pixel
        // centers is exact for cubic-free (quadratic) surfaces
        let (w, h, pitch) = (40, 30, 0.05);
        let g = field_from_fn(w, h, pitch, |x, y| (0.3 + 0.2 * y + 0.4 * x, -0.1 + 0.2 * x - 0.6 * y));
        let d = integrate(&g).unwrap();
        let (ex, ey) = edge_gradients(&d);
        let (ax, ay) = averaged_edge_gradients(&g);
        let err = ex.iter().zip(&ax).chain(ey.iter().zip(&ay)).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(err < 1e-6, "round trip {err}");
    }

    #[test]
    fn background_median_is_zero() {
        // plateau with a bump: the flat region is the background
        let (w, h, pitch) = (50, 50, 0.05);
        let g = field_from_fn(w, h, pitch, |x, y| {
            let r2 = x * x + y * y;
            let e = (-r2 / 0.1).exp();
            (-2.0 * x / 0.1 * e, -2.0 * y / 0.1 * e)
        });
        let d = integrate(&g).unwrap();
        let corner = d.at(0, 0);
        assert!(corner.abs() < 1e-3, "corner {corner}");
        assert!(d.at(25, 25) > 0.5);
    }

    #[test]
    fn flat_depth_gives_vertical_normals() {
        let d = DepthMap { width: 5, height: 4, z: vec![0.3; 20], pixel_pitch: 0.05 };
        let m = depth_to_map(&d, 0);
        assert_eq!(m.len(), 20);
        assert!(m.normals().unwrap().iter().all(|n| (n - Vector3::z()).norm() < 1e-12));
    }

    #[test]
    fn sphere_normals_point_radially() {
        let (w, h, pitch, r) = (101, 101, 0.05, 20.0);
        let mut z = Vec::new();
        for v in 0..h {
            for u in 0..w {
                let (x, y) = pixel_to_metric(u, v, w, h, pitch);
                z.push((r * r - x * x - y * y).sqrt() - r);
            }
        }
        let m = depth_to_map(&DepthMap { width: w, height: h, z, pixel_pitch: pitch }, 0);
        let center = Vector3::new(0.0, 0.0, -r);
        let mut worst: f64 = 0.0;
        for (p, n) in m.points().iter().zip(m.normals().unwrap()) {
            let radial = (p - center).normalize();
            worst = worst.max(radial.dot(n).clamp(-1.0, 1.0).acos().to_degrees());
        }
        assert!(worst < 2.0, "worst {worst}°");
    }

    #[test]
    fn linear_in_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (w, h) = (32, 32);
        let mk = |rng: &mut ChaCha8Rng| {
            let gx: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
            let gy: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
            GradientField::new(w, h, gx, gy, 0.05).unwrap()
        };
        let (g1, g2) = (mk(&mut rng), mk(&mut rng));
        let cfg = PoissonConfig { background_fraction: 1.0, ..Default::default() };
        let sum = g1.combine(2.0, &g2, -0.5).unwrap();
        let z1 = integrate_with(&g1, &cfg).unwrap();
        let z2 = integrate_with(&g2, &cfg).unwrap();
        let zs = integrate_with(&sum, &cfg).unwrap();
        // compare modulo gauge: remove means
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let comb: Vec<f64> = z1.z.iter().zip(&z2.z).map(|(a, b)| 2.0 * a - 0.5 * b).collect();
        let (mc, ms) = (mean(&comb), mean(&zs.z));
        let err = comb.iter().zip(&zs.z).map(|(a, b)| ((a - mc) - (b - ms)).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9);
    }
}
