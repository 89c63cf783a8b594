//! Pose graph of odometry and loop edges, optimized with
//! Levenberg–Marquardt on SE(3).
//!
//! Edge residual: `r = (log R_e, t_e)` for `E = Z⁻¹ · T_i⁻¹ · T_j`. Nodes are
//! updated by `R ← exp(φ) R`, `t ← t + ρ`; node 0 is held fixed.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Quaternion, SMatrix, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{skew, so3_exp, so3_log, PoseSE3};
use crate::loop_closure::LoopCandidate;
use crate::registration::{PairRegistration, RegistrationResult};

type Matrix6x6 = SMatrix<f64, 6, 6>;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("odometry edge {0} -> {1} is missing")]
    MissingOdometry(usize, usize),
    #[error("edge ({0}, {1}) connects a node to itself or to a missing node")]
    BadEdge(usize, usize),
    #[error("information matrix of edge ({0}, {1}) is not symmetric positive definite")]
    Information(usize, usize),
    #[error("nodes {0:?} are not connected to node 0")]
    Disconnected(Vec<usize>),
    #[error("damping exceeded 1e12 without a solvable system")]
    Damping,
    #[error("graph has no nodes")]
    Empty,
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{path}: {msg}")]
    File { path: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Odometry,
    Loop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphEdge {
    pub i: usize,
    pub j: usize,
    /// Measured pose of node `j` in the frame of node `i`.
    pub measurement: PoseSE3,
    pub information: Matrix6x6,
    pub kind: EdgeKind,
}

impl GraphEdge {
    pub fn new(i: usize, j: usize, measurement: PoseSE3, information: Matrix6x6, kind: EdgeKind) -> Result<Self, GraphError> {
        if i == j {
            return Err(GraphError::BadEdge(i, j));
        }
        let sym = (information - information.transpose()).abs().max() <= 1e-9 * information.abs().max().max(1.0);
        if !sym || information.cholesky().is_none() {
            return Err(GraphError::Information(i, j));
        }
        Ok(Self { i, j, measurement, information, kind })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseGraph {
    pub poses: Vec<PoseSE3>,
    pub edges: Vec<GraphEdge>,
}

/// Odometry weight `I / max(rmse², 1e-4)`; loop edges are further scaled by
/// fitness.
pub fn information_from(r: &RegistrationResult, kind: EdgeKind) -> Matrix6x6 {
    let base = 1.0 / (r.rmse * r.rmse).max(1e-4);
    let scale = match kind {
        EdgeKind::Odometry => base,
        EdgeKind::Loop => base * r.fitness.max(1e-6),
    };
    Matrix6x6::identity() * scale
}

/// Nodes from chained odometry, one edge per consecutive pair and one per
/// verified loop (duplicates keep the higher fitness).
pub fn build(n_frames: usize, odometry: &[PairRegistration], loops: &[LoopCandidate]) -> Result<PoseGraph, GraphError> {
    if n_frames == 0 {
        return Err(GraphError::Empty);
    }
    let mut poses = vec![PoseSE3::identity()];
    let mut edges = Vec::new();
    for k in 1..n_frames {
        let pair = odometry
            .iter()
            .find(|p| p.source == k && p.target == k - 1)
            .ok_or(GraphError::MissingOdometry(k - 1, k))?;
        let z = pair.result.transform;
        poses.push(poses[k - 1].compose(&z));
        edges.push(GraphEdge::new(k - 1, k, z, information_from(&pair.result, EdgeKind::Odometry), EdgeKind::Odometry)?);
    }
    let mut best: BTreeMap<(usize, usize), &LoopCandidate> = BTreeMap::new();
    for c in loops {
        let Some(r) = &c.registration else { continue };
        if c.i >= n_frames || c.j >= n_frames || c.i == c.j {
            return Err(GraphError::BadEdge(c.j, c.i));
        }
        let key = (c.j.min(c.i), c.j.max(c.i));
        let keep = best.get(&key).is_none_or(|b| b.registration.as_ref().is_some_and(|br| r.fitness > br.fitness));
        if keep {
            best.insert(key, c);
        }
    }
    for c in best.values() {
        let r = c.registration.as_ref().expect("only verified loops are kept");
        // the registration maps frame i into frame j: the pose of i seen from j
        edges.push(GraphEdge::new(c.j, c.i, r.transform, information_from(r, EdgeKind::Loop), EdgeKind::Loop)?);
    }
    Ok(PoseGraph { poses, edges })
}

/// Inverse of the SO(3) left Jacobian.
pub fn left_jacobian_inv(theta: &Vector3<f64>) -> Matrix3<f64> {
    let a = theta.norm();
    let k = skew(theta);
    let c = if a < 1e-6 {
        1.0 / 12.0 + a * a / 720.0
    } else {
        1.0 / (a * a) - (1.0 + a.cos()) / (2.0 * a * a.sin())
    };
    Matrix3::identity() - 0.5 * k + c * k * k
}

pub fn residual(edge: &GraphEdge, poses: &[PoseSE3]) -> Vector6<f64> {
    let e = edge.measurement.inverse().compose(&poses[edge.i].inverse().compose(&poses[edge.j]));
    let w = so3_log(e.rotation());
    let t = e.translation();
    Vector6::new(w.x, w.y, w.z, t.x, t.y, t.z)
}

/// Residual and its Jacobians with respect to the `(φ, ρ)` increments of
/// nodes `i` and `j`.
pub fn residual_jacobians(edge: &GraphEdge, poses: &[PoseSE3]) -> (Vector6<f64>, Matrix6<f64>, Matrix6<f64>) {
    let r = residual(edge, poses);
    let (pi, pj) = (&poses[edge.i], &poses[edge.j]);
    let m = edge.measurement.rotation().transpose() * pi.rotation().transpose();
    let jl = left_jacobian_inv(&Vector3::new(r[0], r[1], r[2])) * m;
    let d = pj.translation() - pi.translation();
    let mut ji = Matrix6::zeros();
    let mut jj = Matrix6::zeros();
    ji.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-jl));
    ji.fixed_view_mut::<3, 3>(3, 0).copy_from(&(m * skew(&d)));
    ji.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-m));
    jj.fixed_view_mut::<3, 3>(0, 0).copy_from(&jl);
    jj.fixed_view_mut::<3, 3>(3, 3).copy_from(&m);
    (r, ji, jj)
}

/// `R ← exp(φ) R`, `t ← t + ρ`.
pub fn apply_increment(p: &PoseSE3, delta: &Vector6<f64>) -> PoseSE3 {
    let phi = Vector3::new(delta[0], delta[1], delta[2]);
    let rho = Vector3::new(delta[3], delta[4], delta[5]);
    PoseSE3::from_parts_projected(so3_exp(&phi) * p.rotation(), p.translation() + rho)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    pub lambda_init: f64,
    pub lambda_factor: f64,
    pub gradient_tol: f64,
    pub step_tol: f64,
    /// Huber threshold on the whitened residual norm; `None` is plain
    /// least squares.
    pub huber_delta: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { max_iterations: 100, lambda_init: 1e-4, lambda_factor: 10.0, gradient_tol: 1e-8, step_tol: 1e-10, huber_delta: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub iterations: usize,
    pub initial_objective: f64,
    pub final_objective: f64,
    pub lambda_trace: Vec<f64>,
    /// Objective after each accepted step, starting with the initial value.
    pub objective_trace: Vec<f64>,
    pub termination: String,
}

fn robust(s: f64, huber: Option<f64>) -> (f64, f64) {
    // value and weight of the kernel applied to a squared whitened norm
    match huber {
        Some(d) if s > d * d => (2.0 * d * s.sqrt() - d * d, d / s.sqrt()),
        _ => (s, 1.0),
    }
}

pub fn objective(g: &PoseGraph, poses: &[PoseSE3], huber: Option<f64>) -> f64 {
    g.edges
        .iter()
        .map(|e| {
            let r = residual(e, poses);
            robust((r.transpose() * e.information * r)[(0, 0)], huber).0
        })
        .sum()
}

fn check_connected(g: &PoseGraph) -> Result<(), GraphError> {
    let n = g.poses.len();
    let mut adj = vec![Vec::new(); n];
    for e in &g.edges {
        if e.i >= n || e.j >= n || e.i == e.j {
            return Err(GraphError::BadEdge(e.i, e.j));
        }
        adj[e.i].push(e.j);
        adj[e.j].push(e.i);
    }
    let mut seen = vec![false; n];
    seen[0] = true;
    let mut q = VecDeque::from([0]);
    while let Some(k) = q.pop_front() {
        for &m in &adj[k] {
            if !seen[m] {
                seen[m] = true;
                q.push_back(m);
            }
        }
    }
    let missing: Vec<usize> = (0..n).filter(|&k| !seen[k]).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(GraphError::Disconnected(missing))
    }
}

/// Levenberg–Marquardt with damping `λ·diag(H)`. Only objective-decreasing
/// steps are accepted.
pub fn optimize(g: &PoseGraph, cfg: &OptimizerConfig) -> Result<(Vec<PoseSE3>, OptimizationReport), GraphError> {
    if g.poses.is_empty() {
        return Err(GraphError::Empty);
    }
    check_connected(g)?;
    let n = g.poses.len();
    let dim = 6 * (n - 1);
    let mut poses = g.poses.clone();
    let mut f = objective(g, &poses, cfg.huber_delta);
    let mut report = OptimizationReport {
        iterations: 0,
        initial_objective: f,
        final_objective: f,
        lambda_trace: Vec::new(),
        objective_trace: vec![f],
        termination: "max_iterations".into(),
    };
    if dim == 0 {
        report.termination = "single node".into();
        return Ok((poses, report));
    }
    let mut lambda = cfg.lambda_init;
    while report.iterations < cfg.max_iterations {
        report.iterations += 1;
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut b = DVector::<f64>::zeros(dim);
        for e in &g.edges {
            let (r, ji, jj) = residual_jacobians(e, &poses);
            let s = (r.transpose() * e.information * r)[(0, 0)];
            let w = robust(s, cfg.huber_delta).1;
            let om = e.information * w;
            for (a, ja) in [(e.i, &ji), (e.j, &jj)] {
                if a == 0 {
                    continue;
                }
                let oa = 6 * (a - 1);
                let gb = ja.transpose() * om * r;
                for k in 0..6 {
                    b[oa + k] += gb[k];
                }
                for (c, jc) in [(e.i, &ji), (e.j, &jj)] {
                    if c == 0 {
                        continue;
                    }
                    let oc = 6 * (c - 1);
                    let blk = ja.transpose() * om * jc;
                    let mut view = h.view_mut((oa, oc), (6, 6));
                    view += blk;
                }
            }
        }
        if b.amax() < cfg.gradient_tol {
            report.termination = "gradient_tol".into();
            break;
        }
        let mut accepted = false;
        let mut stop = false;
        loop {
            if lambda > 1e12 {
                return Err(GraphError::Damping);
            }
            let mut damped = h.clone();
            for k in 0..dim {
                damped[(k, k)] += lambda * h[(k, k)].max(1e-12);
            }
            report.lambda_trace.push(lambda);
            let Some(ch) = damped.cholesky() else {
                lambda *= cfg.lambda_factor;
                continue;
            };
            let delta = ch.solve(&(-&b));
            let cand: Vec<PoseSE3> = (0..n)
                .map(|k| if k == 0 { poses[0] } else { apply_increment(&poses[k], &delta.fixed_rows::<6>(6 * (k - 1)).into_owned()) })
                .collect();
            let fc = objective(g, &cand, cfg.huber_delta);
            let state_norm: f64 = poses.iter().map(|p| p.translation().norm_squared() + p.rotation_vector().norm_squared()).sum::<f64>().sqrt();
            if delta.norm() < cfg.step_tol * (state_norm + cfg.step_tol) {
                report.termination = "step_tol".into();
                stop = true;
                if fc <= f {
                    poses = cand;
                    f = fc;
                    report.objective_trace.push(f);
                }
                break;
            }
            if fc < f {
                poses = cand;
                f = fc;
                report.objective_trace.push(f);
                lambda = (lambda / cfg.lambda_factor).max(1e-15);
                accepted = true;
                break;
            }
            lambda *= cfg.lambda_factor;
        }
        if stop {
            break;
        }
        debug_assert!(accepted);
    }
    report.final_objective = f;
    Ok((poses, report))
}

fn quat_of(p: &PoseSE3) -> UnitQuaternion<f64> {
    UnitQuaternion::from_matrix(p.rotation())
}

/// g2o text: `VERTEX_SE3:QUAT id x y z qx qy qz qw` and
/// `EDGE_SE3:QUAT i j x y z qx qy qz qw` followed by the 21 upper-triangular
/// information entries. Loop edges are those between non-consecutive nodes.
pub fn to_g2o(g: &PoseGraph) -> String {
    let mut s = String::new();
    for (k, p) in g.poses.iter().enumerate() {
        let q = quat_of(p);
        let t = p.translation();
        s += &format!("VERTEX_SE3:QUAT {k} {} {} {} {} {} {} {}\n", t.x, t.y, t.z, q.i, q.j, q.k, q.w);
    }
    s += "FIX 0\n";
    for e in &g.edges {
        let q = quat_of(&e.measurement);
        let t = e.measurement.translation();
        s += &format!("EDGE_SE3:QUAT {} {} {} {} {} {} {} {} {}", e.i, e.j, t.x, t.y, t.z, q.i, q.j, q.k, q.w);
        for r in 0..6 {
            for c in r..6 {
                s += &format!(" {}", e.information[(r, c)]);
            }
        }
        s += "\n";
    }
    s
}

pub fn write_g2o(path: &Path, g: &PoseGraph) -> Result<(), GraphError> {
    fs::write(path, to_g2o(g)).map_err(|e| GraphError::File { path: path.display().to_string(), msg: e.to_string() })
}

pub fn read_g2o(path: &Path) -> Result<PoseGraph, GraphError> {
    let text = fs::read_to_string(path).map_err(|e| GraphError::File { path: path.display().to_string(), msg: e.to_string() })?;
    parse_g2o(&text, &path.display().to_string())
}

pub fn parse_g2o(text: &str, name: &str) -> Result<PoseGraph, GraphError> {
    let perr = |line: usize, msg: String| GraphError::Parse { path: name.to_string(), line, msg };
    let mut vertices: BTreeMap<usize, PoseSE3> = BTreeMap::new();
    let mut edges = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let ln = ln + 1;
        let tok: Vec<&str> = line.split_whitespace().collect();
        let Some(&tag) = tok.first() else { continue };
        let nums = |from: usize| -> Result<Vec<f64>, GraphError> {
            tok[from..].iter().map(|t| t.parse::<f64>().map_err(|_| perr(ln, format!("bad number {t:?}")))).collect()
        };
        let idx = |k: usize| -> Result<usize, GraphError> {
            tok.get(k).and_then(|t| t.parse().ok()).ok_or_else(|| perr(ln, "bad index".into()))
        };
        let pose = |v: &[f64]| -> PoseSE3 {
            let q = UnitQuaternion::from_quaternion(Quaternion::new(v[6], v[3], v[4], v[5]));
            PoseSE3::from_parts_projected(q.to_rotation_matrix().into_inner(), Vector3::new(v[0], v[1], v[2]))
        };
        match tag {
            "VERTEX_SE3:QUAT" => {
                let id = idx(1)?;
                let v = nums(2)?;
                if v.len() != 7 {
                    return Err(perr(ln, "vertex needs 7 numbers".into()));
                }
                vertices.insert(id, pose(&v));
            }
            "EDGE_SE3:QUAT" => {
                let (i, j) = (idx(1)?, idx(2)?);
                let v = nums(3)?;
                if v.len() != 28 {
                    return Err(perr(ln, "edge needs 7 + 21 numbers".into()));
                }
                let mut info = Matrix6x6::zeros();
                let mut k = 7;
                for r in 0..6 {
                    for c in r..6 {
                        info[(r, c)] = v[k];
                        info[(c, r)] = v[k];
                        k += 1;
                    }
                }
                let kind = if i.abs_diff(j) == 1 { EdgeKind::Odometry } else { EdgeKind::Loop };
                edges.push(GraphEdge::new(i, j, pose(&v), info, kind)?);
            }
            "FIX" => {}
            t if t.starts_with('#') => {}
            other => return Err(perr(ln, format!("unknown record {other}"))),
        }
    }
    let n = vertices.len();
    if vertices.keys().copied().ne(0..n) {
        return Err(perr(0, "vertex ids must be 0..n".into()));
    }
    Ok(PoseGraph { poses: vertices.into_values().collect(), edges })
}
