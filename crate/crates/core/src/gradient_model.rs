//! Per-pixel gradient estimation from tactile images.
//!
//! A small MLP maps background-subtracted color (and optionally the
//! normalized pixel position) to `(gx, gy)`. Training data comes from sphere
//! presses labeled by an automatic contact-circle fit.

use std::collections::VecDeque;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, GradientField, TactileImage};
use crate::seed;
use crate::sim::{sphere_cap_gradient, CalibrationSample, CircleLabel};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("training diverged (non-finite loss) at epoch {0}")]
    Divergence(usize),
    #[error("validation MSE {got:.3e} above the configured bound {bound:.3e}")]
    ValidationBound { got: f64, bound: f64 },
    #[error("model expects {expected} inputs, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("more than one imprint found ({0} components)")]
    MultipleImprints(usize),
    #[error("contact radius {contact:.3} mm is not smaller than the sphere radius {sphere:.3} mm")]
    ContactTooLarge { contact: f64, sphere: f64 },
    #[error("image and background differ in size")]
    Shape,
    #[error("{path}: {msg}")]
    File { path: String, msg: String },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

/// Which per-pixel features feed the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureConfig {
    /// Append normalized `(u, v)` to the three color channels.
    pub use_coords: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { use_coords: true }
    }
}

impl FeatureConfig {
    pub fn dim(&self) -> usize {
        if self.use_coords {
            5
        } else {
            3
        }
    }
}

/// Background-subtracted features of pixel `(u, v)`: each channel is
/// `clamp(0.5 + I − B)`, then optionally `u/(W−1)`, `v/(H−1)`.
pub fn pixel_features(img: &TactileImage, background: &TactileImage, u: usize, v: usize, f: FeatureConfig, out: &mut [f32]) {
    let p = img.get(u, v);
    let b = background.get(u, v);
    for k in 0..3 {
        out[k] = (0.5 + p[k] - b[k]).clamp(0.0, 1.0) as f32;
    }
    if f.use_coords {
        out[3] = (u as f64 / (img.width().max(2) - 1) as f64) as f32;
        out[4] = (v as f64 / (img.height().max(2) - 1) as f64) as f32;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PixelSample {
    pub input: Vec<f32>,
    pub target: [f32; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    sizes: Vec<usize>,
    /// `weights[l]` is `sizes[l] × sizes[l+1]` (input-major).
    weights: Vec<Array2<f32>>,
    biases: Vec<Array1<f32>>,
    activations: Vec<Activation>,
    features: FeatureConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MlpJson {
    layer_sizes: Vec<usize>,
    /// Row-major `in × out` per layer.
    weights: Vec<Vec<f32>>,
    biases: Vec<Vec<f32>>,
    activations: Vec<Activation>,
    features: FeatureConfig,
}

impl MlpModel {
    /// Xavier-uniform weights, zero biases; hidden layers use `hidden`, the
    /// output layer is linear.
    pub fn random(sizes: &[usize], hidden: Activation, features: FeatureConfig, seed: u64) -> Result<Self, ModelError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(ModelError::Invalid(format!("bad layer sizes {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut activations = Vec::new();
        for l in 0..sizes.len() - 1 {
            let (fi, fo) = (sizes[l], sizes[l + 1]);
            let lim = (6.0 / (fi + fo) as f64).sqrt();
            weights.push(Array2::from_shape_fn((fi, fo), |_| rng.random_range(-lim..lim) as f32));
            biases.push(Array1::zeros(fo));
            activations.push(if l + 2 == sizes.len() { Activation::Identity } else { hidden });
        }
        let m = Self { sizes: sizes.to_vec(), weights, biases, activations, features };
        m.check()?;
        Ok(m)
    }

    pub fn from_parts(
        sizes: Vec<usize>,
        weights: Vec<Vec<f32>>,
        biases: Vec<Vec<f32>>,
        activations: Vec<Activation>,
        features: FeatureConfig,
    ) -> Result<Self, ModelError> {
        let layers = sizes.len().saturating_sub(1);
        if layers == 0 || weights.len() != layers || biases.len() != layers || activations.len() != layers {
            return Err(ModelError::Invalid("layer count mismatch".into()));
        }
        let mut ws = Vec::with_capacity(layers);
        let mut bs = Vec::with_capacity(layers);
        for l in 0..layers {
            ws.push(
                Array2::from_shape_vec((sizes[l], sizes[l + 1]), weights[l].clone())
                    .map_err(|_| ModelError::Invalid(format!("layer {l} weight shape")))?,
            );
            if biases[l].len() != sizes[l + 1] {
                return Err(ModelError::Invalid(format!("layer {l} bias length")));
            }
            bs.push(Array1::from_vec(biases[l].clone()));
        }
        let m = Self { sizes, weights: ws, biases: bs, activations, features };
        m.check()?;
        Ok(m)
    }

    fn check(&self) -> Result<(), ModelError> {
        if self.sizes[0] != self.features.dim() {
            return Err(ModelError::Arity { expected: self.features.dim(), got: self.sizes[0] });
        }
        let finite = self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(ModelError::Invalid("non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn features(&self) -> FeatureConfig {
        self.features
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn forward(&self, x: ArrayView2<f32>) -> Result<Array2<f32>, ModelError> {
        if x.ncols() != self.input_dim() {
            return Err(ModelError::Arity { expected: self.input_dim(), got: x.ncols() });
        }
        let mut a = x.to_owned();
        for l in 0..self.weights.len() {
            a = a.dot(&self.weights[l]) + &self.biases[l];
            if self.activations[l] == Activation::Tanh {
                a.mapv_inplace(f32::tanh);
            }
        }
        Ok(a)
    }

    pub fn to_json(&self) -> String {
        let dto = MlpJson {
            layer_sizes: self.sizes.clone(),
            weights: self.weights.iter().map(|w| w.iter().copied().collect()).collect(),
            biases: self.biases.iter().map(|b| b.to_vec()).collect(),
            activations: self.activations.clone(),
            features: self.features,
        };
        serde_json::to_string(&dto).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ModelError> {
        let d: MlpJson = serde_json::from_str(s)?;
        Self::from_parts(d.layer_sizes, d.weights, d.biases, d.activations, d.features)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_json()).map_err(|e| file_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| file_err(path, e))?)
    }
}

fn file_err(path: &Path, e: impl std::fmt::Display) -> ModelError {
    ModelError::File { path: path.display().to_string(), msg: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hidden_layers: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    pub validation_fraction: f64,
    pub max_validation_mse: Option<f64>,
    pub features: FeatureConfig,
    pub seed: u64,
    pub min_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_layers: vec![64, 64],
            learning_rate: 0.00112,
            batch_size: 4000,
            epochs: 400,
            patience: 20,
            validation_fraction: 0.1,
            max_validation_mse: None,
            features: FeatureConfig::default(),
            seed: 0,
            min_samples: 1000,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub validation_mse: Vec<f64>,
    pub best_epoch: usize,
    pub best_validation_mse: f64,
    pub stopped_early: bool,
}

struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
}

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const EPS: f32 = 1e-8;

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }

    fn step<'a>(&mut self, params: impl Iterator<Item = (&'a mut f32, f32)>, lr: f32, t: i32) {
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (k, (p, g)) in params.enumerate() {
            self.m[k] = BETA1 * self.m[k] + (1.0 - BETA1) * g;
            self.v[k] = BETA2 * self.v[k] + (1.0 - BETA2) * g * g;
            *p -= lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + EPS);
        }
    }
}

fn to_arrays(samples: &[PixelSample], idx: &[usize], dim: usize) -> (Array2<f32>, Array2<f32>) {
    let mut x = Array2::zeros((idx.len(), dim));
    let mut y = Array2::zeros((idx.len(), 2));
    for (r, &i) in idx.iter().enumerate() {
        for (c, v) in samples[i].input.iter().enumerate() {
            x[(r, c)] = *v;
        }
        y[(r, 0)] = samples[i].target[0];
        y[(r, 1)] = samples[i].target[1];
    }
    (x, y)
}

fn mse(pred: &Array2<f32>, y: &Array2<f32>) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter().zip(y.iter()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / n
}

/// Mini-batch Adam on mean squared error with early stopping on the
/// validation split; returns the best-validation weights.
pub fn train(samples: &[PixelSample], cfg: &TrainConfig) -> Result<(MlpModel, TrainReport), ModelError> {
    if samples.len() < cfg.min_samples.max(2) {
        return Err(ModelError::TooFewSamples { min: cfg.min_samples.max(2), got: samples.len() });
    }
    let dim = cfg.features.dim();
    if let Some(s) = samples.iter().find(|s| s.input.len() != dim) {
        return Err(ModelError::Arity { expected: dim, got: s.input.len() });
    }
    let mut sizes = vec![dim];
    sizes.extend(&cfg.hidden_layers);
    sizes.push(2);
    let mut model = MlpModel::random(&sizes, Activation::Tanh, cfg.features, seed::derive(cfg.seed, 1))?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, 2));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    let n_val = ((samples.len() as f64 * cfg.validation_fraction).round() as usize).clamp(1, samples.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let (xv, yv) = to_arrays(samples, val_idx, dim);
    let (xt, yt) = to_arrays(samples, train_idx, dim);
    let n_train = xt.nrows();
    let batch = cfg.batch_size.clamp(1, n_train);

    let n_params: usize = model.weights.iter().map(|w| w.len()).sum::<usize>() + model.biases.iter().map(|b| b.len()).sum::<usize>();
    let mut adam = Adam::new(n_params);
    let lr = cfg.learning_rate as f32;
    let layers = model.weights.len();
    let mut t = 0;
    let mut report = TrainReport {
        epoch_loss: Vec::new(),
        validation_mse: Vec::new(),
        best_epoch: 0,
        best_validation_mse: f64::INFINITY,
        stopped_early: false,
    };
    let mut best = model.clone();
    let mut perm: Vec<usize> = (0..n_train).collect();
    for epoch in 0..cfg.epochs {
        perm.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for chunk in perm.chunks(batch) {
            let x = xt.select(Axis(0), chunk);
            let y = yt.select(Axis(0), chunk);
            // forward, keeping post-activation values
            let mut acts = vec![x];
            for l in 0..layers {
                let mut z = acts[l].dot(&model.weights[l]) + &model.biases[l];
                if model.activations[l] == Activation::Tanh {
                    z.mapv_inplace(f32::tanh);
                }
                acts.push(z);
            }
            let out = &acts[layers];
            let loss = mse(out, &y);
            if !loss.is_finite() {
                return Err(ModelError::Divergence(epoch));
            }
            loss_sum += loss;
            batches += 1;
            let scale = 2.0 / out.len() as f32;
            let mut delta = (out - &y) * scale;
            let mut grads_w = vec![Array2::<f32>::zeros((0, 0)); layers];
            let mut grads_b = vec![Array1::<f32>::zeros(0); layers];
            for l in (0..layers).rev() {
                if model.activations[l] == Activation::Tanh {
                    delta.zip_mut_with(&acts[l + 1], |d, a| *d *= 1.0 - a * a);
                }
                grads_w[l] = acts[l].t().dot(&delta);
                grads_b[l] = delta.sum_axis(Axis(0));
                if l > 0 {
                    delta = delta.dot(&model.weights[l].t());
                }
            }
            t += 1;
            let params = model
                .weights
                .iter_mut()
                .zip(&grads_w)
                .flat_map(|(w, g)| w.iter_mut().zip(g.iter().copied()))
                .chain(model.biases.iter_mut().zip(&grads_b).flat_map(|(b, g)| b.iter_mut().zip(g.iter().copied())));
            adam.step(params, lr, t);
        }
        report.epoch_loss.push(loss_sum / batches as f64);
        let val = mse(&model.forward(xv.view())?, &yv);
        if !val.is_finite() {
            return Err(ModelError::Divergence(epoch));
        }
        report.validation_mse.push(val);
        if val < report.best_validation_mse {
            report.best_validation_mse = val;
            report.best_epoch = epoch;
            best = model.clone();
        } else if epoch - report.best_epoch >= cfg.patience {
            report.stopped_early = true;
            break;
        }
    }
    if let Some(bound) = cfg.max_validation_mse {
        if report.best_validation_mse > bound {
            return Err(ModelError::ValidationBound { got: report.best_validation_mse, bound });
        }
    }
    Ok((best, report))
}

/// Per-pixel forward pass over a whole image.
pub fn predict_field(model: &MlpModel, img: &TactileImage, background: &TactileImage) -> Result<GradientField, ModelError> {
    if img.width() != background.width() || img.height() != background.height() {
        return Err(ModelError::Shape);
    }
    let f = model.features();
    let dim = f.dim();
    if model.input_dim() != dim {
        return Err(ModelError::Arity { expected: model.input_dim(), got: dim });
    }
    let (w, h) = (img.width(), img.height());
    let n = w * h;
    let mut gx = Vec::with_capacity(n);
    let mut gy = Vec::with_capacity(n);
    const CHUNK: usize = 8192;
    let mut x = Array2::<f32>::zeros((CHUNK, dim));
    let mut start = 0;
    while start < n {
        let len = CHUNK.min(n - start);
        for r in 0..len {
            let i = start + r;
            let row = x.row_mut(r);
            pixel_features(img, background, i % w, i / w, f, row.into_slice().expect("contiguous row"));
        }
        let out = model.forward(x.slice(s![..len, ..]))?;
        for r in 0..len {
            gx.push(out[(r, 0)] as f64);
            gy.push(out[(r, 1)] as f64);
        }
        start += len;
    }
    Ok(GradientField::new(w, h, gx, gy, img.pixel_pitch())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelerConfig {
    /// Minimum per-channel intensity deviation from the background.
    pub threshold: f64,
    /// Components smaller than this (pixels) are treated as noise.
    pub min_area: usize,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        Self { threshold: 0.012, min_area: 30 }
    }
}

/// Fit the contact circle of a single sphere imprint.
///
/// Pixels deviating from the background form a mask; interior holes (the
/// flat apex shades like background) are filled, and a least-squares circle
/// is fit to the mask boundary. Returns `None` for a blank frame.
pub fn label_sphere_image(img: &TactileImage, background: &TactileImage, cfg: &LabelerConfig) -> Result<Option<CircleLabel>, ModelError> {
    if img.width() != background.width() || img.height() != background.height() {
        return Err(ModelError::Shape);
    }
    let (w, h) = (img.width(), img.height());
    let mut mask: Vec<bool> = img
        .pixels()
        .iter()
        .zip(background.pixels())
        .map(|(p, b)| (0..3).any(|k| (p[k] - b[k]).abs() > cfg.threshold))
        .collect();

    // drop speckle, count real components
    let comps = components(&mask, w, h, true);
    let big: Vec<&Vec<usize>> = comps.iter().filter(|c| c.len() >= cfg.min_area).collect();
    for c in comps.iter().filter(|c| c.len() < cfg.min_area) {
        for &i in c {
            mask[i] = false;
        }
    }
    match big.len() {
        0 => return Ok(None),
        1 => {}
        k => return Err(ModelError::MultipleImprints(k)),
    }

    // fill holes: background not reachable from the border
    let outside = components(&mask, w, h, false);
    for c in outside {
        if !c.iter().any(|&i| {
            let (u, v) = (i % w, i / w);
            u == 0 || v == 0 || u == w - 1 || v == h - 1
        }) {
            for i in c {
                mask[i] = true;
            }
        }
    }

    let mut boundary = Vec::new();
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            if !mask[i] {
                continue;
            }
            let edge = u == 0 || v == 0 || u == w - 1 || v == h - 1 || !mask[i - 1] || !mask[i + 1] || !mask[i - w] || !mask[i + w];
            if edge {
                boundary.push((u as f64, v as f64));
            }
        }
    }
    let (cx, cy, r) = fit_circle(&boundary).ok_or_else(|| ModelError::Invalid("degenerate imprint boundary".into()))?;
    // boundary pixels sit half a pixel inside the true edge
    Ok(Some(CircleLabel { center: [cx, cy], radius: r + 0.5 }))
}

/// 4-connected components of pixels where `mask == value`.
fn components(mask: &[bool], w: usize, h: usize, value: bool) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if seen[start] || mask[start] != value {
            continue;
        }
        let mut comp = Vec::new();
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (u, v) = (i % w, i / w);
            let mut visit = |j: usize| {
                if !seen[j] && mask[j] == value {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if u > 0 {
                visit(i - 1);
            }
            if u + 1 < w {
                visit(i + 1);
            }
            if v > 0 {
                visit(i - w);
            }
            if v + 1 < h {
                visit(i + w);
            }
        }
        out.push(comp);
    }
    out
}

/// Algebraic (Kåsa) least-squares circle: solves
/// `x² + y² + D x + E y + F = 0`.
pub fn fit_circle(pts: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    if pts.len() < 3 {
        return None;
    }
    let (mx, my) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (mx, my) = (mx / pts.len() as f64, my / pts.len() as f64);
    let mut ata = nalgebra::Matrix3::<f64>::zeros();
    let mut atb = nalgebra::Vector3::<f64>::zeros();
    for &(x, y) in pts {
        let (x, y) = (x - mx, y - my);
        let row = nalgebra::Vector3::new(x, y, 1.0);
        ata += row * row.transpose();
        atb += row * (-(x * x + y * y));
    }
    let sol = ata.cholesky()?.solve(&atb);
    let (cx, cy) = (-0.5 * sol.x, -0.5 * sol.y);
    let r2 = cx * cx + cy * cy - sol.z;
    (r2 > 0.0).then(|| (cx + mx, cy + my, r2.sqrt()))
}

/// Gradient of the sphere cap imaged inside the contact circle.
pub fn sphere_labels_to_gradients(
    label: &CircleLabel,
    sphere_diameter: f64,
    pixel_pitch: f64,
    width: usize,
    height: usize,
) -> Result<GradientField, ModelError> {
    let sphere = 0.5 * sphere_diameter;
    let contact = label.radius * pixel_pitch;
    if contact >= sphere {
        return Err(ModelError::ContactTooLarge { contact, sphere });
    }
    Ok(sphere_cap_gradient(label, sphere, width, height, pixel_pitch)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub total_vectors: usize,
    /// Fraction of vectors drawn from inside labeled contact circles.
    pub contact_fraction: f64,
    pub features: FeatureConfig,
    pub labeler: LabelerConfig,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        // 150k training vectors after a 10% validation split
        Self {
            total_vectors: 166_667,
            contact_fraction: 0.7,
            features: FeatureConfig::default(),
            labeler: LabelerConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub images: usize,
    pub labeled: usize,
    pub contact_vectors: usize,
    pub background_vectors: usize,
    /// Mean center / radius error of automatic labels vs exact geometry (px).
    pub mean_center_error_px: f64,
    pub mean_radius_error_px: f64,
}

/// Label every sample automatically, convert labels to gradient targets and
/// draw pixel vectors. `background` is the zero-press frame; it also
/// contributes background vectors.
pub fn build_dataset(
    samples: &[CalibrationSample],
    background: &TactileImage,
    sphere_diameter: f64,
    cfg: &DatasetConfig,
) -> Result<(Vec<PixelSample>, DatasetSummary), ModelError> {
    struct Labeled<'a> {
        image: &'a TactileImage,
        target: GradientField,
        inside: Vec<usize>,
        outside: Vec<usize>,
    }
    let mut labeled = Vec::new();
    let (mut center_err, mut radius_err, mut n_err) = (0.0, 0.0, 0);
    for s in samples {
        let (w, h) = (s.image.width(), s.image.height());
        let label = label_sphere_image(&s.image, background, &cfg.labeler)?;
        let (target, inside) = match label {
            Some(l) => {
                if let Some(truth) = s.label {
                    center_err += (l.center[0] - truth.center[0]).hypot(l.center[1] - truth.center[1]);
                    radius_err += (l.radius - truth.radius).abs();
                    n_err += 1;
                }
                let g = sphere_labels_to_gradients(&l, sphere_diameter, s.image.pixel_pitch(), w, h)?;
                let r2 = l.radius * l.radius;
                let inside: Vec<usize> = (0..w * h)
                    .filter(|&i| {
                        let (du, dv) = ((i % w) as f64 - l.center[0], (i / w) as f64 - l.center[1]);
                        du * du + dv * dv < r2
                    })
                    .collect();
                (g, inside)
            }
            None => (GradientField::zeros(w, h, s.image.pixel_pitch())?, Vec::new()),
        };
        let mut is_in = vec![false; w * h];
        inside.iter().for_each(|&i| is_in[i] = true);
        let outside = (0..w * h).filter(|&i| !is_in[i]).collect();
        labeled.push(Labeled { image: &s.image, target, inside, outside });
    }
    let blank = GradientField::zeros(background.width(), background.height(), background.pixel_pitch())?;
    labeled.push(Labeled {
        image: background,
        target: blank,
        inside: Vec::new(),
        outside: (0..background.width() * background.height()).collect(),
    });

    let contact_pool: Vec<(usize, usize)> =
        labeled.iter().enumerate().flat_map(|(k, l)| l.inside.iter().map(move |&i| (k, i))).collect();
    let background_pool: Vec<(usize, usize)> =
        labeled.iter().enumerate().flat_map(|(k, l)| l.outside.iter().map(move |&i| (k, i))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let want_contact = if contact_pool.is_empty() { 0 } else { (cfg.total_vectors as f64 * cfg.contact_fraction).round() as usize };
    let want_bg = cfg.total_vectors - want_contact;
    let draw = |pool: &[(usize, usize)], n: usize, rng: &mut ChaCha8Rng| -> Vec<(usize, usize)> {
        if pool.is_empty() {
            return Vec::new();
        }
        if n <= pool.len() {
            pool.choose_multiple(rng, n).copied().collect()
        } else {
            (0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect()
        }
    };
    let mut picks = draw(&contact_pool, want_contact, &mut rng);
    let n_contact = picks.len();
    picks.extend(draw(&background_pool, want_bg, &mut rng));
    let dim = cfg.features.dim();
    let out = picks
        .iter()
        .map(|&(k, i)| {
            let l = &labeled[k];
            let w = l.image.width();
            let mut input = vec![0.0f32; dim];
            pixel_features(l.image, background, i % w, i / w, cfg.features, &mut input);
            PixelSample { input, target: [l.target.gx()[i] as f32, l.target.gy()[i] as f32] }
        })
        .collect::<Vec<_>>();
    let summary = DatasetSummary {
        images: samples.len(),
        labeled: n_err,
        contact_vectors: n_contact,
        background_vectors: out.len() - n_contact,
        mean_center_error_px: if n_err > 0 { center_err / n_err as f64 } else { 0.0 },
        mean_radius_error_px: if n_err > 0 { radius_err / n_err as f64 } else { 0.0 },
    };
    Ok((out, summary))
}

const DATASET_MAGIC: &[u8; 8] = b"TACPIX01";

/// Binary cache: magic, input dim (u32), count (u64), then per record the
/// inputs and the two targets as little-endian f32.
pub fn write_dataset(path: &Path, samples: &[PixelSample]) -> Result<(), ModelError> {
    let dim = samples.first().map_or(0, |s| s.input.len());
    let file = fs::File::create(path).map_err(|e| file_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut body = || -> std::io::Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&(dim as u32).to_le_bytes())?;
        w.write_all(&(samples.len() as u64).to_le_bytes())?;
        for s in samples {
            for v in s.input.iter().chain(&s.target) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    };
    body().map_err(|e| file_err(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Vec<PixelSample>, ModelError> {
    let file = fs::File::open(path).map_err(|e| file_err(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    let mut d4 = [0u8; 4];
    let mut c8 = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| file_err(path, e))?;
    if &magic != DATASET_MAGIC {
        return Err(file_err(path, "not a pixel dataset"));
    }
    r.read_exact(&mut d4).map_err(|e| file_err(path, e))?;
    r.read_exact(&mut c8).map_err(|e| file_err(path, e))?;
    let dim = u32::from_le_bytes(d4) as usize;
    let count = u64::from_le_bytes(c8) as usize;
    let mut buf = vec![0u8; (dim + 2) * 4];
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut buf).map_err(|e| file_err(path, e))?;
        let vals: Vec<f32> = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        out.push(PixelSample { input: vals[..dim].to_vec(), target: [vals[dim], vals[dim + 1]] });
    }
    Ok(out)
}

/// Zero-intercept fits of predicted vs true normal angles (degrees).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PitchYawFit {
    pub slope_pitch: f64,
    pub r2_pitch: f64,
    pub slope_yaw: f64,
    pub r2_yaw: f64,
    pub pixels: usize,
}

/// Normal angles with `n = (gx·p, gy·p, p)` where `p` is the pixel pitch:
/// pitch = atan(n_z / n_xy), yaw = atan(n_y / n_x), both in degrees.
pub fn normal_angles(gx: f64, gy: f64, pixel_pitch: f64) -> (f64, f64) {
    let (nx, ny, nz) = (gx * pixel_pitch, gy * pixel_pitch, pixel_pitch);
    let nxy = nx.hypot(ny);
    ((nz / nxy).atan().to_degrees(), (ny / nx).atan().to_degrees())
}

/// `y ≈ a·x` by least squares; returns `(a, R²)` with
/// `R² = 1 − Σ(y − a x)² / Σ(y − ȳ)²`.
pub fn zero_intercept_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let a = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let mean = y.iter().sum::<f64>() / y.len().max(1) as f64;
    let ss_res: f64 = x.iter().zip(y).map(|(p, q)| (q - a * p).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|q| (q - mean).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else if ss_res == 0.0 { 1.0 } else { 0.0 };
    (a, r2)
}

/// Pitch/yaw agreement between predicted and true gradients. Pixels whose
/// true in-plane normal component is below 1e-8 are skipped. Yaw is defined
/// modulo 180°; each predicted yaw is taken in the branch nearest the truth.
pub fn evaluate_pitch_yaw(pred: &GradientField, truth: &GradientField, pixel_pitch: f64) -> Result<PitchYawFit, ModelError> {
    if pred.width() != truth.width() || pred.height() != truth.height() {
        return Err(ModelError::Shape);
    }
    let (mut tp, mut pp, mut ty, mut py) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..truth.gx().len() {
        let (tx, tyv) = (truth.gx()[i], truth.gy()[i]);
        if (tx * pixel_pitch).hypot(tyv * pixel_pitch) < 1e-8 {
            continue;
        }
        let (pitch_t, yaw_t) = normal_angles(tx, tyv, pixel_pitch);
        let (pitch_p, mut yaw_p) = normal_angles(pred.gx()[i], pred.gy()[i], pixel_pitch);
        if !yaw_p.is_finite() {
            yaw_p = 90.0;
        }
        while yaw_p - yaw_t > 90.0 {
            yaw_p -= 180.0;
        }
        while yaw_t - yaw_p > 90.0 {
            yaw_p += 180.0;
        }
        tp.push(pitch_t);
        pp.push(if pitch_p.is_finite() { pitch_p } else { 90.0 });
        ty.push(yaw_t);
        py.push(yaw_p);
    }
    let (slope_pitch, r2_pitch) = zero_intercept_fit(&tp, &pp);
    let (slope_yaw, r2_yaw) = zero_intercept_fit(&ty, &py);
    Ok(PitchYawFit { slope_pitch, r2_pitch, slope_yaw, r2_yaw, pixels: tp.len() })
}

/// Per-image fits averaged over images.
pub fn evaluate_images(pairs: &[(GradientField, GradientField)], pixel_pitch: f64) -> Result<PitchYawFit, ModelError> {
    let fits = pairs.iter().map(|(p, t)| evaluate_pitch_yaw(p, t, pixel_pitch)).collect::<Result<Vec<_>, _>>()?;
    let n = fits.len().max(1) as f64;
    Ok(PitchYawFit {
        slope_pitch: fits.iter().map(|f| f.slope_pitch).sum::<f64>() / n,
        r2_pitch: fits.iter().map(|f| f.r2_pitch).sum::<f64>() / n,
        slope_yaw: fits.iter().map(|f| f.slope_yaw).sum::<f64>() / n,
        r2_yaw: fits.iter().map(|f| f.r2_yaw).sum::<f64>() / n,
        pixels: fits.iter().map(|f| f.pixels).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{background_image, render_sphere_calibration_set, shade, zero_press_sample, SensorProfile, ShadingParams};

    fn identity_model() -> MlpModel {
        let f = FeatureConfig { use_coords: false };
        let w = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        MlpModel::from_parts(vec![3, 2], vec![w], vec![vec![0.0, 0.0]], vec![Activation::Identity], f).unwrap()
    }

    #[test]
    fn hand_set_identity_layer_reproduces_inputs() {
        let m = identity_model();
        let x = ndarray::array![[0.25f32, 0.5, 0.9], [0.0, 1.0, 0.3]];
        let y = m.forward(x.view()).unwrap();
        assert_eq!(y, ndarray::array![[0.25f32, 0.5], [0.0, 1.0]]);
        assert!(matches!(m.forward(ndarray::Array2::zeros((1, 5)).view()), Err(ModelError::Arity { .. })));
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let m = MlpModel::random(&[5, 64, 64, 2], Activation::Tanh, FeatureConfig::default(), 3).unwrap();
        let back = MlpModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn empty_or_small_training_set_is_rejected() {
        assert!(matches!(train(&[], &TrainConfig::default()), Err(ModelError::TooFewSamples { .. })));
    }

    #[test]
    fn circle_fit_recovers_exact_circle() {
        let pts: Vec<(f64, f64)> = (0..40).map(|k| {
            let a = k as f64 * 0.157;
            (12.5 + 7.0 * a.cos(), -3.0 + 7.0 * a.sin())
        }).collect();
        let (cx, cy, r) = fit_circle(&pts).unwrap();
        assert!((cx - 12.5).abs() < 1e-9 && (cy + 3.0).abs() < 1e-9 && (r - 7.0).abs() < 1e-9);
    }

    #[test]
    fn labeler_finds_simulated_imprint() {
        let prof = SensorProfile { width: 160, height: 140, ..SensorProfile::default() };
        let bg = background_image(&prof);
        for s in render_sphere_calibration_set(6.0, 8, &prof, 11).unwrap() {
            let l = label_sphere_image(&s.image, &bg, &LabelerConfig::default()).unwrap().unwrap();
            let t = s.label.unwrap();
            let dc = (l.center[0] - t.center[0]).hypot(l.center[1] - t.center[1]);
            assert!(dc < 2.0, "center off by {dc}");
            assert!((l.radius - t.radius).abs() < 2.0, "radius {} vs {}", l.radius, t.radius);
        }
        let blank = zero_press_sample(&prof, 5).image;
        assert_eq!(label_sphere_image(&blank, &bg, &LabelerConfig::default()).unwrap(), None);
    }

    #[test]
    fn labeler_rejects_two_imprints() {
        let prof = SensorProfile { width: 120, height: 60, ..SensorProfile::default() };
        let a = CircleLabel { center: [30.0, 30.0], radius: 15.0 };
        let b = CircleLabel { center: [90.0, 30.0], radius: 15.0 };
        let ga = sphere_cap_gradient(&a, 3.0, 120, 60, 0.05).unwrap();
        let gb = sphere_cap_gradient(&b, 3.0, 120, 60, 0.05).unwrap();
        let img = shade(&ga.combine(1.0, &gb, 1.0).unwrap(), &prof.shading, 0);
        let bg = background_image(&prof);
        assert!(matches!(label_sphere_image(&img, &bg, &LabelerConfig::default()), Err(ModelError::MultipleImprints(2))));
    }

    #[test]
    fn label_gradients_match_sphere_derivative() {
        let l = CircleLabel { center: [50.0, 40.0], radius: 30.0 };
        let g = sphere_labels_to_gradients(&l, 6.0, 0.05, 100, 80).unwrap();
        assert_eq!(g.at(50, 40), (0.0, 0.0));
        let x: f64 = 29.0 * 0.05;
        let (gx, gy) = g.at(79, 40);
        assert!((gx + x / (9.0 - x * x).sqrt()).abs() < 1e-12 && gy == 0.0);
        assert_eq!(g.at(85, 40), (0.0, 0.0));
        let too_big = CircleLabel { radius: 70.0, ..l };
        assert!(matches!(sphere_labels_to_gradients(&too_big, 6.0, 0.05, 100, 80), Err(ModelError::ContactTooLarge { .. })));
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let l = CircleLabel { center: [40.0, 40.0], radius: 25.0 };
        let g = sphere_cap_gradient(&l, 3.0, 80, 80, 0.05).unwrap();
        let fit = evaluate_pitch_yaw(&g, &g, 0.05).unwrap();
        assert!((fit.slope_pitch - 1.0).abs() < 1e-12 && (fit.r2_pitch - 1.0).abs() < 1e-12);
        assert!((fit.slope_yaw - 1.0).abs() < 1e-12 && (fit.r2_yaw - 1.0).abs() < 1e-12);
        // yaw depends on gy/gx only
        let fit2 = evaluate_pitch_yaw(&g.scaled(2.0), &g, 0.05).unwrap();
        assert!((fit2.slope_yaw - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_intercept_fit_by_hand() {
        let (a, r2) = zero_intercept_fit(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]);
        assert!((a - 2.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_image_gives_constant_field() {
        let m = MlpModel::random(&[5, 8, 2], Activation::Tanh, FeatureConfig { use_coords: false }, 1);
        assert!(matches!(m, Err(ModelError::Arity { .. })));
        let m = MlpModel::random(&[3, 8, 2], Activation::Tanh, FeatureConfig { use_coords: false }, 1).unwrap();
        let img = TactileImage::uniform(7, 5, [0.4, 0.6, 0.5], 0.05).unwrap();
        let bg = TactileImage::uniform(7, 5, [0.5, 0.5, 0.5], 0.05).unwrap();
        let g = predict_field(&m, &img, &bg).unwrap();
        assert!(g.gx().iter().all(|&v| v == g.gx()[0]) && g.gy().iter().all(|&v| v == g.gy()[0]));
        assert_eq!(g, predict_field(&m, &img, &bg).unwrap());
    }

    #[test]
    fn dataset_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = vec![
            PixelSample { input: vec![0.1, 0.2, 0.3, 0.4, 0.5], target: [1.5, -2.0] },
            PixelSample { input: vec![0.6, 0.7, 0.8, 0.9, 1.0], target: [0.0, 3.25] },
        ];
        let p = dir.path().join("d.bin");
        write_dataset(&p, &samples).unwrap();
        assert_eq!(read_dataset(&p).unwrap(), samples);
    }

    #[test]
    fn learns_linear_shading() {
        // exactly linear map: least squares solves it; the MLP must get close
        let shading = ShadingParams { image_noise_sigma: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 6000;
        let gx: Vec<f64> = (0..n).map(|_| rng.random_range(-0.8..0.8)).collect();
        let gy: Vec<f64> = (0..n).map(|_| rng.random_range(-0.8..0.8)).collect();
        let g = GradientField::new(n, 1, gx.clone(), gy.clone(), 0.05).unwrap();
        let img = shade(&g, &shading, 0);
        let bg = TactileImage::uniform(n, 1, shading.background, 0.05).unwrap();
        let f = FeatureConfig { use_coords: false };
        let samples: Vec<PixelSample> = (0..n)
            .map(|i| {
                let mut input = vec![0.0; 3];
                pixel_features(&img, &bg, i, 0, f, &mut input);
                PixelSample { input, target: [gx[i] as f32, gy[i] as f32] }
            })
            .collect();
        // linear least-squares oracle; the three channels sum to a constant,
        // so two channels plus a bias span the map
        let mut ata = nalgebra::Matrix3::<f64>::zeros();
        let mut atb = nalgebra::Matrix3x2::<f64>::zeros();
        for s in &samples {
            let row = nalgebra::Vector3::new(s.input[0] as f64, s.input[1] as f64, 1.0);
            ata += row * row.transpose();
            atb += row * nalgebra::RowVector2::new(s.target[0] as f64, s.target[1] as f64);
        }
        let coef = ata.cholesky().unwrap().solve(&atb);
        let lin_mse: f64 = samples
            .iter()
            .map(|s| {
                let row = nalgebra::RowVector3::new(s.input[0] as f64, s.input[1] as f64, 1.0);
                let p = row * coef;
                (p[0] - s.target[0] as f64).powi(2) + (p[1] - s.target[1] as f64).powi(2)
            })
            .sum::<f64>()
            / (2 * n) as f64;
        assert!(lin_mse < 1e-9, "oracle mse {lin_mse}");
        let cfg = TrainConfig { hidden_layers: vec![16], learning_rate: 0.01, batch_size: 200, epochs: 150, patience: 30, features: f, ..Default::default() };
        let (_, report) = train(&samples, &cfg).unwrap();
        assert!(report.best_validation_mse < 1e-4, "val mse {}", report.best_validation_mse);
        assert!(report.epoch_loss.last().unwrap() < &report.epoch_loss[0]);
    }
}
