//! End-to-end reconstruction: simulate → local maps → correct → odometry →
//! loops → optimize → export → evaluate.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::correction::{self, RegionPartition, StandardFrame, DEFAULT_ALPHA_CLAMP};
use crate::geometry::{LocalTactileMap, PoseSE3};
use crate::gradient_model::{
    build_dataset, evaluate_images, predict_field, train, DatasetConfig, DatasetSummary, MlpModel, PitchYawFit, PixelSample, TrainConfig,
    TrainReport,
};
use crate::io::{self, PlyFormat};
use crate::loop_closure::{self, DetectReport, FrameDescriptor, LoopCandidate, LoopConfig};
use crate::metrics::{self, Deviation, FlatnessNorm, RansacConfig};
use crate::object::{embossed_text, relief_plate, ObjectHeightfield, ReliefParams};
use crate::poisson::{depth_to_map, integrate_with, PoissonConfig};
use crate::pose_graph::{self, OptimizationReport, OptimizerConfig};
use crate::registration::{self, voxel_key, Odometry, PreparedCloud, RegistrationParams};
use crate::seed;
use crate::sim::{
    self, background_image, render_press_detailed, render_sphere_calibration_set, shade, zero_press_sample, PressSpec, SensorProfile,
};
use crate::spatial::KdTree;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage}: {msg}")]
    Stage { stage: &'static str, msg: String },
}

fn fail(stage: &'static str, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Stage { stage, msg: e.to_string() }
}

fn stage_err<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Stage { stage, msg: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectSpec {
    Flat { extent: [f64; 4] },
    Relief { params: ReliefParams },
    Hemisphere { radius: f64, margin: f64 },
    Text { text: String, char_height: f64, stroke_radius: f64, relief: f64, margin: f64 },
    Png { path: PathBuf },
}

impl ObjectSpec {
    pub fn build(&self) -> Result<ObjectHeightfield, PipelineError> {
        let e = stage_err("simulate");
        Ok(match self {
            Self::Flat { extent } => ObjectHeightfield::flat(*extent),
            Self::Relief { params } => relief_plate(params).map_err(e)?,
            Self::Hemisphere { radius, margin } => ObjectHeightfield::hemisphere(*radius, *margin),
            Self::Text { text, char_height, stroke_radius, relief, margin } => {
                embossed_text(text, *char_height, *stroke_radius, *relief, *margin).map_err(e)?
            }
            Self::Png { path } => ObjectHeightfield::from_png(path).map_err(e)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrajectorySpec {
    /// Circle through `start`; the last frame revisits the first.
    Loop { frames: usize, start: [f64; 2], radius: f64, yaw_amplitude_deg: f64, jitter: f64 },
    Straight { frames: usize, start: [f64; 2], step: f64, heading_deg: f64, yaw_deg: f64 },
    /// Trajectory CSV (12 numbers per row).
    File { path: PathBuf },
}

impl TrajectorySpec {
    pub fn poses(&self, seed: u64) -> Result<Vec<PoseSE3>, PipelineError> {
        Ok(match self {
            Self::Loop { frames, start, radius, yaw_amplitude_deg, jitter } => {
                sim::loop_scan(*frames, *start, *radius, yaw_amplitude_deg.to_radians(), *jitter, seed)
            }
            Self::Straight { frames, start, step, heading_deg, yaw_deg } => {
                sim::straight_scan(*frames, *start, *step, heading_deg.to_radians(), yaw_deg.to_radians())
            }
            Self::File { path } => io::read_trajectory(path).map_err(stage_err("simulate"))?,
        })
    }
}

/// Gaussian noise injected into every odometry measurement, per axis.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OdometryNoise {
    pub translation_mm: f64,
    pub rotation_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub object: ObjectSpec,
    pub trajectory: TrajectorySpec,
    /// Per-frame force levels are uniform in this range.
    pub force_range: [f64; 2],
    pub min_overlap: f64,
    pub odometry_noise: OdometryNoise,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            object: ObjectSpec::Relief { params: ReliefParams::default() },
            trajectory: TrajectorySpec::Loop { frames: 30, start: [0.0, 0.0], radius: 10.0, yaw_amplitude_deg: 10.0, jitter: 0.3 },
            force_range: [1.0, 1.8],
            min_overlap: 0.5,
            odometry_noise: OdometryNoise::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum GradientSource {
    /// Exact rendered gradients.
    Simulated,
    /// Shade each press and run the trained per-pixel model.
    Model { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrectionConfig {
    pub enabled: bool,
    pub partition: RegionPartition,
    pub alpha_clamp: f64,
    /// Saved standard frame stem; simulated from a flat press when absent.
    pub standard: Option<PathBuf>,
}

impl Default for CorrectionConfig {
    fn default() -> Self {
        Self { enabled: true, partition: RegionPartition::default(), alpha_clamp: DEFAULT_ALPHA_CLAMP, standard: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopStageConfig {
    pub enabled: bool,
    pub detect: LoopConfig,
}

impl Default for LoopStageConfig {
    fn default() -> Self {
        Self { enabled: true, detect: LoopConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub enabled: bool,
    pub optimizer: OptimizerConfig,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { enabled: true, optimizer: OptimizerConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub ransac_iterations: usize,
    pub plane_inlier_distance: f64,
    pub flatness_norm: FlatnessNorm,
    /// Sample spacing of the reference surface (mm).
    pub reference_step: f64,
    pub align_iterations: usize,
    pub align_max_distance: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            ransac_iterations: 1000,
            plane_inlier_distance: 0.1,
            flatness_norm: FlatnessNorm::L1,
            reference_step: 0.1,
            align_iterations: 50,
            align_max_distance: 1.0,
        }
    }
}

/// Gradient-model calibration: sphere presses for training and evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelStageConfig {
    pub train_sphere_diameter: f64,
    pub train_presses: usize,
    pub eval_sphere_diameter: f64,
    pub eval_presses: usize,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
}

impl Default for ModelStageConfig {
    fn default() -> Self {
        Self {
            train_sphere_diameter: 6.0,
            train_presses: 60,
            eval_sphere_diameter: 12.0,
            eval_presses: 12,
            dataset: DatasetConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Reuse cached local maps keyed by the hash of the sections that
    /// produce them.
    pub cache: bool,
    pub sensor: SensorProfile,
    pub scenario: ScenarioConfig,
    pub gradient: GradientSource,
    pub model: ModelStageConfig,
    pub poisson: PoissonConfig,
    pub correction: CorrectionConfig,
    pub registration: RegistrationParams,
    pub loops: LoopStageConfig,
    pub graph: GraphConfig,
    pub metrics: MetricsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            cache: false,
            sensor: SensorProfile::default(),
            scenario: ScenarioConfig::default(),
            gradient: GradientSource::Simulated,
            model: ModelStageConfig::default(),
            poisson: PoissonConfig::default(),
            correction: CorrectionConfig::default(),
            registration: RegistrationParams::default(),
            loops: LoopStageConfig::default(),
            graph: GraphConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let c = |e: String| Err(PipelineError::Config(e));
        self.sensor.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.registration.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.loops.detect.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.correction.partition.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if !(self.correction.alpha_clamp > 0.0) {
            return c("correction.alpha_clamp must be positive".into());
        }
        let [f0, f1] = self.scenario.force_range;
        if !(sim::FORCE_RANGE.0 <= f0 && f0 <= f1 && f1 <= sim::FORCE_RANGE.1) {
            return c(format!("scenario.force_range must lie within {:?}", sim::FORCE_RANGE));
        }
        if !(0.0..=1.0).contains(&self.scenario.min_overlap) {
            return c("scenario.min_overlap must lie in [0, 1]".into());
        }
        let n = &self.scenario.odometry_noise;
        if !(n.translation_mm >= 0.0 && n.rotation_deg >= 0.0) {
            return c("odometry noise must be non-negative".into());
        }
        if let TrajectorySpec::Loop { frames: 0, .. } | TrajectorySpec::Straight { frames: 0, .. } = self.scenario.trajectory {
            return c("trajectory needs at least one frame".into());
        }
        let o = &self.graph.optimizer;
        if o.max_iterations == 0 || !(o.lambda_init > 0.0) || !(o.lambda_factor > 1.0) || o.huber_delta.is_some_and(|d| !(d > 0.0)) {
            return c("graph optimizer settings out of range".into());
        }
        let md = &self.model;
        if !(md.train_sphere_diameter > 0.0 && md.eval_sphere_diameter > 0.0) || md.train_presses == 0 || md.eval_presses == 0 {
            return c("model sphere diameters and press counts must be positive".into());
        }
        if md.train.hidden_layers.iter().any(|&n| n == 0) || md.train.batch_size == 0 || !(md.train.learning_rate > 0.0) {
            return c("model.train settings out of range".into());
        }
        if !(0.0..1.0).contains(&md.train.validation_fraction) || !(0.0..=1.0).contains(&md.dataset.contact_fraction) {
            return c("model fractions must lie in [0, 1)".into());
        }
        let m = &self.metrics;
        if m.ransac_iterations == 0 || !(m.plane_inlier_distance > 0.0) || !(m.reference_step > 0.0) || !(m.align_max_distance > 0.0) {
            return c("metrics settings out of range".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of the whole config.
    pub fn hash(&self) -> String {
        hash_json(&serde_json::to_value(self).expect("config serializes"))
    }

    /// Hash of the sections that determine the local maps.
    fn front_hash(&self) -> String {
        let v = serde_json::json!({
            "version": env!("CARGO_PKG_VERSION"),
            "seed": self.seed,
            "sensor": self.sensor,
            "scenario": self.scenario,
            "gradient": self.gradient,
            "poisson": self.poisson,
            "correction": self.correction,
        });
        hash_json(&v)
    }
}

fn hash_json(v: &Value) -> String {
    // serde_json maps are ordered by key, so this is canonical
    let s = serde_json::to_string(v).expect("json value serializes");
    format!("{:x}", Sha256::digest(s.as_bytes()))
}

/// Parse a JSON config on top of the defaults and apply `section.key=value`
/// overrides (values are parsed as JSON, falling back to a string).
pub fn load_config(text: &str, overrides: &[String]) -> Result<PipelineConfig, PipelineError> {
    let file: Value = serde_json::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
    let mut v = serde_json::to_value(PipelineConfig::default()).expect("config serializes");
    merge(&mut v, file);
    for o in overrides {
        apply_override(&mut v, o)?;
    }
    let cfg: PipelineConfig = serde_json::from_value(v).map_err(|e| PipelineError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config_file(path: &Path, overrides: &[String]) -> Result<PipelineConfig, PipelineError> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
    load_config(&text, overrides)
}

/// Recursive object merge. A tagged section whose `kind` changes is
/// replaced wholesale, since the variants have different fields.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            if o.get("kind").is_some_and(|k| b.get("kind").is_some_and(|bk| bk != k)) {
                *b = o;
                return;
            }
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

pub fn apply_override(v: &mut Value, o: &str) -> Result<(), PipelineError> {
    let (key, raw) = o.split_once('=').ok_or_else(|| PipelineError::Config(format!("override {o:?} is not key=value")))?;
    let val: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = v;
    let parts: Vec<&str> = key.split('.').collect();
    for (k, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| PipelineError::Config(format!("override {key}: {part} is not inside an object")))?;
        if k + 1 == parts.len() {
            if *part == "kind" && obj.get("kind").is_some_and(|old| *old != val) {
                obj.clear();
            }
            obj.insert(part.to_string(), val);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(PipelineError::Config(format!("override {o:?} has an empty key")))
}

/// Output of the stages up to loop detection.
#[derive(Debug, Clone)]
pub struct FrontEnd {
    pub truth: Vec<PoseSE3>,
    pub forces: Vec<f64>,
    /// Local maps after correction (when enabled).
    pub maps: Vec<LocalTactileMap>,
    /// Per point: imaged a raised feature of the object.
    pub feature_masks: Vec<Vec<bool>>,
    pub alphas: Vec<f64>,
    pub descriptors: Vec<FrameDescriptor>,
    pub odometry: Odometry,
    pub loops: Vec<LoopCandidate>,
    pub detect_report: DetectReport,
    pub cache_hit: bool,
    pub timings: BTreeMap<String, f64>,
}

fn simulated_standard(cfg: &PipelineConfig, model: Option<&MlpModel>) -> Result<StandardFrame, PipelineError> {
    let e = |m: String| PipelineError::Stage { stage: "correct", msg: m };
    let flat = ObjectHeightfield::flat([-100.0, -100.0, 100.0, 100.0]);
    let prof = SensorProfile { depth_noise_sigma: 0.0, ..cfg.sensor.clone() };
    let spec = PressSpec::new(PoseSE3::identity(), 1.0, 0).map_err(|x| e(x.to_string()))?;
    let press = render_press_detailed(&flat, &spec, &prof).map_err(|x| e(x.to_string()))?;
    let g = match model {
        Some(m) => {
            let img = shade(&press.gradient, &prof.shading, 0);
            predict_field(m, &img, &background_image(&prof)).map_err(|x| e(x.to_string()))?
        }
        None => press.gradient,
    };
    let d = integrate_with(&g, &cfg.poisson).map_err(|x| e(x.to_string()))?;
    StandardFrame::new(depth_to_map(&d, 0), cfg.correction.partition, cfg.correction.alpha_clamp).map_err(|x| e(x.to_string()))
}

pub fn standard_frame(cfg: &PipelineConfig) -> Result<StandardFrame, PipelineError> {
    let model = load_model(cfg)?;
    match &cfg.correction.standard {
        Some(stem) => StandardFrame::load(stem).map_err(stage_err("correct")),
        None => simulated_standard(cfg, model.as_ref()),
    }
}

fn load_model(cfg: &PipelineConfig) -> Result<Option<MlpModel>, PipelineError> {
    match &cfg.gradient {
        GradientSource::Simulated => Ok(None),
        GradientSource::Model { path } => MlpModel::load(path).map(Some).map_err(stage_err("local_maps")),
    }
}

struct LocalStage {
    truth: Vec<PoseSE3>,
    forces: Vec<f64>,
    maps: Vec<LocalTactileMap>,
    feature_masks: Vec<Vec<bool>>,
    alphas: Vec<f64>,
    descriptors: Vec<FrameDescriptor>,
}

fn local_stage(cfg: &PipelineConfig, timings: &mut BTreeMap<String, f64>) -> Result<LocalStage, PipelineError> {
    let t = Instant::now();
    let obj = cfg.scenario.object.build()?;
    let truth = cfg.scenario.trajectory.poses(seed::stage(cfg.seed, "trajectory"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::stage(cfg.seed, "forces"));
    let [f0, f1] = cfg.scenario.force_range;
    let forces: Vec<f64> = if f1 > f0 {
        let u = Uniform::new_inclusive(f0, f1).expect("valid force range");
        truth.iter().map(|_| u.sample(&mut rng)).collect()
    } else {
        vec![f0; truth.len()]
    };
    let traj = sim::render_trajectory(&obj, &truth, &forces, &cfg.sensor, seed::stage(cfg.seed, "render"), cfg.scenario.min_overlap)
        .map_err(stage_err("simulate"))?;
    timings.insert("simulate".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let model = load_model(cfg)?;
    let background = background_image(&cfg.sensor);
    let shade_seed = seed::stage(cfg.seed, "shade");
    let mut maps = Vec::with_capacity(traj.frames.len());
    let mut descriptors = Vec::with_capacity(traj.frames.len());
    for (k, press) in traj.frames.iter().enumerate() {
        let g = match &model {
            Some(m) => {
                let img = shade(&press.gradient, &cfg.sensor.shading, seed::derive(shade_seed, k as u64));
                predict_field(m, &img, &background).map_err(stage_err("local_maps"))?
            }
            None => press.gradient.clone(),
        };
        descriptors.push(loop_closure::encode(&g));
        let d = integrate_with(&g, &cfg.poisson).map_err(|e| PipelineError::Stage { stage: "local_maps", msg: format!("frame {k}: {e}") })?;
        maps.push(depth_to_map(&d, k));
    }
    timings.insert("local_maps".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let mut alphas = vec![0.0; maps.len()];
    if cfg.correction.enabled {
        let std = match &cfg.correction.standard {
            Some(stem) => StandardFrame::load(stem).map_err(stage_err("correct"))?,
            None => simulated_standard(cfg, model.as_ref())?,
        };
        for (k, m) in maps.iter_mut().enumerate() {
            let (c, a) = correction::correct_frame(m, &std).map_err(|e| PipelineError::Stage { stage: "correct", msg: format!("frame {k}: {e}") })?;
            *m = c;
            alphas[k] = a;
        }
    }
    timings.insert("correct".into(), t.elapsed().as_secs_f64());
    let feature_masks = traj.frames.iter().map(|p| p.feature.clone()).collect();
    Ok(LocalStage { truth, forces: traj.forces, maps, feature_masks, alphas, descriptors })
}

fn perturb(pose: &PoseSE3, noise: &OdometryNoise, rng: &mut ChaCha8Rng) -> PoseSE3 {
    if noise.translation_mm == 0.0 && noise.rotation_deg == 0.0 {
        return *pose;
    }
    let mut draw = |s: f64| if s > 0.0 { Normal::new(0.0, s).expect("positive sigma").sample(rng) } else { 0.0 };
    let r = noise.rotation_deg.to_radians();
    let w = Vector3::new(draw(r), draw(r), draw(r));
    let t = Vector3::new(draw(noise.translation_mm), draw(noise.translation_mm), draw(noise.translation_mm));
    pose.compose(&PoseSE3::from_rotation_vector(&w, t))
}

/// Run every stage up to verified loop closures.
pub fn run_front(cfg: &PipelineConfig) -> Result<FrontEnd, PipelineError> {
    cfg.validate()?;
    let mut timings = BTreeMap::new();
    let cache_dir = cfg.output_dir.join("cache").join(cfg.front_hash());
    let cached = if cfg.cache { cache::load(&cache_dir).ok() } else { None };
    let cache_hit = cached.is_some();
    let local = match cached {
        Some(l) => l,
        None => {
            let l = local_stage(cfg, &mut timings)?;
            if cfg.cache {
                cache::store(&cache_dir, &l).map_err(stage_err("cache"))?;
            }
            l
        }
    };

    let t = Instant::now();
    let mut params = cfg.registration.clone();
    params.ransac.seed = seed::derive(seed::stage(cfg.seed, "registration"), params.ransac.seed);
    let prepared: Vec<PreparedCloud> = local
        .maps
        .iter()
        .enumerate()
        .map(|(k, m)| registration::prepare(m, &params).map_err(|e| PipelineError::Stage { stage: "odometry", msg: format!("frame {k}: {e}") }))
        .collect::<Result<_, _>>()?;
    let mut odometry = registration::sequential_odometry_prepared(&prepared, &params).map_err(stage_err("odometry"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed::stage(cfg.seed, "odometry_noise"));
    for k in 0..odometry.pairs.len() {
        let r = &mut odometry.pairs[k].result;
        let noisy = perturb(&r.transform, &cfg.scenario.odometry_noise, &mut rng);
        if noisy != r.transform {
            // the edge weight must describe the measurement actually used
            (r.fitness, r.rmse) = registration::score_alignment(&prepared[k + 1], &prepared[k], &noisy, params.icp.max_correspondence_distance);
            r.transform = noisy;
        }
        odometry.poses[k + 1] = odometry.poses[k].compose(&noisy);
    }
    timings.insert("odometry".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let (mut loops, mut detect_report) = (Vec::new(), DetectReport::default());
    if cfg.loops.enabled && local.maps.len() >= 3 {
        let (cands, rep) =
            loop_closure::detect(&local.descriptors, &odometry.poses, &cfg.loops.detect, cfg.sensor.footprint().0).map_err(stage_err("loops"))?;
        detect_report = rep;
        loops = loop_closure::verify_all(&cands, &prepared, &params, &cfg.loops.detect).map_err(stage_err("loops"))?;
    }
    timings.insert("loops".into(), t.elapsed().as_secs_f64());

    Ok(FrontEnd {
        truth: local.truth,
        forces: local.forces,
        maps: local.maps,
        feature_masks: local.feature_masks,
        alphas: local.alphas,
        descriptors: local.descriptors,
        odometry,
        loops,
        detect_report,
        cache_hit,
        timings,
    })
}

/// Transformed maps concatenated and merged per voxel (centroid, mean
/// normal); a voxel is a feature when any member is.
#[derive(Debug, Clone)]
pub struct FusedMap {
    pub map: LocalTactileMap,
    pub feature: Vec<bool>,
    pub input_points: usize,
}

pub fn fuse(maps: &[LocalTactileMap], masks: &[Vec<bool>], poses: &[PoseSE3], voxel: f64) -> FusedMap {
    let mut cells: BTreeMap<(i64, i64, i64), (Vector3<f64>, Vector3<f64>, usize, bool)> = BTreeMap::new();
    let mut input_points = 0;
    for (k, m) in maps.iter().enumerate() {
        input_points += m.len();
        let normals = m.normals();
        for (i, p) in m.points().iter().enumerate() {
            let q = poses[k].transform_point(p);
            let n = normals.map_or(Vector3::zeros(), |ns| poses[k].rotate_vector(&ns[i]));
            let feat = masks.get(k).and_then(|f| f.get(i)).copied().unwrap_or(false);
            let e = cells.entry(voxel_key(&q, voxel)).or_insert((Vector3::zeros(), Vector3::zeros(), 0, false));
            e.0 += q;
            e.1 += n;
            e.2 += 1;
            e.3 |= feat;
        }
    }
    let mut pts = Vec::with_capacity(cells.len());
    let mut nrm = Vec::with_capacity(cells.len());
    let mut feature = Vec::with_capacity(cells.len());
    for (s, n, c, f) in cells.into_values() {
        pts.push(s / c as f64);
        nrm.push(if n.norm() > 1e-12 { n.normalize() } else { Vector3::z() });
        feature.push(f);
    }
    let has_normals = maps.iter().all(|m| m.normals().is_some());
    let map = LocalTactileMap::new(pts, has_normals.then_some(nrm), 0).expect("finite centroids");
    FusedMap { map, feature, input_points }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub frames: usize,
    pub rpe_odometry: f64,
    pub rpe: f64,
    pub flatness: Option<f64>,
    pub deviation: Option<Deviation>,
    pub loops_detected: usize,
    pub loops_accepted: usize,
    pub alphas: Vec<f64>,
    pub forces: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accounting {
    pub frame_points: usize,
    pub fused_points: usize,
    pub merged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub version: String,
    pub cache_hit: bool,
    pub timings: BTreeMap<String, f64>,
    pub files: BTreeMap<String, PathBuf>,
    pub accounting: Accounting,
    pub metrics: MetricReport,
}

/// Flatness over base (non-feature) points of the fused map, against a
/// RANSAC plane.
pub fn base_flatness(fused: &FusedMap, cfg: &MetricsConfig, seed: u64) -> Option<f64> {
    let base: Vec<Vector3<f64>> = fused.map.points().iter().zip(&fused.feature).filter(|(_, f)| !**f).map(|(p, _)| *p).collect();
    let rc = RansacConfig { iterations: cfg.ransac_iterations, inlier_distance: cfg.plane_inlier_distance, seed };
    let plane = metrics::fit_plane_ransac(&base, &rc).ok()?;
    metrics::flatness_with(&base, &plane, cfg.flatness_norm).ok()
}

/// Deviation of the fused map from the object surface, after placing it by
/// the first true pose and refining by ICP.
pub fn reference_deviation(points: &[Vector3<f64>], obj: &ObjectHeightfield, cfg: &MetricsConfig) -> Option<Deviation> {
    if points.is_empty() {
        return None;
    }
    let (mut lo, mut hi) = (Vector3::repeat(f64::INFINITY), Vector3::repeat(f64::NEG_INFINITY));
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let m = 2.0 * cfg.align_max_distance;
    let reference = obj.sample_cloud([lo.x - m, lo.y - m, hi.x + m, hi.y + m], cfg.reference_step);
    if reference.is_empty() {
        return None;
    }
    let tree = KdTree::new(&reference);
    // align on an even subsample; the statistics use every point
    let stride = points.len().div_ceil(ALIGN_SAMPLES).max(1);
    let sample: Vec<Vector3<f64>> = points.iter().step_by(stride).copied().collect();
    let pose = metrics::align_to_reference(&sample, &reference, &tree, cfg.align_max_distance, cfg.align_iterations);
    let aligned: Vec<Vector3<f64>> = points.iter().map(|p| pose.transform_point(p)).collect();
    metrics::cloud_deviation(&aligned, &tree).ok()
}

const ALIGN_SAMPLES: usize = 5000;

/// Optimize (optionally), fuse, write artifacts and evaluate.
pub fn run_back(cfg: &PipelineConfig, front: &FrontEnd, optimize: bool, dir: &Path) -> Result<RunManifest, PipelineError> {
    fs::create_dir_all(dir).map_err(|x| fail("export", x))?;
    let mut timings = front.timings.clone();
    let mut files = BTreeMap::new();
    let n = front.maps.len();

    let t = Instant::now();
    let mut poses = front.odometry.poses.clone();
    let graph = pose_graph::build(n, &front.odometry.pairs, &front.loops).map_err(stage_err("optimize"))?;
    let mut report: Option<OptimizationReport> = None;
    if optimize && !front.loops.is_empty() {
        let (p, r) = pose_graph::optimize(&graph, &cfg.graph.optimizer).map_err(stage_err("optimize"))?;
        poses = p;
        report = Some(r);
    }
    timings.insert("optimize".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let mut write = |name: &str, f: &dyn Fn(&Path) -> Result<(), PipelineError>| -> Result<(), PipelineError> {
        let path = dir.join(name);
        f(&path)?;
        files.insert(name.to_string(), path);
        Ok(())
    };
    write("trajectory_truth.csv", &|p| io::write_trajectory(p, &front.truth).map_err(|x| fail("export", x)))?;
    write("trajectory_odometry.csv", &|p| io::write_trajectory(p, &front.odometry.poses).map_err(|x| fail("export", x)))?;
    write("trajectory.csv", &|p| io::write_trajectory(p, &poses).map_err(|x| fail("export", x)))?;
    write("loops.jsonl", &|p| loop_closure::write_loops_jsonl(p, &front.loops).map_err(|x| fail("export", x)))?;
    write("graph.g2o", &|p| pose_graph::write_g2o(p, &graph).map_err(|x| fail("export", x)))?;
    if let Some(r) = &report {
        write("optimization.json", &|p| fs::write(p, serde_json::to_string_pretty(r).expect("report serializes")).map_err(|x| fail("export", x)))?;
    }
    // world frame: anchor the first estimated pose at the first true pose
    let anchored: Vec<PoseSE3> = poses.iter().map(|p| front.truth[0].compose(p)).collect();
    let fused = fuse(&front.maps, &front.feature_masks, &anchored, 0.5 * cfg.registration.voxel_size);
    write("global_map.ply", &|p| io::write_ply(p, &fused.map, PlyFormat::BinaryLittleEndian).map_err(|x| fail("export", x)))?;
    timings.insert("export".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let obj = cfg.scenario.object.build()?;
    let mseed = seed::stage(cfg.seed, "metrics");
    let metrics = MetricReport {
        frames: n,
        rpe_odometry: metrics::rpe_trajectory(&front.truth, &front.odometry.poses).map_err(stage_err("evaluate"))?,
        rpe: metrics::rpe_trajectory(&front.truth, &poses).map_err(stage_err("evaluate"))?,
        flatness: base_flatness(&fused, &cfg.metrics, mseed),
        deviation: reference_deviation(fused.map.points(), &obj, &cfg.metrics),
        loops_detected: front.detect_report.after_distance,
        loops_accepted: front.loops.len(),
        alphas: front.alphas.clone(),
        forces: front.forces.clone(),
    };
    timings.insert("evaluate".into(), t.elapsed().as_secs_f64());
    let mpath = dir.join("metrics.json");
    fs::write(&mpath, serde_json::to_string_pretty(&metrics).expect("metrics serialize")).map_err(|x| fail("export", x))?;
    files.insert("metrics.json".into(), mpath);

    let manifest = RunManifest {
        config_hash: cfg.hash(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        cache_hit: front.cache_hit,
        timings,
        accounting: Accounting { frame_points: fused.input_points, fused_points: fused.map.len(), merged: fused.input_points - fused.map.len() },
        files,
        metrics,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("manifest serializes")).map_err(|x| fail("export", x))?;
    Ok(manifest)
}

pub fn run_reconstruction(cfg: &PipelineConfig) -> Result<RunManifest, PipelineError> {
    let front = run_front(cfg)?;
    run_back(cfg, &front, cfg.graph.enabled, &cfg.output_dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub correction: bool,
    pub optimization: bool,
    pub rpe: f64,
    pub flatness: Option<f64>,
    pub e_mean: Option<f64>,
    pub e_std: Option<f64>,
    pub config_hash: String,
}

/// The 2×2 grid over correction and optimization with everything else
/// fixed. Rows are ordered (off, off), (off, on), (on, off), (on, on).
pub fn run_ablation(cfg: &PipelineConfig) -> Result<Vec<AblationRow>, PipelineError> {
    let mut rows = Vec::new();
    for correction in [false, true] {
        let mut c = cfg.clone();
        c.correction.enabled = correction;
        let front = run_front(&c)?;
        for optimization in [false, true] {
            let mut c = c.clone();
            c.graph.enabled = optimization;
            let dir = cfg.output_dir.join(format!("correction_{}_optimization_{}", on_off(correction), on_off(optimization)));
            c.output_dir = dir.clone();
            let m = run_back(&c, &front, optimization, &dir)?;
            rows.push(AblationRow {
                correction,
                optimization,
                rpe: m.metrics.rpe,
                flatness: m.metrics.flatness,
                e_mean: m.metrics.deviation.map(|d| d.mean),
                e_std: m.metrics.deviation.map(|d| d.std),
                config_hash: base_hash(&c),
            });
        }
    }
    fs::create_dir_all(&cfg.output_dir).map_err(stage_err("export"))?;
    fs::write(cfg.output_dir.join("ablation.json"), serde_json::to_string_pretty(&rows).expect("rows serialize")).map_err(stage_err("export"))?;
    fs::write(cfg.output_dir.join("ablation.txt"), ablation_table(&rows)).map_err(stage_err("export"))?;
    Ok(rows)
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

/// Config hash with the two ablation toggles and the output path masked.
pub fn base_hash(cfg: &PipelineConfig) -> String {
    let mut c = cfg.clone();
    c.correction.enabled = true;
    c.graph.enabled = true;
    c.output_dir = PathBuf::new();
    c.hash()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    let mut s = format!("{:<11} {:<13} {:>10} {:>10} {:>10} {:>10}\n", "correction", "optimization", "rpe_t", "flatness", "e_mean", "e_std");
    for r in rows {
        s += &format!(
            "{:<11} {:<13} {:>10.4} {:>10} {:>10} {:>10}\n",
            on_off(r.correction),
            on_off(r.optimization),
            r.rpe,
            opt(r.flatness),
            opt(r.e_mean),
            opt(r.e_std)
        );
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub points: usize,
    pub flatness: f64,
    pub rpe: Option<f64>,
    pub deviation: Option<Deviation>,
}

/// Metrics of an exported map and trajectory, optionally against a true
/// trajectory and a reference cloud.
pub fn evaluate_files(
    map: &Path,
    trajectory: &Path,
    truth: Option<&Path>,
    reference: Option<&Path>,
    cfg: &MetricsConfig,
    seed: u64,
) -> Result<EvaluationReport, PipelineError> {
    let m = io::read_ply(map).map_err(|x| fail("evaluate", x))?;
    let est = io::read_trajectory(trajectory).map_err(|x| fail("evaluate", x))?;
    let rc = RansacConfig { iterations: cfg.ransac_iterations, inlier_distance: cfg.plane_inlier_distance, seed };
    let plane = metrics::fit_plane_ransac(m.points(), &rc).map_err(|x| fail("evaluate", x))?;
    let flatness = metrics::flatness_with(m.points(), &plane, cfg.flatness_norm).map_err(|x| fail("evaluate", x))?;
    let rpe = match truth {
        Some(p) => Some(metrics::rpe_trajectory(&io::read_trajectory(p).map_err(|x| fail("evaluate", x))?, &est).map_err(|x| fail("evaluate", x))?),
        None => None,
    };
    let deviation = match reference {
        Some(p) => {
            let r = io::read_ply(p).map_err(|x| fail("evaluate", x))?;
            let tree = KdTree::new(r.points());
            let pose = metrics::align_to_reference(m.points(), r.points(), &tree, cfg.align_max_distance, cfg.align_iterations);
            let aligned: Vec<Vector3<f64>> = m.points().iter().map(|p| pose.transform_point(p)).collect();
            Some(metrics::cloud_deviation(&aligned, &tree).map_err(|x| fail("evaluate", x))?)
        }
        None => None,
    };
    Ok(EvaluationReport { points: m.len(), flatness, rpe, deviation })
}

/// Render every frame of the scenario and export the uncorrected local
/// maps, the true trajectory, the forces and the object heightfield.
pub fn simulate(cfg: &PipelineConfig, dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    cfg.validate()?;
    let mut c = cfg.clone();
    c.correction.enabled = false;
    let mut timings = BTreeMap::new();
    let local = local_stage(&c, &mut timings)?;
    let frames = dir.join("frames");
    fs::create_dir_all(&frames).map_err(stage_err("export"))?;
    let mut files = Vec::new();
    for (k, m) in local.maps.iter().enumerate() {
        let p = frames.join(format!("frame_{k:04}.ply"));
        io::write_ply(&p, m, PlyFormat::BinaryLittleEndian).map_err(stage_err("export"))?;
        files.push(p);
    }
    let p = dir.join("trajectory_truth.csv");
    io::write_trajectory(&p, &local.truth).map_err(stage_err("export"))?;
    files.push(p);
    let p = dir.join("forces.json");
    fs::write(&p, serde_json::to_string_pretty(&local.forces).expect("forces serialize")).map_err(stage_err("export"))?;
    files.push(p);
    let obj = cfg.scenario.object.build()?;
    let grid = obj.to_grid(obj.cell_size()).map_err(stage_err("export"))?;
    let top = obj.max_height().max(0.0);
    let p = dir.join("object.png");
    ObjectHeightfield::write_png(&grid, &p, (top / 65535.0).max(1e-6)).map_err(stage_err("export"))?;
    files.push(p);
    Ok(files)
}

/// Capture the standard frame (flat object, force 1.0, no noise) and save
/// it under `stem`.
pub fn calibrate_standard(cfg: &PipelineConfig, stem: &Path) -> Result<StandardFrame, PipelineError> {
    cfg.validate()?;
    let std = simulated_standard(cfg, load_model(cfg)?.as_ref())?;
    if let Some(d) = stem.parent() {
        fs::create_dir_all(d).map_err(stage_err("calibrate"))?;
    }
    std.save(stem).map_err(stage_err("calibrate"))?;
    Ok(std)
}

/// Sphere-press training set with automatic labels.
pub fn build_model_dataset(cfg: &PipelineConfig) -> Result<(Vec<PixelSample>, DatasetSummary), PipelineError> {
    cfg.validate()?;
    let m = &cfg.model;
    let presses = render_sphere_calibration_set(m.train_sphere_diameter, m.train_presses, &cfg.sensor, seed::stage(cfg.seed, "calibration"))
        .map_err(stage_err("dataset"))?;
    let background = zero_press_sample(&cfg.sensor, seed::stage(cfg.seed, "background")).image;
    let dc = DatasetConfig { seed: seed::derive(seed::stage(cfg.seed, "dataset"), m.dataset.seed), ..m.dataset.clone() };
    build_dataset(&presses, &background, m.train_sphere_diameter, &dc).map_err(stage_err("dataset"))
}

pub fn train_model(cfg: &PipelineConfig, samples: &[PixelSample]) -> Result<(MlpModel, TrainReport), PipelineError> {
    let m = &cfg.model;
    let tc = TrainConfig { seed: seed::derive(seed::stage(cfg.seed, "train"), m.train.seed), ..m.train.clone() };
    train(samples, &tc).map_err(stage_err("train"))
}

/// Pitch/yaw agreement on presses of the evaluation sphere.
pub fn evaluate_model(cfg: &PipelineConfig, model: &MlpModel) -> Result<PitchYawFit, PipelineError> {
    let m = &cfg.model;
    let presses = render_sphere_calibration_set(m.eval_sphere_diameter, m.eval_presses, &cfg.sensor, seed::stage(cfg.seed, "model_eval"))
        .map_err(stage_err("model_eval"))?;
    let background = zero_press_sample(&cfg.sensor, seed::stage(cfg.seed, "background")).image;
    let pairs = presses
        .iter()
        .map(|s| Ok((predict_field(model, &s.image, &background).map_err(stage_err("model_eval"))?, s.gradient.clone())))
        .collect::<Result<Vec<_>, PipelineError>>()?;
    evaluate_images(&pairs, cfg.sensor.pixel_pitch).map_err(stage_err("model_eval"))
}

mod cache {
    //! Bit-exact binary cache of the local-map stage.

    use super::*;

    const MAGIC: &[u8; 8] = b"TACLOC01";

    struct Writer(Vec<u8>);

    impl Writer {
        fn u64(&mut self, v: u64) {
            self.0.extend(v.to_le_bytes());
        }
        fn f64(&mut self, v: f64) {
            self.0.extend(v.to_le_bytes());
        }
        fn vec3(&mut self, v: &Vector3<f64>) {
            v.iter().for_each(|c| self.f64(*c));
        }
    }

    struct Reader<'a>(&'a [u8]);

    impl Reader<'_> {
        fn take(&mut self, n: usize) -> Result<&[u8], String> {
            if self.0.len() < n {
                return Err("truncated cache".into());
            }
            let (a, b) = self.0.split_at(n);
            self.0 = b;
            Ok(a)
        }
        fn u64(&mut self) -> Result<u64, String> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
        }
        fn f64(&mut self) -> Result<f64, String> {
            Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
        }
        fn vec3(&mut self) -> Result<Vector3<f64>, String> {
            Ok(Vector3::new(self.f64()?, self.f64()?, self.f64()?))
        }
    }

    pub(super) fn store(dir: &Path, l: &LocalStage) -> Result<(), String> {
        fs::create_dir_all(dir).map_err(|e| e.to_string())?;
        let mut w = Writer(MAGIC.to_vec());
        w.u64(l.maps.len() as u64);
        for k in 0..l.maps.len() {
            l.truth[k].to_row_major().iter().for_each(|v| w.f64(*v));
            w.f64(l.forces[k]);
            w.f64(l.alphas[k]);
            let m = &l.maps[k];
            let grid = m.grid().ok_or("cached maps must be organized")?;
            w.u64(grid.width as u64);
            w.u64(grid.height as u64);
            let normals = m.normals().ok_or("cached maps need normals")?;
            for (p, n) in m.points().iter().zip(normals) {
                w.vec3(p);
                w.vec3(n);
            }
            w.0.extend(l.feature_masks[k].iter().map(|&b| b as u8));
            w.0.push(l.descriptors[k].textureless as u8);
            w.u64(l.descriptors[k].len() as u64);
            l.descriptors[k].values().iter().for_each(|v| w.f64(*v));
        }
        let tmp = dir.join("local.bin.tmp");
        fs::write(&tmp, &w.0).map_err(|e| e.to_string())?;
        fs::rename(&tmp, dir.join("local.bin")).map_err(|e| e.to_string())
    }

    pub(super) fn load(dir: &Path) -> Result<LocalStage, String> {
        let bytes = fs::read(dir.join("local.bin")).map_err(|e| e.to_string())?;
        let mut r = Reader(&bytes);
        if r.take(8)? != MAGIC {
            return Err("bad cache magic".into());
        }
        let n = r.u64()? as usize;
        let mut l = LocalStage { truth: vec![], forces: vec![], maps: vec![], feature_masks: vec![], alphas: vec![], descriptors: vec![] };
        for k in 0..n {
            let mut row = [0.0; 12];
            for v in row.iter_mut() {
                *v = r.f64()?;
            }
            l.truth.push(PoseSE3::from_row_major(&row).map_err(|e| e.to_string())?);
            l.forces.push(r.f64()?);
            l.alphas.push(r.f64()?);
            let (w, h) = (r.u64()? as usize, r.u64()? as usize);
            let mut pts = Vec::with_capacity(w * h);
            let mut nrm = Vec::with_capacity(w * h);
            for _ in 0..w * h {
                pts.push(r.vec3()?);
                nrm.push(r.vec3()?);
            }
            let grid = crate::geometry::GridShape { width: w, height: h };
            l.maps.push(LocalTactileMap::organized(pts, Some(nrm), grid, k).map_err(|e| e.to_string())?);
            l.feature_masks.push(r.take(w * h)?.iter().map(|&b| b != 0).collect());
            let textureless = r.take(1)?[0] != 0;
            let len = r.u64()? as usize;
            let vals = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
            let mut d = FrameDescriptor::from_values(vals).map_err(|e| e.to_string())?;
            d.textureless = textureless;
            l.descriptors.push(d);
        }
        Ok(l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_and_validates() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back = load_config(&text, &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn overrides_and_rejections() {
        let text = serde_json::to_string(&PipelineConfig::default()).unwrap();
        let cfg = load_config(&text, &["registration.voxel_size=0.5".into(), "seed=9".into()]).unwrap();
        assert_eq!((cfg.registration.voxel_size, cfg.seed), (0.5, 9));
        assert!(matches!(load_config(&text, &["registration.voxel_size=0".into()]), Err(PipelineError::Config(_))));
        assert!(matches!(load_config(&text, &["registration.bogus=1".into()]), Err(PipelineError::Config(_))));
        assert!(matches!(load_config(r#"{"unknown": 1}"#, &[]), Err(PipelineError::Config(_))));
        assert!(matches!(load_config(&text, &["novalue".into()]), Err(PipelineError::Config(_))));
        let partial = load_config(r#"{"seed": 4, "scenario": {"object": {"kind": "flat", "extent": [-30, -30, 30, 30]}}}"#, &[]).unwrap();
        assert_eq!(partial.seed, 4);
        assert_eq!(partial.registration, RegistrationParams::default());
        assert_eq!(partial.scenario.object, ObjectSpec::Flat { extent: [-30.0, -30.0, 30.0, 30.0] });
        let frames = load_config("{}", &["scenario.trajectory.frames=7".into()]).unwrap();
        assert!(matches!(frames.scenario.trajectory, TrajectorySpec::Loop { frames: 7, .. }));
        let straight: Vec<String> = ["kind=straight", "frames=5", "start=[0,0]", "step=1.5", "heading_deg=0", "yaw_deg=0"]
            .iter()
            .map(|s| format!("scenario.trajectory.{s}"))
            .collect();
        let cfg = load_config("{}", &straight).unwrap();
        assert!(matches!(cfg.scenario.trajectory, TrajectorySpec::Straight { frames: 5, .. }));
    }

    #[test]
    fn fuse_merges_coincident_points() {
        let pts = vec![Vector3::new(0.01, 0.01, 0.0), Vector3::new(1.0, 0.0, 0.0)];
        let m = LocalTactileMap::new(pts, Some(vec![Vector3::z(); 2]), 0).unwrap();
        let f = fuse(&[m.clone(), m], &[vec![false, true], vec![false, false]], &[PoseSE3::identity(); 2], 0.2);
        assert_eq!(f.input_points, 4);
        assert_eq!(f.map.len(), 2);
        assert_eq!(f.feature, vec![false, true]);
    }
}
