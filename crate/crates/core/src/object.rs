//! Virtual objects pressed by the simulated sensor.
//!
//! An object is a height function `z = h(x, y)` (mm) over a rectangular
//! support. It is either a sampled grid (loaded from a 16-bit PNG) or a
//! procedural shape evaluated analytically, so that rendered gradients are
//! exact.

use std::fs;
use std::io::BufReader;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObjectError {
    #[error("cell size must be positive (got {0})")]
    CellSize(f64),
    #[error("height grid has {got} values, expected {expected}")]
    GridSize { expected: usize, got: usize },
    #[error("non-finite height at index {0}")]
    NonFinite(usize),
    #[error("empty extent {0:?}")]
    Extent([f64; 4]),
    #[error("character {0:?} is not in the stroke font")]
    Glyph(char),
    #[error("{path}: {msg}")]
    File { path: String, msg: String },
}

/// Height, ∂h/∂x, ∂h/∂y.
pub type HeightSample = (f64, f64, f64);

/// Regularly sampled height grid with bilinear interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightGrid {
    width: usize,
    height: usize,
    cell_size: f64,
    origin: [f64; 2],
    z: Vec<f64>,
}

impl HeightGrid {
    /// `z[j * width + i]` is the height at `origin + (i, j) * cell_size`.
    pub fn new(width: usize, height: usize, cell_size: f64, origin: [f64; 2], z: Vec<f64>) -> Result<Self, ObjectError> {
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(ObjectError::CellSize(cell_size));
        }
        if width < 2 || height < 2 || z.len() != width * height {
            return Err(ObjectError::GridSize { expected: width.max(2) * height.max(2), got: z.len() });
        }
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return Err(ObjectError::NonFinite(i));
        }
        Ok(Self { width, height, cell_size, origin, z })
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn extent(&self) -> [f64; 4] {
        [
            self.origin[0],
            self.origin[1],
            self.origin[0] + (self.width - 1) as f64 * self.cell_size,
            self.origin[1] + (self.height - 1) as f64 * self.cell_size,
        ]
    }

    fn sample(&self, x: f64, y: f64) -> HeightSample {
        let fx = ((x - self.origin[0]) / self.cell_size).clamp(0.0, (self.width - 1) as f64);
        let fy = ((y - self.origin[1]) / self.cell_size).clamp(0.0, (self.height - 1) as f64);
        let i = (fx.floor() as usize).min(self.width - 2);
        let j = (fy.floor() as usize).min(self.height - 2);
        let (tx, ty) = (fx - i as f64, fy - j as f64);
        let at = |a: usize, b: usize| self.z[b * self.width + a];
        let (z00, z10, z01, z11) = (at(i, j), at(i + 1, j), at(i, j + 1), at(i + 1, j + 1));
        let h = z00 * (1.0 - tx) * (1.0 - ty) + z10 * tx * (1.0 - ty) + z01 * (1.0 - tx) * ty + z11 * tx * ty;
        let hx = ((z10 - z00) * (1.0 - ty) + (z11 - z01) * ty) / self.cell_size;
        let hy = ((z01 - z00) * (1.0 - tx) + (z11 - z10) * tx) / self.cell_size;
        (h, hx, hy)
    }
}

/// Sidecar for PNG heightfields: `height = value * scale`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PngHeightMeta {
    pub scale: f64,
    pub cell_size: f64,
    #[serde(default)]
    pub origin: [f64; 2],
}

/// Raised-cosine ridge around the segment `a`–`b` (a dot when `a == b`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub radius: f64,
    pub height: f64,
}

impl Feature {
    pub fn dot(center: [f64; 2], radius: f64, height: f64) -> Self {
        Self { a: center, b: center, radius, height }
    }

    fn bbox(&self) -> [f64; 4] {
        [
            self.a[0].min(self.b[0]) - self.radius,
            self.a[1].min(self.b[1]) - self.radius,
            self.a[0].max(self.b[0]) + self.radius,
            self.a[1].max(self.b[1]) + self.radius,
        ]
    }

    fn eval(&self, x: f64, y: f64) -> Option<HeightSample> {
        let (dx, dy) = (self.b[0] - self.a[0], self.b[1] - self.a[1]);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 { (((x - self.a[0]) * dx + (y - self.a[1]) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
        let (px, py) = (x - (self.a[0] + t * dx), y - (self.a[1] + t * dy));
        let d = px.hypot(py);
        if d >= self.radius {
            return None;
        }
        let k = std::f64::consts::PI / self.radius;
        let h = 0.5 * self.height * (1.0 + (k * d).cos());
        if d == 0.0 {
            return Some((h, 0.0, 0.0));
        }
        let slope = -0.5 * self.height * k * (k * d).sin();
        Some((h, slope * px / d, slope * py / d))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Flat,
    /// Sphere cap of `radius` rising from the base plane at `center`.
    Hemisphere { center: [f64; 2], radius: f64 },
    /// Union (pointwise max) of raised-cosine features over a flat base.
    Relief { features: Vec<Feature> },
}

/// Uniform bucket grid over feature bounding boxes.
#[derive(Debug, Clone, PartialEq)]
struct Buckets {
    origin: [f64; 2],
    cell: f64,
    nx: usize,
    ny: usize,
    cells: Vec<Vec<u32>>,
}

impl Buckets {
    fn build(features: &[Feature], extent: [f64; 4]) -> Self {
        let max_r = features.iter().map(|f| f.radius).fold(0.5, f64::max);
        let cell = 2.0 * max_r;
        let nx = (((extent[2] - extent[0]) / cell).ceil() as usize).max(1);
        let ny = (((extent[3] - extent[1]) / cell).ceil() as usize).max(1);
        let mut cells = vec![Vec::new(); nx * ny];
        let origin = [extent[0], extent[1]];
        for (k, f) in features.iter().enumerate() {
            let bb = f.bbox();
            let (i0, j0) = Self::index(origin, cell, nx, ny, bb[0], bb[1]);
            let (i1, j1) = Self::index(origin, cell, nx, ny, bb[2], bb[3]);
            for j in j0..=j1 {
                for i in i0..=i1 {
                    cells[j * nx + i].push(k as u32);
                }
            }
        }
        Self { origin, cell, nx, ny, cells }
    }

    fn index(origin: [f64; 2], cell: f64, nx: usize, ny: usize, x: f64, y: f64) -> (usize, usize) {
        let i = ((x - origin[0]) / cell).floor().clamp(0.0, (nx - 1) as f64) as usize;
        let j = ((y - origin[1]) / cell).floor().clamp(0.0, (ny - 1) as f64) as usize;
        (i, j)
    }

    fn candidates(&self, x: f64, y: f64) -> &[u32] {
        let (i, j) = Self::index(self.origin, self.cell, self.nx, self.ny, x, y);
        &self.cells[j * self.nx + i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProceduralObject {
    shape: Shape,
    extent: [f64; 4],
    cell_size: f64,
    buckets: Option<Buckets>,
}

impl ProceduralObject {
    /// `extent = [xmin, ymin, xmax, ymax]`; `cell_size` is the sampling step
    /// used when the object is densely sampled as a reference cloud.
    pub fn new(shape: Shape, extent: [f64; 4], cell_size: f64) -> Result<Self, ObjectError> {
        if !(extent[2] > extent[0] && extent[3] > extent[1]) {
            return Err(ObjectError::Extent(extent));
        }
        if !(cell_size > 0.0 && cell_size.is_finite()) {
            return Err(ObjectError::CellSize(cell_size));
        }
        let buckets = match &shape {
            Shape::Relief { features } => Some(Buckets::build(features, extent)),
            _ => None,
        };
        Ok(Self { shape, extent, cell_size, buckets })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    fn sample(&self, x: f64, y: f64) -> HeightSample {
        match &self.shape {
            Shape::Flat => (0.0, 0.0, 0.0),
            Shape::Hemisphere { center, radius } => {
                let (dx, dy) = (x - center[0], y - center[1]);
                let q = radius * radius - dx * dx - dy * dy;
                if q <= 0.0 {
                    return (0.0, 0.0, 0.0);
                }
                let h = q.sqrt();
                (h, -dx / h, -dy / h)
            }
            Shape::Relief { features } => {
                let buckets = self.buckets.as_ref().expect("relief buckets");
                let mut best = (0.0, 0.0, 0.0);
                for &k in buckets.candidates(x, y) {
                    if let Some(s) = features[k as usize].eval(x, y) {
                        if s.0 > best.0 {
                            best = s;
                        }
                    }
                }
                best
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectHeightfield {
    Grid(HeightGrid),
    Procedural(ProceduralObject),
}

impl ObjectHeightfield {
    pub fn flat(extent: [f64; 4]) -> Self {
        Self::Procedural(ProceduralObject::new(Shape::Flat, extent, 0.1).expect("valid flat extent"))
    }

    pub fn hemisphere(radius: f64, margin: f64) -> Self {
        let e = radius + margin;
        let shape = Shape::Hemisphere { center: [0.0, 0.0], radius };
        Self::Procedural(ProceduralObject::new(shape, [-e, -e, e, e], 0.1).expect("valid hemisphere extent"))
    }

    pub fn extent(&self) -> [f64; 4] {
        match self {
            Self::Grid(g) => g.extent(),
            Self::Procedural(p) => p.extent,
        }
    }

    pub fn cell_size(&self) -> f64 {
        match self {
            Self::Grid(g) => g.cell_size,
            Self::Procedural(p) => p.cell_size,
        }
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let e = self.extent();
        x >= e[0] && x <= e[2] && y >= e[1] && y <= e[3]
    }

    /// Height and its partial derivatives at world `(x, y)`.
    pub fn sample(&self, x: f64, y: f64) -> HeightSample {
        match self {
            Self::Grid(g) => g.sample(x, y),
            Self::Procedural(p) => p.sample(x, y),
        }
    }

    pub fn height(&self, x: f64, y: f64) -> f64 {
        self.sample(x, y).0
    }

    /// Height of the flat base the features stand on.
    pub fn base_height(&self) -> f64 {
        match self {
            Self::Grid(g) => g.z.iter().copied().fold(f64::INFINITY, f64::min),
            Self::Procedural(_) => 0.0,
        }
    }

    pub fn max_height(&self) -> f64 {
        match self {
            Self::Grid(g) => g.z.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            Self::Procedural(p) => match &p.shape {
                Shape::Flat => 0.0,
                Shape::Hemisphere { radius, .. } => *radius,
                Shape::Relief { features } => features.iter().map(|f| f.height).fold(0.0, f64::max),
            },
        }
    }

    /// Dense reference samples `(x, y, h)` at `step` spacing inside `region`
    /// (`[xmin, ymin, xmax, ymax]`, clipped to the support).
    pub fn sample_cloud(&self, region: [f64; 4], step: f64) -> Vec<nalgebra::Vector3<f64>> {
        let e = self.extent();
        let r = [region[0].max(e[0]), region[1].max(e[1]), region[2].min(e[2]), region[3].min(e[3])];
        let mut out = Vec::new();
        let nx = ((r[2] - r[0]) / step).floor() as i64;
        let ny = ((r[3] - r[1]) / step).floor() as i64;
        for j in 0..=ny.max(-1) {
            for i in 0..=nx.max(-1) {
                let (x, y) = (r[0] + i as f64 * step, r[1] + j as f64 * step);
                out.push(nalgebra::Vector3::new(x, y, self.height(x, y)));
            }
        }
        out
    }

    /// Load a 16-bit grayscale PNG with a `<file>.json` sidecar
    /// ([`PngHeightMeta`]). Row 0 of the image is `y = origin.y`.
    pub fn from_png(path: &Path) -> Result<Self, ObjectError> {
        let err = |msg: String| ObjectError::File { path: path.display().to_string(), msg };
        let meta_path = path.with_extension("json");
        let meta: PngHeightMeta = serde_json::from_str(
            &fs::read_to_string(&meta_path).map_err(|e| err(format!("sidecar: {e}")))?,
        )
        .map_err(|e| err(format!("sidecar: {e}")))?;
        let file = fs::File::open(path).map_err(|e| err(e.to_string()))?;
        let decoder = png::Decoder::new(BufReader::new(file));
        let mut reader = decoder.read_info().map_err(|e| err(e.to_string()))?;
        let size = reader.output_buffer_size().ok_or_else(|| err("image too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf).map_err(|e| err(e.to_string()))?;
        if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
            return Err(err(format!("expected 16-bit grayscale, got {:?} {:?}", info.color_type, info.bit_depth)));
        }
        let (w, h) = (info.width as usize, info.height as usize);
        let z = buf[..w * h * 2]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 * meta.scale)
            .collect();
        Ok(Self::Grid(HeightGrid::new(w, h, meta.cell_size, meta.origin, z)?))
    }

    /// Write a grid as 16-bit PNG plus sidecar; heights are quantized to
    /// `scale` and clamped to `[0, 65535 * scale]`.
    pub fn write_png(grid: &HeightGrid, path: &Path, scale: f64) -> Result<(), ObjectError> {
        let err = |msg: String| ObjectError::File { path: path.display().to_string(), msg };
        let file = fs::File::create(path).map_err(|e| err(e.to_string()))?;
        let mut enc = png::Encoder::new(std::io::BufWriter::new(file), grid.width as u32, grid.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let data: Vec<u8> = grid
            .z
            .iter()
            .flat_map(|v| ((v / scale).round().clamp(0.0, 65535.0) as u16).to_be_bytes())
            .collect();
        enc.write_header()
            .and_then(|mut w| w.write_image_data(&data))
            .map_err(|e| err(e.to_string()))?;
        let meta = PngHeightMeta { scale, cell_size: grid.cell_size, origin: grid.origin };
        fs::write(path.with_extension("json"), serde_json::to_string_pretty(&meta).expect("meta serializes"))
            .map_err(|e| err(e.to_string()))
    }

    /// Rasterize onto a grid of the given cell size covering the support.
    pub fn to_grid(&self, cell_size: f64) -> Result<HeightGrid, ObjectError> {
        let e = self.extent();
        let w = ((e[2] - e[0]) / cell_size).floor() as usize + 1;
        let h = ((e[3] - e[1]) / cell_size).floor() as usize + 1;
        let mut z = Vec::with_capacity(w * h);
        for j in 0..h {
            for i in 0..w {
                z.push(self.height(e[0] + i as f64 * cell_size, e[1] + j as f64 * cell_size));
            }
        }
        HeightGrid::new(w, h, cell_size, [e[0], e[1]], z)
    }
}

/// Parameters of a randomly textured relief plate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReliefParams {
    /// `[xmin, ymin, xmax, ymax]` (mm).
    pub extent: [f64; 4],
    /// Features per mm².
    pub density: f64,
    pub radius_range: [f64; 2],
    pub height_range: [f64; 2],
    /// Fraction of features that are short ridges rather than dots.
    pub ridge_fraction: f64,
    pub ridge_length_range: [f64; 2],
    pub seed: u64,
}

impl Default for ReliefParams {
    fn default() -> Self {
        Self {
            extent: [-40.0, -40.0, 40.0, 40.0],
            density: 0.06,
            radius_range: [0.5, 1.1],
            height_range: [0.2, 0.45],
            ridge_fraction: 0.4,
            ridge_length_range: [1.0, 3.0],
            seed: 1,
        }
    }
}

pub fn relief_plate(p: &ReliefParams) -> Result<ObjectHeightfield, ObjectError> {
    let e = p.extent;
    let area = (e[2] - e[0]) * (e[3] - e[1]);
    let n = (area * p.density).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut features = Vec::with_capacity(n);
    for _ in 0..n {
        let c = [rng.random_range(e[0]..e[2]), rng.random_range(e[1]..e[3])];
        let radius = rng.random_range(p.radius_range[0]..=p.radius_range[1]);
        let height = rng.random_range(p.height_range[0]..=p.height_range[1]);
        if rng.random::<f64>() < p.ridge_fraction {
            let len = rng.random_range(p.ridge_length_range[0]..=p.ridge_length_range[1]);
            let th = rng.random_range(0.0..std::f64::consts::PI);
            let (dx, dy) = (0.5 * len * th.cos(), 0.5 * len * th.sin());
            features.push(Feature { a: [c[0] - dx, c[1] - dy], b: [c[0] + dx, c[1] + dy], radius, height });
        } else {
            features.push(Feature::dot(c, radius, height));
        }
    }
    Ok(ObjectHeightfield::Procedural(ProceduralObject::new(Shape::Relief { features }, e, 0.1)?))
}

/// Embossed text: each glyph stroke becomes a raised-cosine ridge.
/// `char_height` is the cap height (mm); the text is centered on the origin.
pub fn embossed_text(text: &str, char_height: f64, stroke_radius: f64, relief: f64, margin: f64) -> Result<ObjectHeightfield, ObjectError> {
    let advance = 0.8 * char_height;
    let total = advance * text.chars().count() as f64 - 0.2 * char_height;
    let x0 = -0.5 * total;
    let y0 = -0.5 * char_height;
    let s = char_height / 6.0; // glyphs are drawn on a 4×6 unit box
    let mut features = Vec::new();
    for (k, ch) in text.chars().enumerate() {
        let strokes = glyph(ch).ok_or(ObjectError::Glyph(ch))?;
        let ox = x0 + k as f64 * advance;
        for poly in strokes {
            for w in poly.windows(2) {
                // font rows grow downward; flip to make text read in +y up
                let a = [ox + w[0].0 * s, y0 + (6.0 - w[0].1) * s];
                let b = [ox + w[1].0 * s, y0 + (6.0 - w[1].1) * s];
                features.push(Feature { a, b, radius: stroke_radius, height: relief });
            }
        }
    }
    let ex = 0.5 * total + margin;
    let ey = 0.5 * char_height + margin;
    Ok(ObjectHeightfield::Procedural(ProceduralObject::new(Shape::Relief { features }, [-ex, -ey, ex, ey], 0.1)?))
}

type Stroke = &'static [(f64, f64)];

/// Polyline glyphs on a 4 wide × 6 tall grid, y downward.
fn glyph(c: char) -> Option<&'static [Stroke]> {
    Some(match c.to_ascii_uppercase() {
        ' ' => &[],
        'A' => &[&[(0., 6.), (2., 0.), (4., 6.)], &[(1., 3.5), (3., 3.5)]],
        'B' => &[&[(0., 0.), (0., 6.), (3., 6.), (4., 4.5), (3., 3.), (0., 3.)], &[(0., 0.), (3., 0.), (4., 1.5), (3., 3.)]],
        'C' => &[&[(4., 0.5), (3., 0.), (1., 0.), (0., 1.5), (0., 4.5), (1., 6.), (3., 6.), (4., 5.5)]],
        'D' => &[&[(0., 0.), (0., 6.), (2.5, 6.), (4., 4.5), (4., 1.5), (2.5, 0.), (0., 0.)]],
        'E' => &[&[(4., 0.), (0., 0.), (0., 6.), (4., 6.)], &[(0., 3.), (3., 3.)]],
        'F' => &[&[(4., 0.), (0., 0.), (0., 6.)], &[(0., 3.), (3., 3.)]],
        'G' => &[&[(4., 0.5), (3., 0.), (1., 0.), (0., 1.5), (0., 4.5), (1., 6.), (3., 6.), (4., 5.), (4., 3.5), (2., 3.5)]],
        'H' => &[&[(0., 0.), (0., 6.)], &[(4., 0.), (4., 6.)], &[(0., 3.), (4., 3.)]],
        'I' => &[&[(1., 0.), (3., 0.)], &[(2., 0.), (2., 6.)], &[(1., 6.), (3., 6.)]],
        'J' => &[&[(1., 0.), (4., 0.)], &[(3., 0.), (3., 5.), (2., 6.), (1., 6.), (0., 5.)]],
        'K' => &[&[(0., 0.), (0., 6.)], &[(4., 0.), (0., 3.5)], &[(1.2, 2.7), (4., 6.)]],
        'L' => &[&[(0., 0.), (0., 6.), (4., 6.)]],
        'M' => &[&[(0., 6.), (0., 0.), (2., 3.), (4., 0.), (4., 6.)]],
        'N' => &[&[(0., 6.), (0., 0.), (4., 6.), (4., 0.)]],
        'O' => &[&[(1., 0.), (3., 0.), (4., 1.5), (4., 4.5), (3., 6.), (1., 6.), (0., 4.5), (0., 1.5), (1., 0.)]],
        'P' => &[&[(0., 6.), (0., 0.), (3., 0.), (4., 1.), (4., 2.), (3., 3.), (0., 3.)]],
        'Q' => &[&[(1., 0.), (3., 0.), (4., 1.5), (4., 4.5), (3., 6.), (1., 6.), (0., 4.5), (0., 1.5), (1., 0.)], &[(2.5, 4.5), (4., 6.)]],
        'R' => &[&[(0., 6.), (0., 0.), (3., 0.), (4., 1.), (4., 2.), (3., 3.), (0., 3.)], &[(2., 3.), (4., 6.)]],
        'S' => &[&[(4., 0.5), (3., 0.), (1., 0.), (0., 1.), (0., 2.), (1., 3.), (3., 3.), (4., 4.), (4., 5.), (3., 6.), (1., 6.), (0., 5.5)]],
        'T' => &[&[(0., 0.), (4., 0.)], &[(2., 0.), (2., 6.)]],
        'U' => &[&[(0., 0.), (0., 5.), (1., 6.), (3., 6.), (4., 5.), (4., 0.)]],
        'V' => &[&[(0., 0.), (2., 6.), (4., 0.)]],
        'W' => &[&[(0., 0.), (1., 6.), (2., 3.), (3., 6.), (4., 0.)]],
        'X' => &[&[(0., 0.), (4., 6.)], &[(4., 0.), (0., 6.)]],
        'Y' => &[&[(0., 0.), (2., 3.), (4., 0.)], &[(2., 3.), (2., 6.)]],
        'Z' => &[&[(0., 0.), (4., 0.), (0., 6.), (4., 6.)]],
        '0' => &[&[(1., 0.), (3., 0.), (4., 1.5), (4., 4.5), (3., 6.), (1., 6.), (0., 4.5), (0., 1.5), (1., 0.)], &[(0.5, 5.), (3.5, 1.)]],
        '1' => &[&[(1., 1.), (2., 0.), (2., 6.)], &[(1., 6.), (3., 6.)]],
        '2' => &[&[(0., 1.), (1., 0.), (3., 0.), (4., 1.), (4., 2.5), (0., 6.), (4., 6.)]],
        '3' => &[&[(0., 0.), (4., 0.), (2., 2.5), (3., 2.5), (4., 3.5), (4., 5.), (3., 6.), (0., 6.)]],
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd(obj: &ObjectHeightfield, x: f64, y: f64) -> (f64, f64) {
        let e = 1e-6;
        (
            (obj.height(x + e, y) - obj.height(x - e, y)) / (2.0 * e),
            (obj.height(x, y + e) - obj.height(x, y - e)) / (2.0 * e),
        )
    }

    #[test]
    fn hemisphere_height_and_slope() {
        let obj = ObjectHeightfield::hemisphere(20.0, 5.0);
        assert_eq!(obj.height(0.0, 0.0), 20.0);
        assert_eq!(obj.height(21.0, 0.0), 0.0);
        let (h, hx, hy) = obj.sample(3.0, 4.0);
        assert!((h - (400.0f64 - 25.0).sqrt()).abs() < 1e-12);
        let (fx, fy) = fd(&obj, 3.0, 4.0);
        assert!((hx - fx).abs() < 1e-6 && (hy - fy).abs() < 1e-6);
    }

    #[test]
    fn relief_gradients_match_finite_differences() {
        let obj = relief_plate(&ReliefParams { extent: [-10.0, -10.0, 10.0, 10.0], density: 0.3, ..Default::default() }).unwrap();
        let mut checked = 0;
        for i in 0..400 {
            let (x, y) = (-9.0 + 0.045 * i as f64, 5.0 - 0.023 * i as f64);
            let (h, hx, hy) = obj.sample(x, y);
            if h <= 0.0 {
                continue;
            }
            let (fx, fy) = fd(&obj, x, y);
            // pointwise max is non-smooth where two features meet
            if (hx - fx).abs() < 1e-4 && (hy - fy).abs() < 1e-4 {
                checked += 1;
            }
        }
        assert!(checked > 50, "{checked}");
    }

    #[test]
    fn bucket_lookup_agrees_with_scan() {
        let obj = relief_plate(&ReliefParams { extent: [-8.0, -8.0, 8.0, 8.0], density: 0.5, seed: 9, ..Default::default() }).unwrap();
        let ObjectHeightfield::Procedural(p) = &obj else { unreachable!() };
        let Shape::Relief { features } = p.shape() else { unreachable!() };
        for i in 0..500 {
            let (x, y) = (-8.0 + 0.032 * i as f64, -7.9 + 0.0311 * i as f64);
            let scan = features.iter().filter_map(|f| f.eval(x, y)).map(|s| s.0).fold(0.0, f64::max);
            assert_eq!(obj.height(x, y), scan);
        }
    }

    #[test]
    fn text_builds_and_rejects_unknown_glyph() {
        let obj = embossed_text("ZJU", 6.0, 0.4, 0.5, 2.0).unwrap();
        assert!(obj.max_height() > 0.0);
        assert!(matches!(embossed_text("Z~", 6.0, 0.4, 0.5, 2.0), Err(ObjectError::Glyph('~'))));
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let obj = ObjectHeightfield::hemisphere(3.0, 1.0);
        let grid = obj.to_grid(0.1).unwrap();
        let path = dir.path().join("h.png");
        ObjectHeightfield::write_png(&grid, &path, 1e-4).unwrap();
        let back = ObjectHeightfield::from_png(&path).unwrap();
        for (x, y) in [(0.0, 0.0), (1.0, -0.5), (2.5, 1.2)] {
            assert!((back.height(x, y) - grid.sample(x, y).0).abs() <= 1e-4);
        }
    }

    #[test]
    fn grid_bilinear_gradient_is_exact_on_planes() {
        let z: Vec<f64> = (0..25).map(|k| 0.5 * (k % 5) as f64 - 0.25 * (k / 5) as f64).collect();
        let g = HeightGrid::new(5, 5, 2.0, [0.0, 0.0], z).unwrap();
        let (h, hx, hy) = g.sample(3.3, 5.1);
        assert!((h - (0.25 * 3.3 - 0.125 * 5.1)).abs() < 1e-12);
        assert!((hx - 0.25).abs() < 1e-12 && (hy + 0.125).abs() < 1e-12);
    }
}
