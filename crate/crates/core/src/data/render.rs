//! Procedural 2-D terrain scenes.
//!
//! Object geometry is drawn from one random stream and appearance (texture,
//! noise) from another, so a source and target spec with the same seed
//! place identical objects and differ only in how they look.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox, Detection};
use super::io::quantize_box;
use crate::global_align::DomainLabel;
use crate::raster::GrayImage;

const PLACEMENT_ATTEMPTS: usize = 100;
const MAX_PLACEMENT_IOU: f32 = 0.3;
const GEOMETRY_STREAM: u64 = 1;
const APPEARANCE_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TerrainClass {
    Crater,
    Dune,
    Mountain,
    Boulder,
}

impl TerrainClass {
    pub fn name(self) -> &'static str {
        match self {
            TerrainClass::Crater => "crater",
            TerrainClass::Dune => "dune",
            TerrainClass::Mountain => "mountain",
            TerrainClass::Boulder => "boulder",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Crater, Self::Dune, Self::Mountain, Self::Boulder]
            .into_iter()
            .find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftParams {
    pub invert: bool,
    /// Gaussian blur half-width in pixels (0 disables).
    pub blur_radius: usize,
    pub noise_std: f32,
    /// Background value-noise cells across the image.
    pub texture_frequency: usize,
}

impl ShiftParams {
    pub fn source() -> Self {
        Self {
            invert: false,
            blur_radius: 0,
            noise_std: 0.02,
            texture_frequency: 4,
        }
    }

    pub fn target() -> Self {
        Self {
            invert: true,
            blur_radius: 1,
            ..Self::source()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub domain: DomainLabel,
    /// Class ids index into this list.
    pub classes: Vec<TerrainClass>,
    pub min_objects: usize,
    pub max_objects: usize,
    pub shift: ShiftParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: GrayImage,
    pub detections: Vec<Detection>,
    /// Set for images loaded without a label file.
    pub unlabeled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub scene: LabeledImage,
    /// Objects requested but not placed within the attempt budget.
    pub placement_failures: usize,
}

/// Analytic shape parameters in pixel units; `(x, y)` are continuous
/// coordinates with pixel `(i, j)` centred at `(i + 0.5, j + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    Crater { x: f32, y: f32, radius: f32 },
    Boulder { x: f32, y: f32, rx: f32, ry: f32, shadow: (f32, f32) },
    Dune { x: f32, y: f32, length: f32, width: f32, vertical: bool },
    Mountain { x: f32, y: f32, radius: f32 },
}

impl Shape {
    /// Tight footprint `(x1, y1, x2, y2)` in pixels.
    pub fn footprint(&self) -> (f32, f32, f32, f32) {
        match *self {
            Shape::Crater { x, y, radius } | Shape::Mountain { x, y, radius } => {
                (x - radius, y - radius, x + radius, y + radius)
            }
            Shape::Boulder { x, y, rx, ry, shadow: (dx, dy) } => (
                x - rx + dx.min(0.0),
                y - ry + dy.min(0.0),
                x + rx + dx.max(0.0),
                y + ry + dy.max(0.0),
            ),
            Shape::Dune { x, y, length, width, vertical } => {
                let (hw, hh) = if vertical { (width, length) } else { (length, width) };
                (x - hw / 2.0, y - hh / 2.0, x + hw / 2.0, y + hh / 2.0)
            }
        }
    }

    pub fn bbox(&self, size: usize) -> Option<BBox> {
        let s = size as f32;
        let (x1, y1, x2, y2) = self.footprint();
        BBox::from_corners(x1 / s, y1 / s, x2 / s, y2 / s)
    }

    /// Intensity offset at pixel centre `(px, py)`.
    pub fn offset(&self, px: f32, py: f32) -> f32 {
        match *self {
            Shape::Crater { x, y, radius } => {
                let (dx, dy) = (px - x, py - y);
                let d = (dx * dx + dy * dy).sqrt() / radius;
                if d > 1.0 {
                    0.0
                } else if d > 0.75 {
                    0.4
                } else if dx + dy < 0.0 {
                    // shadowed inner wall facing the light
                    -0.2
                } else {
                    0.05
                }
            }
            Shape::Boulder { x, y, rx, ry, shadow: (sx, sy) } => {
                let inside = |cx: f32, cy: f32| ((px - cx) / rx).powi(2) + ((py - cy) / ry).powi(2) <= 1.0;
                if inside(x, y) {
                    0.45
                } else if inside(x + sx, y + sy) {
                    -0.25
                } else {
                    0.0
                }
            }
            Shape::Dune { x, y, length, width, vertical } => {
                let (along, across) = if vertical { (py - y, px - x) } else { (px - x, py - y) };
                if along.abs() > length / 2.0 || across.abs() > width / 2.0 {
                    return 0.0;
                }
                // crest line wanders along the dune
                let t = across / width + 0.5;
                let crest = 0.6 + 0.08 * (std::f32::consts::TAU * along / length * 2.0).sin();
                if t < crest {
                    0.4 * (std::f32::consts::PI * t / crest).sin().max(0.15)
                } else {
                    -0.15
                }
            }
            Shape::Mountain { x, y, radius } => {
                let d = ((px - x).powi(2) + (py - y).powi(2)).sqrt() / radius;
                if d > 1.0 {
                    0.0
                } else {
                    0.45 * (1.0 - d).powf(1.5) + 0.03
                }
            }
        }
    }
}

/// Centre keeping a `2·half_w × 2·half_h` footprint one pixel inside the image.
fn centre(rng: &mut impl Rng, size: f32, half_w: f32, half_h: f32) -> (f32, f32) {
    let margin = 1.0;
    (
        rng.gen_range(half_w + margin..size - half_w - margin),
        rng.gen_range(half_h + margin..size - half_h - margin),
    )
}

fn sample_shape(class: TerrainClass, size: f32, rng: &mut impl Rng) -> Shape {
    match class {
        TerrainClass::Crater => {
            let radius = rng.gen_range(0.035..0.1) * size;
            let (x, y) = centre(rng, size, radius, radius);
            Shape::Crater { x, y, radius }
        }
        TerrainClass::Mountain => {
            let radius = rng.gen_range(0.07..0.15) * size;
            let (x, y) = centre(rng, size, radius, radius);
            Shape::Mountain { x, y, radius }
        }
        TerrainClass::Dune => {
            let length = rng.gen_range(0.15..0.3) * size;
            let width = rng.gen_range(0.05..0.09) * size;
            let vertical = rng.gen_bool(0.5);
            let (hw, hh) = if vertical { (width, length) } else { (length, width) };
            let (x, y) = centre(rng, size, hw / 2.0, hh / 2.0);
            Shape::Dune { x, y, length, width, vertical }
        }
        TerrainClass::Boulder => {
            let rx = rng.gen_range(0.02..0.05) * size;
            let ry = rx * rng.gen_range(0.7..1.0);
            let shadow = (0.8 * rx, 0.8 * ry);
            // footprint half extents
            let (hw, hh) = (rx + shadow.0 / 2.0, ry + shadow.1 / 2.0);
            let (cx, cy) = centre(rng, size, hw, hh);
            Shape::Boulder {
                x: cx - shadow.0 / 2.0,
                y: cy - shadow.1 / 2.0,
                rx,
                ry,
                shadow,
            }
        }
    }
}

/// Object layout for a spec: `(class id, shape)` pairs plus the number of
/// objects that could not be placed.
pub fn layout(spec: &SceneSpec, size: usize) -> Result<(Vec<(usize, Shape)>, usize)> {
    if spec.classes.is_empty() && spec.max_objects > 0 {
        return Err(Error::Config("scene needs at least one class".into()));
    }
    if spec.min_objects > spec.max_objects {
        return Err(Error::Config("min_objects exceeds max_objects".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(GEOMETRY_STREAM);
    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let mut placed: Vec<(usize, Shape, BBox)> = Vec::with_capacity(count);
    let mut failures = 0;
    for _ in 0..count {
        let class_id = rng.gen_range(0..spec.classes.len());
        let mut ok = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let shape = sample_shape(spec.classes[class_id], size as f32, &mut rng);
            let Some(bbox) = shape.bbox(size) else { continue };
            if placed.iter().all(|(_, _, b)| iou(b, &bbox) <= MAX_PLACEMENT_IOU) {
                placed.push((class_id, shape, bbox));
                ok = true;
                break;
            }
        }
        if !ok {
            failures += 1;
        }
    }
    Ok((placed.into_iter().map(|(c, s, _)| (c, s)).collect(), failures))
}

fn smoothstep(t: f32) -> f32 {
    t * t * (3.0 - 2.0 * t)
}

/// Two-octave value noise in roughly `[-1, 1]`.
fn value_noise(size: usize, cells: usize, rng: &mut impl Rng) -> Vec<f32> {
    let mut out = vec![0.0f32; size * size];
    for (octave, amp) in [(1usize, 0.7f32), (2, 0.3)] {
        let n = cells.max(1) * octave;
        let lattice: Vec<f32> = (0..(n + 1) * (n + 1)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let at = |i: usize, j: usize| lattice[j * (n + 1) + i];
        for y in 0..size {
            let fy = (y as f32 + 0.5) / size as f32 * n as f32;
            let (j, ty) = ((fy as usize).min(n - 1), smoothstep(fy.fract()));
            for x in 0..size {
                let fx = (x as f32 + 0.5) / size as f32 * n as f32;
                let (i, tx) = ((fx as usize).min(n - 1), smoothstep(fx.fract()));
                let top = at(i, j) + (at(i + 1, j) - at(i, j)) * tx;
                let bot = at(i, j + 1) + (at(i + 1, j + 1) - at(i, j + 1)) * tx;
                out[y * size + x] += amp * (top + (bot - top) * ty);
            }
        }
    }
    out
}

/// Separable Gaussian blur with `sigma = radius`, edges clamped.
pub fn gaussian_blur(img: &GrayImage, radius: usize) -> GrayImage {
    if radius == 0 {
        return img.clone();
    }
    let sigma = radius as f32;
    let taps: Vec<f32> = (-(radius as isize)..=radius as isize)
        .map(|d| (-(d * d) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f32 = taps.iter().sum();
    let (w, h) = (img.width(), img.height());
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut dst = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, &t) in taps.iter().enumerate() {
                    let d = k as isize - radius as isize;
                    let (sx, sy) = if horizontal {
                        ((x as isize + d).clamp(0, w as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + d).clamp(0, h as isize - 1) as usize)
                    };
                    acc += t * src[sy * w + sx];
                }
                dst[y * w + x] = acc / norm;
            }
        }
        dst
    };
    let horiz = pass(img.pixels(), true);
    GrayImage::new(w, h, pass(&horiz, false)).expect("same dimensions")
}

/// Renders a spec at `size × size`. The output is quantized to 8-bit levels.
pub fn render(spec: &SceneSpec, size: usize) -> Result<Rendered> {
    if size < 8 {
        return Err(Error::InvalidArgument(format!("image size {size} too small")));
    }
    let (shapes, placement_failures) = layout(spec, size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(APPEARANCE_STREAM);
    let base = rng.gen_range(0.4..0.5);
    let texture = value_noise(size, spec.shift.texture_frequency, &mut rng);
    let mut pixels: Vec<f32> = texture.iter().map(|t| base + 0.08 * t).collect();
    for (_, shape) in &shapes {
        let (x1, y1, x2, y2) = shape.footprint();
        let (lo_x, hi_x) = ((x1.floor().max(0.0)) as usize, (x2.ceil() as usize).min(size));
        let (lo_y, hi_y) = ((y1.floor().max(0.0)) as usize, (y2.ceil() as usize).min(size));
        for y in lo_y..hi_y {
            for x in lo_x..hi_x {
                pixels[y * size + x] += shape.offset(x as f32 + 0.5, y as f32 + 0.5);
            }
        }
    }
    let mut image = GrayImage::new(size, size, pixels)?;
    if spec.shift.invert {
        image.pixels_mut().iter_mut().for_each(|v| *v = 1.0 - *v);
    }
    image = gaussian_blur(&image, spec.shift.blur_radius);
    if spec.shift.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.shift.noise_std)
            .map_err(|e| Error::Config(format!("noise stddev: {e}")))?;
        image.pixels_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    image.pixels_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    image.quantize();
    let detections = shapes
        .iter()
        .map(|(c, s)| Detection::new(*c, quantize_box(s.bbox(size).expect("placed shapes have boxes")), 1.0))
        .collect();
    Ok(Rendered {
        scene: LabeledImage {
            image,
            detections,
            unlabeled: false,
        },
        placement_failures,
    })
}
