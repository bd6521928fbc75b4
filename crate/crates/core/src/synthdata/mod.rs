//! Procedural scenes of overlapping coloured shapes with one-pixel contour
//! ground truth derived from their instance masks.

mod dataset;

pub use dataset::{build_dataset, load_dataset, sample_seed, Dataset, Manifest, ManifestEntry};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::imgproc::{dilate, erode3, gaussian_blur, open3, Border};
use crate::maps::BinaryMap;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Ellipse,
    Polygon,
    Rectangle,
}

/// Relative sampling weights of the shape families.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShapeWeights {
    pub ellipse: f64,
    pub polygon: f64,
    pub rectangle: f64,
}

impl Default for ShapeWeights {
    fn default() -> Self {
        Self {
            ellipse: 1.0,
            polygon: 1.0,
            rectangle: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub shape_weights: ShapeWeights,
    /// Range of the shape half-extent in pixels.
    pub radius: [f64; 2],
    /// HSV saturation and value ranges of fill colours.
    pub saturation: [f64; 2],
    pub value: [f64; 2],
    /// Grey level range of the background.
    pub background: [f64; 2],
    /// Peak-to-peak amplitude of a linear background ramp.
    pub background_gradient: f64,
    /// Minimum max-channel difference between a fill colour and the
    /// background or any other fill colour (best effort).
    pub min_contrast: f64,
    /// Gaussian blur applied to the composited image (not the edges).
    pub blur_sigma: f64,
    /// Per-channel Gaussian noise added after blurring.
    pub noise_sigma: f64,
    /// Width of the background halo a shape carves out of the shapes it
    /// occludes; keeps contours of neighbouring instances apart.
    pub occlusion_gap: usize,
    /// Remove visible parts narrower than three pixels (3×3 opening).
    pub open_slivers: bool,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            min_shapes: 2,
            max_shapes: 5,
            shape_weights: ShapeWeights::default(),
            radius: [5.0, 16.0],
            saturation: [0.55, 1.0],
            value: [0.55, 1.0],
            background: [0.3, 0.55],
            background_gradient: 0.1,
            min_contrast: 0.25,
            blur_sigma: 1.0,
            noise_sigma: 0.03,
            occlusion_gap: 1,
            open_slivers: true,
            seed: 0,
        }
    }
}

fn check_range(name: &str, r: [f64; 2], lo: f64, hi: f64) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && lo <= r[0] && r[0] <= r[1] && r[1] <= hi) {
        return Err(invalid_arg!("{name} range {r:?} must be ordered within [{lo}, {hi}]"));
    }
    Ok(())
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(invalid_arg!("image size must be positive"));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(invalid_arg!(
                "shape count range {}..={} must start at 1 or more",
                self.min_shapes,
                self.max_shapes
            ));
        }
        let w = self.shape_weights;
        if [w.ellipse, w.polygon, w.rectangle].iter().any(|&v| !(v >= 0.0 && v.is_finite()))
            || w.ellipse + w.polygon + w.rectangle <= 0.0
        {
            return Err(invalid_arg!("shape weights must be non-negative with a positive sum"));
        }
        check_range("radius", self.radius, 1.0, f64::MAX)?;
        check_range("saturation", self.saturation, 0.0, 1.0)?;
        check_range("value", self.value, 0.0, 1.0)?;
        check_range("background", self.background, 0.0, 1.0)?;
        for (name, v) in [
            ("background_gradient", self.background_gradient),
            ("min_contrast", self.min_contrast),
            ("blur_sigma", self.blur_sigma),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid_arg!("{name} must be non-negative, got {v}"));
            }
        }
        Ok(())
    }

    /// Image size must be a multiple of the network's downsampling factor.
    pub fn check_stride(&self, factor: usize) -> Result<()> {
        if !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(invalid_arg!(
                "scene size {}x{} must be a multiple of {factor}",
                self.height,
                self.width
            ));
        }
        Ok(())
    }
}

/// A convex shape in continuous pixel coordinates (pixel `(y, x)` covers
/// `[y, y+1) × [x, x+1)`; membership is tested at pixel centres).
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, angle: f64 },
    /// Vertices `(y, x)` in angular order around the centre.
    Polygon { vertices: Vec<(f64, f64)> },
    Rectangle { y0: f64, x0: f64, y1: f64, x1: f64 },
}

impl Shape {
    pub fn kind(&self) -> ShapeKind {
        match self {
            Shape::Ellipse { .. } => ShapeKind::Ellipse,
            Shape::Polygon { .. } => ShapeKind::Polygon,
            Shape::Rectangle { .. } => ShapeKind::Rectangle,
        }
    }

    pub fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx, angle } => {
                let (s, c) = angle.sin_cos();
                let (dy, dx) = (y - cy, x - cx);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Polygon { ref vertices } => {
                let n = vertices.len();
                let side = |i: usize| {
                    let (ay, ax) = vertices[i];
                    let (by, bx) = vertices[(i + 1) % n];
                    (bx - ax) * (y - ay) - (by - ay) * (x - ax)
                };
                (0..n).all(|i| side(i) >= 0.0) || (0..n).all(|i| side(i) <= 0.0)
            }
            Shape::Rectangle { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
        }
    }

    pub fn rasterize(&self, height: usize, width: usize) -> BinaryMap {
        BinaryMap::from_fn(height, width, |y, x| self.contains(y as f64 + 0.5, x as f64 + 0.5))
    }
}

/// Visible region of one shape after occlusion.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMask {
    pub mask: BinaryMap,
    /// Drawing order; larger is nearer the viewer.
    pub z: usize,
    pub kind: ShapeKind,
    /// The visible region is the shape's complete raster: nothing was
    /// occluded or removed, so the region is a digitised convex set.
    pub intact: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// The composited image before blur and noise.
    pub clean: Tensor<f32>,
    pub masks: Vec<InstanceMask>,
    pub edges: BinaryMap,
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6 % 2.0 - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn contrast(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).abs()).fold(0.0, f64::max)
}

fn sample_shape(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Shape {
    let w = cfg.shape_weights;
    let total = w.ellipse + w.polygon + w.rectangle;
    let pick = rng.gen::<f64>() * total;
    let cy = rng.gen_range(0.0..cfg.height as f64);
    let cx = rng.gen_range(0.0..cfg.width as f64);
    if pick < w.ellipse {
        Shape::Ellipse {
            cy,
            cx,
            ry: uniform(rng, cfg.radius),
            rx: uniform(rng, cfg.radius),
            angle: rng.gen_range(0.0..std::f64::consts::PI),
        }
    } else if pick < w.ellipse + w.polygon {
        // Points on an ellipse are in convex position; sorting them by
        // angle yields a convex polygon.
        let (ry, rx) = (uniform(rng, cfg.radius), uniform(rng, cfg.radius));
        let rot = rng.gen_range(0.0..std::f64::consts::PI);
        let n = rng.gen_range(3..=7);
        let mut angles: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        angles.sort_by(f64::total_cmp);
        let (s, c) = rot.sin_cos();
        let vertices = angles
            .into_iter()
            .map(|t| {
                let (u, v) = (rx * t.cos(), ry * t.sin());
                (cy + s * u + c * v, cx + c * u - s * v)
            })
            .collect();
        Shape::Polygon { vertices }
    } else {
        let (ry, rx) = (uniform(rng, cfg.radius), uniform(rng, cfg.radius));
        Shape::Rectangle {
            y0: cy - ry,
            x0: cx - rx,
            y1: cy + ry,
            x1: cx + rx,
        }
    }
}

/// Rasterise a random scene. Shapes are drawn back to front; each shape
/// carves an `occlusion_gap` halo out of the shapes behind it, and shapes
/// whose raster is too small are resampled.
pub fn generate_scene(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Result<Scene> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let n_shapes = rng.gen_range(cfg.min_shapes..=cfg.max_shapes);

    let grey = uniform(rng, cfg.background);
    let ramp_dir = rng.gen_range(0.0..std::f64::consts::TAU);
    let bg_rgb = [grey; 3];

    let mut colours: Vec<[f64; 3]> = Vec::with_capacity(n_shapes);
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let mut shape = sample_shape(cfg, rng);
        let mut raster = shape.rasterize(h, w);
        let mut tries = 0;
        while raster.count() < 9 && tries < 100 {
            shape = sample_shape(cfg, rng);
            raster = shape.rasterize(h, w);
            tries += 1;
        }
        let mut colour = [0.0; 3];
        for _ in 0..64 {
            let hue = rng.gen::<f64>();
            colour = hsv_to_rgb(hue, uniform(rng, cfg.saturation), uniform(rng, cfg.value));
            let distinct = contrast(colour, bg_rgb) >= cfg.min_contrast
                && colours.iter().all(|&c| contrast(c, colour) >= cfg.min_contrast);
            if distinct {
                break;
            }
        }
        colours.push(colour);
        shapes.push((shape, raster));
    }

    let mut labels: Vec<Option<usize>> = vec![None; h * w];
    for (z, (_, raster)) in shapes.iter().enumerate() {
        if cfg.occlusion_gap > 0 {
            let halo = dilate(raster, cfg.occlusion_gap);
            for (i, l) in labels.iter_mut().enumerate() {
                if halo.data()[i] && !raster.data()[i] {
                    *l = None;
                }
            }
        }
        for (i, l) in labels.iter_mut().enumerate() {
            if raster.data()[i] {
                *l = Some(z);
            }
        }
    }

    let mut masks = Vec::new();
    for (z, (shape, raster)) in shapes.iter().enumerate() {
        let visible = BinaryMap::from_vec(h, w, labels.iter().map(|&l| l == Some(z)).collect())?;
        let kept = if cfg.open_slivers { open3(&visible) } else { visible.clone() };
        for (i, l) in labels.iter_mut().enumerate() {
            if visible.data()[i] && !kept.data()[i] {
                *l = None;
            }
        }
        if !kept.is_empty() {
            masks.push(InstanceMask {
                intact: kept == *raster,
                mask: kept,
                z,
                kind: shape.kind(),
            });
        }
    }

    let mut clean = vec![0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let rgb = match labels[i] {
                Some(z) => colours[z],
                None => {
                    let t = (x as f64 / w as f64 - 0.5) * ramp_dir.cos() + (y as f64 / h as f64 - 0.5) * ramp_dir.sin();
                    [(grey + cfg.background_gradient * t).clamp(0.0, 1.0); 3]
                }
            };
            for c in 0..3 {
                clean[c * h * w + i] = rgb[c] as f32;
            }
        }
    }

    let mut image = Vec::with_capacity(3 * h * w);
    for plane in clean.chunks_exact(h * w) {
        image.extend(gaussian_blur(plane, h, w, cfg.blur_sigma, Border::Replicate));
    }
    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| invalid_arg!("noise: {e}"))?;
        for v in image.iter_mut() {
            *v += noise.sample(rng) as f32;
        }
    }
    for v in image.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }

    let contours: Vec<BinaryMap> = masks.iter().map(|m| mask_to_contour(&m.mask)).collect();
    let edges = aggregate_edges(&contours, h, w)?;
    Ok(Scene {
        image: Tensor::new(&[3, h, w], image)?,
        clean: Tensor::new(&[3, h, w], clean)?,
        masks,
        edges,
    })
}

/// Scene for the per-sample seed used by datasets.
pub fn generate_from_seed(cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    generate_scene(cfg, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `mask AND NOT erode(mask)` with the full 3×3 element; out-of-image
/// pixels count as background.
pub fn mask_to_contour(mask: &BinaryMap) -> BinaryMap {
    let eroded = erode3(mask);
    let (h, w) = mask.dims();
    BinaryMap::from_fn(h, w, |y, x| mask.get(y, x) && !eroded.get(y, x))
}

/// Pixelwise OR of equally sized maps; an empty list yields an empty map.
pub fn aggregate_edges(contours: &[BinaryMap], height: usize, width: usize) -> Result<BinaryMap> {
    let mut out = BinaryMap::new(height, width);
    for c in contours {
        if c.dims() != (height, width) {
            return Err(invalid_arg!("contour {:?} does not match {height}x{width}", c.dims()));
        }
        for (i, &e) in c.data().iter().enumerate() {
            if e {
                out.set(i / width, i % width, true);
            }
        }
    }
    Ok(out)
}

/// Whether the map contains a 2×2 block of edge pixels.
pub fn has_solid_2x2(edges: &BinaryMap) -> bool {
    let (h, w) = edges.dims();
    (1..h).any(|y| (1..w).any(|x| edges.get(y - 1, x - 1) && edges.get(y - 1, x) && edges.get(y, x - 1) && edges.get(y, x)))
}

/// Fraction of edge pixels with a colour change towards some 8-neighbour
/// (out-of-image neighbours count as a change).
pub fn edge_consistency(clean: &Tensor<f32>, edges: &BinaryMap) -> f64 {
    let (h, w) = edges.dims();
    let d = clean.data();
    let px = |y: usize, x: usize| [d[y * w + x], d[h * w + y * w + x], d[2 * h * w + y * w + x]];
    let pts = edges.points();
    if pts.is_empty() {
        return 1.0;
    }
    let consistent = pts
        .iter()
        .filter(|&&(y, x)| {
            (-1isize..=1).any(|dy| {
                (-1isize..=1).any(|dx| {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny as usize >= h || nx as usize >= w {
                        return true;
                    }
                    px(ny as usize, nx as usize) != px(y, x)
                })
            })
        })
        .count();
    consistent as f64 / pts.len() as f64
}
