//! Procedural datasets: guided depth upsampling and sketch-to-texture.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::resize::{resize_bicubic, ScaleFactor};
use crate::tensor::{Element, Shape, Tensor};

pub const DEPTH_MIN_CM: f64 = 50.0;
pub const DEPTH_MAX_CM: f64 = 500.0;
pub const RGB_NOISE_STD: f64 = 0.02;
/// Largest supported degradation factor; scene dims must be multiples of it.
pub const MAX_SCALE: usize = 16;
pub const SUPPORTED_SCALES: [u32; 3] = [4, 8, 16];

const AMBIENT: f64 = 0.35;
const LIGHT: [f64; 3] = [-0.4, -0.5, 1.0];
/// Horizontal extent of the imaged scene in cm, for surface normals.
const SCENE_WIDTH_CM: f64 = 120.0;
const MIN_DEPTH_GAP_CM: f64 = 15.0;
const PLACEMENT_TRIES: usize = 400;
const PLACEMENT_RESTARTS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plane {
    /// Depth at the image center.
    pub base: f64,
    /// Depth change across the full width and height.
    pub slope_x: f64,
    pub slope_y: f64,
}

impl Plane {
    pub fn at(&self, y: usize, x: usize, h: usize, w: usize) -> f64 {
        self.base + self.slope_x * (x as f64 / w as f64 - 0.5) + self.slope_y * (y as f64 / h as f64 - 0.5)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PrimitiveShape {
    Rect,
    Ellipse,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Primitive {
    pub shape: PrimitiveShape,
    pub cy: f64,
    pub cx: f64,
    pub ry: f64,
    pub rx: f64,
    pub depth: Plane,
    pub albedo: [f64; 3],
}

impl Primitive {
    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        match self.shape {
            PrimitiveShape::Rect => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            PrimitiveShape::Ellipse => dy * dy + dx * dx <= 1.0,
        }
    }

    /// Pixel bounding box `[y0, y1) x [x0, x1)`.
    fn bbox(&self) -> [f64; 4] {
        [self.cy - self.ry, self.cy + self.ry, self.cx - self.rx, self.cx + self.rx]
    }
}

/// A generated scene before degradation.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `(1,1,H,W)`, centimeters.
    pub depth_gt: Tensor<f64>,
    /// `(1,3,H,W)` in `[0, 1]`.
    pub rgb_guide: Tensor<f64>,
    /// 0 for the background, `k + 1` for primitive `k`.
    pub labels: Vec<u16>,
    pub background: Plane,
    pub primitives: Vec<Primitive>,
}

/// A scene together with its degraded depth.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub depth_gt: Tensor<f64>,
    pub rgb_guide: Tensor<f64>,
    pub depth_lowres_up: Tensor<f64>,
}

fn check_scene_dims(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % MAX_SCALE != 0 || w % MAX_SCALE != 0 {
        return Err(Error::InvalidDims(format!("scene dims {h}x{w} must be positive multiples of {MAX_SCALE}")));
    }
    Ok(())
}

/// Sloped background plane with `complexity` opaque, non-overlapping
/// rectangles and ellipses in front of it, each at its own depth.
pub fn gen_scene(seed: u64, h: usize, w: usize, complexity: usize) -> Result<Scene> {
    check_scene_dims(h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = Plane {
        base: rng.gen_range(340.0..420.0),
        slope_x: rng.gen_range(-70.0..70.0),
        slope_y: rng.gen_range(-70.0..70.0),
    };
    let bg_albedo = [rng.gen_range(0.35..0.85), rng.gen_range(0.35..0.85), rng.gen_range(0.35..0.85)];
    let tex = (rng.gen_range(2.0..6.0), rng.gen_range(2.0..6.0), rng.gen_range(0.0..std::f64::consts::TAU));

    let lim = h.min(w) as f64;
    let far = background.base - background.slope_x.abs() / 2.0 - background.slope_y.abs() / 2.0;
    // crowded scenes get smaller primitives
    let crowd = (4.0 / complexity.max(1) as f64).sqrt().min(1.0);
    let mut primitives: Vec<Primitive> = Vec::with_capacity(complexity);
    let mut restarts = 0;
    while primitives.len() < complexity {
        let k = primitives.len();
        let mut placed = None;
        for attempt in 0..PLACEMENT_TRIES {
            // shrink the size range as placement gets harder
            let shrink = 1.0 - 0.6 * attempt as f64 / PLACEMENT_TRIES as f64;
            let (lo, hi) = (lim / 14.0, (lim / 5.0 * crowd * shrink).max(lim / 14.0 + 1.0));
            let ry = rng.gen_range(lo..hi);
            let rx = rng.gen_range(lo..hi);
            let cy = rng.gen_range(ry + 1.0..h as f64 - ry - 1.0);
            let cx = rng.gen_range(rx + 1.0..w as f64 - rx - 1.0);
            let shape = if rng.gen_bool(0.5) { PrimitiveShape::Rect } else { PrimitiveShape::Ellipse };
            let base = rng.gen_range(DEPTH_MIN_CM + 20.0..far - 25.0);
            let cand = Primitive {
                shape,
                cy,
                cx,
                ry,
                rx,
                depth: Plane { base, slope_x: rng.gen_range(-20.0..20.0), slope_y: rng.gen_range(-20.0..20.0) },
                albedo: [rng.gen_range(0.1..0.95), rng.gen_range(0.1..0.95), rng.gen_range(0.1..0.95)],
            };
            let separated = primitives.iter().all(|p| {
                let [a0, a1, a2, a3] = p.bbox();
                let [b0, b1, b2, b3] = cand.bbox();
                let apart = b0 >= a1 + 2.0 || a0 >= b1 + 2.0 || b2 >= a3 + 2.0 || a2 >= b3 + 2.0;
                apart && (p.depth.base - base).abs() >= MIN_DEPTH_GAP_CM
            });
            let contrast = (0..3).map(|c| (cand.albedo[c] - bg_albedo[c]).abs()).sum::<f64>() >= 0.3;
            if separated && contrast {
                placed = Some(cand);
                break;
            }
        }
        match placed {
            Some(p) => primitives.push(p),
            None if restarts < PLACEMENT_RESTARTS => {
                restarts += 1;
                primitives.clear();
            }
            None => {
                return Err(Error::InvalidDims(format!(
                    "could not place primitive {} of {complexity} in a {h}x{w} scene",
                    k + 1
                )))
            }
        }
    }

    let mut depth = vec![0.0; h * w];
    let mut labels = vec![0u16; h * w];
    let mut albedo = vec![[0.0; 3]; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let t = 1.0 + 0.08 * (tex.0 * x as f64 / w as f64 * std::f64::consts::TAU + tex.1 * y as f64 / h as f64 * 3.0 + tex.2).sin();
            depth[i] = background.at(y, x, h, w);
            albedo[i] = bg_albedo.map(|a| a * t);
            for (k, p) in primitives.iter().enumerate() {
                if p.contains(y, x) {
                    // local tilt relative to the primitive's own extent
                    let ly = ((y as f64 + 0.5 - p.cy) / (2.0 * p.ry)) * p.depth.slope_y;
                    let lx = ((x as f64 + 0.5 - p.cx) / (2.0 * p.rx)) * p.depth.slope_x;
                    depth[i] = p.depth.base + ly + lx;
                    labels[i] = k as u16 + 1;
                    albedo[i] = p.albedo;
                }
            }
            depth[i] = depth[i].clamp(DEPTH_MIN_CM, DEPTH_MAX_CM);
        }
    }

    let l = {
        let n = (LIGHT[0] * LIGHT[0] + LIGHT[1] * LIGHT[1] + LIGHT[2] * LIGHT[2]).sqrt();
        LIGHT.map(|v| v / n)
    };
    let px = SCENE_WIDTH_CM / w as f64;
    let noise = Normal::new(0.0, RGB_NOISE_STD).expect("valid std");
    let mut rgb = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let d = |yy: usize, xx: usize| depth[yy * w + xx];
            let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let gx = (d(y, x1) - d(y, x0)) / ((x1 - x0) as f64 * px);
            let gy = (d(y1, x) - d(y0, x)) / ((y1 - y0) as f64 * px);
            let nn = (gx * gx + gy * gy + 1.0).sqrt();
            let lambert = ((-gx * l[0] - gy * l[1] + l[2]) / nn).max(0.0);
            let shade = AMBIENT + (1.0 - AMBIENT) * lambert;
            for c in 0..3 {
                let v = albedo[y * w + x][c] * shade + noise.sample(&mut rng);
                rgb[c * h * w + y * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(Scene {
        depth_gt: Tensor::from_vec(Shape::new(1, 1, h, w), depth)?,
        rgb_guide: Tensor::from_vec(Shape::new(1, 3, h, w), rgb)?,
        labels,
        background,
        primitives,
    })
}

/// Bicubic downsampling by `s` followed by bicubic upsampling back.
pub fn degrade_depth<T: Element>(depth_gt: &Tensor<T>, s: u32) -> Result<Tensor<T>> {
    if !SUPPORTED_SCALES.contains(&s) {
        return Err(Error::InvalidDims(format!("scale {s} not in {SUPPORTED_SCALES:?}")));
    }
    let down = resize_bicubic(depth_gt, ScaleFactor::down(s))?;
    resize_bicubic(&down, ScaleFactor::up(s))
}

impl Scene {
    pub fn degrade(&self, s: u32) -> Result<SceneSample> {
        Ok(SceneSample {
            depth_gt: self.depth_gt.clone(),
            rgb_guide: self.rgb_guide.clone(),
            depth_lowres_up: degrade_depth(&self.depth_gt, s)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TexturePatchSample {
    /// `(1,1,H,W)` with values in `{0, 1}`.
    pub sketch: Tensor<f64>,
    /// `(1,3,H,W)`: the target inside the patch rectangle, zero elsewhere.
    pub texture_patch: Tensor<f64>,
    /// `(1,3,H,W)` in `[0, 1]`, zero outside the silhouette.
    pub target: Tensor<f64>,
    pub mask: Vec<bool>,
    /// `(y, x, side)` of the patch.
    pub patch: (usize, usize, usize),
}

/// An ellipse silhouette filled with a periodic texture, its outline, and a
/// square crop of the texture taken from inside the silhouette.
pub fn gen_texture_sample(seed: u64, h: usize, w: usize) -> Result<TexturePatchSample> {
    if h < 24 || w < 24 {
        return Err(Error::InvalidDims(format!("texture samples need at least 24x24, got {h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (h as f64, w as f64);
    let ry = rng.gen_range(0.3 * hf..0.45 * hf);
    let rx = rng.gen_range(0.3 * wf..0.45 * wf);
    let cy = hf / 2.0 + rng.gen_range(-1.0..1.0) * (hf / 2.0 - ry).max(0.0);
    let cx = wf / 2.0 + rng.gen_range(-1.0..1.0) * (wf / 2.0 - rx).max(0.0);
    let ca: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let cb: [f64; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let period = rng.gen_range(4.0..12.0);
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let (fy, fx) = (angle.sin() / period, angle.cos() / period);
    let checker = rng.gen_bool(0.5);

    let mask: Vec<bool> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 + 0.5, (i % w) as f64 + 0.5);
            ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0
        })
        .collect();
    let mut target = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let u = std::f64::consts::TAU * (fy * y as f64 + fx * x as f64);
            let mut t = 0.5 + 0.5 * u.sin();
            if checker {
                let v = std::f64::consts::TAU * (fx * y as f64 - fy * x as f64);
                t = if (u.sin() >= 0.0) == (v.sin() >= 0.0) { 1.0 } else { 0.0 };
            }
            for c in 0..3 {
                target[c * h * w + y * w + x] = ca[c] * t + cb[c] * (1.0 - t);
            }
        }
    }
    let inside = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize];
    let sketch: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as isize, (i % w) as isize);
            let edge = inside(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| !inside(y + dy, x + dx));
            if edge {
                1.0
            } else {
                0.0
            }
        })
        .collect();

    // summed-area table over the mask to enumerate fully covered squares
    let mut sat = vec![0usize; (h + 1) * (w + 1)];
    for y in 0..h {
        for x in 0..w {
            sat[(y + 1) * (w + 1) + x + 1] =
                mask[y * w + x] as usize + sat[y * (w + 1) + x + 1] + sat[(y + 1) * (w + 1) + x] - sat[y * (w + 1) + x];
        }
    }
    let covered = |y: usize, x: usize, s: usize| {
        sat[(y + s) * (w + 1) + x + s] + sat[y * (w + 1) + x] - sat[y * (w + 1) + x + s] - sat[(y + s) * (w + 1) + x] == s * s
    };
    let (smin, smax) = ((h.min(w) / 8).max(1), h.min(w) / 3);
    let mut side = rng.gen_range(smin..=smax);
    let patch = loop {
        let spots: Vec<(usize, usize)> = (0..=h - side)
            .flat_map(|y| (0..=w - side).map(move |x| (y, x)))
            .filter(|&(y, x)| covered(y, x, side))
            .collect();
        if !spots.is_empty() {
            let (y, x) = spots[rng.gen_range(0..spots.len())];
            break (y, x, side);
        }
        if side == smin {
            return Err(Error::InvalidDims("silhouette too small for a texture patch".into()));
        }
        side -= 1;
    };
    let mut texture_patch = vec![0.0; 3 * h * w];
    let (py, px, ps) = patch;
    for c in 0..3 {
        for y in py..py + ps {
            for x in px..px + ps {
                let i = c * h * w + y * w + x;
                texture_patch[i] = target[i];
            }
        }
    }
    Ok(TexturePatchSample {
        sketch: Tensor::from_vec(Shape::new(1, 1, h, w), sketch)?,
        texture_patch: Tensor::from_vec(Shape::new(1, 3, h, w), texture_patch)?,
        target: Tensor::from_vec(Shape::new(1, 3, h, w), target)?,
        mask,
        patch,
    })
}

/// Binary edge map: gradient magnitude (central differences, summed over
/// channels) above `threshold`.
pub fn edge_map(t: &Tensor<f64>, threshold: f64) -> Vec<bool> {
    let [_, c, h, w] = t.shape().0;
    (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let (x0, x1) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (y0, y1) = (y.saturating_sub(1), (y + 1).min(h - 1));
            let g: f64 = (0..c)
                .map(|ch| {
                    let gx = t[[0, ch, y, x1]] - t[[0, ch, y, x0]];
                    let gy = t[[0, ch, y1, x]] - t[[0, ch, y0, x]];
                    (gx * gx + gy * gy).sqrt()
                })
                .sum();
            g > threshold
        })
        .collect()
}

/// Mutual information in nats between two binary maps.
pub fn binary_mutual_information(a: &[bool], b: &[bool]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let mut joint = [[0.0f64; 2]; 2];
    for (&x, &y) in a.iter().zip(b) {
        joint[x as usize][y as usize] += 1.0;
    }
    let pa = [joint[0][0] + joint[0][1], joint[1][0] + joint[1][1]];
    let pb = [joint[0][0] + joint[1][0], joint[0][1] + joint[1][1]];
    let mut mi = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            if joint[i][j] > 0.0 {
                mi += joint[i][j] / n * (joint[i][j] * n / (pa[i] * pb[j])).ln();
            }
        }
    }
    mi
}

pub const DEPTH_EDGE_CM: f64 = 8.0;
pub const RGB_EDGE: f64 = 0.15;

/// Mean edge mutual information of aligned (depth, guide) pairs and of
/// pairs with the guide taken from the next scene.
pub fn edge_alignment_statistic(scenes: &[(&Tensor<f64>, &Tensor<f64>)]) -> (f64, f64) {
    let n = scenes.len();
    if n < 2 {
        return (f64::NAN, f64::NAN);
    }
    let de: Vec<Vec<bool>> = scenes.iter().map(|(d, _)| edge_map(d, DEPTH_EDGE_CM)).collect();
    let ge: Vec<Vec<bool>> = scenes.iter().map(|(_, g)| edge_map(g, RGB_EDGE)).collect();
    let aligned = (0..n).map(|i| binary_mutual_information(&de[i], &ge[i])).sum::<f64>() / n as f64;
    let shuffled = (0..n).map(|i| binary_mutual_information(&de[i], &ge[(i + 1) % n])).sum::<f64>() / n as f64;
    (aligned, shuffled)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Depth,
    Texture,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Depth => "depth",
            Task::Texture => "texture",
        }
    }

    /// `(input, guide, output)` channel counts.
    pub fn channels(self) -> (usize, usize, usize) {
        match self {
            Task::Depth => (1, 3, 1),
            Task::Texture => (1, 3, 3),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "depth" => Ok(Task::Depth),
            "texture" => Ok(Task::Texture),
            other => Err(Error::Config(format!("unknown task `{other}` (depth, texture)"))),
        }
    }
}

/// Depth normalization used for network inputs and outputs.
pub const DEPTH_CENTER_CM: f64 = 275.0;
pub const DEPTH_HALF_RANGE_CM: f64 = 225.0;

pub fn depth_to_network(cm: f64) -> f64 {
    (cm - DEPTH_CENTER_CM) / DEPTH_HALF_RANGE_CM
}

pub fn depth_from_network(v: f64) -> f64 {
    v * DEPTH_HALF_RANGE_CM + DEPTH_CENTER_CM
}

/// Depth mapped to `[0, 1]` for SSIM.
pub fn depth_to_unit(cm: f64) -> f64 {
    (cm - DEPTH_MIN_CM) / (DEPTH_MAX_CM - DEPTH_MIN_CM)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct DataConfig {
    pub task: Task,
    pub height: usize,
    pub width: usize,
    pub scale: u32,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    pub complexity: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { task: Task::Depth, height: 64, width: 64, scale: 4, n_train: 200, n_test: 50, seed: 0, complexity: 4 }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        match self.task {
            Task::Depth => {
                check_scene_dims(self.height, self.width)?;
                if !SUPPORTED_SCALES.contains(&self.scale) {
                    return Err(Error::Config(format!("scale {} not in {SUPPORTED_SCALES:?}", self.scale)));
                }
            }
            Task::Texture => {
                if self.height < 24 || self.width < 24 {
                    return Err(Error::Config("texture task needs at least 24x24".into()));
                }
            }
        }
        if self.n_train == 0 {
            return Err(Error::Config("n_train must be positive".into()));
        }
        Ok(())
    }

    /// Test indices follow the training indices; the ranges never overlap.
    pub fn test_indices(&self) -> std::ops::Range<usize> {
        self.n_train..self.n_train + self.n_test
    }

    pub fn train_indices(&self) -> std::ops::Range<usize> {
        0..self.n_train
    }
}

/// Seed of sample `index` under dataset seed `seed` (SplitMix64 finalizer).
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One training pair in physical units.
#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub index: usize,
    pub seed: u64,
    pub input: Tensor<f64>,
    pub guide: Tensor<f64>,
    pub target: Tensor<f64>,
}

pub fn gen_pair(cfg: &DataConfig, index: usize) -> Result<Pair> {
    let seed = sample_seed(cfg.seed, index);
    match cfg.task {
        Task::Depth => {
            let s = gen_scene(seed, cfg.height, cfg.width, cfg.complexity)?.degrade(cfg.scale)?;
            Ok(Pair { index, seed, input: s.depth_lowres_up, guide: s.rgb_guide, target: s.depth_gt })
        }
        Task::Texture => {
            let s = gen_texture_sample(seed, cfg.height, cfg.width)?;
            Ok(Pair { index, seed, input: s.sketch, guide: s.texture_patch, target: s.target })
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub train: Vec<Pair>,
    pub test: Vec<Pair>,
}

impl Dataset {
    pub fn generate(cfg: &DataConfig) -> Result<Self> {
        cfg.validate()?;
        let train = cfg.train_indices().map(|i| gen_pair(cfg, i)).collect::<Result<_>>()?;
        let test = cfg.test_indices().map(|i| gen_pair(cfg, i)).collect::<Result<_>>()?;
        Ok(Self { config: *cfg, train, test })
    }

    /// Same scenes, regenerated with a different degradation factor.
    pub fn with_scale(&self, scale: u32) -> Result<Self> {
        Self::generate(&DataConfig { scale, ..self.config })
    }
}

/// Maps physical-unit tensors to and from what the network sees.
impl Task {
    pub fn encode_input<T: Element>(self, t: &Tensor<f64>) -> Tensor<T> {
        match self {
            Task::Depth => t.map(depth_to_network).cast(),
            Task::Texture => t.map(|v| 2.0 * v - 1.0).cast(),
        }
    }

    pub fn encode_guide<T: Element>(self, t: &Tensor<f64>) -> Tensor<T> {
        t.map(|v| 2.0 * v - 1.0).cast()
    }

    pub fn encode_target<T: Element>(self, t: &Tensor<f64>) -> Tensor<T> {
        self.encode_input(t)
    }

    pub fn decode_output<T: Element>(self, t: &Tensor<T>) -> Tensor<f64> {
        let t: Tensor<f64> = t.cast();
        match self {
            Task::Depth => t.map(depth_from_network),
            Task::Texture => t.map(|v| (v + 1.0) / 2.0),
        }
    }

    /// Values in `[0, 1]` for SSIM and previews.
    pub fn to_unit(self, physical: &Tensor<f64>) -> Tensor<f64> {
        match self {
            Task::Depth => physical.map(depth_to_unit),
            Task::Texture => physical.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic_and_in_range() {
        let a = gen_scene(9, 64, 64, 4).unwrap();
        let b = gen_scene(9, 64, 64, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.depth_gt.data().iter().all(|&d| (DEPTH_MIN_CM..=DEPTH_MAX_CM).contains(&d)));
        assert!(a.rgb_guide.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_ne!(gen_scene(10, 64, 64, 4).unwrap(), a);
    }

    #[test]
    fn rejects_bad_dims_and_scales() {
        assert!(gen_scene(0, 60, 64, 1).is_err());
        let d = Tensor::<f64>::zeros(Shape::new(1, 1, 32, 32));
        assert!(degrade_depth(&d, 2).is_err());
        assert!(degrade_depth(&Tensor::<f64>::zeros(Shape::new(1, 1, 24, 24)), 16).is_err());
    }

    #[test]
    fn mutual_information_cases() {
        let a = [true, false, true, false];
        assert!((binary_mutual_information(&a, &a) - 2f64.ln()).abs() < 1e-12);
        let b = [true, true, false, false];
        assert!(binary_mutual_information(&a, &b).abs() < 1e-12);
    }

    #[test]
    fn sample_seeds_differ() {
        let s: std::collections::HashSet<u64> = (0..1000).map(|i| sample_seed(3, i)).collect();
        assert_eq!(s.len(), 1000);
    }

    #[test]
    fn network_mapping_roundtrip() {
        for d in [50.0, 275.0, 500.0] {
            assert!((depth_from_network(depth_to_network(d)) - d).abs() < 1e-12);
        }
        assert_eq!(depth_to_network(50.0), -1.0);
        assert_eq!(depth_to_network(500.0), 1.0);
    }
}
