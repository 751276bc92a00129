//! Synthetic segmentation data: coloured, textured geometric shapes on a
//! noisy grey background.
//!
//! Shapes are rasterised on a grid of `cell_size` pixel cells, so every
//! label boundary falls on a cell edge. Each class has a base hue and a
//! stripe texture; each shape gets a small colour jitter and each image a
//! global tint, which gives the image-level feature genuine per-image
//! content. Background pixels carry the ignore label.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::alignment::{LabelMap, IGNORE};
use crate::encoders::Image;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub train_images: usize,
    pub val_images: usize,
    pub image_size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub cell_size: usize,
    /// Per-pixel Gaussian noise standard deviation.
    pub noise: f64,
    /// Half-range of the per-image, per-channel additive tint.
    pub tint: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            train_images: 1024,
            val_images: 128,
            image_size: 64,
            min_shapes: 1,
            max_shapes: 4,
            cell_size: 4,
            noise: 0.03,
            tint: 0.1,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub labels: LabelMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> Result<&[Sample]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            other => Err(Error::UnknownVariant {
                kind: "split",
                value: other.to_string(),
            }),
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InfeasibleSpec(m));
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return bad(format!("image size {} is not a multiple of 32", self.image_size));
        }
        if self.num_classes == 0 || self.num_classes >= IGNORE as usize {
            return bad(format!("class count {} outside 1..255", self.num_classes));
        }
        if self.cell_size == 0 || self.image_size % self.cell_size != 0 {
            return bad(format!(
                "cell size {} does not divide image size {}",
                self.cell_size, self.image_size
            ));
        }
        let cells = (self.image_size / self.cell_size).pow(2);
        if self.min_shapes == 0 || self.max_shapes < self.min_shapes {
            return bad(format!(
                "shape range {}..={} is empty",
                self.min_shapes, self.max_shapes
            ));
        }
        if self.max_shapes > cells {
            return bad(format!(
                "{} shapes cannot fit in {} cells",
                self.max_shapes, cells
            ));
        }
        if self.train_images == 0 {
            return bad("training split is empty".into());
        }
        if self.train_images * self.max_shapes < self.num_classes {
            return bad(format!(
                "{} training images with at most {} shapes cannot show {} classes",
                self.train_images, self.max_shapes, self.num_classes
            ));
        }
        if !(self.noise >= 0.0) || !(self.tint >= 0.0) {
            return bad("noise and tint must be non-negative".into());
        }
        Ok(())
    }
}

/// Base RGB colour of class `k` out of `n`: evenly spaced hues.
pub fn class_color(k: usize, n: usize) -> [f64; 3] {
    let h = k as f64 / n as f64 * 6.0;
    let (s, v) = (0.75, 0.85);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// Stripe texture offset for class `k` at pixel `(y, x)`.
fn texture(k: usize, y: usize, x: usize) -> f64 {
    let period = 2 + k % 3;
    let coord = if k % 2 == 0 { y } else { x };
    if (coord / period) % 2 == 0 {
        0.06
    } else {
        -0.06
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
}

impl Shape {
    fn random(grid: usize, rng: &mut ChaCha8Rng) -> Shape {
        let g = grid as f64;
        let lo = (g / 6.0).max(1.0);
        let hi = (g / 2.0).max(lo + 1.0);
        if rng.gen_bool(0.5) {
            let h = rng.gen_range(lo..hi);
            let w = rng.gen_range(lo..hi);
            let y0 = rng.gen_range(0.0..(g - h).max(1e-9));
            let x0 = rng.gen_range(0.0..(g - w).max(1e-9));
            Shape::Rect {
                y0,
                x0,
                y1: y0 + h,
                x1: x0 + w,
            }
        } else {
            let ry = rng.gen_range(lo / 2.0 + 0.5..hi / 2.0 + 0.5);
            let rx = rng.gen_range(lo / 2.0 + 0.5..hi / 2.0 + 0.5);
            Shape::Ellipse {
                cy: rng.gen_range(0.0..g),
                cx: rng.gen_range(0.0..g),
                ry,
                rx,
            }
        }
    }

    /// Whether the centre of cell `(i, j)` lies inside the shape.
    fn covers(&self, i: usize, j: usize) -> bool {
        let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Ellipse { cy, cx, ry, rx } => {
                let dy = (y - cy) / ry;
                let dx = (x - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
        }
    }
}

fn image_rng(seed: u64, split: u64, index: usize, attempt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((attempt << 40) | (split << 32) | index as u64);
    rng
}

/// Renders one image. `required` classes are drawn last (on top), in order.
fn render(spec: &DatasetSpec, required: &[usize], rng: &mut ChaCha8Rng) -> Sample {
    let n = spec.image_size;
    let cell = spec.cell_size;
    let grid = n / cell;
    let k = spec.num_classes;

    let n_shapes = rng
        .gen_range(spec.min_shapes..=spec.max_shapes)
        .max(required.len().min(spec.max_shapes));
    let n_free = n_shapes.saturating_sub(required.len());
    let mut classes: Vec<usize> = (0..n_free).map(|_| rng.gen_range(0..k)).collect();
    classes.extend_from_slice(required);

    let mut cell_class = vec![IGNORE; grid * grid];
    let mut cell_jitter = vec![[0.0f64; 3]; grid * grid];
    for &cls in &classes {
        let shape = Shape::random(grid, rng);
        let jitter = [
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.05..0.05),
            rng.gen_range(-0.05..0.05),
        ];
        for i in 0..grid {
            for j in 0..grid {
                if shape.covers(i, j) {
                    cell_class[i * grid + j] = cls as u8;
                    cell_jitter[i * grid + j] = jitter;
                }
            }
        }
    }

    let tint = [
        rng.gen_range(-spec.tint..=spec.tint),
        rng.gen_range(-spec.tint..=spec.tint),
        rng.gen_range(-spec.tint..=spec.tint),
    ];
    let noise = Normal::new(0.0, spec.noise).expect("noise is non-negative");
    let mut pixels = Vec::with_capacity(n * n * 3);
    let mut labels = Vec::with_capacity(n * n);
    for y in 0..n {
        for x in 0..n {
            let c = (y / cell) * grid + x / cell;
            let lab = cell_class[c];
            labels.push(lab);
            let base = if lab == IGNORE {
                [0.5, 0.5, 0.5]
            } else {
                let col = class_color(lab as usize, k);
                let t = texture(lab as usize, y, x);
                let j = cell_jitter[c];
                [col[0] + t + j[0], col[1] + t + j[1], col[2] + t + j[2]]
            };
            for ch in 0..3 {
                let v = base[ch] + tint[ch] + noise.sample(rng);
                pixels.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Sample {
        image: Image::new(n, n, pixels).expect("size validated"),
        labels: LabelMap::new(n, n, labels).expect("size validated"),
    }
}

const MAX_ATTEMPTS: u64 = 32;

fn render_with_required(
    spec: &DatasetSpec,
    split: u64,
    index: usize,
    required: &[usize],
) -> Result<Sample> {
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = image_rng(spec.seed, split, index, attempt);
        let s = render(spec, required, &mut rng);
        if required
            .iter()
            .all(|&c| s.labels.labels.contains(&(c as u8)))
        {
            return Ok(s);
        }
    }
    Err(Error::InfeasibleSpec(format!(
        "could not place classes {required:?} visibly in image {index}"
    )))
}

/// Generates train and val splits. Every class appears in at least one
/// training image.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let k = spec.num_classes;

    // Spread the classes round-robin over training images, shuffled.
    let mut order: Vec<usize> = (0..k).collect();
    let mut rng = image_rng(spec.seed, 2, 0, 0);
    rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
    let mut required: Vec<Vec<usize>> = vec![Vec::new(); spec.train_images];
    for (i, &c) in order.iter().enumerate() {
        required[i % spec.train_images].push(c);
    }

    let train = required
        .iter()
        .enumerate()
        .map(|(i, req)| render_with_required(spec, 0, i, req))
        .collect::<Result<Vec<_>>>()?;
    let val = (0..spec.val_images)
        .map(|i| render_with_required(spec, 1, i, &[]))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { train, val })
}

/// Pixel count per class over a split (ignored pixels excluded).
pub fn class_histogram(samples: &[Sample], k: usize) -> Vec<usize> {
    let mut h = vec![0; k];
    for s in samples {
        for &l in &s.labels.labels {
            if l != IGNORE && (l as usize) < k {
                h[l as usize] += 1;
            }
        }
    }
    h
}
