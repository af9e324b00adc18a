//! Image IO, dataset folders and the seeded synthetic-shapes dataset.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{GlareError, Result, Scalar};

/// Label excluded from every metric.
pub const IGNORE_LABEL: u8 = 255;
pub const SHAPE_CLASSES: usize = 5;

/// An RGB image in `[0, 1]` with a per-pixel class mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage<S> {
    pub image: Array3<S>,
    pub mask: Array2<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub train_count: usize,
    pub val_count: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            train_count: 256,
            val_count: 64,
            size: 64,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn train<S: Scalar>(&self) -> Vec<LabeledImage<S>> {
        synthetic_shapes(self.train_count, self.size, self.seed)
    }

    /// Validation images come from a disjoint stream of the same generator.
    pub fn val<S: Scalar>(&self) -> Vec<LabeledImage<S>> {
        synthetic_shapes(self.val_count, self.size, self.seed ^ 0x5EED_0F0A_11DA_7A00)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Shape {
    Disk,
    Square,
    Triangle,
    Ring,
}

impl Shape {
    const ALL: [Shape; 4] = [Shape::Disk, Shape::Square, Shape::Triangle, Shape::Ring];

    fn class(self) -> u8 {
        match self {
            Shape::Disk => 1,
            Shape::Square => 2,
            Shape::Triangle => 3,
            Shape::Ring => 4,
        }
    }

    /// Whether pixel centre `(x, y)` lies inside a shape centred at `(cx, cy)` with radius `r`.
    fn contains(self, x: f64, y: f64, cx: f64, cy: f64, r: f64) -> bool {
        let (dx, dy) = (x - cx, y - cy);
        match self {
            Shape::Disk => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
            Shape::Triangle => {
                // Upward triangle with apex at (cx, cy − r) and base at y = cy + r.
                let t = (dy + r) / (2.0 * r);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * r
            }
            Shape::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
            }
        }
    }
}

/// Saturated, bright colour so shapes stand out from the grey background.
fn shape_color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    let h: f64 = rng.random_range(0.0..6.0);
    let s: f64 = rng.random_range(0.6..1.0);
    let v: f64 = rng.random_range(0.6..1.0);
    let f = h - h.floor();
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match h as usize {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// `count` images of `size × size` pixels: a noisy grey gradient background
/// (class 0) and one or two shapes (classes 1–4) in random saturated colours.
/// Later shapes occlude earlier ones in both image and mask.
pub fn synthetic_shapes<S: Scalar>(count: usize, size: usize, seed: u64) -> Vec<LabeledImage<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| shapes_image(size, &mut rng)).collect()
}

fn shapes_image<S: Scalar, R: Rng + ?Sized>(size: usize, rng: &mut R) -> LabeledImage<S> {
    let n = size as f64;
    let lo: f64 = rng.random_range(0.2..0.6);
    let hi: f64 = lo + rng.random_range(0.0..0.3);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let texture = rand_distr::Normal::new(0.0, 0.08).expect("valid std");
    let mut image = Array3::<f64>::zeros((3, size, size));
    let mut mask = Array2::<u8>::zeros((size, size));
    for y in 0..size {
        for x in 0..size {
            let t = ((x as f64 - n / 2.0) * ca + (y as f64 - n / 2.0) * sa) / n + 0.5;
            let v = lo + (hi - lo) * t.clamp(0.0, 1.0) + rng.sample(texture);
            for c in 0..3 {
                image[[c, y, x]] = v;
            }
        }
    }
    let k = rng.random_range(1..=2);
    for _ in 0..k {
        let shape = Shape::ALL[rng.random_range(0..4)];
        let r = rng.random_range(0.2..0.34) * n;
        let cx = rng.random_range(r..n - r);
        let cy = rng.random_range(r..n - r);
        let color = shape_color(rng);
        for y in 0..size {
            for x in 0..size {
                if shape.contains(x as f64 + 0.5, y as f64 + 0.5, cx, cy, r) {
                    mask[[y, x]] = shape.class();
                    for c in 0..3 {
                        image[[c, y, x]] = color[c];
                    }
                }
            }
        }
    }
    let noise = rand_distr::Normal::new(0.0, 0.02).expect("valid std");
    let image = image.mapv(|v| S::of((v + rng.sample(noise)).clamp(0.0, 1.0)));
    LabeledImage { image, mask }
}

/// Reads an image file as RGB in `[0, 1]`, channel-major.
pub fn load_image<S: Scalar>(path: &Path) -> Result<Array3<S>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = S::of(px[c] as f64 / 255.0);
        }
    }
    Ok(out)
}

/// Reads a single-channel label raster.
pub fn load_mask(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| img.get_pixel(x as u32, y as u32)[0]))
}

const IMAGE_EXTS: [&str; 3] = ["png", "jpg", "jpeg"];

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// All images of a directory in file-name order.
pub fn load_image_folder<S: Scalar>(dir: &Path) -> Result<Vec<Array3<S>>> {
    let files = image_files(dir)?;
    if files.is_empty() {
        return Err(GlareError::InvalidInput(format!("no images in {}", dir.display())));
    }
    files.iter().map(|p| load_image(p)).collect()
}

/// `root/images/*` paired with `root/masks/<same stem>.png`.
pub fn load_segmentation_folder<S: Scalar>(root: &Path) -> Result<Vec<LabeledImage<S>>> {
    let files = image_files(&root.join("images"))?;
    if files.is_empty() {
        return Err(GlareError::InvalidInput(format!("no images in {}", root.join("images").display())));
    }
    files
        .iter()
        .map(|p| {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let mpath = root.join("masks").join(format!("{stem}.png"));
            let image = load_image(p)?;
            let mask = load_mask(&mpath)?;
            if mask.dim() != (image.dim().1, image.dim().2) {
                return Err(GlareError::Shape(format!("mask {} does not match its image", mpath.display())));
            }
            Ok(LabeledImage { image, mask })
        })
        .collect()
}

/// Writes a `3×H×W` image with values in `[0, 1]` (clamped).
pub fn save_rgb<S: Scalar>(path: &Path, img: &Array3<S>) -> Result<()> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(GlareError::Shape(format!("expected 3 channels, got {c}")));
    }
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |ch: usize| (img[[ch, y as usize, x as usize]].as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    });
    buf.save(path)?;
    Ok(())
}

/// Writes a single-channel `H×W` map with values in `[0, 1]` (clamped).
pub fn save_gray<S: Scalar>(path: &Path, map: &Array2<S>) -> Result<()> {
    let (h, w) = map.dim();
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(map[[y as usize, x as usize]].as_f64().clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    buf.save(path)?;
    Ok(())
}

pub fn save_mask(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let (h, w) = mask.dim();
    image::GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([mask[[y as usize, x as usize]]])).save(path)?;
    Ok(())
}
