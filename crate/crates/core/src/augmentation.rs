//! Multi-crop view generation with exact geometric provenance, and patch-level
//! Gaussian blurring.

use std::collections::BTreeSet;

use ndarray::Array3;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::vit::PatchGrid;
use crate::{GlareError, Result, Scalar};

/// Geometric history of a view: crop box in source pixels, then resize to
/// `out_size × out_size`, then optional horizontal flip.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformRecord {
    pub crop_x: usize,
    pub crop_y: usize,
    pub crop_w: usize,
    pub crop_h: usize,
    pub flipped: bool,
    pub out_size: usize,
    pub source_w: usize,
    pub source_h: usize,
}

impl TransformRecord {
    pub fn identity(width: usize, height: usize, out_size: usize) -> Self {
        Self {
            crop_x: 0,
            crop_y: 0,
            crop_w: width,
            crop_h: height,
            flipped: false,
            out_size,
            source_w: width,
            source_h: height,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.crop_w > 0
            && self.crop_h > 0
            && self.out_size > 0
            && self.crop_x + self.crop_w <= self.source_w
            && self.crop_y + self.crop_h <= self.source_h
    }

    /// Source-image position of the center of output pixel `(u, v)`.
    pub fn source_point(&self, u: f64, v: f64) -> (f64, f64) {
        let u = if self.flipped { self.out_size as f64 - u } else { u };
        let sx = self.crop_w as f64 / self.out_size as f64;
        let sy = self.crop_h as f64 / self.out_size as f64;
        (self.crop_x as f64 + u * sx, self.crop_y as f64 + v * sy)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewRole {
    Global,
    Local,
}

#[derive(Clone, Debug, PartialEq)]
pub struct View<S> {
    pub pixels: Array3<S>,
    pub record: TransformRecord,
    pub role: ViewRole,
    /// Sorted indices of blurred patch cells.
    pub blur_mask: Vec<usize>,
}

impl<S: Scalar> View<S> {
    pub fn grid(&self, patch_size: usize) -> Result<PatchGrid> {
        let (c, h, w) = self.pixels.dim();
        PatchGrid::for_image(c, h, w, patch_size)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugConfig {
    pub global_size: usize,
    pub local_size: usize,
    pub n_local: usize,
    pub global_crop_scale: [f64; 2],
    pub local_crop_scale: [f64; 2],
    pub crop_ratio: [f64; 2],
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_prob: f64,
    /// Gaussian-blur probability for (first global, second global, locals).
    pub blur_prob: [f64; 3],
    /// Solarization probability for (first global, second global, locals).
    pub solarize_prob: [f64; 3],
    pub blur_sigma: [f64; 2],
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// When set, photometric draws come from streams keyed by this seed and the
    /// view slot instead of the per-image stream.
    pub photometric_seed: Option<u64>,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            global_size: 224,
            local_size: 96,
            n_local: 10,
            global_crop_scale: [0.25, 1.0],
            local_crop_scale: [0.05, 0.25],
            crop_ratio: [3.0 / 4.0, 4.0 / 3.0],
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            grayscale_prob: 0.2,
            blur_prob: [1.0, 0.1, 0.5],
            solarize_prob: [0.0, 0.2, 0.0],
            blur_sigma: [0.1, 2.0],
            mean: vec![0.485, 0.456, 0.406],
            std: vec![0.229, 0.224, 0.225],
            photometric_seed: None,
        }
    }
}

impl AugConfig {
    /// No photometric distortion, no flip, full-image crops, identity normalization.
    pub fn identity(channels: usize) -> Self {
        Self {
            global_crop_scale: [1.0, 1.0],
            local_crop_scale: [1.0, 1.0],
            flip_prob: 0.0,
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: [0.0; 3],
            solarize_prob: [0.0; 3],
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [self.flip_prob, self.jitter_prob, self.grayscale_prob]
            .into_iter()
            .chain(self.blur_prob)
            .chain(self.solarize_prob);
        for p in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(GlareError::Config(format!("probability {p} outside [0, 1]")));
            }
        }
        for s in [self.global_crop_scale, self.local_crop_scale] {
            if !(s[0] > 0.0 && s[0] <= s[1] && s[1] <= 1.0) {
                return Err(GlareError::Config(format!("crop scale {s:?} must lie within (0, 1]")));
            }
        }
        if self.mean.len() != self.std.len() || self.std.iter().any(|s| *s <= 0.0) {
            return Err(GlareError::Config("normalization mean/std mismatch".into()));
        }
        if self.global_size == 0 || self.local_size == 0 {
            return Err(GlareError::Config("view sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Random-resized-crop box: area fraction in `scale`, log-uniform aspect in `ratio`,
/// ten attempts then a centered fallback.
pub fn sample_crop<R: Rng + ?Sized>(
    rng: &mut R,
    width: usize,
    height: usize,
    scale: [f64; 2],
    ratio: [f64; 2],
) -> (usize, usize, usize, usize) {
    let area = (width * height) as f64;
    let (lr0, lr1) = (ratio[0].ln(), ratio[1].ln());
    for _ in 0..10 {
        let target = area * uniform(rng, scale[0], scale[1]);
        let aspect = uniform(rng, lr0, lr1).exp();
        let w = (target * aspect).sqrt().round() as usize;
        let h = (target / aspect).sqrt().round() as usize;
        if w > 0 && h > 0 && w <= width && h <= height {
            let y = rng.random_range(0..=height - h);
            let x = rng.random_range(0..=width - w);
            return (x, y, w, h);
        }
    }
    let in_ratio = width as f64 / height as f64;
    let (w, h) = if in_ratio < ratio[0] {
        (width, ((width as f64 / ratio[0]).round() as usize).clamp(1, height))
    } else if in_ratio > ratio[1] {
        (((height as f64 * ratio[1]).round() as usize).clamp(1, width), height)
    } else {
        (width, height)
    };
    ((width - w) / 2, (height - h) / 2, w, h)
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Crops `rec`'s box out of `image` and bilinearly resizes it (half-pixel
/// centers, samples clamped to the crop), then applies the recorded flip.
pub fn crop_resize<S: Scalar>(image: &Array3<S>, rec: &TransformRecord) -> Array3<S> {
    let c = image.dim().0;
    let out = rec.out_size;
    let mut dst = Array3::zeros((c, out, out));
    let sx = rec.crop_w as f64 / out as f64;
    let sy = rec.crop_h as f64 / out as f64;
    let axis = |o: usize, s: f64, start: usize, len: usize| {
        let x = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (len - 1) as f64);
        let x0 = x.floor() as usize;
        let x1 = (x0 + 1).min(len - 1);
        (start + x0, start + x1, S::of(x - x0 as f64))
    };
    let xs: Vec<_> = (0..out).map(|o| axis(o, sx, rec.crop_x, rec.crop_w)).collect();
    let ys: Vec<_> = (0..out).map(|o| axis(o, sy, rec.crop_y, rec.crop_h)).collect();
    for ch in 0..c {
        for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                let top = image[[ch, y0, x0]] * (S::one() - tx) + image[[ch, y0, x1]] * tx;
                let bot = image[[ch, y1, x0]] * (S::one() - tx) + image[[ch, y1, x1]] * tx;
                let v = top * (S::one() - ty) + bot * ty;
                let dx = if rec.flipped { out - 1 - ox } else { ox };
                dst[[ch, oy, dx]] = v;
            }
        }
    }
    dst
}

/// Bilinear resize of a whole image to `size × size`.
pub fn resize<S: Scalar>(image: &Array3<S>, size: usize) -> Array3<S> {
    let (_, h, w) = image.dim();
    crop_resize(image, &TransformRecord::identity(w, h, size))
}

/// Produces 2 global views followed by `n_local` local views.
pub fn make_views<S: Scalar, R: Rng + ?Sized>(image: &Array3<S>, cfg: &AugConfig, rng: &mut R) -> Result<Vec<View<S>>> {
    cfg.validate()?;
    let (c, h, w) = image.dim();
    if c == 0 || (h * w) as f64 * cfg.local_crop_scale[0] < 1.0 {
        return Err(GlareError::InvalidInput(format!(
            "source image {c}×{h}×{w} is smaller than the minimum crop"
        )));
    }
    if cfg.mean.len() != c {
        return Err(GlareError::InvalidInput(format!(
            "normalization configured for {} channels, image has {c}",
            cfg.mean.len()
        )));
    }
    let mut views = Vec::with_capacity(2 + cfg.n_local);
    for slot in 0..2 + cfg.n_local {
        let (role, size, scale, kind) = if slot < 2 {
            (ViewRole::Global, cfg.global_size, cfg.global_crop_scale, slot)
        } else {
            (ViewRole::Local, cfg.local_size, cfg.local_crop_scale, 2)
        };
        let (x, y, cw, ch) = sample_crop(rng, w, h, scale, cfg.crop_ratio);
        let flipped = cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob);
        let photo_seed = match cfg.photometric_seed {
            Some(s) => s ^ (slot as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            None => rng.next_u64(),
        };
        let record = TransformRecord {
            crop_x: x,
            crop_y: y,
            crop_w: cw,
            crop_h: ch,
            flipped,
            out_size: size,
            source_w: w,
            source_h: h,
        };
        let mut pixels = crop_resize(image, &record);
        let mut prng = ChaCha8Rng::seed_from_u64(photo_seed);
        photometric(&mut pixels, cfg, kind, &mut prng);
        normalize(&mut pixels, &cfg.mean, &cfg.std);
        views.push(View {
            pixels,
            record,
            role,
            blur_mask: Vec::new(),
        });
    }
    Ok(views)
}

fn photometric<S: Scalar, R: Rng + ?Sized>(img: &mut Array3<S>, cfg: &AugConfig, kind: usize, rng: &mut R) {
    let rgb = img.dim().0 == 3;
    if rgb && cfg.jitter_prob > 0.0 && rng.random_bool(cfg.jitter_prob) {
        let mut order = [0usize, 1, 2, 3];
        order.shuffle(rng);
        for op in order {
            match op {
                0 if cfg.brightness > 0.0 => {
                    let f = S::of(uniform(rng, 1.0 - cfg.brightness, 1.0 + cfg.brightness));
                    img.mapv_inplace(|v| clamp01(v * f));
                }
                1 if cfg.contrast > 0.0 => {
                    let f = S::of(uniform(rng, 1.0 - cfg.contrast, 1.0 + cfg.contrast));
                    let gray = grayscale(img);
                    let m = gray.iter().copied().sum::<S>() / S::of(gray.len() as f64);
                    img.mapv_inplace(|v| clamp01(f * v + (S::one() - f) * m));
                }
                2 if cfg.saturation > 0.0 => {
                    let f = S::of(uniform(rng, 1.0 - cfg.saturation, 1.0 + cfg.saturation));
                    let gray = grayscale(img);
                    for ch in 0..3 {
                        for ((y, x), gv) in gray.indexed_iter() {
                            let v = img[[ch, y, x]];
                            img[[ch, y, x]] = clamp01(f * v + (S::one() - f) * *gv);
                        }
                    }
                }
                3 if cfg.hue > 0.0 => {
                    let shift = uniform(rng, -cfg.hue, cfg.hue);
                    hue_shift(img, shift);
                }
                _ => {}
            }
        }
    }
    if rgb && cfg.grayscale_prob > 0.0 && rng.random_bool(cfg.grayscale_prob) {
        let gray = grayscale(img);
        for ch in 0..3 {
            for ((y, x), gv) in gray.indexed_iter() {
                img[[ch, y, x]] = *gv;
            }
        }
    }
    if cfg.blur_prob[kind] > 0.0 && rng.random_bool(cfg.blur_prob[kind]) {
        let sigma = uniform(rng, cfg.blur_sigma[0], cfg.blur_sigma[1]);
        let radius = (3.0 * sigma).ceil().max(1.0) as usize;
        let kernel = gaussian_kernel::<S>(2 * radius + 1, sigma);
        let (c, h, w) = img.dim();
        for ch in 0..c {
            blur_region(img, ch, 0, 0, h, w, &kernel);
        }
    }
    if cfg.solarize_prob[kind] > 0.0 && rng.random_bool(cfg.solarize_prob[kind]) {
        let half = S::of(0.5);
        img.mapv_inplace(|v| if v >= half { S::one() - v } else { v });
    }
}

fn clamp01<S: Scalar>(v: S) -> S {
    v.max(S::zero()).min(S::one())
}

fn grayscale<S: Scalar>(img: &Array3<S>) -> ndarray::Array2<S> {
    let (_, h, w) = img.dim();
    ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
        S::of(0.299) * img[[0, y, x]] + S::of(0.587) * img[[1, y, x]] + S::of(0.114) * img[[2, y, x]]
    })
}

fn hue_shift<S: Scalar>(img: &mut Array3<S>, shift: f64) {
    let (_, h, w) = img.dim();
    for y in 0..h {
        for x in 0..w {
            let (r, g, b) = (img[[0, y, x]].as_f64(), img[[1, y, x]].as_f64(), img[[2, y, x]].as_f64());
            let max = r.max(g).max(b);
            let min = r.min(g).min(b);
            let delta = max - min;
            let v = max;
            let s = if max > 0.0 { delta / max } else { 0.0 };
            let mut hue = if delta == 0.0 {
                0.0
            } else if max == r {
                ((g - b) / delta).rem_euclid(6.0) / 6.0
            } else if max == g {
                ((b - r) / delta + 2.0) / 6.0
            } else {
                ((r - g) / delta + 4.0) / 6.0
            };
            hue = (hue + shift).rem_euclid(1.0);
            let i = (hue * 6.0).floor();
            let f = hue * 6.0 - i;
            let p = v * (1.0 - s);
            let q = v * (1.0 - s * f);
            let t = v * (1.0 - s * (1.0 - f));
            let (nr, ng, nb) = match i as i64 % 6 {
                0 => (v, t, p),
                1 => (q, v, p),
                2 => (p, v, t),
                3 => (p, q, v),
                4 => (t, p, v),
                _ => (v, p, q),
            };
            img[[0, y, x]] = S::of(nr);
            img[[1, y, x]] = S::of(ng);
            img[[2, y, x]] = S::of(nb);
        }
    }
}

pub fn normalize<S: Scalar>(img: &mut Array3<S>, mean: &[f64], std: &[f64]) {
    for (ch, mut plane) in img.outer_iter_mut().enumerate() {
        let (m, s) = (S::of(mean[ch]), S::of(std[ch]));
        plane.mapv_inplace(|v| (v - m) / s);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlurMode {
    Random,
    Blockwise,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioPolicy {
    /// Zero with probability `zero_prob`, otherwise uniform in `[ratio_min, ratio_max]`.
    Stochastic,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlurConfig {
    pub mode: BlurMode,
    pub ratio_policy: RatioPolicy,
    pub fixed_ratio: f64,
    pub zero_prob: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub kernel: usize,
    pub sigma: f64,
}

impl Default for BlurConfig {
    fn default() -> Self {
        Self {
            mode: BlurMode::Random,
            ratio_policy: RatioPolicy::Stochastic,
            fixed_ratio: 0.3,
            zero_prob: 0.5,
            ratio_min: 0.1,
            ratio_max: 0.5,
            kernel: 5,
            sigma: 3.0,
        }
    }
}

impl BlurConfig {
    pub fn sample_ratio<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.ratio_policy {
            RatioPolicy::Fixed => self.fixed_ratio,
            RatioPolicy::Stochastic => {
                if rng.random_bool(self.zero_prob) {
                    0.0
                } else {
                    uniform(rng, self.ratio_min, self.ratio_max)
                }
            }
        }
    }
}

/// Blur ratio: 0 with probability 0.5, else uniform on `[0.1, 0.5]`.
pub fn sample_blur_ratio<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    BlurConfig::default().sample_ratio(rng)
}

/// Normalized 1-D Gaussian kernel of odd length.
pub fn gaussian_kernel<S: Scalar>(size: usize, sigma: f64) -> Vec<S> {
    let r = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| S::of(v / z)).collect()
}

/// Half-sample symmetric reflection of `i` into `[0, n)`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable blur of one channel inside the rectangle, reflecting at its border
/// so no pixel outside the rectangle is read or written.
fn blur_region<S: Scalar>(img: &mut Array3<S>, ch: usize, y0: usize, x0: usize, h: usize, w: usize, kernel: &[S]) {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![S::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = S::zero();
            for (k, kv) in kernel.iter().enumerate() {
                let xx = reflect(x as isize + k as isize - r, w);
                acc += *kv * img[[ch, y0 + y, x0 + xx]];
            }
            tmp[y * w + x] = acc;
        }
    }
    for y in 0..h {
        for x in 0..w {
            let mut acc = S::zero();
            for (k, kv) in kernel.iter().enumerate() {
                let yy = reflect(y as isize + k as isize - r, h);
                acc += *kv * tmp[yy * w + x];
            }
            img[[ch, y0 + y, x0 + x]] = acc;
        }
    }
}

/// Selects `⌊ratio·N⌋` patch cells and Gaussian-blurs each one independently.
#[allow(clippy::too_many_arguments)]
pub fn blur_patches<S: Scalar, R: Rng + ?Sized>(
    view: &View<S>,
    patch_size: usize,
    ratio: f64,
    mode: BlurMode,
    kernel: usize,
    sigma: f64,
    rng: &mut R,
) -> Result<View<S>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(GlareError::InvalidInput(format!("blur ratio {ratio} outside [0, 1]")));
    }
    if kernel % 2 == 0 || sigma <= 0.0 {
        return Err(GlareError::InvalidInput(format!(
            "blur kernel must be odd with positive sigma (got {kernel}, {sigma})"
        )));
    }
    let grid = view.grid(patch_size)?;
    let n = grid.len();
    let count = ((ratio * n as f64) + 1e-9).floor() as usize;
    let count = count.min(n);
    let selected: Vec<usize> = match mode {
        BlurMode::Random => {
            let mut v = index::sample(rng, n, count).into_vec();
            v.sort_unstable();
            v
        }
        BlurMode::Blockwise => block_mask(grid, count, rng).into_iter().collect(),
    };
    let weights = gaussian_kernel::<S>(kernel, sigma);
    let mut out = view.clone();
    let p = patch_size;
    for &idx in &selected {
        let (r, c) = grid.coords(idx);
        for ch in 0..grid.channels {
            blur_region(&mut out.pixels, ch, r * p, c * p, p, p, &weights);
        }
    }
    let mut mask: BTreeSet<usize> = view.blur_mask.iter().copied().collect();
    mask.extend(selected);
    out.blur_mask = mask.into_iter().collect();
    Ok(out)
}

/// Block-wise cell selection in the style of masked-image-modeling samplers:
/// rectangles with log-uniform aspect in `[0.3, 1/0.3]`, topped up with random
/// cells if the blocks cannot reach `count` exactly.
fn block_mask<R: Rng + ?Sized>(grid: PatchGrid, count: usize, rng: &mut R) -> BTreeSet<usize> {
    let mut mask = BTreeSet::new();
    let (lr0, lr1) = (0.3f64.ln(), (1.0 / 0.3f64).ln());
    while mask.len() < count {
        let remaining = count - mask.len();
        let mut added = 0;
        for _ in 0..10 {
            let target = uniform(rng, remaining.min(4) as f64, remaining as f64 + 1.0).floor().max(1.0);
            let aspect = uniform(rng, lr0, lr1).exp();
            let h = ((target * aspect).sqrt().round() as usize).max(1);
            let w = ((target / aspect).sqrt().round() as usize).max(1);
            if h > grid.rows || w > grid.cols {
                continue;
            }
            let top = rng.random_range(0..=grid.rows - h);
            let left = rng.random_range(0..=grid.cols - w);
            let cells: Vec<usize> = (top..top + h)
                .flat_map(|r| (left..left + w).map(move |c| (r, c)))
                .map(|(r, c)| grid.index(r, c))
                .filter(|i| !mask.contains(i))
                .collect();
            if !cells.is_empty() && cells.len() <= remaining {
                added = cells.len();
                mask.extend(cells);
                break;
            }
        }
        if added == 0 {
            break;
        }
    }
    if mask.len() < count {
        let mut free: Vec<usize> = (0..grid.len()).filter(|i| !mask.contains(i)).collect();
        free.shuffle(rng);
        mask.extend(free.into_iter().take(count - mask.len()));
    }
    mask
}
