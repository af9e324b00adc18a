//! Segmentation probe and metrics, attention heatmaps, PCA embeddings and
//! geometry overlays.

use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::normalize;
use crate::correspondence::CorrespondenceMap;
use crate::data::{save_gray, save_rgb, LabeledImage, IGNORE_LABEL};
use crate::graph::{softmax_rows, Graph, Var};
use crate::params::{Param, ParamGroup, Parameterized, Trainable};
use crate::regions::Region;
use crate::training::{stream, AdamW, OptimConfig};
use crate::vit::{randn, PatchGrid, VisionTransformer};
use crate::{GlareError, Result, Scalar};

/// Confusion matrix indexed `[gt][pred]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    pub counts: Array2<u64>,
}

impl Confusion {
    pub fn new(n_classes: usize) -> Self {
        Self {
            counts: Array2::zeros((n_classes, n_classes)),
        }
    }

    pub fn add(&mut self, pred: &Array2<u8>, gt: &Array2<u8>) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(GlareError::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim())));
        }
        let n = self.counts.nrows();
        for (p, g) in pred.iter().zip(gt.iter()) {
            if *g == IGNORE_LABEL {
                continue;
            }
            let (p, g) = (*p as usize, *g as usize);
            if g >= n || p >= n {
                return Err(GlareError::InvalidInput(format!("label {} out of range for {n} classes", g.max(p))));
            }
            self.counts[[g, p]] += 1;
        }
        Ok(())
    }

    pub fn metrics(&self) -> SegMetrics {
        let n = self.counts.nrows();
        let total: u64 = self.counts.sum();
        let diag: u64 = (0..n).map(|i| self.counts[[i, i]]).sum();
        let mut iou = Vec::with_capacity(n);
        let mut acc = Vec::with_capacity(n);
        for c in 0..n {
            let gt_c: u64 = self.counts.row(c).sum();
            let pred_c: u64 = self.counts.column(c).sum();
            let tp = self.counts[[c, c]];
            if gt_c == 0 {
                iou.push(None);
                acc.push(None);
            } else {
                iou.push(Some(tp as f64 / (gt_c + pred_c - tp) as f64));
                acc.push(Some(tp as f64 / gt_c as f64));
            }
        }
        let mean = |v: &[Option<f64>]| {
            let present: Vec<f64> = v.iter().flatten().copied().collect();
            if present.is_empty() {
                0.0
            } else {
                present.iter().sum::<f64>() / present.len() as f64
            }
        };
        SegMetrics {
            miou: mean(&iou),
            aacc: if total == 0 { 0.0 } else { diag as f64 / total as f64 },
            macc: mean(&acc),
            per_class_iou: iou,
        }
    }
}

/// Class-wise scores averaged over the classes present in the ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    pub miou: f64,
    pub aacc: f64,
    pub macc: f64,
    /// `None` for classes absent from the ground truth.
    pub per_class_iou: Vec<Option<f64>>,
}

pub fn seg_metrics(pred: &Array2<u8>, gt: &Array2<u8>, n_classes: usize) -> Result<SegMetrics> {
    let mut c = Confusion::new(n_classes);
    c.add(pred, gt)?;
    Ok(c.metrics())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub hidden: usize,
    pub n_classes: usize,
    /// Also fine-tune the adapters (backbone stays frozen).
    pub train_adapters: bool,
    pub seeds: Vec<u64>,
    pub init_std: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            iters: 500,
            batch_size: 8,
            lr: 3e-3,
            weight_decay: 0.01,
            hidden: 32,
            n_classes: crate::data::SHAPE_CLASSES,
            train_adapters: true,
            seeds: vec![0, 1, 2],
            init_std: 0.1,
        }
    }
}

/// Two stages of (2× nearest upsampling, 3×3 convolution), ReLU between them,
/// from the patch-token grid to class logits at 4× the grid resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct SegProbe<S> {
    pub conv1_w: Param<S>,
    pub conv1_b: Param<S>,
    pub conv2_w: Param<S>,
    pub conv2_b: Param<S>,
}

impl<S: Scalar> SegProbe<S> {
    pub fn init<R: Rng + ?Sized>(dim: usize, cfg: &ProbeConfig, rng: &mut R) -> Self {
        let p = |n: &str, decay, v| Param::new(format!("probe.{n}"), ParamGroup::Probe, decay, v);
        let std1 = cfg.init_std / (dim as f64 / 32.0).sqrt().max(1.0);
        Self {
            conv1_w: p("conv1.weight", true, randn(rng, 9 * dim, cfg.hidden, std1)),
            conv1_b: p("conv1.bias", false, Array2::zeros((1, cfg.hidden))),
            conv2_w: p("conv2.weight", true, randn(rng, 9 * cfg.hidden, cfg.n_classes, cfg.init_std)),
            conv2_b: p("conv2.bias", false, Array2::zeros((1, cfg.n_classes))),
        }
    }

    /// `tokens` is the row-major `rows·cols × D` patch matrix; the result is
    /// `(4·rows)·(4·cols) × classes`.
    pub fn forward(&self, g: &mut Graph<S>, tokens: Var, rows: usize, cols: usize) -> Var {
        let x = upsample2(g, tokens, rows, cols);
        let x = conv3x3(g, x, 2 * rows, 2 * cols, &self.conv1_w, &self.conv1_b);
        let x = g.relu(x);
        let x = upsample2(g, x, 2 * rows, 2 * cols);
        conv3x3(g, x, 4 * rows, 4 * cols, &self.conv2_w, &self.conv2_b)
    }
}

impl<S: Scalar> Parameterized<S> for SegProbe<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<S>)) {
        for p in [&self.conv1_w, &self.conv1_b, &self.conv2_w, &self.conv2_b] {
            f(p);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        for p in [&mut self.conv1_w, &mut self.conv1_b, &mut self.conv2_w, &mut self.conv2_b] {
            f(p);
        }
    }
}

fn upsample2<S: Scalar>(g: &mut Graph<S>, x: Var, rows: usize, cols: usize) -> Var {
    let idx = (0..4 * rows * cols)
        .map(|i| {
            let (r, c) = (i / (2 * cols), i % (2 * cols));
            Some((r / 2) * cols + c / 2)
        })
        .collect();
    g.gather_rows(x, idx)
}

fn conv3x3<S: Scalar>(g: &mut Graph<S>, x: Var, rows: usize, cols: usize, w: &Param<S>, b: &Param<S>) -> Var {
    let mut taps = Vec::with_capacity(9);
    for dy in -1isize..=1 {
        for dx in -1isize..=1 {
            let idx = (0..rows * cols)
                .map(|i| {
                    let (r, c) = ((i / cols) as isize + dy, (i % cols) as isize + dx);
                    (r >= 0 && c >= 0 && (r as usize) < rows && (c as usize) < cols).then(|| r as usize * cols + c as usize)
                })
                .collect();
            taps.push(g.gather_rows(x, idx));
        }
    }
    let cols_mat = g.concat_cols(&taps);
    let wv = g.param(w);
    let bv = g.param(b);
    let y = g.matmul(cols_mat, wv);
    g.add_row(y, bv)
}

/// Nearest-neighbour sampling of a mask at pixel centres of an `rows × cols` grid.
pub fn downsample_mask(mask: &Array2<u8>, rows: usize, cols: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((rows, cols), |(r, c)| {
        let y = (((r as f64 + 0.5) * h as f64 / rows as f64).floor() as usize).min(h - 1);
        let x = (((c as f64 + 0.5) * w as f64 / cols as f64).floor() as usize).min(w - 1);
        mask[[y, x]]
    })
}

/// Half-pixel bilinear resampling of an `h × w` map to `out_h × out_w`, edges clamped.
pub fn upsample_bilinear<S: Scalar>(map: &Array2<S>, out_h: usize, out_w: usize) -> Array2<S> {
    let (h, w) = map.dim();
    let coord = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let v = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = v.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, v - i0 as f64)
    };
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let (y0, y1, fy) = coord(y, out_h, h);
        let (x0, x1, fx) = coord(x, out_w, w);
        let (fy, fx) = (S::of(fy), S::of(fx));
        let top = map[[y0, x0]] * (S::one() - fx) + map[[y0, x1]] * fx;
        let bot = map[[y1, x0]] * (S::one() - fx) + map[[y1, x1]] * fx;
        top * (S::one() - fy) + bot * fy
    })
}

/// Normalizes a `[0, 1]` RGB image the way the encoder expects.
pub fn prepare_input<S: Scalar>(image: &Array3<S>, mean: &[f64], std: &[f64]) -> Array3<S> {
    let mut x = image.clone();
    normalize(&mut x, mean, std);
    x
}

/// Per-pixel class prediction.
pub fn predict<S: Scalar>(encoder: &VisionTransformer<S>, probe: &SegProbe<S>, pixels: &Array3<S>) -> Result<Array2<u8>> {
    let mut g = Graph::inference();
    let out = encoder.forward(&mut g, pixels, None)?;
    let (rows, cols) = (out.grid.rows, out.grid.cols);
    let logits = probe.forward(&mut g, out.patches, rows, cols);
    let logits = g.value(logits);
    let (_, h, w) = pixels.dim();
    let k = logits.ncols();
    let planes: Vec<Array2<S>> = (0..k)
        .map(|c| {
            let m = Array2::from_shape_fn((4 * rows, 4 * cols), |(r, cc)| logits[[r * 4 * cols + cc, c]]);
            upsample_bilinear(&m, h, w)
        })
        .collect();
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        crate::regions::argmax(planes.iter().map(|p| p[[y, x]])) as u8
    }))
}

pub fn evaluate_probe<S: Scalar>(
    encoder: &VisionTransformer<S>,
    probe: &SegProbe<S>,
    val: &[LabeledImage<S>],
    mean: &[f64],
    std: &[f64],
    n_classes: usize,
) -> Result<SegMetrics> {
    use rayon::prelude::*;
    let preds: Vec<Array2<u8>> = val
        .par_iter()
        .map(|s| predict(encoder, probe, &prepare_input(&s.image, mean, std)))
        .collect::<Result<_>>()?;
    let mut conf = Confusion::new(n_classes);
    for (p, s) in preds.iter().zip(val) {
        conf.add(p, &s.mask)?;
    }
    Ok(conf.metrics())
}

/// Trains a fresh probe (and optionally the adapters) on `train` and scores
/// it on `val`. `iters = 0` scores the untrained probe.
#[allow(clippy::too_many_arguments)]
pub fn finetune_probe<S: Scalar>(
    encoder: &VisionTransformer<S>,
    train: &[LabeledImage<S>],
    val: &[LabeledImage<S>],
    cfg: &ProbeConfig,
    mean: &[f64],
    std: &[f64],
    seed: u64,
) -> Result<SegMetrics> {
    use rayon::prelude::*;
    if train.is_empty() || val.is_empty() {
        return Err(GlareError::InvalidInput("probe needs non-empty train and val sets".into()));
    }
    let mut encoder = encoder.clone();
    let mut rng = stream(seed, 0, 0, 0x9E0B);
    let mut probe = SegProbe::init(encoder.config.embed_dim, cfg, &mut rng);
    let trainable = if cfg.train_adapters {
        Trainable::of(&[ParamGroup::Probe, ParamGroup::Adapter])
    } else {
        Trainable::of(&[ParamGroup::Probe])
    };
    let inputs: Vec<Array3<S>> = train.iter().map(|s| prepare_input(&s.image, mean, std)).collect();
    let optim = OptimConfig {
        weight_decay: cfg.weight_decay,
        ..OptimConfig::default()
    };
    let mut opt_probe = AdamW::default();
    let mut opt_enc = AdamW::default();
    let mut order: Vec<usize> = Vec::new();
    for it in 0..cfg.iters {
        if order.len() < cfg.batch_size {
            let mut fresh: Vec<usize> = (0..train.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let batch: Vec<usize> = order.drain(..cfg.batch_size.min(order.len())).collect();
        let grads: Vec<crate::graph::Gradients<S>> = batch
            .par_iter()
            .map(|&i| {
                let mut g = Graph::new(trainable);
                let out = encoder.forward(&mut g, &inputs[i], None)?;
                let (rows, cols) = (out.grid.rows, out.grid.cols);
                let logits = probe.forward(&mut g, out.patches, rows, cols);
                let target = downsample_mask(&train[i].mask, 4 * rows, 4 * cols);
                let labels: Vec<usize> = target.iter().map(|v| *v as usize).collect();
                let valid: Vec<usize> = (0..labels.len()).filter(|j| labels[*j] != IGNORE_LABEL as usize).collect();
                if valid.is_empty() {
                    return Ok(crate::graph::Gradients::default());
                }
                let mut onehot = Array2::zeros((labels.len(), cfg.n_classes));
                for (j, l) in labels.iter().enumerate() {
                    if *l < cfg.n_classes {
                        onehot[[j, *l]] = S::one();
                    }
                }
                let w = S::of(1.0 / valid.len() as f64);
                let pairs = valid.into_iter().map(|j| (j, j, w)).collect();
                let loss = g.soft_ce(logits, onehot, pairs, S::one());
                Ok(g.backward(loss))
            })
            .collect::<Result<_>>()?;
        let mut total = crate::graph::Gradients::default();
        let inv = S::of(1.0 / grads.len() as f64);
        for gr in &grads {
            total.accumulate(gr, inv);
        }
        let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * it as f64 / cfg.iters as f64).cos());
        opt_probe.update(&mut probe, &total, lr, &optim);
        if cfg.train_adapters {
            opt_enc.update(&mut encoder, &total, lr, &optim);
        }
    }
    evaluate_probe(&encoder, &probe, val, mean, std, cfg.n_classes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRun {
    pub seed: u64,
    pub metrics: SegMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub iters: usize,
    pub runs: Vec<ProbeRun>,
    pub miou: MeanStd,
    pub aacc: MeanStd,
    pub macc: MeanStd,
}

/// One [`finetune_probe`] per seed plus mean ± std.
pub fn probe_report<S: Scalar>(
    encoder: &VisionTransformer<S>,
    train: &[LabeledImage<S>],
    val: &[LabeledImage<S>],
    cfg: &ProbeConfig,
    mean: &[f64],
    std: &[f64],
) -> Result<ProbeReport> {
    if cfg.seeds.is_empty() {
        return Err(GlareError::InvalidInput("probe needs at least one seed".into()));
    }
    let runs: Vec<ProbeRun> = cfg
        .seeds
        .iter()
        .map(|&seed| {
            Ok(ProbeRun {
                seed,
                metrics: finetune_probe(encoder, train, val, cfg, mean, std, seed)?,
            })
        })
        .collect::<Result<_>>()?;
    let col = |f: fn(&SegMetrics) -> f64| MeanStd::of(&runs.iter().map(|r| f(&r.metrics)).collect::<Vec<_>>());
    Ok(ProbeReport {
        iters: cfg.iters,
        miou: col(|m| m.miou),
        aacc: col(|m| m.aacc),
        macc: col(|m| m.macc),
        runs,
    })
}

/// Last-block `[CLS]` attention per head, bilinearly upsampled to the input size.
pub fn attention_heatmaps<S: Scalar>(encoder: &VisionTransformer<S>, pixels: &Array3<S>) -> Result<Vec<Array2<S>>> {
    let attn = encoder.extract_attention_pixels(pixels, -1)?;
    let (_, h, w) = pixels.dim();
    let g = attn.grid;
    Ok(attn
        .per_head
        .outer_iter()
        .map(|row| {
            let m = Array2::from_shape_fn((g.rows, g.cols), |(r, c)| row[r * g.cols + c]);
            upsample_bilinear(&m, h, w)
        })
        .collect())
}

fn scaled<S: Scalar>(m: &Array2<S>) -> Array2<S> {
    let max = m.iter().fold(S::zero(), |a, v| a.max(*v));
    if max > S::zero() {
        m.mapv(|v| v / max)
    } else {
        m.clone()
    }
}

/// Writes `head_<i>.png` per head and `mean.png`, each scaled by its maximum.
pub fn export_attention<S: Scalar>(encoder: &VisionTransformer<S>, pixels: &Array3<S>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let maps = attention_heatmaps(encoder, pixels)?;
    std::fs::create_dir_all(out_dir)?;
    let mut paths = Vec::new();
    for (i, m) in maps.iter().enumerate() {
        let p = out_dir.join(format!("head_{i}.png"));
        save_gray(&p, &scaled(m))?;
        paths.push(p);
    }
    let mut mean = Array2::zeros(maps[0].raw_dim());
    for m in &maps {
        mean += m;
    }
    mean.mapv_inplace(|v| v / S::of(maps.len() as f64));
    let p = out_dir.join("mean.png");
    save_gray(&p, &scaled(&mean))?;
    paths.push(p);
    Ok(paths)
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Eigenvalues are
/// sorted descending; eigenvector `i` is column `i`.
pub fn symmetric_eigen(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = a.nrows();
    let mut m = a.clone();
    let mut v = Array2::<f64>::eye(n);
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j))).map(|(i, j)| m[[i, j]] * m[[i, j]]).sum();
        let scale: f64 = m.iter().map(|x| x * x).sum();
        if off <= 1e-30 * scale.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[[q, q]] - m[[p, p]]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[[k, p]], m[[k, q]]);
                    m[[k, p]] = c * mkp - s * mkq;
                    m[[k, q]] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[[p, k]], m[[q, k]]);
                    m[[p, k]] = c * mpk - s * mqk;
                    m[[q, k]] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[[k, p]], v[[k, q]]);
                    v[[k, p]] = c * vkp - s * vkq;
                    v[[k, q]] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|i, j| m[[*j, *j]].total_cmp(&m[[*i, *i]]));
    let values = Array1::from_iter(order.iter().map(|i| m[[*i, *i]]));
    let vectors = v.select(Axis(1), &order);
    (values, vectors)
}

/// Top principal components of a token matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Array1<f64>,
    /// `D × k`, orthonormal columns; each column's largest-magnitude entry is positive.
    pub components: Array2<f64>,
    pub variances: Array1<f64>,
}

impl Pca {
    pub fn fit(tokens: &Array2<f64>, k: usize) -> Result<Self> {
        let n = tokens.nrows();
        let mut distinct: Vec<Vec<u64>> = tokens.outer_iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        distinct.sort();
        distinct.dedup();
        if distinct.len() < k || tokens.ncols() < k {
            return Err(GlareError::Degenerate(format!(
                "{} distinct tokens of width {}; {k} components need at least {k}",
                distinct.len(),
                tokens.ncols()
            )));
        }
        let mean = tokens.mean_axis(Axis(0)).expect("non-empty");
        let xc = tokens - &mean.view().insert_axis(Axis(0));
        let cov = xc.t().dot(&xc) / n as f64;
        let (vals, vecs) = symmetric_eigen(&cov);
        let mut components = vecs.slice(s![.., ..k]).to_owned();
        for mut col in components.columns_mut() {
            let big = col.iter().fold(0.0f64, |a, v| if v.abs() > a.abs() { *v } else { a });
            if big < 0.0 {
                col.mapv_inplace(|v| -v);
            }
        }
        Ok(Self {
            mean,
            components,
            variances: vals.slice(s![..k]).to_owned(),
        })
    }

    pub fn transform(&self, tokens: &Array2<f64>) -> Array2<f64> {
        (tokens - &self.mean.view().insert_axis(Axis(0))).dot(&self.components)
    }
}

/// Top-3 PCA of patch tokens pooled over all images, min-max scaled per
/// channel over the pool, one RGB raster per image (`pca_<i>.png`).
pub fn export_pca_embedding<S: Scalar>(encoder: &VisionTransformer<S>, images: &[Array3<S>], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let rgb = pca_rgb(encoder, images)?;
    std::fs::create_dir_all(out_dir)?;
    rgb.iter()
        .enumerate()
        .map(|(i, img)| {
            let p = out_dir.join(format!("pca_{i}.png"));
            save_rgb(&p, img)?;
            Ok(p)
        })
        .collect()
}

/// RGB PCA embeddings at input resolution (nearest upsampling of the patch grid).
pub fn pca_rgb<S: Scalar>(encoder: &VisionTransformer<S>, images: &[Array3<S>]) -> Result<Vec<Array3<f64>>> {
    if images.is_empty() {
        return Err(GlareError::InvalidInput("PCA needs at least one image".into()));
    }
    let batches = images.iter().map(|im| encoder.encode_pixels(im)).collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = batches.iter().map(|b| b.patches.view()).collect();
    let pooled = ndarray::concatenate(Axis(0), &views).map_err(|e| GlareError::Shape(e.to_string()))?.mapv(|v| v.as_f64());
    let pca = Pca::fit(&pooled, 3)?;
    let scores = pca.transform(&pooled);
    let lo: Vec<f64> = (0..3).map(|c| scores.column(c).iter().copied().fold(f64::INFINITY, f64::min)).collect();
    let hi: Vec<f64> = (0..3).map(|c| scores.column(c).iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    let mut offset = 0;
    let mut out = Vec::new();
    for (b, im) in batches.iter().zip(images) {
        let g: PatchGrid = b.grid;
        let (_, h, w) = im.dim();
        let img = Array3::from_shape_fn((3, h, w), |(c, y, x)| {
            let r = (y * g.rows / h).min(g.rows - 1);
            let col = (x * g.cols / w).min(g.cols - 1);
            let v = scores[[offset + g.index(r, col), c]];
            if hi[c] > lo[c] {
                (v - lo[c]) / (hi[c] - lo[c])
            } else {
                0.5
            }
        });
        offset += g.len();
        out.push(img);
    }
    Ok(out)
}

/// Inverts the per-channel normalization for display.
pub fn denormalize<S: Scalar>(pixels: &Array3<S>, mean: &[f64], std: &[f64]) -> Array3<f64> {
    let mut out = pixels.mapv(|v| v.as_f64());
    for (c, mut plane) in out.outer_iter_mut().enumerate() {
        let (m, s) = (mean.get(c).copied().unwrap_or(0.0), std.get(c).copied().unwrap_or(1.0));
        plane.mapv_inplace(|v| (v * s + m).clamp(0.0, 1.0));
    }
    out
}

const PALETTE: [[f64; 3]; 8] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.70, 0.10],
    [0.10, 0.30, 0.95],
    [0.95, 0.80, 0.10],
    [0.80, 0.10, 0.80],
    [0.10, 0.80, 0.80],
    [1.00, 0.50, 0.00],
    [0.50, 0.50, 0.50],
];

fn outline(img: &mut Array3<f64>, y0: usize, x0: usize, h: usize, w: usize, color: [f64; 3]) {
    let (_, ih, iw) = img.dim();
    let (y1, x1) = ((y0 + h).min(ih) - 1, (x0 + w).min(iw) - 1);
    for c in 0..3 {
        for x in x0..=x1 {
            img[[c, y0, x]] = color[c];
            img[[c, y1, x]] = color[c];
        }
        for y in y0..=y1 {
            img[[c, y, x0]] = color[c];
            img[[c, y, x1]] = color[c];
        }
    }
}

fn tint(img: &mut Array3<f64>, y0: usize, x0: usize, p: usize, color: [f64; 3]) {
    for c in 0..3 {
        for y in y0..y0 + p {
            for x in x0..x0 + p {
                img[[c, y, x]] = 0.5 * img[[c, y, x]] + 0.5 * color[c];
            }
        }
    }
}

/// Draws each region's outline in the colour of the head that proposed it.
pub fn render_regions(view_rgb: &Array3<f64>, regions: &[Region], patch_size: usize) -> Array3<f64> {
    let mut img = view_rgb.clone();
    for (i, r) in regions.iter().enumerate() {
        let color = PALETTE[r.head.unwrap_or(i) % PALETTE.len()];
        outline(&mut img, r.start_row * patch_size, r.start_col * patch_size, r.n_rows * patch_size, r.n_cols * patch_size, color);
    }
    img
}

/// Student view (left) and teacher view (right) side by side; every matched
/// student patch and its teacher matches share a tint colour.
pub fn render_correspondence(
    student_rgb: &Array3<f64>,
    teacher_rgb: &Array3<f64>,
    cmap: &CorrespondenceMap,
    grid_s: &PatchGrid,
    grid_t: &PatchGrid,
) -> Array3<f64> {
    let (_, hs, ws) = student_rgb.dim();
    let (_, ht, wt) = teacher_rgb.dim();
    let mut out = Array3::zeros((3, hs.max(ht), ws + wt));
    out.slice_mut(s![.., ..hs, ..ws]).assign(student_rgb);
    out.slice_mut(s![.., ..ht, ws..]).assign(teacher_rgb);
    let p = grid_s.patch_size;
    for (k, (sidx, ts)) in cmap.entries.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let (r, c) = grid_s.coords(*sidx);
        tint(&mut out, r * p, c * p, p, color);
        for t in ts {
            let (r, c) = grid_t.coords(*t);
            tint(&mut out, r * grid_t.patch_size, ws + c * grid_t.patch_size, grid_t.patch_size, color);
        }
    }
    out
}

/// Softmax class probabilities of a logit matrix (rows sum to 1).
pub fn class_probabilities<S: Scalar>(logits: &Array2<S>) -> Array2<S> {
    softmax_rows(logits)
}
