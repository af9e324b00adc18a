//! Student/teacher orchestration: schedules, EMA, AdamW, the per-image loss
//! pipeline and the training loop.

use std::collections::{BTreeMap, HashMap};

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augmentation::{blur_patches, make_views, AugConfig, BlurConfig, View};
use crate::correspondence::{match_patches, match_region, CorrespondenceMap};
use crate::graph::{Gradients, Graph, Var};
use crate::objectives::{
    active_regions, teacher_targets, total_loss, update_center, CenterSource, CenterState, Distiller, HeadConfig, LossBundle,
    LossConfig, Normalization, ProjectionHead, RegionPair, TermWeights,
};
use crate::params::{Param, Parameterized, Partition, Trainable};
use crate::regions::{
    sample_attention_regions_with, sample_random_regions, CrossAttentionParams, Region, RegionConfig,
    SamplingStrategy,
};
use crate::vit::{set_trainable, VisionTransformer, VitConfig};
use crate::{GlareError, Result, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    /// Base learning rate at `reference_batch`; scaled linearly with the batch size.
    pub lr_reference: f64,
    pub reference_batch: usize,
    pub min_lr: f64,
    pub warmup_epochs: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub ema_start: f64,
    pub ema_end: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_reference: 1.5e-4,
            reference_batch: 512,
            min_lr: 1e-6,
            warmup_epochs: 1.0,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 3.0,
            ema_start: 0.996,
            ema_end: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrespondenceConfig {
    /// Fraction of the student patch's source area a teacher patch must cover.
    pub min_overlap: f64,
}

impl Default for CorrespondenceConfig {
    fn default() -> Self {
        Self { min_overlap: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stops the run after this many steps; 0 runs `epochs` full epochs.
    /// Schedules always span the truncated run.
    pub max_steps: usize,
    /// Train adapters, head and cross-attention only (backbone frozen).
    pub adapter_only: bool,
    pub optim: OptimConfig,
    pub model: VitConfig,
    pub head: HeadConfig,
    pub augment: AugConfig,
    pub blur: BlurConfig,
    pub regions: RegionConfig,
    pub correspondence: CorrespondenceConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 100,
            batch_size: 512,
            max_steps: 0,
            adapter_only: true,
            optim: OptimConfig::default(),
            model: VitConfig::default(),
            head: HeadConfig::default(),
            augment: AugConfig::default(),
            blur: BlurConfig::default(),
            regions: RegionConfig::default(),
            correspondence: CorrespondenceConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Desk-scale preset: 64-pixel sources, 48/24-pixel views, an 8-pixel patch
    /// ViT with D=32, K=256 and batch 16. The head init is scaled to the small
    /// widths so bottleneck activations stay of order one.
    pub fn toy() -> Self {
        Self {
            seed: 0,
            epochs: 13,
            batch_size: 16,
            max_steps: 200,
            adapter_only: true,
            optim: OptimConfig {
                lr_reference: 2e-3,
                reference_batch: 16,
                min_lr: 1e-5,
                ema_start: 0.99,
                ..OptimConfig::default()
            },
            model: VitConfig {
                patch_size: 8,
                embed_dim: 32,
                depth: 4,
                heads: 4,
                mlp_hidden: 64,
                pos_grid: 6,
                adapter_rank: 8,
                ..VitConfig::default()
            },
            head: HeadConfig {
                out_dim: 256,
                hidden: 64,
                bottleneck: 32,
                init_std: 0.15,
            },
            augment: AugConfig {
                global_size: 48,
                local_size: 24,
                n_local: 4,
                ..AugConfig::default()
            },
            blur: BlurConfig::default(),
            regions: RegionConfig {
                count: 4,
                min_p: 1,
                max_p: 3,
                ..RegionConfig::default()
            },
            correspondence: CorrespondenceConfig::default(),
            loss: LossConfig {
                teacher_temp_warmup_epochs: 3.0,
                ..LossConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(GlareError::Config("epochs and batch_size must be positive".into()));
        }
        let o = &self.optim;
        if !(o.lr_reference >= 0.0 && o.min_lr >= 0.0 && o.reference_batch > 0 && o.warmup_epochs >= 0.0) {
            return Err(GlareError::Config("invalid learning-rate settings".into()));
        }
        if !(0.0..=1.0).contains(&o.ema_start) || !(0.0..=1.0).contains(&o.ema_end) {
            return Err(GlareError::Config("ema momentum must lie in [0, 1]".into()));
        }
        if o.grad_clip < 0.0 || o.weight_decay < 0.0 {
            return Err(GlareError::Config("grad_clip and weight_decay must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.correspondence.min_overlap) || self.correspondence.min_overlap == 0.0 {
            return Err(GlareError::Config("correspondence.min_overlap must lie in (0, 1]".into()));
        }
        self.model.validate()?;
        self.augment.validate()?;
        self.loss.validate()?;
        if self.augment.global_size % self.model.patch_size != 0 || self.augment.local_size % self.model.patch_size != 0 {
            return Err(GlareError::Config(format!(
                "view sizes {}/{} are not multiples of patch size {}",
                self.augment.global_size, self.augment.local_size, self.model.patch_size
            )));
        }
        if self.augment.mean.len() != self.model.channels {
            return Err(GlareError::Config("augment.mean length differs from model.channels".into()));
        }
        Ok(())
    }

    pub fn trainable(&self) -> Trainable {
        set_trainable(self.adapter_only)
    }

    pub fn base_lr(&self) -> f64 {
        self.optim.lr_reference * self.batch_size as f64 / self.optim.reference_batch as f64
    }
}

/// Step counts of a run over a dataset of a given size.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub steps_per_epoch: usize,
    pub total_steps: usize,
}

impl Schedule {
    /// Full batches per epoch (the tail is dropped), at least one.
    pub fn new(cfg: &TrainConfig, dataset_len: usize) -> Result<Self> {
        if dataset_len == 0 {
            return Err(GlareError::InvalidInput("empty dataset".into()));
        }
        let steps_per_epoch = (dataset_len / cfg.batch_size).max(1);
        let full = steps_per_epoch * cfg.epochs;
        let total_steps = if cfg.max_steps > 0 { cfg.max_steps.min(full) } else { full };
        Ok(Self {
            steps_per_epoch,
            total_steps,
        })
    }

    pub fn epoch(&self, step: u64) -> usize {
        step as usize / self.steps_per_epoch
    }

    fn warmup_steps(&self, cfg: &TrainConfig) -> usize {
        ((cfg.optim.warmup_epochs * self.steps_per_epoch as f64).round() as usize).min(self.total_steps.saturating_sub(1))
    }
}

/// Linear warmup from 0 over `warmup_epochs`, then cosine decay to `min_lr`
/// reached at the final step.
pub fn lr_at(step: u64, cfg: &TrainConfig, sched: &Schedule) -> f64 {
    let base = cfg.base_lr();
    let warm = sched.warmup_steps(cfg) as f64;
    let s = step as f64;
    if s < warm {
        return base * s / warm;
    }
    let last = sched.total_steps.saturating_sub(1) as f64;
    if last <= warm {
        return base;
    }
    let t = ((s - warm) / (last - warm)).min(1.0);
    cfg.optim.min_lr + (base - cfg.optim.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Cosine ramp from `ema_start` at step 0 to `ema_end` at the final step.
pub fn ema_momentum_at(step: u64, cfg: &TrainConfig, sched: &Schedule) -> f64 {
    let last = sched.total_steps.saturating_sub(1);
    if last == 0 {
        return cfg.optim.ema_start;
    }
    let t = (step as f64 / last as f64).min(1.0);
    let (a, b) = (cfg.optim.ema_start, cfg.optim.ema_end);
    b - (b - a) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Linear warmup of the teacher temperature over whole epochs.
pub fn teacher_temp_at(step: u64, cfg: &TrainConfig, sched: &Schedule) -> f64 {
    let l = &cfg.loss;
    let e = sched.epoch(step) as f64;
    if e >= l.teacher_temp_warmup_epochs || l.teacher_temp_warmup_epochs == 0.0 {
        l.teacher_temp_final
    } else {
        l.teacher_temp + (l.teacher_temp_final - l.teacher_temp) * e / l.teacher_temp_warmup_epochs
    }
}

/// `teacher ← m·teacher + (1−m)·student` for every teacher tensor whose name
/// matches a student tensor in a `trainable` group.
pub fn ema_update<S: Scalar>(
    student: &dyn Parameterized<S>,
    teacher: &mut dyn Parameterized<S>,
    m: f64,
    trainable: Trainable,
) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(GlareError::InvalidInput(format!("ema momentum {m} outside [0, 1]")));
    }
    let mut src: HashMap<&str, &Param<S>> = HashMap::new();
    student.visit(&mut |p| {
        if trainable.contains(p.group) {
            src.insert(p.name.as_str(), p);
        }
    });
    let mut err = None;
    let (ms, one_m) = (S::of(m), S::of(1.0 - m));
    teacher.visit_mut(&mut |t| {
        let Some(s) = src.get(t.name.as_str()) else { return };
        if s.value.dim() != t.value.dim() {
            err.get_or_insert_with(|| {
                GlareError::Shape(format!("ema pair `{}`: {:?} vs {:?}", t.name, s.value.dim(), t.value.dim()))
            });
            return;
        }
        if m == 1.0 {
            return;
        }
        if m == 0.0 {
            t.value.assign(&s.value);
            return;
        }
        t.value.zip_mut_with(&s.value, |tv, sv| *tv = ms * *tv + one_m * *sv);
    });
    err.map_or(Ok(()), Err)
}

/// First/second moment estimates of one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamSlot<S> {
    pub m: Array2<S>,
    pub v: Array2<S>,
    pub t: u64,
}

/// AdamW with decoupled weight decay. Tensors without a gradient are skipped.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW<S> {
    pub slots: BTreeMap<String, AdamSlot<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn update(&mut self, params: &mut dyn Parameterized<S>, grads: &Gradients<S>, lr: f64, cfg: &OptimConfig) {
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        params.visit_mut(&mut |p| {
            let Some(g) = grads.get(&p.name) else { return };
            let slot = self.slots.entry(p.name.clone()).or_insert_with(|| AdamSlot {
                m: Array2::zeros(p.value.raw_dim()),
                v: Array2::zeros(p.value.raw_dim()),
                t: 0,
            });
            slot.t += 1;
            let bc1 = 1.0 - b1.powi(slot.t as i32);
            let bc2 = 1.0 - b2.powi(slot.t as i32);
            let (b1s, b2s) = (S::of(b1), S::of(b2));
            slot.m.zip_mut_with(g, |m, g| *m = b1s * *m + (S::one() - b1s) * *g);
            slot.v.zip_mut_with(g, |v, g| *v = b2s * *v + (S::one() - b2s) * *g * *g);
            if p.decay && cfg.weight_decay > 0.0 {
                let f = S::of(1.0 - lr * cfg.weight_decay);
                p.value.mapv_inplace(|x| x * f);
            }
            let (lr_s, bc1, bc2, eps) = (S::of(lr), S::of(bc1), S::of(bc2), S::of(cfg.eps));
            ndarray::Zip::from(&mut p.value).and(&slot.m).and(&slot.v).for_each(|x, m, v| {
                *x -= lr_s * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        });
    }
}

/// Trainable side: encoder (frozen backbone plus adapters), head and the
/// region cross-attention.
#[derive(Clone, Debug, PartialEq)]
pub struct Student<S> {
    pub encoder: VisionTransformer<S>,
    pub head: ProjectionHead<S>,
    pub cross_attention: CrossAttentionParams<S>,
}

impl<S: Scalar> Parameterized<S> for Student<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<S>)) {
        self.encoder.visit(f);
        self.head.visit(f);
        self.cross_attention.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.encoder.visit_mut(f);
        self.head.visit_mut(f);
        self.cross_attention.visit_mut(f);
    }
}

/// Momentum side: EMA copies of the student's encoder and head.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher<S> {
    pub encoder: VisionTransformer<S>,
    pub head: ProjectionHead<S>,
}

impl<S: Scalar> Parameterized<S> for Teacher<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<S>)) {
        self.encoder.visit(f);
        self.head.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.encoder.visit_mut(f);
        self.head.visit_mut(f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerState<S> {
    pub student: Student<S>,
    pub teacher: Teacher<S>,
    pub optimizer: AdamW<S>,
    pub center: CenterState<S>,
    /// Center of patch-level targets (only updated with [`CenterSource::Separate`]).
    pub patch_center: CenterState<S>,
    pub step: u64,
    pub seed: u64,
    pub trainable: Trainable,
}

const TAG_INIT: u64 = 1;
const TAG_HEAD: u64 = 2;
const TAG_VIEWS: u64 = 3;
const TAG_BLUR: u64 = 4;
const TAG_REGIONS: u64 = 5;
const TAG_SHUFFLE: u64 = 6;

/// Independent random stream keyed by `(seed, step, item, tag)`.
pub fn stream(seed: u64, step: u64, item: u64, tag: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (i, v) in [seed, step, item, tag].into_iter().enumerate() {
        key[i * 8..(i + 1) * 8].copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

impl<S: Scalar> TrainerState<S> {
    /// Fresh encoder, head and cross-attention from `cfg.seed`.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let encoder = VisionTransformer::init(cfg.model.clone(), &mut stream(cfg.seed, 0, 0, TAG_INIT))?;
        Self::from_encoder(encoder, cfg)
    }

    /// Starts continual pre-training from an existing encoder; the head and
    /// cross-attention are freshly initialized.
    pub fn from_encoder(encoder: VisionTransformer<S>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if encoder.config != cfg.model {
            return Err(GlareError::Config("encoder config differs from model config".into()));
        }
        let mut rng = stream(cfg.seed, 0, 0, TAG_HEAD);
        let d = cfg.model.embed_dim;
        let head = ProjectionHead::init(d, &cfg.head, &mut rng);
        let cross_attention = CrossAttentionParams::init(d, &cfg.regions, &mut rng);
        let teacher = Teacher {
            encoder: encoder.clone(),
            head: head.clone(),
        };
        Ok(Self {
            student: Student {
                encoder,
                head,
                cross_attention,
            },
            teacher,
            optimizer: AdamW::default(),
            center: CenterState::zeros(cfg.head.out_dim, cfg.loss.center_momentum),
            patch_center: CenterState::zeros(cfg.head.out_dim, cfg.loss.center_momentum),
            step: 0,
            seed: cfg.seed,
            trainable: cfg.trainable(),
        })
    }

    /// Center applied to patch-level and regional targets.
    pub fn patch_center_for(&self, cfg: &TrainConfig) -> &CenterState<S> {
        match cfg.loss.center_source {
            CenterSource::Separate => &self.patch_center,
            _ => &self.center,
        }
    }

    pub fn partition(&self) -> Partition {
        Partition::build(&[&self.student as &dyn Parameterized<S>], self.trainable)
    }
}

/// Trainable parameter count from shapes alone.
pub fn analytic_trainable_count(cfg: &TrainConfig) -> usize {
    let d = cfg.model.embed_dim;
    let h = &cfg.head;
    let head = d * h.hidden + h.hidden + h.hidden * h.hidden + h.hidden + h.hidden * h.bottleneck + h.bottleneck + h.bottleneck * h.out_dim;
    let ca = 3 * d * d;
    if cfg.adapter_only {
        cfg.model.adapter_param_count() + head + ca
    } else {
        let m = &cfg.model;
        let pd = m.patch_dim();
        let block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * m.mlp_hidden + m.mlp_hidden) + (m.mlp_hidden * d + d);
        let backbone = pd * d + d + d + m.n_registers * d + (1 + m.n_registers + m.pos_grid * m.pos_grid) * d + m.depth * block + 2 * d;
        backbone + m.adapter_param_count() + head + ca
    }
}

/// Augmented inputs of one image and the pairings between its global views.
#[derive(Clone, Debug)]
pub struct ImageSample<S> {
    /// Student inputs: two (patch-blurred) global views followed by the local views.
    pub views: Vec<View<S>>,
    pub regions: Vec<Region>,
    /// Active `(R, R′)` pairs between the first and second global view.
    pub region_pairs: Vec<RegionPair>,
    /// Global view 0 → 1 and 1 → 0.
    pub cmaps: [CorrespondenceMap; 2],
}

/// Stop-gradient teacher quantities for one image.
#[derive(Clone, Debug)]
pub struct TeacherTargets<S> {
    /// Teacher head logits of the two global `[CLS]` tokens.
    pub cls_logits: Array2<S>,
    /// Teacher head logits of the global views' patches (empty when unused).
    pub patch_logits: [Array2<S>; 2],
    pub global: Array2<S>,
    /// Patch target distributions per global view (empty when the local terms are off).
    pub patches: [Array2<S>; 2],
    /// Teacher patch tokens of the second global view (regional term input).
    pub other_tokens: Array2<S>,
}

/// Per-step quantities that depend only on the step counter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepContext {
    pub weights: TermWeights,
    pub temp_s: f64,
    pub temp_t: f64,
    pub normalization: Normalization,
}

impl StepContext {
    pub fn at(step: u64, cfg: &TrainConfig, sched: &Schedule) -> Self {
        Self {
            weights: cfg.loss.weights(),
            temp_s: cfg.loss.student_temp,
            temp_t: teacher_temp_at(step, cfg, sched),
            normalization: cfg.loss.normalization,
        }
    }
}

/// Augments one image, runs the teacher on the clean global views, samples
/// regions, computes correspondences and blurs the student's global views.
pub fn prepare_image<S: Scalar>(
    image: &Array3<S>,
    state: &TrainerState<S>,
    cfg: &TrainConfig,
    ctx: &StepContext,
    item: u64,
) -> Result<(ImageSample<S>, TeacherTargets<S>)> {
    let (seed, step) = (state.seed, state.step);
    let mut views = make_views(image, &cfg.augment, &mut stream(seed, step, item, TAG_VIEWS))?;
    let teacher = &state.teacher;
    let w = ctx.weights;
    let want_regions = w.regional > 0.0 && cfg.regions.count > 0;
    let want_patches = w.patchaug > 0.0 || w.interview > 0.0;
    let attn_block = (want_regions && cfg.regions.strategy == SamplingStrategy::AttentionAware)
        .then(|| teacher.encoder.depth() - 1);

    let mut g = Graph::inference();
    let t0 = teacher.encoder.forward(&mut g, &views[0].pixels, attn_block)?;
    let t1 = teacher.encoder.forward(&mut g, &views[1].pixels, None)?;
    let cls = g.concat_rows(&[t0.cls, t1.cls]);
    let cls_tokens = g.value(cls).clone();
    let cls_logits = crate::objectives::project(&cls_tokens, &teacher.head);
    let temp_t = S::of(ctx.temp_t);
    let global = teacher_targets(&cls_logits, &state.center, temp_t);
    let k = teacher.head.out_dim();
    let source = cfg.loss.center_source;
    let patch_logits = if want_patches || source != CenterSource::Cls {
        [t0.patches, t1.patches].map(|p| crate::objectives::project(g.value(p), &teacher.head))
    } else {
        [Array2::zeros((0, k)), Array2::zeros((0, k))]
    };
    let patches = if want_patches {
        [&patch_logits[0], &patch_logits[1]].map(|l| teacher_targets(l, state.patch_center_for(cfg), temp_t))
    } else {
        [Array2::zeros((0, k)), Array2::zeros((0, k))]
    };

    let other_tokens = g.value(t1.patches).clone();

    let (grid0, grid1) = (t0.grid, t1.grid);
    let (rec0, rec1) = (views[0].record, views[1].record);
    let min_overlap = cfg.correspondence.min_overlap;
    let rc = &cfg.regions;
    let regions = if want_regions {
        let mut rng = stream(seed, step, item, TAG_REGIONS);
        match (&t0.attention, rc.strategy) {
            (Some(attn), SamplingStrategy::AttentionAware) => {
                sample_attention_regions_with(attn, &grid0, rc.count, rc.min_p, rc.max_p, rc.anchor, &mut rng)?
            }
            _ => sample_random_regions(&grid0, rc.count, rc.min_p, rc.max_p, &mut rng)?,
        }
    } else {
        Vec::new()
    };
    let pairs: Vec<RegionPair> = regions
        .iter()
        .map(|r| (r.indices(&grid0), match_region(r, &rec0, &grid0, &rec1, &grid1, min_overlap)))
        .collect();
    let cmaps = if w.interview > 0.0 {
        [
            match_patches(&rec0, &grid0, &rec1, &grid1, min_overlap),
            match_patches(&rec1, &grid1, &rec0, &grid0, min_overlap),
        ]
    } else {
        [CorrespondenceMap::default(), CorrespondenceMap::default()]
    };

    let mut rng = stream(seed, step, item, TAG_BLUR);
    let b = &cfg.blur;
    for v in views.iter_mut().take(2) {
        let ratio = b.sample_ratio(&mut rng);
        *v = blur_patches(v, cfg.model.patch_size, ratio, b.mode, b.kernel, b.sigma, &mut rng)?;
    }

    Ok((
        ImageSample {
            views,
            regions,
            region_pairs: active_regions(&pairs),
            cmaps,
        },
        TeacherTargets {
            cls_logits,
            patch_logits,
            global,
            patches,
            other_tokens,
        },
    ))
}

/// Loss graph of one image.
pub struct ImageLoss<S> {
    /// Weighted sum of the active terms; `None` when every term is off or empty.
    pub root: Option<Var>,
    /// Unweighted term values (global, regional, patch-aug, inter-view).
    pub raw: [f64; 4],
    pub matched_patches: usize,
    pub active_regions: usize,
    /// Regional targets actually used (computed from the student pass unless supplied).
    pub regional_targets: Vec<Array2<S>>,
}

/// Records the student pass and the weighted loss of one image into `g`.
///
/// `regional_targets` freezes the regional targets (finite-difference checks);
/// by default they are derived from the detached student tokens of this pass.
#[allow(clippy::too_many_arguments)]
pub fn image_loss<S: Scalar>(
    g: &mut Graph<S>,
    student: &Student<S>,
    teacher_head: &ProjectionHead<S>,
    center: &CenterState<S>,
    ctx: &StepContext,
    sample: &ImageSample<S>,
    targets: &TeacherTargets<S>,
    regional_targets: Option<&[Array2<S>]>,
) -> Result<ImageLoss<S>> {
    let d = Distiller {
        student_head: &student.head,
        teacher_head,
        center,
        temp_s: S::of(ctx.temp_s),
        temp_t: S::of(ctx.temp_t),
        normalization: ctx.normalization,
    };
    let w = ctx.weights;
    let enc = &student.encoder;
    let globals = [
        enc.forward(g, &sample.views[0].pixels, None)?,
        enc.forward(g, &sample.views[1].pixels, None)?,
    ];
    let mut terms: Vec<(usize, Var)> = Vec::new();

    if w.global > 0.0 {
        let mut cls = vec![globals[0].cls, globals[1].cls];
        for v in &sample.views[2..] {
            cls.push(enc.forward(g, &v.pixels, None)?.cls);
        }
        let cls = g.concat_rows(&cls);
        terms.push((0, d.global_term(g, cls, targets.global.clone())));
    }

    let mut used_regional = Vec::new();
    if w.regional > 0.0 && !sample.region_pairs.is_empty() {
        used_regional = match regional_targets {
            Some(t) => t.to_vec(),
            None => {
                let z = g.value(globals[0].patches).clone();
                d.regional_targets(&z, &targets.other_tokens, &student.cross_attention, &sample.region_pairs)
            }
        };
        if let Some(v) = d.regional_term(g, globals[0].patches, &student.cross_attention, &sample.region_pairs, &used_regional) {
            terms.push((1, v));
        }
    }

    let combine = |g: &mut Graph<S>, parts: Vec<Var>| -> Option<Var> {
        if parts.is_empty() {
            return None;
        }
        let c = match ctx.normalization {
            Normalization::Mean => S::one() / S::of(parts.len() as f64),
            Normalization::Sum => S::one(),
        };
        let weighted: Vec<(Var, S)> = parts.into_iter().map(|p| (p, c)).collect();
        Some(g.weighted_sum(&weighted))
    };

    if w.patchaug > 0.0 {
        let parts: Vec<Var> = (0..2)
            .filter_map(|i| d.patchaug_term(g, globals[i].patches, &targets.patches[i], &sample.views[i].blur_mask))
            .collect();
        if let Some(v) = combine(g, parts) {
            terms.push((2, v));
        }
    }

    let mut matched = 0;
    if w.interview > 0.0 {
        let mut parts = Vec::new();
        for i in 0..2 {
            matched += sample.cmaps[i].len();
            if let Some(v) = d.interview_term(g, globals[i].patches, targets.patches[1 - i].clone(), &sample.cmaps[i]) {
                parts.push(v);
            }
        }
        if let Some(v) = combine(g, parts) {
            terms.push((3, v));
        }
    }

    let names = ["l_glob", "l_reg", "l_loc1", "l_loc2"];
    let wa = w.as_array();
    let mut raw = [0.0; 4];
    for (k, v) in &terms {
        let val = g.scalar(*v).as_f64();
        if !val.is_finite() {
            return Err(GlareError::NonFiniteLoss {
                term: names[*k].into(),
                detail: format!("value {val}"),
            });
        }
        raw[*k] = val;
    }
    let root = if terms.is_empty() {
        None
    } else {
        let weighted: Vec<(Var, S)> = terms.iter().map(|(k, v)| (*v, S::of(wa[*k]))).collect();
        Some(g.weighted_sum(&weighted))
    };
    Ok(ImageLoss {
        root,
        raw,
        matched_patches: matched,
        active_regions: if used_regional.is_empty() { 0 } else { sample.region_pairs.len() },
        regional_targets: used_regional,
    })
}

/// One logged training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub ema_momentum: f64,
    pub teacher_temp: f64,
    pub l_glob: f64,
    pub l_reg: f64,
    pub l_loc1: f64,
    pub l_loc2: f64,
    pub total: f64,
    pub matched_patches: usize,
    pub active_regions: usize,
    pub grad_norm: f64,
}

struct ImageResult<S> {
    grads: Gradients<S>,
    raw: [f64; 4],
    matched: usize,
    active: usize,
    cls_logits: Array2<S>,
    patch_logits: [Array2<S>; 2],
}

/// Loss terms of a batch at the current state, without updating anything.
pub fn evaluate_batch<S: Scalar>(
    images: &[&Array3<S>],
    state: &TrainerState<S>,
    cfg: &TrainConfig,
    ctx: &StepContext,
) -> Result<LossBundle> {
    let results = batch_pass(images, state, cfg, ctx, false)?;
    Ok(reduce(&results, ctx).0)
}

fn batch_pass<S: Scalar>(
    images: &[&Array3<S>],
    state: &TrainerState<S>,
    cfg: &TrainConfig,
    ctx: &StepContext,
    with_grads: bool,
) -> Result<Vec<ImageResult<S>>> {
    images
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let (sample, targets) = prepare_image(img, state, cfg, ctx, i as u64)?;
            let mut g = if with_grads { Graph::new(state.trainable) } else { Graph::inference() };
            let loss = image_loss(&mut g, &state.student, &state.teacher.head, state.patch_center_for(cfg), ctx, &sample, &targets, None)?;
            let grads = match (with_grads, loss.root) {
                (true, Some(r)) => g.backward(r),
                _ => Gradients::default(),
            };
            Ok(ImageResult {
                grads,
                raw: loss.raw,
                matched: loss.matched_patches,
                active: loss.active_regions,
                cls_logits: targets.cls_logits,
                patch_logits: targets.patch_logits,
            })
        })
        .collect()
}

fn reduce<S: Scalar>(results: &[ImageResult<S>], ctx: &StepContext) -> (LossBundle, Gradients<S>) {
    let n = results.len() as f64;
    let mut raw = [0.0; 4];
    let mut grads = Gradients::default();
    let (mut matched, mut active) = (0, 0);
    let inv = S::of(1.0 / n);
    for r in results {
        for k in 0..4 {
            raw[k] += r.raw[k] / n;
        }
        grads.accumulate(&r.grads, inv);
        matched += r.matched;
        active += r.active;
    }
    let mut bundle = total_loss(raw, &ctx.weights);
    bundle.matched_patches = matched;
    bundle.active_regions = active;
    (bundle, grads)
}

/// One optimization step on `images`: losses, AdamW update of the trainable
/// student tensors, EMA of the teacher from the updated student, center update.
pub fn train_step<S: Scalar>(
    images: &[&Array3<S>],
    state: &mut TrainerState<S>,
    cfg: &TrainConfig,
    sched: &Schedule,
) -> Result<StepMetrics> {
    if images.is_empty() {
        return Err(GlareError::InvalidInput("empty batch".into()));
    }
    let step = state.step;
    let ctx = StepContext::at(step, cfg, sched);
    let lr = lr_at(step, cfg, sched);
    let m = ema_momentum_at(step, cfg, sched);

    let results = batch_pass(images, state, cfg, &ctx, true)?;
    let (bundle, mut grads) = reduce(&results, &ctx);
    let grad_norm = grads.global_norm().as_f64();
    if !grad_norm.is_finite() {
        return Err(GlareError::NonFiniteLoss {
            term: "gradient".into(),
            detail: format!("global norm {grad_norm}"),
        });
    }
    if cfg.optim.grad_clip > 0.0 && grad_norm > cfg.optim.grad_clip {
        grads.scale(S::of(cfg.optim.grad_clip / (grad_norm + 1e-6)));
    }

    state.optimizer.update(&mut state.student, &grads, lr, &cfg.optim);
    ema_update(&state.student, &mut state.teacher, m, state.trainable)?;
    let stack = |rows: Vec<ArrayView2<S>>| ndarray::concatenate(Axis(0), &rows).map_err(|e| GlareError::Shape(e.to_string()));
    let cls = results.iter().map(|r| r.cls_logits.view());
    let patches = || results.iter().flat_map(|r| r.patch_logits.iter().map(|p| p.view()));
    match cfg.loss.center_source {
        CenterSource::Cls => state.center = update_center(&state.center, &stack(cls.collect())?)?,
        CenterSource::All => state.center = update_center(&state.center, &stack(cls.chain(patches()).collect())?)?,
        CenterSource::Separate => {
            state.center = update_center(&state.center, &stack(cls.collect())?)?;
            state.patch_center = update_center(&state.patch_center, &stack(patches().collect())?)?;
        }
    }
    state.step += 1;

    Ok(StepMetrics {
        step,
        epoch: sched.epoch(step),
        lr,
        ema_momentum: m,
        teacher_temp: ctx.temp_t,
        l_glob: bundle.l_glob,
        l_reg: bundle.l_reg,
        l_loc1: bundle.l_loc1,
        l_loc2: bundle.l_loc2,
        total: bundle.total,
        matched_patches: bundle.matched_patches,
        active_regions: bundle.active_regions,
        grad_norm,
    })
}

/// Image indices of batch `k` (within its epoch) for the state's step.
pub fn batch_indices(seed: u64, step: u64, sched: &Schedule, batch_size: usize, dataset_len: usize) -> Vec<usize> {
    let epoch = sched.epoch(step) as u64;
    let mut order: Vec<usize> = (0..dataset_len).collect();
    order.shuffle(&mut stream(seed, epoch, 0, TAG_SHUFFLE));
    let k = step as usize % sched.steps_per_epoch;
    let lo = k * batch_size;
    let hi = (lo + batch_size).min(dataset_len);
    order[lo..hi].to_vec()
}

/// Runs steps until the schedule ends, calling `on_step` after each one.
pub fn train<S: Scalar>(
    state: &mut TrainerState<S>,
    dataset: &[Array3<S>],
    cfg: &TrainConfig,
    sched: &Schedule,
    mut on_step: impl FnMut(&TrainerState<S>, &StepMetrics) -> Result<()>,
) -> Result<()> {
    while (state.step as usize) < sched.total_steps {
        let idx = batch_indices(state.seed, state.step, sched, cfg.batch_size, dataset.len());
        let batch: Vec<&Array3<S>> = idx.iter().map(|i| &dataset[*i]).collect();
        let metrics = train_step(&batch, state, cfg, sched)?;
        on_step(state, &metrics)?;
    }
    Ok(())
}
