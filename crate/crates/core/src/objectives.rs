//! Shared projection head, teacher centering/sharpening, and the global,
//! regional and local distillation terms.
//!
//! Every term has the same shape: student tokens go through the student head
//! and are scored against constant teacher distributions (stop-gradient) with a
//! weighted soft cross-entropy. The pairing of student rows to target rows is
//! what distinguishes the terms, so pair construction is kept in small pure
//! functions.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::correspondence::CorrespondenceMap;
use crate::graph::{log_softmax_rows, softmax_rows, Graph, Var};
use crate::params::{Param, ParamGroup, Parameterized};
use crate::regions::{cross_attention_graph, CrossAttentionParams};
use crate::vit::{randn, TokenBatch};
use crate::{GlareError, Result, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub out_dim: usize,
    pub hidden: usize,
    pub bottleneck: usize,
    pub init_std: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            out_dim: 8192,
            hidden: 2048,
            bottleneck: 256,
            init_std: 0.02,
        }
    }
}

/// `D → hidden → hidden → bottleneck` MLP with GELU, L2-normalized bottleneck,
/// then a column-normalized linear map to `K` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead<S> {
    pub fc1_w: Param<S>,
    pub fc1_b: Param<S>,
    pub fc2_w: Param<S>,
    pub fc2_b: Param<S>,
    pub fc3_w: Param<S>,
    pub fc3_b: Param<S>,
    /// `bottleneck × K`; each column is normalized to unit length in the forward pass.
    pub last_w: Param<S>,
}

const NORM_EPS: f64 = 1e-12;

impl<S: Scalar> ProjectionHead<S> {
    pub fn init<R: Rng + ?Sized>(dim: usize, cfg: &HeadConfig, rng: &mut R) -> Self {
        let p = |name: &str, decay: bool, v| Param::new(format!("head.{name}"), ParamGroup::Head, decay, v);
        let std = cfg.init_std;
        Self {
            fc1_w: p("fc1.weight", true, randn(rng, dim, cfg.hidden, std)),
            fc1_b: p("fc1.bias", false, Array2::zeros((1, cfg.hidden))),
            fc2_w: p("fc2.weight", true, randn(rng, cfg.hidden, cfg.hidden, std)),
            fc2_b: p("fc2.bias", false, Array2::zeros((1, cfg.hidden))),
            fc3_w: p("fc3.weight", true, randn(rng, cfg.hidden, cfg.bottleneck, std)),
            fc3_b: p("fc3.bias", false, Array2::zeros((1, cfg.bottleneck))),
            last_w: p("last.weight", true, randn(rng, cfg.bottleneck, cfg.out_dim, std)),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.last_w.value.ncols()
    }

    pub fn forward(&self, g: &mut Graph<S>, tokens: Var) -> Var {
        let mut x = tokens;
        for (w, b, act) in [
            (&self.fc1_w, &self.fc1_b, true),
            (&self.fc2_w, &self.fc2_b, true),
            (&self.fc3_w, &self.fc3_b, false),
        ] {
            let wv = g.param(w);
            let bv = g.param(b);
            x = g.matmul(x, wv);
            x = g.add_row(x, bv);
            if act {
                x = g.gelu(x);
            }
        }
        let x = g.l2_normalize_rows(x, S::of(NORM_EPS));
        let v = g.param(&self.last_w);
        let vt = g.transpose(v);
        let vt = g.l2_normalize_rows(vt, S::of(NORM_EPS));
        let v = g.transpose(vt);
        g.matmul(x, v)
    }
}

impl<S: Scalar> Parameterized<S> for ProjectionHead<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<S>)) {
        for p in [&self.fc1_w, &self.fc1_b, &self.fc2_w, &self.fc2_b, &self.fc3_w, &self.fc3_b, &self.last_w] {
            f(p);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        for p in [
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
            &mut self.fc3_w,
            &mut self.fc3_b,
            &mut self.last_w,
        ] {
            f(p);
        }
    }
}

/// `K` logits per token row.
pub fn project<S: Scalar>(tokens: &Array2<S>, head: &ProjectionHead<S>) -> Array2<S> {
    let mut g = Graph::inference();
    let t = g.constant(tokens.clone());
    let out = head.forward(&mut g, t);
    g.value(out).clone()
}

/// Running mean of teacher logits, subtracted before sharpening.
#[derive(Clone, Debug, PartialEq)]
pub struct CenterState<S> {
    pub center: Array1<S>,
    pub momentum: S,
}

impl<S: Scalar> CenterState<S> {
    pub fn zeros(k: usize, momentum: f64) -> Self {
        Self {
            center: Array1::zeros(k),
            momentum: S::of(momentum),
        }
    }
}

/// `center ← m·center + (1−m)·mean(batch)`.
pub fn update_center<S: Scalar>(state: &CenterState<S>, teacher_logits_batch: &Array2<S>) -> Result<CenterState<S>> {
    if !(state.momentum >= S::zero() && state.momentum < S::one()) {
        return Err(GlareError::InvalidInput(format!("center momentum {} outside [0, 1)", state.momentum)));
    }
    if teacher_logits_batch.ncols() != state.center.len() || teacher_logits_batch.nrows() == 0 {
        return Err(GlareError::Shape(format!(
            "teacher batch {:?} vs center of length {}",
            teacher_logits_batch.dim(),
            state.center.len()
        )));
    }
    let mean = teacher_logits_batch.mean_axis(Axis(0)).expect("non-empty batch");
    let m = state.momentum;
    let center = &state.center * m + &mean * (S::one() - m);
    Ok(CenterState { center, momentum: m })
}

/// Teacher target distributions `softmax((logits − center) / temp_t)`.
pub fn teacher_targets<S: Scalar>(teacher_logits: &Array2<S>, center: &CenterState<S>, temp_t: S) -> Array2<S> {
    let centered = (teacher_logits - &center.center.view().insert_axis(Axis(0))).mapv(|v| v / temp_t);
    softmax_rows(&centered)
}

/// `H(a, b) = −Σ a log b` with `a` the centered, sharpened teacher distribution
/// and `b` the student distribution.
pub fn soft_ce<S: Scalar>(
    student_logits: &Array1<S>,
    teacher_logits: &Array1<S>,
    center: &CenterState<S>,
    temp_s: S,
    temp_t: S,
) -> S {
    let t = teacher_targets(&teacher_logits.view().insert_axis(Axis(0)).to_owned(), center, temp_t);
    let s = student_logits.view().insert_axis(Axis(0)).mapv(|v| v / temp_s);
    let logb = log_softmax_rows(&s);
    -t.row(0).iter().zip(logb.row(0).iter()).map(|(a, lb)| *a * *lb).sum::<S>()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Average over contributing pairs (and regions / patches).
    Mean,
    /// Plain sums as the objectives are written.
    Sum,
}

/// Teacher outputs that feed the running center.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterSource {
    /// Global-view `[CLS]` logits only.
    Cls,
    /// `[CLS]` and patch logits of the global views, pooled.
    All,
    /// `[CLS]` logits feed the center; patch logits feed a second center
    /// used for the patch and regional targets.
    Separate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub global: f64,
    pub regional: f64,
    /// Multiplies both local terms.
    pub local: f64,
    pub local_patchaug: f64,
    pub local_interview: f64,
    pub normalization: Normalization,
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub teacher_temp_final: f64,
    pub teacher_temp_warmup_epochs: f64,
    pub center_momentum: f64,
    pub center_source: CenterSource,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            global: 1.0,
            regional: 1.0,
            local: 1.0,
            local_patchaug: 1.0,
            local_interview: 1.0,
            normalization: Normalization::Mean,
            student_temp: 0.1,
            teacher_temp: 0.04,
            teacher_temp_final: 0.07,
            teacher_temp_warmup_epochs: 30.0,
            center_momentum: 0.9,
            center_source: CenterSource::Cls,
        }
    }
}

/// Effective per-term weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TermWeights {
    pub global: f64,
    pub regional: f64,
    pub patchaug: f64,
    pub interview: f64,
}

impl TermWeights {
    pub fn ones() -> Self {
        Self {
            global: 1.0,
            regional: 1.0,
            patchaug: 1.0,
            interview: 1.0,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.global, self.regional, self.patchaug, self.interview]
    }
}

impl LossConfig {
    pub fn weights(&self) -> TermWeights {
        TermWeights {
            global: self.global,
            regional: self.regional,
            patchaug: self.local * self.local_patchaug,
            interview: self.local * self.local_interview,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.global, self.regional, self.local, self.local_patchaug, self.local_interview];
        if w.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(GlareError::Config("loss weights must be finite and non-negative".into()));
        }
        if !(self.student_temp > 0.0 && self.teacher_temp > 0.0 && self.teacher_temp_final > 0.0) {
            return Err(GlareError::Config("temperatures must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.center_momentum) {
            return Err(GlareError::Config("center_momentum must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Per-step loss values. Disabled terms are exactly zero and `total` is their sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_glob: f64,
    pub l_reg: f64,
    pub l_loc1: f64,
    pub l_loc2: f64,
    pub total: f64,
    pub matched_patches: usize,
    pub active_regions: usize,
}

impl LossBundle {
    pub fn terms(&self) -> [(&'static str, f64); 4] {
        [
            ("l_glob", self.l_glob),
            ("l_reg", self.l_reg),
            ("l_loc1", self.l_loc1),
            ("l_loc2", self.l_loc2),
        ]
    }
}

/// Weighted combination; a zero weight yields an exact zero term regardless of its raw value.
pub fn total_loss(raw: [f64; 4], weights: &TermWeights) -> LossBundle {
    let w = weights.as_array();
    let t: Vec<f64> = raw.iter().zip(w).map(|(r, w)| if w == 0.0 { 0.0 } else { w * r }).collect();
    LossBundle {
        l_glob: t[0],
        l_reg: t[1],
        l_loc1: t[2],
        l_loc2: t[3],
        total: t[0] + t[1] + (t[2] + t[3]),
        ..LossBundle::default()
    }
}

/// (student view, teacher view) index pairs for multi-crop distillation: every
/// student view against every teacher view except its own.
pub fn global_pairs(n_student_views: usize, n_teacher_views: usize) -> Vec<(usize, usize)> {
    (0..n_student_views)
        .flat_map(|s| (0..n_teacher_views).filter(move |t| *t != s).map(move |t| (s, t)))
        .collect()
}

/// Pairs for the inter-view local term: every (s, t) with `t ∈ C(s)`, weighted
/// so each student patch contributes the mean over its matches.
pub fn interview_pairs(cmap: &CorrespondenceMap, norm: Normalization) -> Vec<(usize, usize, f64)> {
    let n = cmap.len() as f64;
    cmap.entries
        .iter()
        .flat_map(|(s, ts)| {
            let w = match norm {
                Normalization::Mean => 1.0 / (ts.len() as f64 * n),
                Normalization::Sum => 1.0,
            };
            ts.iter().map(move |t| (*s, *t, w))
        })
        .collect()
}

fn weight_for(count: usize, norm: Normalization) -> f64 {
    match norm {
        Normalization::Mean => 1.0 / count as f64,
        Normalization::Sum => 1.0,
    }
}

/// Context shared by every distillation term of one step.
pub struct Distiller<'a, S: Scalar> {
    pub student_head: &'a ProjectionHead<S>,
    pub teacher_head: &'a ProjectionHead<S>,
    pub center: &'a CenterState<S>,
    pub temp_s: S,
    pub temp_t: S,
    pub normalization: Normalization,
}

impl<'a, S: Scalar> Distiller<'a, S> {
    /// Teacher head logits for constant tokens.
    pub fn teacher_logits(&self, tokens: &Array2<S>) -> Array2<S> {
        project(tokens, self.teacher_head)
    }

    pub fn targets(&self, teacher_tokens: &Array2<S>) -> Array2<S> {
        teacher_targets(&self.teacher_logits(teacher_tokens), self.center, self.temp_t)
    }

    /// Student-head soft cross-entropy of `tokens` rows against constant `targets` rows.
    pub fn distill(&self, g: &mut Graph<S>, tokens: Var, targets: Array2<S>, pairs: Vec<(usize, usize, f64)>) -> Var {
        let logits = self.student_head.forward(g, tokens);
        let pairs = pairs.into_iter().map(|(i, j, w)| (i, j, S::of(w))).collect();
        g.soft_ce(logits, targets, pairs, S::one() / self.temp_s)
    }

    /// Global term on `[CLS]` rows: `student_cls` is `views×D` (globals first),
    /// `teacher_targets` is one target row per teacher global view.
    pub fn global_term(&self, g: &mut Graph<S>, student_cls: Var, teacher_targets: Array2<S>) -> Var {
        let n_views = g.value(student_cls).nrows();
        let pairs = global_pairs(n_views, teacher_targets.nrows());
        let w = weight_for(pairs.len(), self.normalization);
        let pairs = pairs.into_iter().map(|(s, t)| (s, t, w)).collect();
        self.distill(g, student_cls, teacher_targets, pairs)
    }

    /// Patch-augmentation term: blurred student patches vs clean teacher targets
    /// at the same indices. `None` for an empty mask.
    pub fn patchaug_term(&self, g: &mut Graph<S>, student_patches: Var, teacher_targets: &Array2<S>, mask: &[usize]) -> Option<Var> {
        if mask.is_empty() {
            return None;
        }
        let rows = g.select_rows(student_patches, mask);
        let targets = teacher_targets.select(Axis(0), mask);
        let w = weight_for(mask.len(), self.normalization);
        let pairs = (0..mask.len()).map(|i| (i, i, w)).collect();
        Some(self.distill(g, rows, targets, pairs))
    }

    /// Inter-view term over matched patches. `None` for an empty map.
    pub fn interview_term(&self, g: &mut Graph<S>, student_patches: Var, teacher_targets: Array2<S>, cmap: &CorrespondenceMap) -> Option<Var> {
        if cmap.is_empty() {
            return None;
        }
        let pairs = interview_pairs(cmap, self.normalization);
        Some(self.distill(g, student_patches, teacher_targets, pairs))
    }

    /// Target distributions for the regional term, one block per region:
    /// `CA(z′_r, Z_R, Z_R)` from detached inputs through the teacher head.
    /// `z_student` is the detached student patch matrix.
    pub fn regional_targets(
        &self,
        z_student: &Array2<S>,
        teacher_patches: &Array2<S>,
        ca: &CrossAttentionParams<S>,
        regions: &[RegionPair],
    ) -> Vec<Array2<S>> {
        regions
            .iter()
            .map(|(r, rp)| {
                let z_region = z_student.select(Axis(0), r);
                let z_prime = teacher_patches.select(Axis(0), rp);
                let shared = crate::regions::region_share(&z_prime, &z_region, ca).expect("non-empty region");
                self.targets(&shared)
            })
            .collect()
    }

    /// Regional term over active regions (see [`active_regions`]), with
    /// predictions `CA(z_r, Z, Z)` through the student head scored against
    /// `targets` from [`Self::regional_targets`].
    pub fn regional_term(
        &self,
        g: &mut Graph<S>,
        student_patches: Var,
        ca: &CrossAttentionParams<S>,
        regions: &[RegionPair],
        targets: &[Array2<S>],
    ) -> Option<Var> {
        if regions.is_empty() {
            return None;
        }
        let mut preds = Vec::with_capacity(regions.len());
        let mut pairs = Vec::new();
        let (mut row_off, mut tgt_off) = (0, 0);
        for (r, rp) in regions {
            let z_r = g.select_rows(student_patches, r);
            preds.push(cross_attention_graph(g, z_r, student_patches, ca));
            let w = match self.normalization {
                Normalization::Mean => 1.0 / (r.len() * rp.len() * regions.len()) as f64,
                Normalization::Sum => 1.0,
            };
            for i in 0..r.len() {
                for j in 0..rp.len() {
                    pairs.push((row_off + i, tgt_off + j, w));
                }
            }
            row_off += r.len();
            tgt_off += rp.len();
        }
        let pred = g.concat_rows(&preds);
        let views: Vec<_> = targets.iter().map(|t| t.view()).collect();
        let targets = ndarray::concatenate(Axis(0), &views).expect("same K");
        Some(self.distill(g, pred, targets, pairs))
    }

    fn eval(&self, build: impl FnOnce(&mut Graph<S>) -> Option<Var>) -> S {
        let mut g = Graph::inference();
        match build(&mut g) {
            Some(v) => g.scalar(v),
            None => S::zero(),
        }
    }

    /// Multi-crop global loss over `[CLS]` tokens of all student views against
    /// the teacher's global views.
    pub fn loss_global(&self, student: &[TokenBatch<S>], teacher: &[TokenBatch<S>]) -> S {
        let cls = stack_cls(student);
        let targets = self.targets(&stack_cls(teacher));
        self.eval(|g| {
            let c = g.constant(cls);
            Some(self.global_term(g, c, targets))
        })
    }

    pub fn loss_local_patchaug(&self, student_blurred: &TokenBatch<S>, teacher_clean: &TokenBatch<S>, mask: &[usize]) -> S {
        let targets = self.targets(&teacher_clean.patches);
        self.eval(|g| {
            let p = g.constant(student_blurred.patches.clone());
            self.patchaug_term(g, p, &targets, mask)
        })
    }

    pub fn loss_local_interview(&self, student: &TokenBatch<S>, teacher: &TokenBatch<S>, cmap: &CorrespondenceMap) -> S {
        let targets = self.targets(&teacher.patches);
        self.eval(|g| {
            let p = g.constant(student.patches.clone());
            self.interview_term(g, p, targets, cmap)
        })
    }

    /// Returns the regional loss and the number of regions with a correspondence.
    pub fn loss_regional(
        &self,
        student: &TokenBatch<S>,
        teacher: &TokenBatch<S>,
        ca: &CrossAttentionParams<S>,
        regions: &[RegionPair],
    ) -> (S, usize) {
        let active = active_regions(regions);
        let targets = self.regional_targets(&student.patches, &teacher.patches, ca, &active);
        let mut g = Graph::inference();
        let p = g.constant(student.patches.clone());
        match self.regional_term(&mut g, p, ca, &active, &targets) {
            Some(v) => (g.scalar(v), active.len()),
            None => (S::zero(), 0),
        }
    }
}

/// `(student region indices R, teacher indices R′)`.
pub type RegionPair = (Vec<usize>, Vec<usize>);

/// Regions with a non-empty counterpart in the teacher view.
pub fn active_regions(regions: &[RegionPair]) -> Vec<RegionPair> {
    regions.iter().filter(|(r, rp)| !r.is_empty() && !rp.is_empty()).cloned().collect()
}

fn stack_cls<S: Scalar>(batches: &[TokenBatch<S>]) -> Array2<S> {
    let rows: Vec<_> = batches.iter().map(|b| b.cls.view().insert_axis(Axis(0))).collect();
    ndarray::concatenate(Axis(0), &rows).expect("equal widths")
}

/// Shannon entropy of each row.
pub fn row_entropy<S: Scalar>(p: &Array2<S>) -> Array1<S> {
    p.map_axis(Axis(1), |r| {
        -r.iter().filter(|v| **v > S::zero()).map(|v| *v * v.ln()).sum::<S>()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_hot_teacher_uniform_student_is_log_k() {
        let k = 8192;
        let mut t = Array1::<f64>::zeros(k);
        t[17] = 1e4;
        let s = Array1::<f64>::zeros(k);
        let c = CenterState::zeros(k, 0.9);
        let l = soft_ce(&s, &t, &c, 0.1, 0.04);
        assert!((l - (8192f64).ln()).abs() < 1e-6, "{l}");
    }

    #[test]
    fn two_class_hand_case() {
        let c = CenterState::zeros(2, 0.9);
        let l: f64 = soft_ce(&array![0.0, 0.0], &array![1.0, 0.0], &c, 1.0, 1.0);
        assert!((l - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn matched_distributions_give_entropy() {
        let c = CenterState::zeros(3, 0.9);
        let t = array![0.3, -1.0, 2.0];
        let l: f64 = soft_ce(&t, &t, &c, 0.5, 0.5);
        let a = teacher_targets(&t.clone().insert_axis(Axis(0)), &c, 0.5);
        assert!((l - row_entropy(&a)[0]).abs() < 1e-12);
    }

    #[test]
    fn center_recurrence() {
        let c0 = CenterState::<f64>::zeros(2, 0.9);
        let m1 = array![[1.0, 2.0], [3.0, 4.0]]; // mean (2, 3)
        let m2 = array![[-1.0, 0.5]];
        let c1 = update_center(&c0, &m1).unwrap();
        let c2 = update_center(&c1, &m2).unwrap();
        assert!((c2.center[0] - (0.09 * 2.0 + 0.1 * -1.0)).abs() < 1e-15);
        assert!((c2.center[1] - (0.09 * 3.0 + 0.1 * 0.5)).abs() < 1e-15);
        let z = CenterState::<f64>::zeros(2, 0.0);
        assert_eq!(update_center(&z, &m1).unwrap().center, array![2.0, 3.0]);
        let bad = CenterState::<f64>::zeros(2, 1.0);
        assert!(update_center(&bad, &m1).is_err());
    }

    #[test]
    fn center_converges_to_constant_logits() {
        let mut c = CenterState::<f64>::zeros(3, 0.9);
        let batch = array![[1.0, -2.0, 0.5]];
        for _ in 0..400 {
            c = update_center(&c, &batch).unwrap();
        }
        for (a, b) in c.center.iter().zip(batch.row(0).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn total_is_sum() {
        let b = total_loss([1.0, 2.0, 0.5, 0.5], &TermWeights::ones());
        assert_eq!(b.total, 4.0);
        let w = TermWeights {
            global: 1.0,
            regional: 0.0,
            patchaug: 0.0,
            interview: 0.0,
        };
        let b = total_loss([1.5, f64::NAN, 2.0, 3.0], &w);
        assert_eq!(b.total, 1.5);
        assert_eq!((b.l_reg, b.l_loc1, b.l_loc2), (0.0, 0.0, 0.0));
    }

    #[test]
    fn pairing_combinatorics() {
        assert_eq!(global_pairs(12, 2).len(), 22);
        assert_eq!(global_pairs(2, 2), vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn zero_last_layer_gives_zero_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = HeadConfig {
            out_dim: 16,
            hidden: 8,
            bottleneck: 4,
            init_std: 0.5,
        };
        let mut head = ProjectionHead::<f64>::init(6, &cfg, &mut rng);
        head.last_w.value.fill(0.0);
        let x = randn::<f64, _>(&mut rng, 3, 6, 1.0);
        assert!(project(&x, &head).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identical_rows_project_identically() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = HeadConfig {
            out_dim: 16,
            hidden: 8,
            bottleneck: 4,
            init_std: 0.5,
        };
        let head = ProjectionHead::<f64>::init(6, &cfg, &mut rng);
        let row = randn::<f64, _>(&mut rng, 1, 6, 1.0);
        let x = ndarray::concatenate(Axis(0), &[row.view(), row.view()]).unwrap();
        let y = project(&x, &head);
        assert_eq!(y.row(0), y.row(1));
    }

    #[test]
    fn empty_inputs_give_zero_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = HeadConfig {
            out_dim: 8,
            hidden: 8,
            bottleneck: 4,
            init_std: 0.5,
        };
        let head = ProjectionHead::<f64>::init(4, &cfg, &mut rng);
        let center = CenterState::zeros(8, 0.9);
        let d = Distiller {
            student_head: &head,
            teacher_head: &head,
            center: &center,
            temp_s: 0.1,
            temp_t: 0.04,
            normalization: Normalization::Mean,
        };
        let grid = crate::vit::PatchGrid::square(2, 4, 3);
        let tb = TokenBatch {
            cls: Array1::zeros(4),
            registers: Array2::zeros((1, 4)),
            patches: randn(&mut rng, 4, 4, 1.0),
            grid,
        };
        assert_eq!(d.loss_local_patchaug(&tb, &tb, &[]), 0.0);
        assert_eq!(d.loss_local_interview(&tb, &tb, &CorrespondenceMap::default()), 0.0);
        let ca = CrossAttentionParams::init(4, &crate::regions::RegionConfig::default(), &mut rng);
        assert_eq!(d.loss_regional(&tb, &tb, &ca, &[(vec![0], vec![])]), (0.0, 0));
    }
}
