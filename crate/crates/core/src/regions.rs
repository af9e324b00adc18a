//! Candidate-region sampling and the cross-attention module that pools region
//! tokens against a view (or against another region).

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::params::{Param, ParamGroup, Parameterized};
use crate::vit::{randn, AttentionMap, PatchGrid};
use crate::{GlareError, Result, Scalar};

/// Rectangle of patches. `anchor` is the sampled start patch before the
/// rectangle was shifted to fit inside the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub start_row: usize,
    pub start_col: usize,
    pub n_rows: usize,
    pub n_cols: usize,
    pub anchor: (usize, usize),
    /// Attention head that proposed the region, if any.
    pub head: Option<usize>,
}

impl Region {
    pub fn new(start_row: usize, start_col: usize, n_rows: usize, n_cols: usize) -> Self {
        Self {
            start_row,
            start_col,
            n_rows,
            n_cols,
            anchor: (start_row, start_col),
            head: None,
        }
    }

    /// Row-major patch indices covered by the region.
    pub fn indices(&self, grid: &PatchGrid) -> Vec<usize> {
        (self.start_row..self.start_row + self.n_rows)
            .flat_map(|r| (self.start_col..self.start_col + self.n_cols).map(move |c| (r, c)))
            .map(|(r, c)| grid.index(r, c))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.n_rows * self.n_cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fits(&self, grid: &PatchGrid) -> bool {
        self.start_row + self.n_rows <= grid.rows && self.start_col + self.n_cols <= grid.cols
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    Random,
    AttentionAware,
}

/// How a sampled anchor patch positions the rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    TopLeft,
    Center,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionConfig {
    pub count: usize,
    pub min_p: usize,
    pub max_p: usize,
    pub strategy: SamplingStrategy,
    pub anchor: AnchorMode,
    /// Cross-attention logit scale; `None` means `1/√D`.
    pub tau: Option<f64>,
    pub init_std: f64,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self {
            count: 6,
            min_p: 2,
            max_p: 6,
            strategy: SamplingStrategy::AttentionAware,
            anchor: AnchorMode::TopLeft,
            tau: None,
            init_std: 0.02,
        }
    }
}

fn check_bounds(grid: &PatchGrid, min_p: usize, max_p: usize) -> Result<()> {
    if min_p == 0 || min_p > max_p || max_p > grid.rows.min(grid.cols) {
        return Err(GlareError::InvalidInput(format!(
            "region side bounds [{min_p}, {max_p}] infeasible on a {}×{} grid",
            grid.rows, grid.cols
        )));
    }
    Ok(())
}

fn place<R: Rng + ?Sized>(
    grid: &PatchGrid,
    anchor: (usize, usize),
    min_p: usize,
    max_p: usize,
    mode: AnchorMode,
    rng: &mut R,
) -> Region {
    let n_rows = rng.random_range(min_p..=max_p);
    let n_cols = rng.random_range(min_p..=max_p);
    let (ar, ac) = anchor;
    let (r0, c0) = match mode {
        AnchorMode::TopLeft => (ar, ac),
        AnchorMode::Center => (ar.saturating_sub(n_rows / 2), ac.saturating_sub(n_cols / 2)),
    };
    Region {
        start_row: r0.min(grid.rows - n_rows),
        start_col: c0.min(grid.cols - n_cols),
        n_rows,
        n_cols,
        anchor,
        head: None,
    }
}

pub fn sample_random_regions<R: Rng + ?Sized>(
    grid: &PatchGrid,
    m: usize,
    min_p: usize,
    max_p: usize,
    rng: &mut R,
) -> Result<Vec<Region>> {
    check_bounds(grid, min_p, max_p)?;
    Ok((0..m)
        .map(|_| {
            let anchor = (rng.random_range(0..grid.rows), rng.random_range(0..grid.cols));
            place(grid, anchor, min_p, max_p, AnchorMode::TopLeft, rng)
        })
        .collect())
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<S: Scalar>(values: impl IntoIterator<Item = S>) -> usize {
    let mut best = 0;
    let mut best_v = S::neg_infinity();
    for (i, v) in values.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Region `k` is anchored at the most-attended patch of head `k mod heads`.
pub fn sample_attention_regions<S: Scalar, R: Rng + ?Sized>(
    attn: &AttentionMap<S>,
    grid: &PatchGrid,
    m: usize,
    min_p: usize,
    max_p: usize,
    rng: &mut R,
) -> Result<Vec<Region>> {
    sample_attention_regions_with(attn, grid, m, min_p, max_p, AnchorMode::TopLeft, rng)
}

pub fn sample_attention_regions_with<S: Scalar, R: Rng + ?Sized>(
    attn: &AttentionMap<S>,
    grid: &PatchGrid,
    m: usize,
    min_p: usize,
    max_p: usize,
    mode: AnchorMode,
    rng: &mut R,
) -> Result<Vec<Region>> {
    check_bounds(grid, min_p, max_p)?;
    if attn.heads() == 0 || attn.per_head.ncols() != grid.len() {
        return Err(GlareError::Shape(format!(
            "attention map {:?} does not cover a {}-patch grid",
            attn.per_head.dim(),
            grid.len()
        )));
    }
    Ok((0..m)
        .map(|k| {
            let head = k % attn.heads();
            let start = argmax(attn.per_head.row(head).iter().copied());
            let mut region = place(grid, grid.coords(start), min_p, max_p, mode, rng);
            region.head = Some(head);
            region
        })
        .collect())
}

/// `W_q`, `W_k`, `W_v` of the region cross-attention (row-vector convention,
/// tokens multiply from the left) and the logit scale `tau`.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossAttentionParams<S> {
    pub wq: Param<S>,
    pub wk: Param<S>,
    pub wv: Param<S>,
    pub tau: S,
}

impl<S: Scalar> CrossAttentionParams<S> {
    pub fn init<R: Rng + ?Sized>(dim: usize, cfg: &RegionConfig, rng: &mut R) -> Self {
        let p = |name: &str, v| Param::new(format!("cross_attention.{name}"), ParamGroup::CrossAttention, true, v);
        let tau = cfg.tau.unwrap_or(1.0 / (dim as f64).sqrt());
        // W_v starts near the identity so pooled tokens stay in the encoder's space.
        let mut wv: Array2<S> = randn(rng, dim, dim, cfg.init_std);
        for i in 0..dim {
            wv[[i, i]] += S::one();
        }
        let qk_std = 1.0 / (dim as f64).sqrt();
        Self {
            wq: p("wq", randn(rng, dim, dim, qk_std)),
            wk: p("wk", randn(rng, dim, dim, qk_std)),
            wv: p("wv", wv),
            tau: S::of(tau),
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.value.nrows()
    }
}

impl<S: Scalar> Parameterized<S> for CrossAttentionParams<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<S>)) {
        f(&self.wq);
        f(&self.wk);
        f(&self.wv);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.wq);
        f(&mut self.wk);
        f(&mut self.wv);
    }
}

/// `softmax(τ·(Q W_q)(K W_k)ᵀ)·(K W_v)` with one output row per query row.
pub fn cross_attention_graph<S: Scalar>(g: &mut Graph<S>, queries: Var, keys: Var, ca: &CrossAttentionParams<S>) -> Var {
    let wq = g.param(&ca.wq);
    let wk = g.param(&ca.wk);
    let wv = g.param(&ca.wv);
    let q = g.matmul(queries, wq);
    let k = g.matmul(keys, wk);
    let v = g.matmul(keys, wv);
    let kt = g.transpose(k);
    let logits = g.matmul(q, kt);
    let logits = g.scale(logits, ca.tau);
    let a = g.softmax_rows(logits);
    g.matmul(a, v)
}

fn cross_attention<S: Scalar>(queries: &Array2<S>, keys: &Array2<S>, ca: &CrossAttentionParams<S>) -> Array2<S> {
    let mut g = Graph::inference();
    let q = g.constant(queries.clone());
    let k = g.constant(keys.clone());
    let out = cross_attention_graph(&mut g, q, k, ca);
    g.value(out).clone()
}

/// Region tokens attend over the full view representation.
pub fn region_context<S: Scalar>(z_r: &Array2<S>, z: &Array2<S>, ca: &CrossAttentionParams<S>) -> Array2<S> {
    cross_attention(z_r, z, ca)
}

/// Corresponding-region tokens attend over the query region's tokens.
/// Returns `None` when the query region is empty.
pub fn region_share<S: Scalar>(z_prime_r: &Array2<S>, z_region: &Array2<S>, ca: &CrossAttentionParams<S>) -> Option<Array2<S>> {
    if z_region.nrows() == 0 {
        return None;
    }
    Some(cross_attention(z_prime_r, z_region, ca))
}
