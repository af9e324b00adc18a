//! Vision Transformer encoder with residual bottleneck adapters.
//!
//! Token layout is `[CLS, registers…, patches…]`. Every transformer block may
//! carry an adapter `x + s·ReLU(x·W_down)·W_up`; with `W_up = 0` the encoder is
//! exactly the source backbone.

use ndarray::{Array1, Array2, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augmentation::View;
use crate::graph::{Graph, Var};
use crate::params::{Param, ParamGroup, Parameterized, Trainable};
use crate::{GlareError, Result, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterPlacement {
    /// Adapter transforms the attention sub-layer output before its residual add.
    AttentionOutput,
    /// Adapter transforms the output of the whole block.
    BlockOutput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitConfig {
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub n_registers: usize,
    /// Side of the patch grid the positional embeddings are stored for.
    pub pos_grid: usize,
    pub adapter_rank: usize,
    pub adapter_scale: f64,
    pub adapter_placement: AdapterPlacement,
    pub adapter_init_std: f64,
    pub init_std: f64,
    pub layer_norm_eps: f64,
}

impl Default for VitConfig {
    /// ViT-S/16 with one register token.
    fn default() -> Self {
        Self {
            channels: 3,
            patch_size: 16,
            embed_dim: 384,
            depth: 12,
            heads: 6,
            mlp_hidden: 1536,
            n_registers: 1,
            pos_grid: 14,
            adapter_rank: 64,
            adapter_scale: 1.0,
            adapter_placement: AdapterPlacement::AttentionOutput,
            adapter_init_std: 0.02,
            init_std: 0.02,
            layer_norm_eps: 1e-6,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(GlareError::Config(m.to_string()));
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad("embed_dim must be a positive multiple of heads");
        }
        if self.adapter_rank == 0 || self.adapter_rank >= self.embed_dim {
            return bad("adapter_rank must satisfy 0 < rank < embed_dim");
        }
        if self.adapter_scale <= 0.0 || !self.adapter_scale.is_finite() {
            return bad("adapter_scale must be positive");
        }
        if self.patch_size == 0 || self.channels == 0 || self.depth == 0 || self.pos_grid == 0 {
            return bad("patch_size, channels, depth and pos_grid must be positive");
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Analytic adapter parameter count: `depth · 2 · D · r`.
    pub fn adapter_param_count(&self) -> usize {
        self.depth * 2 * self.embed_dim * self.adapter_rank
    }
}

/// Patch lattice of one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_size: usize,
    pub channels: usize,
}

impl PatchGrid {
    pub fn for_image(channels: usize, height: usize, width: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || height % patch_size != 0 || width % patch_size != 0 || height == 0 || width == 0 {
            return Err(GlareError::InvalidInput(format!(
                "image {height}×{width} is not divisible into {patch_size}-pixel patches"
            )));
        }
        Ok(Self {
            rows: height / patch_size,
            cols: width / patch_size,
            patch_size,
            channels,
        })
    }

    pub fn square(side: usize, patch_size: usize, channels: usize) -> Self {
        Self {
            rows: side,
            cols: side,
            patch_size,
            channels,
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.rows * self.patch_size
    }

    pub fn width(&self) -> usize {
        self.cols * self.patch_size
    }

    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    pub fn coords(&self, idx: usize) -> (usize, usize) {
        (idx / self.cols, idx % self.cols)
    }
}

/// Final-layer encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch<S> {
    pub cls: Array1<S>,
    pub registers: Array2<S>,
    pub patches: Array2<S>,
    pub grid: PatchGrid,
}

impl<S: Scalar> TokenBatch<S> {
    pub fn token_count(&self) -> usize {
        1 + self.registers.nrows() + self.patches.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.cls.iter().chain(self.registers.iter()).chain(self.patches.iter()).all(|v| v.is_finite())
    }
}

/// `[CLS]`-query attention over patch keys, one row per head.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap<S> {
    pub per_head: Array2<S>,
    pub grid: PatchGrid,
}

impl<S: Scalar> AttentionMap<S> {
    pub fn heads(&self) -> usize {
        self.per_head.nrows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<S> {
    pub norm1_w: Param<S>,
    pub norm1_b: Param<S>,
    pub qkv_w: Param<S>,
    pub qkv_b: Param<S>,
    pub proj_w: Param<S>,
    pub proj_b: Param<S>,
    pub norm2_w: Param<S>,
    pub norm2_b: Param<S>,
    pub fc1_w: Param<S>,
    pub fc1_b: Param<S>,
    pub fc2_w: Param<S>,
    pub fc2_b: Param<S>,
}

/// Source-model weights. Frozen during continual pre-training.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams<S> {
    pub patch_w: Param<S>,
    pub patch_b: Param<S>,
    pub cls_token: Param<S>,
    pub registers: Param<S>,
    /// Rows: `[CLS, registers…, pos_grid² patches]`.
    pub pos_embed: Param<S>,
    pub blocks: Vec<BlockParams<S>>,
    pub norm_w: Param<S>,
    pub norm_b: Param<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams<S> {
    pub down: Param<S>,
    pub up: Param<S>,
    pub scale: S,
}

pub fn randn<S: Scalar, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Array2<S> {
    let normal = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || S::of(normal.sample(rng)))
}

fn bb<S: Scalar>(name: String, decay: bool, value: Array2<S>) -> Param<S> {
    Param::new(name, ParamGroup::Backbone, decay, value)
}

impl<S: Scalar> BackboneParams<S> {
    pub fn init<R: Rng + ?Sized>(cfg: &VitConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        let std = cfg.init_std;
        let ones = || Array2::<S>::ones((1, d));
        let zeros = |n: usize| Array2::<S>::zeros((1, n));
        let blocks = (0..cfg.depth)
            .map(|i| {
                let p = format!("backbone.blocks.{i}");
                BlockParams {
                    norm1_w: bb(format!("{p}.norm1.weight"), false, ones()),
                    norm1_b: bb(format!("{p}.norm1.bias"), false, zeros(d)),
                    qkv_w: bb(format!("{p}.attn.qkv.weight"), true, randn(rng, d, 3 * d, std)),
                    qkv_b: bb(format!("{p}.attn.qkv.bias"), false, zeros(3 * d)),
                    proj_w: bb(format!("{p}.attn.proj.weight"), true, randn(rng, d, d, std)),
                    proj_b: bb(format!("{p}.attn.proj.bias"), false, zeros(d)),
                    norm2_w: bb(format!("{p}.norm2.weight"), false, ones()),
                    norm2_b: bb(format!("{p}.norm2.bias"), false, zeros(d)),
                    fc1_w: bb(format!("{p}.mlp.fc1.weight"), true, randn(rng, d, cfg.mlp_hidden, std)),
                    fc1_b: bb(format!("{p}.mlp.fc1.bias"), false, zeros(cfg.mlp_hidden)),
                    fc2_w: bb(format!("{p}.mlp.fc2.weight"), true, randn(rng, cfg.mlp_hidden, d, std)),
                    fc2_b: bb(format!("{p}.mlp.fc2.bias"), false, zeros(d)),
                }
            })
            .collect();
        let n_pos = 1 + cfg.n_registers + cfg.pos_grid * cfg.pos_grid;
        Self {
            patch_w: bb("backbone.patch_embed.weight".into(), true, randn(rng, cfg.patch_dim(), d, std)),
            patch_b: bb("backbone.patch_embed.bias".into(), false, zeros(d)),
            cls_token: bb("backbone.cls_token".into(), false, randn(rng, 1, d, std)),
            registers: bb("backbone.register_tokens".into(), false, randn(rng, cfg.n_registers, d, std)),
            pos_embed: bb("backbone.pos_embed".into(), false, randn(rng, n_pos, d, std)),
            blocks,
            norm_w: bb("backbone.norm.weight".into(), false, ones()),
            norm_b: bb("backbone.norm.bias".into(), false, zeros(d)),
        }
    }
}

impl<S: Scalar> Parameterized<S> for BackboneParams<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<S>)) {
        f(&self.patch_w);
        f(&self.patch_b);
        f(&self.cls_token);
        f(&self.registers);
        f(&self.pos_embed);
        for b in &self.blocks {
            for p in [
                &b.norm1_w, &b.norm1_b, &b.qkv_w, &b.qkv_b, &b.proj_w, &b.proj_b, &b.norm2_w, &b.norm2_b, &b.fc1_w,
                &b.fc1_b, &b.fc2_w, &b.fc2_b,
            ] {
                f(p);
            }
        }
        f(&self.norm_w);
        f(&self.norm_b);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        f(&mut self.patch_w);
        f(&mut self.patch_b);
        f(&mut self.cls_token);
        f(&mut self.registers);
        f(&mut self.pos_embed);
        for b in &mut self.blocks {
            for p in [
                &mut b.norm1_w,
                &mut b.norm1_b,
                &mut b.qkv_w,
                &mut b.qkv_b,
                &mut b.proj_w,
                &mut b.proj_b,
                &mut b.norm2_w,
                &mut b.norm2_b,
                &mut b.fc1_w,
                &mut b.fc1_b,
                &mut b.fc2_w,
                &mut b.fc2_b,
            ] {
                f(p);
            }
        }
        f(&mut self.norm_w);
        f(&mut self.norm_b);
    }
}

impl<S: Scalar> AdapterParams<S> {
    /// `W_down` small random, `W_up` zero: the adapter starts as the identity.
    pub fn init<R: Rng + ?Sized>(cfg: &VitConfig, block: usize, rng: &mut R) -> Self {
        let (d, r) = (cfg.embed_dim, cfg.adapter_rank);
        Self {
            down: Param::new(
                format!("adapters.{block}.down"),
                ParamGroup::Adapter,
                true,
                randn(rng, d, r, cfg.adapter_init_std),
            ),
            up: Param::new(format!("adapters.{block}.up"), ParamGroup::Adapter, true, Array2::zeros((r, d))),
            scale: S::of(cfg.adapter_scale),
        }
    }
}

/// `x + s·ReLU(x·W_down)·W_up`.
pub fn adapter_forward<S: Scalar>(x: &Array2<S>, a: &AdapterParams<S>) -> Result<Array2<S>> {
    if x.ncols() != a.down.value.nrows() || a.down.value.ncols() != a.up.value.nrows() || a.up.value.ncols() != x.ncols() {
        return Err(GlareError::Shape(format!(
            "adapter expects {} features with rank {}, got {}",
            a.down.value.nrows(),
            a.down.value.ncols(),
            x.ncols()
        )));
    }
    let mut g = Graph::inference();
    let xv = g.constant(x.clone());
    let y = adapter_graph(&mut g, xv, a);
    Ok(g.value(y).clone())
}

fn adapter_graph<S: Scalar>(g: &mut Graph<S>, x: Var, a: &AdapterParams<S>) -> Var {
    let down = g.param(&a.down);
    let up = g.param(&a.up);
    let h = g.matmul(x, down);
    let h = g.relu(h);
    let h = g.matmul(h, up);
    let h = g.scale(h, a.scale);
    g.add(x, h)
}

/// Splits a `C×H×W` image into row-major flattened patches of length `C·P²`
/// (channel-major inside each patch).
pub fn patchify<S: Scalar>(image: &Array3<S>, patch_size: usize) -> Result<Array2<S>> {
    let (c, h, w) = image.dim();
    let grid = PatchGrid::for_image(c, h, w, patch_size)?;
    let p = patch_size;
    let mut out = Array2::zeros((grid.len(), c * p * p));
    for r in 0..grid.rows {
        for col in 0..grid.cols {
            let idx = grid.index(r, col);
            let mut k = 0;
            for ch in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        out[[idx, k]] = image[[ch, r * p + py, col * p + px]];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Bicubic interpolation weights (A = −0.75, half-pixel centers, clamped borders)
/// mapping a length-`src` axis onto length `dst`.
pub fn bicubic_matrix(src: usize, dst: usize) -> Array2<f64> {
    let mut m = Array2::zeros((dst, src));
    if src == dst {
        for i in 0..src {
            m[[i, i]] = 1.0;
        }
        return m;
    }
    let a = -0.75;
    let cubic = |x: f64| {
        let x = x.abs();
        if x <= 1.0 {
            ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
        } else if x < 2.0 {
            ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
        } else {
            0.0
        }
    };
    let scale = src as f64 / dst as f64;
    for o in 0..dst {
        let x = (o as f64 + 0.5) * scale - 0.5;
        let x0 = x.floor();
        let t = x - x0;
        for k in -1..=2i64 {
            let idx = (x0 as i64 + k).clamp(0, src as i64 - 1) as usize;
            m[[o, idx]] += cubic(k as f64 - t);
        }
    }
    m
}

/// Resizes a `src×src` grid of embeddings (rows row-major) to `rows×cols`.
pub fn pos_interp_matrix<S: Scalar>(src: usize, rows: usize, cols: usize) -> Array2<S> {
    let mr = bicubic_matrix(src, rows);
    let mc = bicubic_matrix(src, cols);
    Array2::from_shape_fn((rows * cols, src * src), |(o, i)| {
        let (orow, ocol) = (o / cols, o % cols);
        let (irow, icol) = (i / src, i % src);
        S::of(mr[[orow, irow]] * mc[[ocol, icol]])
    })
}

/// Graph handles of one encoded view.
pub struct EncodedVars<S> {
    pub tokens: Var,
    pub cls: Var,
    pub patches: Var,
    pub grid: PatchGrid,
    pub attention: Option<AttentionMap<S>>,
}

/// Backbone plus one adapter per block.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionTransformer<S> {
    pub config: VitConfig,
    pub backbone: BackboneParams<S>,
    pub adapters: Vec<AdapterParams<S>>,
}

impl<S: Scalar> VisionTransformer<S> {
    pub fn init<R: Rng + ?Sized>(config: VitConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let backbone = BackboneParams::init(&config, rng);
        let adapters = (0..config.depth).map(|i| AdapterParams::init(&config, i, rng)).collect();
        Ok(Self {
            config,
            backbone,
            adapters,
        })
    }

    pub fn from_parts(config: VitConfig, backbone: BackboneParams<S>, adapters: Vec<AdapterParams<S>>) -> Result<Self> {
        config.validate()?;
        if adapters.len() != backbone.blocks.len() || backbone.blocks.len() != config.depth {
            return Err(GlareError::Shape(format!(
                "{} adapters for {} blocks (depth {})",
                adapters.len(),
                backbone.blocks.len(),
                config.depth
            )));
        }
        Ok(Self {
            config,
            backbone,
            adapters,
        })
    }

    pub fn depth(&self) -> usize {
        self.backbone.blocks.len()
    }

    /// Records the forward pass of one image into `g`.
    pub fn forward(&self, g: &mut Graph<S>, pixels: &Array3<S>, attn_block: Option<usize>) -> Result<EncodedVars<S>> {
        self.forward_with(g, pixels, attn_block, true)
    }

    fn forward_with(&self, g: &mut Graph<S>, pixels: &Array3<S>, attn_block: Option<usize>, adapters: bool) -> Result<EncodedVars<S>> {
        let cfg = &self.config;
        let (c, h, w) = pixels.dim();
        if c != cfg.channels {
            return Err(GlareError::InvalidInput(format!("expected {} channels, got {c}", cfg.channels)));
        }
        let grid = PatchGrid::for_image(c, h, w, cfg.patch_size)?;
        if let Some(b) = attn_block {
            if b >= self.depth() {
                return Err(GlareError::BlockIndex {
                    index: b as isize,
                    depth: self.depth(),
                });
            }
        }
        let d = cfg.embed_dim;
        let n_reg = cfg.n_registers;
        let bbp = &self.backbone;

        let patches = g.constant(patchify(pixels, cfg.patch_size)?);
        let pw = g.param(&bbp.patch_w);
        let pb = g.param(&bbp.patch_b);
        let emb = g.matmul(patches, pw);
        let emb = g.add_row(emb, pb);

        let pos = g.param(&bbp.pos_embed);
        let head_rows: Vec<usize> = (0..1 + n_reg).collect();
        let pos_head = g.select_rows(pos, &head_rows);
        let grid_rows: Vec<usize> = (1 + n_reg..1 + n_reg + cfg.pos_grid * cfg.pos_grid).collect();
        let pos_grid = g.select_rows(pos, &grid_rows);
        let pos_patch = if grid.rows == cfg.pos_grid && grid.cols == cfg.pos_grid {
            pos_grid
        } else {
            let m = g.constant(pos_interp_matrix(cfg.pos_grid, grid.rows, grid.cols));
            g.matmul(m, pos_grid)
        };

        let cls = g.param(&bbp.cls_token);
        let mut parts = vec![cls];
        if n_reg > 0 {
            parts.push(g.param(&bbp.registers));
        }
        let special = g.concat_rows(&parts);
        let special = g.add(special, pos_head);
        let emb = g.add(emb, pos_patch);
        let mut x = g.concat_rows(&[special, emb]);

        let eps = S::of(cfg.layer_norm_eps);
        let hd = d / cfg.heads;
        let inv_sqrt = S::one() / S::of(hd as f64).sqrt();
        let mut attention = None;
        for (bi, (blk, adapter)) in bbp.blocks.iter().zip(&self.adapters).enumerate() {
            let n1w = g.param(&blk.norm1_w);
            let n1b = g.param(&blk.norm1_b);
            let h1 = g.layer_norm(x, n1w, n1b, eps);
            let qw = g.param(&blk.qkv_w);
            let qb = g.param(&blk.qkv_b);
            let qkv = g.matmul(h1, qw);
            let qkv = g.add_row(qkv, qb);
            let mut outs = Vec::with_capacity(cfg.heads);
            let mut maps = Vec::new();
            for head in 0..cfg.heads {
                let q = g.slice_cols(qkv, head * hd, hd);
                let k = g.slice_cols(qkv, d + head * hd, hd);
                let v = g.slice_cols(qkv, 2 * d + head * hd, hd);
                let kt = g.transpose(k);
                let s = g.matmul(q, kt);
                let s = g.scale(s, inv_sqrt);
                let a = g.softmax_rows(s);
                if attn_block == Some(bi) {
                    maps.push(g.value(a).row(0).to_owned());
                }
                outs.push(g.matmul(a, v));
            }
            if attn_block == Some(bi) {
                attention = Some(cls_patch_attention(&maps, n_reg, grid));
            }
            let o = g.concat_cols(&outs);
            let pw = g.param(&blk.proj_w);
            let pb = g.param(&blk.proj_b);
            let o = g.matmul(o, pw);
            let mut o = g.add_row(o, pb);
            if adapters && cfg.adapter_placement == AdapterPlacement::AttentionOutput {
                o = adapter_graph(g, o, adapter);
            }
            x = g.add(x, o);
            let n2w = g.param(&blk.norm2_w);
            let n2b = g.param(&blk.norm2_b);
            let h2 = g.layer_norm(x, n2w, n2b, eps);
            let f1w = g.param(&blk.fc1_w);
            let f1b = g.param(&blk.fc1_b);
            let m = g.matmul(h2, f1w);
            let m = g.add_row(m, f1b);
            let m = g.gelu(m);
            let f2w = g.param(&blk.fc2_w);
            let f2b = g.param(&blk.fc2_b);
            let m = g.matmul(m, f2w);
            let m = g.add_row(m, f2b);
            x = g.add(x, m);
            if adapters && cfg.adapter_placement == AdapterPlacement::BlockOutput {
                x = adapter_graph(g, x, adapter);
            }
            if !g.value(x).iter().all(|v| v.is_finite()) {
                return Err(GlareError::NumericFault { block: bi });
            }
        }
        let nw = g.param(&bbp.norm_w);
        let nb = g.param(&bbp.norm_b);
        let tokens = g.layer_norm(x, nw, nb, eps);
        let cls = g.select_rows(tokens, &[0]);
        let patch_rows: Vec<usize> = (1 + n_reg..1 + n_reg + grid.len()).collect();
        let patches = g.select_rows(tokens, &patch_rows);
        Ok(EncodedVars {
            tokens,
            cls,
            patches,
            grid,
            attention,
        })
    }

    pub fn encode_pixels(&self, pixels: &Array3<S>) -> Result<TokenBatch<S>> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, pixels, None)?;
        Ok(self.token_batch(&g, &out))
    }

    /// Source backbone alone, every adapter skipped.
    pub fn encode_source_pixels(&self, pixels: &Array3<S>) -> Result<TokenBatch<S>> {
        let mut g = Graph::inference();
        let out = self.forward_with(&mut g, pixels, None, false)?;
        Ok(self.token_batch(&g, &out))
    }

    pub fn encode(&self, view: &View<S>) -> Result<TokenBatch<S>> {
        self.encode_pixels(&view.pixels)
    }

    pub fn token_batch(&self, g: &Graph<S>, out: &EncodedVars<S>) -> TokenBatch<S> {
        let t = g.value(out.tokens);
        let n_reg = self.config.n_registers;
        TokenBatch {
            cls: t.row(0).to_owned(),
            registers: t.slice(ndarray::s![1..1 + n_reg, ..]).to_owned(),
            patches: g.value(out.patches).clone(),
            grid: out.grid,
        }
    }

    /// Resolves a possibly negative block index (−1 = last block).
    pub fn resolve_block(&self, block_index: isize) -> Result<usize> {
        let depth = self.depth() as isize;
        let idx = if block_index < 0 { depth + block_index } else { block_index };
        if idx < 0 || idx >= depth {
            return Err(GlareError::BlockIndex {
                index: block_index,
                depth: self.depth(),
            });
        }
        Ok(idx as usize)
    }

    pub fn extract_attention_pixels(&self, pixels: &Array3<S>, block_index: isize) -> Result<AttentionMap<S>> {
        let block = self.resolve_block(block_index)?;
        let mut g = Graph::inference();
        let out = self.forward(&mut g, pixels, Some(block))?;
        Ok(out.attention.expect("attention recorded for requested block"))
    }

    pub fn extract_attention(&self, view: &View<S>, block_index: isize) -> Result<AttentionMap<S>> {
        self.extract_attention_pixels(&view.pixels, block_index)
    }

    /// Replaces every adapter with a fresh identity-initialised one.
    pub fn reset_adapters<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.adapters = (0..self.depth()).map(|i| AdapterParams::init(&self.config, i, rng)).collect();
    }
}

fn cls_patch_attention<S: Scalar>(rows: &[Array1<S>], n_reg: usize, grid: PatchGrid) -> AttentionMap<S> {
    let n = grid.len();
    let mut per_head = Array2::zeros((rows.len(), n));
    for (h, row) in rows.iter().enumerate() {
        let slice = row.slice(ndarray::s![1 + n_reg..1 + n_reg + n]);
        let z: S = slice.sum();
        for (j, v) in slice.iter().enumerate() {
            per_head[[h, j]] = *v / z;
        }
    }
    AttentionMap { per_head, grid }
}

impl<S: Scalar> Parameterized<S> for VisionTransformer<S> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Param<S>)) {
        self.backbone.visit(f);
        for a in &self.adapters {
            f(&a.down);
            f(&a.up);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param<S>)) {
        self.backbone.visit_mut(f);
        for a in &mut self.adapters {
            f(&mut a.down);
            f(&mut a.up);
        }
    }
}

/// Trainable groups for continual pre-training (`adapter_only`) or from-scratch training.
///
/// The adapter-only set also admits the projection head and the cross-attention
/// module, which live in other modules but train alongside the adapters.
pub fn set_trainable(adapter_only: bool) -> Trainable {
    if adapter_only {
        Trainable::of(&[ParamGroup::Adapter, ParamGroup::Head, ParamGroup::CrossAttention])
    } else {
        Trainable::all()
    }
}
