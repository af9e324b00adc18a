//! Straight-line scalar reference of the encoder forward pass.

use glare_core::ndarray::{Array2, Array3};
use glare_core::vit::{AdapterPlacement, VisionTransformer};
use glare_core::Scalar;

type Mat<S> = Vec<Vec<S>>;

fn mat<S: Scalar>(a: &Array2<S>) -> Mat<S> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn affine<S: Scalar>(x: &Mat<S>, w: &Mat<S>, b: &[S]) -> Mat<S> {
    x.iter()
        .map(|row| {
            (0..w[0].len())
                .map(|j| {
                    let mut acc = b[j];
                    for (k, xv) in row.iter().enumerate() {
                        acc = acc + *xv * w[k][j];
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn layer_norm<S: Scalar>(x: &Mat<S>, g: &[S], b: &[S], eps: S) -> Mat<S> {
    x.iter()
        .map(|row| {
            let n = S::of(row.len() as f64);
            let mut mean = S::zero();
            for v in row {
                mean = mean + *v;
            }
            mean = mean / n;
            let mut var = S::zero();
            for v in row {
                var = var + (*v - mean) * (*v - mean);
            }
            var = var / n;
            let sd = (var + eps).sqrt();
            row.iter().enumerate().map(|(j, v)| (*v - mean) / sd * g[j] + b[j]).collect()
        })
        .collect()
}

fn gelu<S: Scalar>(x: S) -> S {
    let c = S::of((2.0 / std::f64::consts::PI).sqrt());
    S::of(0.5) * x * (S::one() + (c * (x + S::of(0.044715) * x * x * x)).tanh())
}

fn adapter<S: Scalar>(x: &Mat<S>, down: &Mat<S>, up: &Mat<S>, s: S) -> Mat<S> {
    let zeros_r = vec![S::zero(); down[0].len()];
    let zeros_d = vec![S::zero(); up[0].len()];
    let h: Mat<S> = affine(x, down, &zeros_r)
        .into_iter()
        .map(|r| r.into_iter().map(|v| if v > S::zero() { v } else { S::zero() }).collect())
        .collect();
    let u = affine(&h, up, &zeros_d);
    x.iter().zip(&u).map(|(a, b)| a.iter().zip(b).map(|(p, q)| *p + s * *q).collect()).collect()
}

/// Tokens `[CLS, registers…, patches…]` after the final norm, plus the
/// renormalized `[CLS]`→patch attention of every head of the last block.
pub struct OracleOut<S> {
    pub tokens: Mat<S>,
    pub last_attention: Mat<S>,
}

/// Requires the image to tile exactly into the stored positional grid.
pub fn forward<S: Scalar>(model: &VisionTransformer<S>, image: &Array3<S>, with_adapters: bool) -> OracleOut<S> {
    let cfg = &model.config;
    let bb = &model.backbone;
    let p = cfg.patch_size;
    let (c, h, w) = image.dim();
    let (rows, cols) = (h / p, w / p);
    assert_eq!((rows, cols), (cfg.pos_grid, cfg.pos_grid), "oracle handles the native grid only");
    let d = cfg.embed_dim;
    let n_reg = cfg.n_registers;
    let pos = mat(&bb.pos_embed.value);

    let mut x: Mat<S> = Vec::new();
    let cls = mat(&bb.cls_token.value);
    x.push((0..d).map(|j| cls[0][j] + pos[0][j]).collect());
    let regs = mat(&bb.registers.value);
    for r in 0..n_reg {
        x.push((0..d).map(|j| regs[r][j] + pos[1 + r][j]).collect());
    }
    let pw = mat(&bb.patch_w.value);
    let pb = bb.patch_b.value.row(0).to_vec();
    for pr in 0..rows {
        for pc in 0..cols {
            let mut flat = Vec::with_capacity(c * p * p);
            for ch in 0..c {
                for y in 0..p {
                    for xx in 0..p {
                        flat.push(image[[ch, pr * p + y, pc * p + xx]]);
                    }
                }
            }
            let e = affine(&vec![flat], &pw, &pb).remove(0);
            let prow = &pos[1 + n_reg + pr * cols + pc];
            x.push((0..d).map(|j| e[j] + prow[j]).collect());
        }
    }

    let eps = S::of(cfg.layer_norm_eps);
    let hd = d / cfg.heads;
    let n = x.len();
    let mut last_attention = Vec::new();
    for (bi, blk) in bb.blocks.iter().enumerate() {
        let ad = &model.adapters[bi];
        let (down, up) = (mat(&ad.down.value), mat(&ad.up.value));
        let v = |a: &Array2<S>| a.row(0).to_vec();
        let h1 = layer_norm(&x, &v(&blk.norm1_w.value), &v(&blk.norm1_b.value), eps);
        let qkv = affine(&h1, &mat(&blk.qkv_w.value), &v(&blk.qkv_b.value));
        let mut att_out = vec![vec![S::zero(); d]; n];
        last_attention.clear();
        for head in 0..cfg.heads {
            let (qo, ko, vo) = (head * hd, d + head * hd, 2 * d + head * hd);
            for i in 0..n {
                let mut scores = vec![S::zero(); n];
                for (j, s) in scores.iter_mut().enumerate() {
                    let mut dot = S::zero();
                    for t in 0..hd {
                        dot = dot + qkv[i][qo + t] * qkv[j][ko + t];
                    }
                    *s = dot / S::of(hd as f64).sqrt();
                }
                let mx = scores.iter().fold(S::neg_infinity(), |m, v| if *v > m { *v } else { m });
                let e: Vec<S> = scores.iter().map(|s| (*s - mx).exp()).collect();
                let mut z = S::zero();
                for v in &e {
                    z = z + *v;
                }
                let a: Vec<S> = e.iter().map(|v| *v / z).collect();
                if i == 0 {
                    let patch = &a[1 + n_reg..];
                    let mut zp = S::zero();
                    for v in patch {
                        zp = zp + *v;
                    }
                    last_attention.push(patch.iter().map(|v| *v / zp).collect());
                }
                for t in 0..hd {
                    let mut acc = S::zero();
                    for j in 0..n {
                        acc = acc + a[j] * qkv[j][vo + t];
                    }
                    att_out[i][head * hd + t] = acc;
                }
            }
        }
        let mut o = affine(&att_out, &mat(&blk.proj_w.value), &v(&blk.proj_b.value));
        if with_adapters && cfg.adapter_placement == AdapterPlacement::AttentionOutput {
            o = adapter(&o, &down, &up, ad.scale);
        }
        for i in 0..n {
            for j in 0..d {
                x[i][j] = x[i][j] + o[i][j];
            }
        }
        let h2 = layer_norm(&x, &v(&blk.norm2_w.value), &v(&blk.norm2_b.value), eps);
        let m = affine(&h2, &mat(&blk.fc1_w.value), &v(&blk.fc1_b.value));
        let m: Mat<S> = m.into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
        let m = affine(&m, &mat(&blk.fc2_w.value), &v(&blk.fc2_b.value));
        for i in 0..n {
            for j in 0..d {
                x[i][j] = x[i][j] + m[i][j];
            }
        }
        if with_adapters && cfg.adapter_placement == AdapterPlacement::BlockOutput {
            x = adapter(&x, &down, &up, ad.scale);
        }
    }
    let tokens = layer_norm(&x, &bb.norm_w.value.row(0).to_vec(), &bb.norm_b.value.row(0).to_vec(), eps);
    OracleOut { tokens, last_attention }
}
