mod common;

use glare_core::evaluation::{export_attention, pca_rgb, seg_metrics, symmetric_eigen, Pca};
use glare_core::ndarray::{Array2, Axis};
use glare_core::training::stream;
use glare_core::vit::{randn, VisionTransformer};
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;

fn mask_strategy(n: u8) -> impl Strategy<Value = (Array2<u8>, Array2<u8>)> {
    (prop::collection::vec(0..n, 48), prop::collection::vec(0..n, 48))
        .prop_map(|(p, g)| (Array2::from_shape_vec((6, 8), p).unwrap(), Array2::from_shape_vec((6, 8), g).unwrap()))
}

/// Per-class IoU from pixel sets.
fn iou_oracle(pred: &Array2<u8>, gt: &Array2<u8>, c: u8) -> Option<f64> {
    let (mut inter, mut union, mut in_gt) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gt) {
        let (a, b) = (*p == c, *g == c);
        inter += (a && b) as u32;
        union += (a || b) as u32;
        in_gt += b as u32;
    }
    (in_gt > 0).then(|| inter as f64 / union as f64)
}

proptest! {
    #[test]
    fn iou_matches_set_oracle((pred, gt) in mask_strategy(4)) {
        let m = seg_metrics(&pred, &gt, 4).unwrap();
        let mut present = Vec::new();
        for c in 0..4u8 {
            let want = iou_oracle(&pred, &gt, c);
            prop_assert_eq!(m.per_class_iou[c as usize], want);
            present.extend(want);
        }
        let miou = present.iter().sum::<f64>() / present.len() as f64;
        prop_assert!((m.miou - miou).abs() < 1e-15);
        let hits = pred.iter().zip(&gt).filter(|(p, g)| p == g).count();
        prop_assert_eq!(m.aacc, hits as f64 / 48.0);
    }

    #[test]
    fn relabeling_both_masks_changes_nothing((pred, gt) in mask_strategy(5), perm in Just((0u8..5).collect::<Vec<_>>()).prop_shuffle()) {
        let a = seg_metrics(&pred, &gt, 5).unwrap();
        let b = seg_metrics(&pred.mapv(|v| perm[v as usize]), &gt.mapv(|v| perm[v as usize]), 5).unwrap();
        prop_assert!((a.miou - b.miou).abs() < 1e-12);
        prop_assert!((a.macc - b.macc).abs() < 1e-12);
        prop_assert_eq!(a.aacc, b.aacc);
    }
}

#[test]
fn ignore_label_is_skipped() {
    let gt = Array2::from_shape_vec((1, 4), vec![0, 255, 1, 255]).unwrap();
    let pred = Array2::from_shape_vec((1, 4), vec![0, 1, 1, 0]).unwrap();
    let m = seg_metrics(&pred, &gt, 2).unwrap();
    assert_eq!((m.miou, m.aacc), (1.0, 1.0));
    assert!(seg_metrics(&pred, &Array2::from_elem((1, 4), 2), 2).is_err());
}

fn toy_tokens(seed: u64, n: usize, d: usize) -> Array2<f64> {
    let mut rng = stream(seed, 0, 0, 1);
    let scales = Array2::from_shape_fn((1, d), |(_, j)| 3.0 / (1.0 + j as f64));
    randn::<f64, _>(&mut rng, n, d, 1.0) * &scales
}

#[test]
fn jacobi_matches_nalgebra() {
    let x = toy_tokens(1, 40, 7);
    let cov = x.t().dot(&x) / 40.0;
    let (vals, vecs) = symmetric_eigen(&cov);
    let reference = SymmetricEigen::new(DMatrix::from_row_iterator(7, 7, cov.iter().copied()));
    let mut want: Vec<(f64, usize)> = reference.eigenvalues.iter().copied().zip(0..).collect();
    want.sort_by(|a, b| b.0.total_cmp(&a.0));
    for (i, (val, j)) in want.into_iter().enumerate() {
        assert!((vals[i] - val).abs() < 1e-10 * val.abs().max(1.0));
        let col = reference.eigenvectors.column(j);
        let dot: f64 = (0..7).map(|k| vecs[[k, i]] * col[k]).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-9, "component {i}: |dot| {}", dot.abs());
    }
}

#[test]
fn pca_scores_match_eigensolver_oracle() {
    let x = toy_tokens(2, 50, 6);
    let pca = Pca::fit(&x, 3).unwrap();
    let mean = x.mean_axis(Axis(0)).unwrap();
    let xc = &x - &mean.view().insert_axis(Axis(0));
    let cov = xc.t().dot(&xc) / 50.0;
    let eig = SymmetricEigen::new(DMatrix::from_row_iterator(6, 6, cov.iter().copied()));
    let mut order: Vec<usize> = (0..6).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let scores = pca.transform(&x);
    for c in 0..3 {
        let v = eig.eigenvectors.column(order[c]);
        let oracle: Vec<f64> = xc.rows().into_iter().map(|r| (0..6).map(|k| r[k] * v[k]).sum()).collect();
        let sign = if oracle.iter().zip(scores.column(c)).map(|(a, b)| a * b).sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
        for (a, b) in oracle.iter().zip(scores.column(c)) {
            assert!((sign * a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn rank_three_tokens_reconstruct_exactly() {
    let mut rng = stream(3, 0, 0, 1);
    let coeffs = randn::<f64, _>(&mut rng, 30, 3, 1.0);
    let basis = randn::<f64, _>(&mut rng, 3, 8, 1.0);
    let offset = randn::<f64, _>(&mut rng, 1, 8, 1.0);
    let x = coeffs.dot(&basis) + &offset;
    let pca = Pca::fit(&x, 3).unwrap();
    let recon = pca.transform(&x).dot(&pca.components.t()) + &pca.mean.view().insert_axis(Axis(0));
    let residual = (&recon - &x).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(residual < 1e-8, "residual {residual:e}");
}

#[test]
fn pca_ignores_token_order() {
    let x = toy_tokens(4, 25, 5);
    let rev = x.slice(glare_core::ndarray::s![..;-1, ..]).to_owned();
    let (a, b) = (Pca::fit(&x, 3).unwrap(), Pca::fit(&rev, 3).unwrap());
    assert!((&a.components - &b.components).iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn degenerate_tokens_are_rejected() {
    let x = Array2::from_shape_fn((10, 4), |(i, j)| ((i % 2) * j) as f64);
    assert!(Pca::fit(&x, 3).is_err());
}

#[test]
fn duplicate_images_give_identical_rasters() {
    let cfg = common::tiny_config();
    let model = VisionTransformer::<f64>::init(cfg.model, &mut stream(0, 0, 0, 1)).unwrap();
    let imgs = common::images::<f64>(2, 16, 5);
    let out = pca_rgb(&model, &[imgs[0].clone(), imgs[1].clone(), imgs[0].clone()]).unwrap();
    assert_eq!(out[0], out[2]);
    assert!(out.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn attention_export_writes_one_map_per_head() {
    let cfg = common::tiny_config();
    let model = VisionTransformer::<f64>::init(cfg.model.clone(), &mut stream(0, 0, 0, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let img = common::images::<f64>(1, 16, 6).remove(0);
    let paths = export_attention(&model, &img, dir.path()).unwrap();
    assert_eq!(paths.len(), cfg.model.heads + 1);
    assert!(paths.iter().all(|p| p.exists()));
}
