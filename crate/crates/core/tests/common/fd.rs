//! Central finite differences of the full per-image objective.

use glare_core::graph::Graph;
use glare_core::ndarray::Array2;
use glare_core::params::Parameterized;
use glare_core::training::{image_loss, prepare_image, stream, Schedule, StepContext, Student, TrainConfig, TrainerState};
use rand::Rng;

/// Loss of the prepared sample with all targets frozen.
fn frozen_loss(cfg: &TrainConfig, state: &TrainerState<f64>, student: &Student<f64>, ctx: &StepContext, prep: &Prepared) -> f64 {
    let mut g = Graph::inference();
    let out = image_loss(&mut g, student, &state.teacher.head, state.patch_center_for(cfg), ctx, &prep.sample, &prep.targets, Some(&prep.regional)).unwrap();
    g.scalar(out.root.unwrap())
}

struct Prepared {
    sample: glare_core::training::ImageSample<f64>,
    targets: glare_core::training::TeacherTargets<f64>,
    regional: Vec<Array2<f64>>,
}

/// Worst relative error, coordinates checked and tensors without a gradient.
pub struct FdReport {
    pub worst: f64,
    pub coords: usize,
    pub missing: Vec<String>,
}

/// Checks `coords` sampled coordinates (at least one per trainable tensor) of
/// image 0 of a seeded batch, with step `1e-5` and relative error floored at `1e-6`.
pub fn gradient_check(cfg: &TrainConfig, coords: usize, seed: u64) -> FdReport {
    let imgs = super::images::<f64>(4, 32, seed);
    let mut state = TrainerState::<f64>::init(cfg).unwrap();
    super::perturb_adapters(&mut state.student, seed);
    super::perturb_adapters(&mut state.teacher, seed + 1);
    let sched = Schedule::new(cfg, imgs.len()).unwrap();
    let ctx = StepContext::at(0, cfg, &sched);
    let (sample, targets) = prepare_image(&imgs[0], &state, cfg, &ctx, 0).unwrap();
    assert!(!sample.region_pairs.is_empty(), "regional term inactive");
    assert!(!sample.views[0].blur_mask.is_empty() || !sample.views[1].blur_mask.is_empty(), "no blurred patches");

    let mut g = Graph::new(state.trainable);
    let out = image_loss(&mut g, &state.student, &state.teacher.head, state.patch_center_for(cfg), &ctx, &sample, &targets, None).unwrap();
    assert!(out.raw.iter().all(|v| *v > 0.0), "inactive term: {:?}", out.raw);
    let grads = g.backward(out.root.unwrap());
    let prep = Prepared { sample, targets, regional: out.regional_targets };

    let mut tensors = Vec::new();
    state.student.visit(&mut |p| {
        if state.trainable.contains(p.group) {
            tensors.push((p.name.clone(), p.value.dim()));
        }
    });
    let mut rng = stream(seed, 0, 0, 99);
    let mut picks: Vec<(usize, usize, usize)> = (0..tensors.len())
        .map(|t| (t, rng.random_range(0..tensors[t].1 .0), rng.random_range(0..tensors[t].1 .1)))
        .collect();
    while picks.len() < coords.max(tensors.len()) {
        let t = rng.random_range(0..tensors.len());
        picks.push((t, rng.random_range(0..tensors[t].1 .0), rng.random_range(0..tensors[t].1 .1)));
    }

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut missing = Vec::new();
    for &(t, i, j) in &picks {
        let name = &tensors[t].0;
        let analytic = match grads.get(name) {
            Some(gr) => gr[[i, j]],
            None => {
                missing.push(name.clone());
                0.0
            }
        };
        let eval = |delta: f64| {
            let mut s = state.student.clone();
            s.visit_mut(&mut |p| {
                if &p.name == name {
                    p.value[[i, j]] += delta;
                }
            });
            frozen_loss(cfg, &state, &s, &ctx, &prep)
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    missing.sort();
    missing.dedup();
    FdReport {
        worst,
        coords: picks.len(),
        missing,
    }
}

