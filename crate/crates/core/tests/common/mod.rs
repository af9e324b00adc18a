#![allow(dead_code)]

pub mod fd;
pub mod oracle;
pub mod pixels;

use glare_core::data::synthetic_shapes;
use glare_core::ndarray::Array3;
use glare_core::objectives::HeadConfig;
use glare_core::params::Parameterized;
use glare_core::training::{stream, TrainConfig};
use glare_core::vit::{randn, VitConfig};

/// D=8, depth 2, K=16, 16-pixel globals on 4-pixel patches (4×4 grid), M=2.
pub fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig::toy();
    c.model = VitConfig {
        patch_size: 4,
        embed_dim: 8,
        depth: 2,
        heads: 2,
        mlp_hidden: 16,
        pos_grid: 4,
        adapter_rank: 4,
        ..c.model
    };
    c.head = HeadConfig {
        out_dim: 16,
        hidden: 16,
        bottleneck: 8,
        init_std: 0.25,
        ..c.head
    };
    c.augment.global_size = 16;
    c.augment.local_size = 8;
    c.augment.n_local = 2;
    c.regions.count = 2;
    c.regions.min_p = 1;
    c.regions.max_p = 2;
    c.batch_size = 4;
    c.optim.reference_batch = 4;
    c
}

pub fn images<S: glare_core::Scalar>(n: usize, size: usize, seed: u64) -> Vec<Array3<S>> {
    synthetic_shapes::<S>(n, size, seed).into_iter().map(|s| s.image).collect()
}

/// Fills every adapter up-projection with small random values.
pub fn perturb_adapters<S: glare_core::Scalar>(model: &mut dyn Parameterized<S>, seed: u64) {
    let mut rng = stream(seed, 0, 0, 77);
    model.visit_mut(&mut |p| {
        if p.name.ends_with(".up") {
            let (r, c) = p.value.dim();
            p.value = randn(&mut rng, r, c, 0.3);
        }
    });
}
