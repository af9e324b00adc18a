//! Rasterizing reference for patch correspondence.
//!
//! Patch edges of a crop of width `w` resized onto an `n`-patch axis fall on
//! multiples of `w / n` source pixels, so splitting every source pixel into
//! `n × n` cells makes each cell lie inside exactly one patch per view. Shared
//! areas then become exact integer cell counts.

use std::collections::{BTreeMap, BTreeSet};

use glare_core::augmentation::TransformRecord;
use glare_core::training::stream;
use rand::Rng;

/// Patch id covering source point `(x, y)` in a view with an `n × n` grid.
fn label(rec: &TransformRecord, n: usize, x: f64, y: f64) -> Option<usize> {
    let u = (x - rec.crop_x as f64) / rec.crop_w as f64;
    let v = (y - rec.crop_y as f64) / rec.crop_h as f64;
    if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
        return None;
    }
    let col = (u * n as f64).floor() as usize;
    let row = (v * n as f64).floor() as usize;
    let col = if rec.flipped { n - 1 - col } else { col };
    Some(row * n + col)
}

/// Shared cell counts between student and teacher patches, and cell counts of
/// every student patch.
pub struct Overlaps {
    pub shared: BTreeMap<(usize, usize), u64>,
    pub area: BTreeMap<usize, u64>,
}

pub fn enumerate(rec_s: &TransformRecord, rec_t: &TransformRecord, n: usize) -> Overlaps {
    let mut shared = BTreeMap::new();
    let mut area = BTreeMap::new();
    let sub = n as f64;
    for cy in 0..rec_s.source_h * n {
        let y = (cy as f64 + 0.5) / sub;
        for cx in 0..rec_s.source_w * n {
            let x = (cx as f64 + 0.5) / sub;
            let Some(s) = label(rec_s, n, x, y) else { continue };
            *area.entry(s).or_insert(0) += 1;
            if let Some(t) = label(rec_t, n, x, y) {
                *shared.entry((s, t)).or_insert(0) += 1;
            }
        }
    }
    Overlaps { shared, area }
}

/// Student patch → teacher patches whose shared area is at least `num/den` of
/// the student patch area.
pub fn matches(o: &Overlaps, num: u64, den: u64) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (&(s, t), &c) in &o.shared {
        if c * den >= num * o.area[&s] {
            out.entry(s).or_default().push(t);
        }
    }
    out
}

pub fn region_union(m: &BTreeMap<usize, Vec<usize>>, patches: &[usize]) -> Vec<usize> {
    let set: BTreeSet<usize> = patches.iter().filter_map(|p| m.get(p)).flatten().copied().collect();
    set.into_iter().collect()
}

/// Random crop of a `side × side` source, flipped with probability one half.
pub fn random_record<R: Rng>(rng: &mut R, side: usize, out_size: usize) -> TransformRecord {
    let w = rng.random_range(side / 4..=side);
    let h = rng.random_range(side / 4..=side);
    TransformRecord {
        crop_x: rng.random_range(0..=side - w),
        crop_y: rng.random_range(0..=side - h),
        crop_w: w,
        crop_h: h,
        flipped: rng.random_bool(0.5),
        out_size,
        source_w: side,
        source_h: side,
    }
}

/// `count` record pairs drawn from one seeded stream.
pub fn record_pairs(count: usize, side: usize, out_size: usize, seed: u64) -> Vec<(TransformRecord, TransformRecord)> {
    let mut rng = stream(seed, 0, 0, 0xC0);
    (0..count)
        .map(|_| (random_record(&mut rng, side, out_size), random_record(&mut rng, side, out_size)))
        .collect()
}
