mod common;

use common::pixels;
use glare_core::augmentation::TransformRecord;
use glare_core::correspondence::{match_patches, match_region};
use glare_core::regions::Region;
use glare_core::training::stream;
use glare_core::vit::PatchGrid;
use proptest::prelude::*;

fn record() -> impl Strategy<Value = TransformRecord> {
    (4usize..=24, 4usize..=24, any::<bool>()).prop_flat_map(|(w, h, flipped)| {
        (0..=24 - w, 0..=24 - h).prop_map(move |(x, y)| TransformRecord {
            crop_x: x,
            crop_y: y,
            crop_w: w,
            crop_h: h,
            flipped,
            out_size: 16,
            source_w: 24,
            source_h: 24,
        })
    })
}

const OVERLAPS: [(u64, u64); 4] = [(1, 10), (3, 10), (1, 2), (9, 10)];

#[test]
fn grid_14_pairs_match_pixel_oracle() {
    let grid = PatchGrid::square(14, 4, 3);
    for (rs, rt) in pixels::record_pairs(20, 40, 56, 1) {
        let o = pixels::enumerate(&rs, &rt, 14);
        for (num, den) in OVERLAPS {
            let got = match_patches(&rs, &grid, &rt, &grid, num as f64 / den as f64);
            assert_eq!(got.entries, pixels::matches(&o, num, den), "{rs:?} {rt:?} at {num}/{den}");
        }
    }
}

#[test]
fn regions_match_union_oracle() {
    let grid = PatchGrid::square(14, 4, 3);
    let mut rng = stream(2, 0, 0, 0);
    for (rs, rt) in pixels::record_pairs(10, 40, 56, 2) {
        let o = pixels::enumerate(&rs, &rt, 14);
        let regions = glare_core::regions::sample_random_regions(&grid, 6, 1, 5, &mut rng).unwrap();
        for (num, den) in OVERLAPS {
            let m = pixels::matches(&o, num, den);
            for r in &regions {
                let got = match_region(r, &rs, &grid, &rt, &grid, num as f64 / den as f64);
                assert_eq!(got, pixels::region_union(&m, &r.indices(&grid)));
            }
        }
    }
}

#[test]
fn disjoint_crops_have_no_matches() {
    let grid = PatchGrid::square(14, 4, 3);
    let a = TransformRecord { crop_x: 0, crop_y: 0, crop_w: 20, crop_h: 40, flipped: false, out_size: 56, source_w: 40, source_h: 40 };
    let b = TransformRecord { crop_x: 20, ..a };
    assert!(match_patches(&a, &grid, &b, &grid, 0.1).is_empty());
    assert!(match_region(&Region::new(0, 0, 14, 14), &a, &grid, &b, &grid, 0.1).is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn small_grids_match_pixel_oracle(rs in record(), rt in record(), k in 0usize..4) {
        let grid = PatchGrid::square(4, 4, 3);
        let (num, den) = OVERLAPS[k];
        let o = pixels::enumerate(&rs, &rt, 4);
        let got = match_patches(&rs, &grid, &rt, &grid, num as f64 / den as f64);
        prop_assert_eq!(got.entries, pixels::matches(&o, num, den));
    }

    #[test]
    fn same_record_matches_itself(r in record()) {
        let grid = PatchGrid::square(4, 4, 3);
        let m = match_patches(&r, &grid, &r, &grid, 0.5);
        prop_assert_eq!(m.len(), 16);
        for (s, t) in &m.entries {
            prop_assert_eq!(t.as_slice(), &[*s][..]);
        }
    }

    #[test]
    fn higher_threshold_gives_subsets(rs in record(), rt in record()) {
        let grid = PatchGrid::square(4, 4, 3);
        let loose = match_patches(&rs, &grid, &rt, &grid, 0.2);
        let tight = match_patches(&rs, &grid, &rt, &grid, 0.7);
        for (s, ts) in &tight.entries {
            let l = loose.get(*s).unwrap();
            prop_assert!(ts.iter().all(|t| l.contains(t)));
        }
    }
}
