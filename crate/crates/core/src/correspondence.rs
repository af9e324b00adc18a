//! Patch and region correspondence between two views of one image, obtained by
//! mapping every patch back to the source-image rectangle it was resampled from.

use std::collections::{BTreeMap, BTreeSet};

use crate::augmentation::TransformRecord;
use crate::regions::Region;
use crate::vit::PatchGrid;

/// Relative slack on the overlap threshold so exact-boundary cases are not lost
/// to rounding in the continuous box arithmetic.
const OVERLAP_SLACK: f64 = 1e-9;

/// Axis-aligned rectangle in continuous source-pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SourceBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl SourceBox {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn intersection_area(&self, other: &SourceBox) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ix <= 0.0 || iy <= 0.0 {
            0.0
        } else {
            ix * iy
        }
    }
}

pub fn patch_source_box(idx: usize, record: &TransformRecord, grid: &PatchGrid) -> SourceBox {
    let (row, col) = grid.coords(idx);
    let col = if record.flipped { grid.cols - 1 - col } else { col };
    let p = grid.patch_size as f64;
    let sx = record.crop_w as f64 / record.out_size as f64;
    let sy = record.crop_h as f64 / record.out_size as f64;
    SourceBox {
        x: record.crop_x as f64 + col as f64 * p * sx,
        y: record.crop_y as f64 + row as f64 * p * sy,
        w: p * sx,
        h: p * sy,
    }
}

/// Student patch index → sorted teacher patch indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CorrespondenceMap {
    pub entries: BTreeMap<usize, Vec<usize>>,
}

impl CorrespondenceMap {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn get(&self, student: usize) -> Option<&[usize]> {
        self.entries.get(&student).map(|v| v.as_slice())
    }

    /// Total number of (student, teacher) pairs.
    pub fn pair_count(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }
}

fn matches_for(sbox: &SourceBox, rec_t: &TransformRecord, grid_t: &PatchGrid, min_overlap: f64) -> Vec<usize> {
    let need = min_overlap * sbox.area() * (1.0 - OVERLAP_SLACK);
    (0..grid_t.len())
        .filter(|&t| {
            let inter = sbox.intersection_area(&patch_source_box(t, rec_t, grid_t));
            inter > 0.0 && inter >= need
        })
        .collect()
}

/// Teacher patch `t` matches student patch `s` when their source rectangles
/// share at least `min_overlap` of the student rectangle's area.
pub fn match_patches(
    rec_s: &TransformRecord,
    grid_s: &PatchGrid,
    rec_t: &TransformRecord,
    grid_t: &PatchGrid,
    min_overlap: f64,
) -> CorrespondenceMap {
    let mut entries = BTreeMap::new();
    for s in 0..grid_s.len() {
        let sbox = patch_source_box(s, rec_s, grid_s);
        let m = matches_for(&sbox, rec_t, grid_t, min_overlap);
        if !m.is_empty() {
            entries.insert(s, m);
        }
    }
    CorrespondenceMap { entries }
}

/// Union of the teacher matches of every patch in `region`; empty when the
/// region has no counterpart in the teacher view.
pub fn match_region(
    region: &Region,
    rec_s: &TransformRecord,
    grid_s: &PatchGrid,
    rec_t: &TransformRecord,
    grid_t: &PatchGrid,
    min_overlap: f64,
) -> Vec<usize> {
    let mut out = BTreeSet::new();
    for s in region.indices(grid_s) {
        let sbox = patch_source_box(s, rec_s, grid_s);
        out.extend(matches_for(&sbox, rec_t, grid_t, min_overlap));
    }
    out.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(x: usize, y: usize, w: usize, h: usize, flipped: bool, out: usize) -> TransformRecord {
        TransformRecord {
            crop_x: x,
            crop_y: y,
            crop_w: w,
            crop_h: h,
            flipped,
            out_size: out,
            source_w: 256,
            source_h: 256,
        }
    }

    #[test]
    fn identity_box() {
        let r = TransformRecord::identity(224, 224, 224);
        let g = PatchGrid::square(14, 16, 3);
        assert_eq!(patch_source_box(0, &r, &g), SourceBox { x: 0.0, y: 0.0, w: 16.0, h: 16.0 });
    }

    #[test]
    fn half_scale_box() {
        let r = rec(10, 10, 112, 112, false, 224);
        let g = PatchGrid::square(14, 16, 3);
        assert_eq!(patch_source_box(0, &r, &g), SourceBox { x: 10.0, y: 10.0, w: 8.0, h: 8.0 });
    }

    #[test]
    fn flipped_first_patch_is_top_right() {
        let mut r = TransformRecord::identity(224, 224, 224);
        r.flipped = true;
        let g = PatchGrid::square(14, 16, 3);
        assert_eq!(patch_source_box(0, &r, &g), SourceBox { x: 208.0, y: 0.0, w: 16.0, h: 16.0 });
    }

    #[test]
    fn identical_records_match_identity() {
        let r = rec(20, 30, 150, 120, true, 224);
        let g = PatchGrid::square(14, 16, 3);
        let m = match_patches(&r, &g, &r, &g, 0.5);
        assert_eq!(m.len(), 196);
        for (s, ts) in &m.entries {
            assert_eq!(ts, &vec![*s]);
        }
    }

    #[test]
    fn disjoint_crops_do_not_match() {
        let a = rec(0, 0, 100, 100, false, 224);
        let b = rec(120, 120, 100, 100, false, 224);
        let g = PatchGrid::square(14, 16, 3);
        assert!(match_patches(&a, &g, &b, &g, 0.5).is_empty());
        let region = Region::new(0, 0, 3, 3);
        assert!(match_region(&region, &a, &g, &b, &g, 0.5).is_empty());
    }

    #[test]
    fn double_resolution_tiles_four() {
        let s = rec(16, 16, 128, 128, false, 64);
        let gs = PatchGrid::square(4, 16, 3);
        let t = rec(16, 16, 128, 128, false, 128);
        let gt = PatchGrid::square(8, 16, 3);
        let m = match_patches(&s, &gs, &t, &gt, 0.25);
        assert_eq!(m.len(), 16);
        for (sidx, ts) in &m.entries {
            let (r, c) = gs.coords(*sidx);
            let expect = vec![
                gt.index(2 * r, 2 * c),
                gt.index(2 * r, 2 * c + 1),
                gt.index(2 * r + 1, 2 * c),
                gt.index(2 * r + 1, 2 * c + 1),
            ];
            assert_eq!(ts, &expect);
        }
    }

    #[test]
    fn identical_records_region_maps_to_itself() {
        let r = rec(5, 7, 200, 180, false, 224);
        let g = PatchGrid::square(14, 16, 3);
        let region = Region::new(2, 3, 4, 2);
        let mut idx = region.indices(&g);
        idx.sort_unstable();
        assert_eq!(match_region(&region, &r, &g, &r, &g, 0.5), idx);
    }
}
