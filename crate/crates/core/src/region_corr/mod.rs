//! Region-level correspondence: trapped-ball segmentation, geometric region
//! descriptors, optimal one-to-one region matching, and the aggregated
//! region-translation flows used to pre-warp the keyframes.

mod assignment;
mod descriptor;
mod segment;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure_contract, Error, Result};
use crate::frames_io::Raster;
use crate::pixel_flow::{warp, FlowField};

pub use assignment::{assignment_cost, solve_assignment};
pub use descriptor::{compress_hu, descriptor_cost, eccentricity, hu_moments, COST_WEIGHTS, DESCRIPTOR_LEN};
pub use segment::{trapped_ball_segment, Region, RegionMap};

pub const DEFAULT_RADII: [usize; 4] = [4, 3, 2, 1];
pub const DEFAULT_ACCEPT: f64 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionPair {
    pub id_a: u32,
    pub id_b: u32,
    pub cost: f64,
}

pub fn region_descriptor(map: &RegionMap, id: u32) -> Result<&[f64]> {
    map.region(id)
        .map(|r| r.descriptor.as_slice())
        .ok_or_else(|| Error::Contract(format!("region {id} not present in map of {} regions", map.len())))
}

/// Pairwise descriptor cost matrix, rows = regions of `ma`.
pub fn region_costs(ma: &RegionMap, mb: &RegionMap) -> Vec<Vec<f64>> {
    ma.regions
        .iter()
        .map(|a| mb.regions.iter().map(|b| descriptor_cost(&a.descriptor, &b.descriptor)).collect())
        .collect()
}

/// Optimal one-to-one region assignment; pairs costlier than `accept` are dropped.
pub fn match_regions(ma: &RegionMap, mb: &RegionMap, accept: f64) -> Vec<RegionPair> {
    if ma.is_empty() || mb.is_empty() {
        return Vec::new();
    }
    let cost = region_costs(ma, mb);
    solve_assignment(&cost)
        .into_iter()
        .enumerate()
        .filter_map(|(i, j)| {
            let j = j?;
            (cost[i][j] <= accept).then(|| RegionPair {
                id_a: ma.regions[i].id,
                id_b: mb.regions[j].id,
                cost: cost[i][j],
            })
        })
        .collect()
}

/// Build `(F_{t→0}, F_{t→1})` from matched regions under a constant-translation
/// model `v = centroid_b − centroid_a`.
///
/// `F_{t→0} = −t·v` is written over region a's footprint (strokes attached) in
/// frame 0 and over that footprint moved by `t·v` — where its content sits at time
/// `t`. `F_{t→1} = (1−t)·v` is written likewise from region b's frame-1 footprint
/// moved back by `(1−t)·v`. Larger regions are painted first so enclosed regions
/// win on overlap; pixels touched by no pair keep zero flow.
pub fn aggregate_region_flow(
    pairs: &[RegionPair],
    ma: &RegionMap,
    mb: &RegionMap,
    t: f64,
) -> Result<(FlowField, FlowField)> {
    ensure_contract!(t > 0.0 && t < 1.0, "time must lie in (0, 1), got {t}");
    ensure_contract!(
        ma.height == mb.height && ma.width == mb.width,
        "region maps differ in size: {}x{} vs {}x{}",
        ma.height,
        ma.width,
        mb.height,
        mb.width
    );
    let (h, w) = (ma.height, ma.width);
    let mut to0 = FlowField::zeros(h, w);
    let mut to1 = FlowField::zeros(h, w);
    let mut resolved = Vec::with_capacity(pairs.len());
    for p in pairs {
        let ra = ma.region(p.id_a);
        let rb = mb.region(p.id_b);
        match (ra, rb) {
            (Some(ra), Some(rb)) => resolved.push((ra, rb)),
            _ => return Err(Error::Contract(format!("pair ({}, {}) names a missing region", p.id_a, p.id_b))),
        }
    }
    let ext_a = ma.attached_labels();
    let ext_b = mb.attached_labels();

    let mut order: Vec<usize> = (0..resolved.len()).collect();
    order.sort_by_key(|&k| (std::cmp::Reverse(resolved[k].0.area), resolved[k].0.id));
    for k in order {
        let (ra, rb) = resolved[k];
        let v = (rb.centroid.0 - ra.centroid.0, rb.centroid.1 - ra.centroid.1);
        paint(&mut to0, &ext_a, ra.id, (t * v.0, t * v.1), (-t * v.0, -t * v.1));
    }
    let mut order: Vec<usize> = (0..resolved.len()).collect();
    order.sort_by_key(|&k| (std::cmp::Reverse(resolved[k].1.area), resolved[k].1.id));
    for k in order {
        let (ra, rb) = resolved[k];
        let v = (rb.centroid.0 - ra.centroid.0, rb.centroid.1 - ra.centroid.1);
        let s = 1.0 - t;
        paint(&mut to1, &ext_b, rb.id, (-s * v.0, -s * v.1), (s * v.0, s * v.1));
    }
    Ok((to0, to1))
}

/// Write `value` over the pixels labelled `id` and over the same set shifted by `shift`.
fn paint(field: &mut FlowField, labels: &[u32], id: u32, shift: (f64, f64), value: (f64, f64)) {
    let (h, w) = (field.height(), field.width());
    let (sx, sy) = (shift.0.round() as isize, shift.1.round() as isize);
    for y in 0..h {
        for x in 0..w {
            if labels[y * w + x] != id {
                continue;
            }
            field.set(x, y, value);
            let (nx, ny) = (x as isize + sx, y as isize + sy);
            if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                field.set(nx as usize, ny as usize, value);
            }
        }
    }
}

/// Warp each keyframe with the region flow pointing back to its own time.
pub fn refine_keyframes_regional(
    i0: &Raster,
    i1: &Raster,
    to0: &FlowField,
    to1: &FlowField,
) -> Result<(Raster, Raster)> {
    let dims = (i0.height(), i0.width());
    ensure_contract!(
        (i1.height(), i1.width()) == dims
            && (to0.height(), to0.width()) == dims
            && (to1.height(), to1.width()) == dims,
        "keyframes and region flows must share dimensions"
    );
    Ok((warp(i0, to0), warp(i1, to1)))
}

/// Debug PNG: each region in a seeded pseudo-random colour, strokes black.
pub fn save_region_overlay(path: impl AsRef<Path>, map: &RegionMap, seed: u64) -> Result<()> {
    let path = path.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let palette: Vec<[u8; 3]> = (0..map.len())
        .map(|_| [rng.gen_range(64..=255), rng.gen_range(64..=255), rng.gen_range(64..=255)])
        .collect();
    let mut img = image::RgbImage::new(map.width as u32, map.height as u32);
    for (i, &l) in map.labels.iter().enumerate() {
        let c = if l == 0 { [0, 0, 0] } else { palette[l as usize - 1] };
        img.put_pixel((i % map.width) as u32, (i / map.width) as u32, image::Rgb(c));
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

#[cfg(test)]
mod tests {
    use super::segment::tests::{canvas, circle};
    use super::*;

    fn square_outline(h: usize, w: usize, x0: usize, y0: usize, side: usize) -> Raster {
        canvas(h, w, |x, y| {
            let inx = (x0..x0 + side).contains(&x);
            let iny = (y0..y0 + side).contains(&y);
            inx && iny && (x == x0 || x == x0 + side - 1 || y == y0 || y == y0 + side - 1)
        })
    }

    #[test]
    fn full_frame_region_descriptor() {
        let m = trapped_ball_segment(&canvas(32, 48, |_, _| false), &DEFAULT_RADII).unwrap();
        let d = region_descriptor(&m, 1).unwrap();
        assert_eq!(d.len(), DESCRIPTOR_LEN);
        assert_eq!(d[0], 1.0);
        assert!((d[1] - 0.5).abs() < 1e-12 && (d[2] - 0.5).abs() < 1e-12);
        assert!(region_descriptor(&m, 2).is_err());
        assert!(region_descriptor(&m, 0).is_err());
    }

    #[test]
    fn identical_maps_match_identically_at_zero_cost() {
        let s = circle(48, 64, 24.0, 24.0, 10.0, false);
        let m = trapped_ball_segment(&s, &DEFAULT_RADII).unwrap();
        let pairs = match_regions(&m, &m, DEFAULT_ACCEPT);
        assert_eq!(pairs.len(), m.len());
        for p in &pairs {
            assert_eq!(p.id_a, p.id_b);
            assert_eq!(p.cost, 0.0);
        }
        let (a, b) = aggregate_region_flow(&pairs, &m, &m, 0.5).unwrap();
        assert!(a.is_zero() && b.is_zero());
        assert!(match_regions(&m, &trapped_ball_segment(&canvas(48, 64, |_, _| true), &DEFAULT_RADII).unwrap(), 1.5).is_empty());
    }

    #[test]
    fn translated_square_gives_half_shift_flows() {
        let a = square_outline(48, 64, 10, 12, 20);
        let b = square_outline(48, 64, 16, 12, 20);
        let ma = trapped_ball_segment(&a, &DEFAULT_RADII).unwrap();
        let mb = trapped_ball_segment(&b, &DEFAULT_RADII).unwrap();
        let inner_a = ma.labels[20 * 64 + 20];
        let inner_b = mb.labels[20 * 64 + 26];
        let pairs = match_regions(&ma, &mb, DEFAULT_ACCEPT);
        let p = pairs.iter().find(|p| p.id_a == inner_a).copied().unwrap();
        assert_eq!(p.id_b, inner_b);
        let only = [p];
        let (to0, to1) = aggregate_region_flow(&only, &ma, &mb, 0.5).unwrap();
        // interior of the square at time 0.5 (shifted by +3)
        assert_eq!(to0.get(23, 20), (-3.0, 0.0));
        assert_eq!(to1.get(23, 20), (3.0, 0.0));
        // source footprints
        assert_eq!(to0.get(12, 20), (-3.0, 0.0));
        assert_eq!(to1.get(34, 20), (3.0, 0.0));
        // untouched background
        assert_eq!(to0.get(60, 2), (0.0, 0.0));
    }

    #[test]
    fn refine_moves_strokes_half_way() {
        let a = square_outline(48, 64, 10, 12, 20);
        let b = square_outline(48, 64, 16, 12, 20);
        let ma = trapped_ball_segment(&a, &DEFAULT_RADII).unwrap();
        let mb = trapped_ball_segment(&b, &DEFAULT_RADII).unwrap();
        let pairs = match_regions(&ma, &mb, DEFAULT_ACCEPT);
        let (to0, to1) = aggregate_region_flow(&pairs, &ma, &mb, 0.5).unwrap();
        let (r0, r1) = refine_keyframes_regional(&a, &b, &to0, &to1).unwrap();
        let target = square_outline(48, 64, 13, 12, 20);
        for r in [&r0, &r1] {
            let got: Vec<bool> = r.data().iter().map(|&v| v < 0.5).collect();
            let want: Vec<bool> = target.data().iter().map(|&v| v < 0.5).collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn zero_flows_refine_to_identity() {
        let a = circle(32, 32, 16.0, 16.0, 8.0, false);
        let z = FlowField::zeros(32, 32);
        let (r0, r1) = refine_keyframes_regional(&a, &a, &z, &z).unwrap();
        assert_eq!(r0, a);
        assert_eq!(r1, a);
        assert!(aggregate_region_flow(&[], &trapped_ball_segment(&a, &DEFAULT_RADII).unwrap(), &trapped_ball_segment(&a, &DEFAULT_RADII).unwrap(), 1.0).is_err());
    }
}
