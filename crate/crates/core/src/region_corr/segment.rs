use std::collections::VecDeque;

use crate::error::{ensure_contract, Result};
use crate::frames_io::Raster;
use crate::imgproc::{connected_components, disk_offsets, erode_disk, neighbours};

use super::descriptor::describe_all;

/// One enclosed area of a sketch.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub id: u32,
    pub area: usize,
    /// Mean pixel coordinate `(x, y)`.
    pub centroid: (f64, f64),
    pub descriptor: Vec<f64>,
}

/// Label map (0 = stroke) plus per-region statistics; ids run `1..=regions.len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub regions: Vec<Region>,
}

impl RegionMap {
    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn region(&self, id: u32) -> Option<&Region> {
        id.checked_sub(1)
            .and_then(|k| self.regions.get(k as usize))
            .filter(|r| r.id == id)
    }

    /// Labels where every stroke pixel is attached to its smallest-area
    /// 8-adjacent region (ties by id), propagating through thick strokes.
    /// Stroke pixels unreachable from any region stay 0.
    pub fn attached_labels(&self) -> Vec<u32> {
        let (h, w) = (self.height, self.width);
        let area = |l: u32| self.regions[l as usize - 1].area;
        let mut out = self.labels.clone();
        loop {
            let mut updates = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    if out[i] != 0 {
                        continue;
                    }
                    let best = neighbours(true)
                        .iter()
                        .filter_map(|&(dx, dy)| {
                            let (nx, ny) = (x as isize + dx, y as isize + dy);
                            (nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h)
                                .then(|| out[ny as usize * w + nx as usize])
                        })
                        .filter(|&l| l != 0)
                        .min_by_key(|&l| (area(l), l));
                    if let Some(l) = best {
                        updates.push((i, l));
                    }
                }
            }
            if updates.is_empty() {
                return out;
            }
            for (i, l) in updates {
                out[i] = l;
            }
        }
    }
}

/// Trapped-ball segmentation of a sketch.
///
/// For each radius (largest first) the still-unlabelled free space is eroded by a
/// disk; each 4-connected component of the eroded set becomes a region (numbered in
/// raster order of its first pixel) and is grown back by the same disk. Earlier
/// labels win where growths overlap. Leftover free pixels join the geodesically
/// nearest region; isolated leftover pockets become regions of their own.
pub fn trapped_ball_segment(sketch: &Raster, radii: &[usize]) -> Result<RegionMap> {
    ensure_contract!(sketch.channels() == 1, "segmentation expects a 1-channel sketch");
    ensure_contract!(!radii.is_empty(), "at least one ball radius is required");
    ensure_contract!(
        radii.windows(2).all(|p| p[0] > p[1]) && radii[radii.len() - 1] >= 1,
        "ball radii must be strictly descending and positive: {radii:?}"
    );
    let (h, w) = (sketch.height(), sketch.width());
    let free: Vec<bool> = sketch.data().iter().map(|&v| v >= 0.5).collect();
    let mut labels = vec![0u32; h * w];
    let mut next = 1u32;

    for &r in radii {
        let avail: Vec<bool> = free.iter().zip(&labels).map(|(&f, &l)| f && l == 0).collect();
        let eroded = erode_disk(&avail, h, w, r);
        let (comp, k) = connected_components(&eroded, h, w, false);
        if k == 0 {
            continue;
        }
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); k as usize];
        for (i, &c) in comp.iter().enumerate() {
            if c != 0 {
                members[c as usize - 1].push(i);
                labels[i] = next + c - 1;
            }
        }
        let disk = disk_offsets(r);
        for (c, pixels) in members.iter().enumerate() {
            let label = next + c as u32;
            for &i in pixels {
                let (x, y) = ((i % w) as isize, (i / w) as isize);
                for &(dx, dy) in &disk {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if avail[j] && labels[j] == 0 {
                        labels[j] = label;
                    }
                }
            }
        }
        next += k;
    }

    // geodesic attachment of leftovers
    let mut queue: VecDeque<usize> = (0..h * w).filter(|&i| labels[i] != 0).collect();
    while let Some(i) = queue.pop_front() {
        let (x, y) = ((i % w) as isize, (i / w) as isize);
        for &(dx, dy) in neighbours(false) {
            let (nx, ny) = (x + dx, y + dy);
            if nx < 0 || ny < 0 || nx >= w as isize || ny >= h as isize {
                continue;
            }
            let j = ny as usize * w + nx as usize;
            if free[j] && labels[j] == 0 {
                labels[j] = labels[i];
                queue.push_back(j);
            }
        }
    }
    let pockets: Vec<bool> = free.iter().zip(&labels).map(|(&f, &l)| f && l == 0).collect();
    let (comp, _) = connected_components(&pockets, h, w, false);
    for (l, &c) in labels.iter_mut().zip(&comp) {
        if c != 0 {
            *l = next + c - 1;
        }
    }

    let regions = describe_all(&labels, &free, h, w);
    Ok(RegionMap {
        height: h,
        width: w,
        labels,
        regions,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn canvas(h: usize, w: usize, stroke: impl Fn(usize, usize) -> bool) -> Raster {
        let data = (0..h * w)
            .map(|i| if stroke(i % w, i / w) { 0.0 } else { 1.0 })
            .collect();
        Raster::new(h, w, 1, data).unwrap()
    }

    /// One-pixel-wide ring of radius `r` around `(cx, cy)` (8-connected, closed).
    pub(crate) fn circle(h: usize, w: usize, cx: f64, cy: f64, r: f64, gap: bool) -> Raster {
        canvas(h, w, |x, y| {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let on = (d - r).abs() <= 0.5;
            let in_gap = gap && (y as f64 - cy).abs() < 0.5 && x as f64 > cx;
            on && !in_gap
        })
    }

    fn radii() -> Vec<usize> {
        vec![4, 3, 2, 1]
    }

    fn check_partition(m: &RegionMap, sketch: &Raster) {
        let free = sketch.data().iter().filter(|&&v| v >= 0.5).count();
        assert_eq!(m.regions.iter().map(|r| r.area).sum::<usize>(), free);
        for (l, v) in m.labels.iter().zip(sketch.data()) {
            assert_eq!(*l == 0, *v < 0.5);
        }
        for (k, r) in m.regions.iter().enumerate() {
            assert_eq!(r.id as usize, k + 1);
            assert_eq!(m.labels.iter().filter(|&&l| l == r.id).count(), r.area);
        }
    }

    #[test]
    fn blank_frame_is_one_region() {
        let s = canvas(24, 32, |_, _| false);
        let m = trapped_ball_segment(&s, &radii()).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.regions[0].area, 24 * 32);
        check_partition(&m, &s);
    }

    #[test]
    fn all_stroke_frame_has_no_regions() {
        let s = canvas(16, 16, |_, _| true);
        assert!(trapped_ball_segment(&s, &radii()).unwrap().is_empty());
    }

    #[test]
    fn closed_circle_gives_inside_and_outside() {
        let s = circle(64, 64, 32.0, 32.0, 14.0, false);
        let m = trapped_ball_segment(&s, &radii()).unwrap();
        assert_eq!(m.len(), 2);
        check_partition(&m, &s);
        assert_ne!(m.labels[32 * 64 + 32], m.labels[0]);
    }

    #[test]
    fn small_gap_does_not_leak() {
        let s = circle(64, 64, 32.0, 32.0, 14.0, true);
        assert_eq!(trapped_ball_segment(&s, &[4, 3, 2]).unwrap().len(), 2);
    }

    #[test]
    fn rejects_bad_radii() {
        let s = canvas(16, 16, |_, _| false);
        assert!(trapped_ball_segment(&s, &[]).is_err());
        assert!(trapped_ball_segment(&s, &[2, 3]).is_err());
        assert!(trapped_ball_segment(&s, &[2, 0]).is_err());
    }
}
