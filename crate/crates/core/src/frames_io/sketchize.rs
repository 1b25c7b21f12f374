//! Colour frame → clean line sketch.
//!
//! Contour extraction is a difference of Gaussians on luminance, binarised with
//! Otsu's threshold; simplification drops short stroke fragments and thins the
//! rest to a one-pixel skeleton. The result is dark strokes on white.

use crate::error::{ensure_contract, Result};
use crate::imgproc::{connected_components, gaussian_blur, otsu_threshold, Plane};

use super::Raster;

/// Responses below this are treated as flat image content.
const MIN_RESPONSE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct SketchParams {
    pub dog_sigmas: (f64, f64),
    /// Stroke components with fewer pixels are discarded.
    pub min_stroke_px: usize,
    /// Optional Gaussian anti-alias applied after thinning.
    pub antialias_sigma: Option<f64>,
}

impl Default for SketchParams {
    fn default() -> Self {
        Self {
            dog_sigmas: (1.0, 1.6),
            min_stroke_px: 12,
            antialias_sigma: None,
        }
    }
}

pub fn sketchize(color: &Raster, params: &SketchParams) -> Result<Raster> {
    ensure_contract!(
        color.channels() == 3,
        "sketchize expects a 3-channel frame, got {} channel(s)",
        color.channels()
    );
    let (h, w) = (color.height(), color.width());
    let gray = color.to_gray();
    let fine = gaussian_blur(&gray, params.dog_sigmas.0);
    let coarse = gaussian_blur(&gray, params.dog_sigmas.1);
    // dark line centres respond positively
    let response: Vec<f64> = coarse
        .data
        .iter()
        .zip(&fine.data)
        .map(|(c, f)| (c - f).max(0.0))
        .collect();

    let peak = response.iter().copied().fold(0.0, f64::max);
    let mut stroke = vec![false; h * w];
    if peak >= MIN_RESPONSE {
        let t = otsu_threshold(&response).max(MIN_RESPONSE);
        // Dark responding pixels are line art already and always count as stroke.
        // Bright pixels count when above threshold, except in the halo of a dark
        // line, so already-thin line art passes through unchanged.
        let dark: Vec<bool> = response
            .iter()
            .zip(&gray.data)
            .map(|(&r, &g)| g < 0.5 && r >= MIN_RESPONSE)
            .collect();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                stroke[i] = dark[i]
                    || (response[i] > t && !touches(&dark, h, w, x, y));
            }
        }
    }
    remove_small_components(&mut stroke, h, w, params.min_stroke_px);
    thin(&mut stroke, h, w);

    let mut out = Plane::new(
        h,
        w,
        stroke.iter().map(|&s| if s { 0.0 } else { 1.0 }).collect(),
    );
    if let Some(sigma) = params.antialias_sigma {
        out = gaussian_blur(&out, sigma);
    }
    Raster::from_plane(&out)
}

fn touches(mask: &[bool], h: usize, w: usize, x: usize, y: usize) -> bool {
    ring(mask, h, w, x, y).iter().any(|&v| v)
}

/// Stroke mask of a sketch: pixels darker than mid-grey.
pub fn stroke_mask(sketch: &Raster) -> Vec<bool> {
    sketch.to_gray().data.iter().map(|&v| v < 0.5).collect()
}

fn remove_small_components(mask: &mut [bool], h: usize, w: usize, min_px: usize) {
    let (labels, n) = connected_components(mask, h, w, true);
    let mut sizes = vec![0usize; n as usize + 1];
    for &l in &labels {
        sizes[l as usize] += 1;
    }
    for (m, &l) in mask.iter_mut().zip(&labels) {
        if l != 0 && sizes[l as usize] < min_px {
            *m = false;
        }
    }
}

/// Clockwise ring P2..P9 starting north.
const RING: [(isize, isize); 8] = [
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
];

fn ring(mask: &[bool], h: usize, w: usize, x: usize, y: usize) -> [bool; 8] {
    let mut out = [false; 8];
    for (o, &(dx, dy)) in out.iter_mut().zip(&RING) {
        let (nx, ny) = (x as isize + dx, y as isize + dy);
        *o = nx >= 0
            && ny >= 0
            && (nx as usize) < w
            && (ny as usize) < h
            && mask[ny as usize * w + nx as usize];
    }
    out
}

fn transitions(p: &[bool; 8]) -> usize {
    (0..8).filter(|&i| !p[i] && p[(i + 1) % 8]).count()
}

/// Zhang–Suen thinning alternated with removal of solid 2×2 blocks until neither
/// changes anything, so the result is a fixpoint of both.
pub fn thin(mask: &mut [bool], h: usize, w: usize) {
    loop {
        zhang_suen(mask, h, w);
        if !break_solid_blocks(mask, h, w) {
            break;
        }
    }
}

fn zhang_suen(mask: &mut [bool], h: usize, w: usize) {
    loop {
        let mut changed = false;
        for pass in 0..2 {
            let mut remove = Vec::new();
            for y in 0..h {
                for x in 0..w {
                    if !mask[y * w + x] {
                        continue;
                    }
                    let p = ring(mask, h, w, x, y);
                    let b = p.iter().filter(|&&v| v).count();
                    if !(2..=6).contains(&b) || transitions(&p) != 1 {
                        continue;
                    }
                    let (n, e, s, wst) = (p[0], p[2], p[4], p[6]);
                    let ok = if pass == 0 {
                        !(n && e && s) && !(e && s && wst)
                    } else {
                        !(n && e && wst) && !(n && s && wst)
                    };
                    if ok {
                        remove.push(y * w + x);
                    }
                }
            }
            changed |= !remove.is_empty();
            for i in remove {
                mask[i] = false;
            }
        }
        if !changed {
            break;
        }
    }
}

fn break_solid_blocks(mask: &mut [bool], h: usize, w: usize) -> bool {
    let mut changed = false;
    for y in 0..h.saturating_sub(1) {
        for x in 0..w.saturating_sub(1) {
            let block = [(x, y), (x + 1, y), (x, y + 1), (x + 1, y + 1)];
            if !block.iter().all(|&(bx, by)| mask[by * w + bx]) {
                continue;
            }
            let pick = block
                .iter()
                .copied()
                .find(|&(bx, by)| transitions(&ring(mask, h, w, bx, by)) == 1)
                .unwrap_or(block[0]);
            mask[pick.1 * w + pick.0] = false;
            changed = true;
        }
    }
    changed
}
