//! 12-d geometric region descriptor:
//! `[area/(H·W), cx/W, cy/H, hu1..hu7 (log-compressed), boundary stroke density, eccentricity]`.

use crate::imgproc::neighbours;

use super::segment::Region;

pub const DESCRIPTOR_LEN: usize = 12;

/// Per-entry weights of the squared descriptor distance.
pub const COST_WEIGHTS: [f64; DESCRIPTOR_LEN] = [2.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 1.0, 1.0];

/// `sqrt(Σ wₖ (aₖ − bₖ)²)`.
pub fn descriptor_cost(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .zip(COST_WEIGHTS)
        .map(|((x, y), w)| w * (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// The seven Hu invariants of a pixel set.
pub fn hu_moments(pixels: &[(f64, f64)]) -> [f64; 7] {
    let m00 = pixels.len() as f64;
    if m00 == 0.0 {
        return [0.0; 7];
    }
    let cx = pixels.iter().map(|p| p.0).sum::<f64>() / m00;
    let cy = pixels.iter().map(|p| p.1).sum::<f64>() / m00;
    let mu = |p: i32, q: i32| -> f64 {
        pixels
            .iter()
            .map(|&(x, y)| (x - cx).powi(p) * (y - cy).powi(q))
            .sum()
    };
    let eta = |p: i32, q: i32| mu(p, q) / m00.powf(1.0 + (p + q) as f64 / 2.0);
    let (n20, n02, n11) = (eta(2, 0), eta(0, 2), eta(1, 1));
    let (n30, n03, n21, n12) = (eta(3, 0), eta(0, 3), eta(2, 1), eta(1, 2));
    let a = n30 + n12;
    let b = n21 + n03;
    [
        n20 + n02,
        (n20 - n02).powi(2) + 4.0 * n11 * n11,
        (n30 - 3.0 * n12).powi(2) + (3.0 * n21 - n03).powi(2),
        a * a + b * b,
        (n30 - 3.0 * n12) * a * (a * a - 3.0 * b * b) + (3.0 * n21 - n03) * b * (3.0 * a * a - b * b),
        (n20 - n02) * (a * a - b * b) + 4.0 * n11 * a * b,
        (3.0 * n21 - n03) * a * (a * a - 3.0 * b * b) - (n30 - 3.0 * n12) * b * (3.0 * a * a - b * b),
    ]
}

/// Signed log compression keeping small invariants distinguishable.
pub fn compress_hu(h: f64) -> f64 {
    h.signum() * (1.0 + 1e3 * h.abs()).ln()
}

/// `sqrt(1 − λmin/λmax)` of the pixel covariance; 0 for degenerate sets.
pub fn eccentricity(pixels: &[(f64, f64)]) -> f64 {
    let n = pixels.len() as f64;
    if n == 0.0 {
        return 0.0;
    }
    let cx = pixels.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = pixels.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
    for &(x, y) in pixels {
        a += (x - cx) * (x - cx);
        b += (x - cx) * (y - cy);
        c += (y - cy) * (y - cy);
    }
    let mean = (a + c) / 2.0;
    let disc = (((a - c) / 2.0).powi(2) + b * b).sqrt();
    let (hi, lo) = (mean + disc, (mean - disc).max(0.0));
    if hi <= 0.0 {
        0.0
    } else {
        (1.0 - lo / hi).max(0.0).sqrt()
    }
}

pub(crate) fn describe_all(labels: &[u32], free: &[bool], h: usize, w: usize) -> Vec<Region> {
    let n = labels.iter().copied().max().unwrap_or(0) as usize;
    let mut pixels: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, &l) in labels.iter().enumerate() {
        if l != 0 {
            pixels[l as usize - 1].push(i);
        }
    }
    pixels
        .iter()
        .enumerate()
        .map(|(k, idx)| {
            let id = k as u32 + 1;
            let pts: Vec<(f64, f64)> = idx.iter().map(|&i| ((i % w) as f64, (i / w) as f64)).collect();
            let area = pts.len();
            let cx = pts.iter().map(|p| p.0).sum::<f64>() / area as f64;
            let cy = pts.iter().map(|p| p.1).sum::<f64>() / area as f64;

            // ring of outside pixels 4-adjacent to the region
            let mut ring = std::collections::BTreeSet::new();
            for &i in idx {
                let (x, y) = ((i % w) as isize, (i / w) as isize);
                for &(dx, dy) in neighbours(false) {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                        let j = ny as usize * w + nx as usize;
                        if labels[j] != id {
                            ring.insert(j);
                        }
                    }
                }
            }
            let density = if ring.is_empty() {
                0.0
            } else {
                ring.iter().filter(|&&j| !free[j]).count() as f64 / ring.len() as f64
            };

            let mut d = Vec::with_capacity(DESCRIPTOR_LEN);
            d.push(area as f64 / (h * w) as f64);
            d.push((cx + 0.5) / w as f64);
            d.push((cy + 0.5) / h as f64);
            d.extend(hu_moments(&pts).iter().map(|&v| compress_hu(v)));
            d.push(density);
            d.push(eccentricity(&pts));
            Region {
                id,
                area,
                centroid: (cx, cy),
                descriptor: d,
            }
        })
        .collect()
}
