//! Shared fixtures and brute-force oracles for the integration suites.
#![allow(dead_code)]

use fcsin_core::imgproc::Plane;
use fcsin_core::sketch_corr::GuidanceTrace;
use fcsin_core::u_transformer::GuidanceBundle;
use fcsin_core::Raster;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_raster(h: usize, w: usize, c: usize, seed: u64) -> Raster {
    let mut r = rng(seed);
    Raster::new(h, w, c, (0..h * w * c).map(|_| r.gen::<f64>()).collect()).unwrap()
}

/// Band-limited random texture in `[0.1, 0.9]`: a sum of random plane waves.
pub fn texture(h: usize, w: usize, seed: u64) -> Plane {
    let mut r = rng(seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..24)
        .map(|_| {
            (
                r.gen_range(0.08..0.6) * if r.gen() { 1.0 } else { -1.0 },
                r.gen_range(0.08..0.6) * if r.gen() { 1.0 } else { -1.0 },
                r.gen_range(0.0..std::f64::consts::TAU),
                r.gen_range(0.3..1.0),
            )
        })
        .collect();
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = waves.iter().map(|&(fx, fy, ph, a)| a * (fx * x as f64 + fy * y as f64 + ph).sin()).sum();
        }
    }
    let (lo, hi) = data.iter().fold((f64::MAX, f64::MIN), |(l, u), &v| (l.min(v), u.max(v)));
    Plane::new(h, w, data.iter().map(|v| 0.1 + 0.8 * (v - lo) / (hi - lo)).collect())
}

/// `out(x, y) = p(x − sx, y − sy)` with border clamping.
pub fn shifted(p: &Plane, sx: isize, sy: isize) -> Plane {
    let mut out = p.clone();
    for y in 0..p.height {
        for x in 0..p.width {
            out.set(x, y, p.get_clamped(x as isize - sx, y as isize - sy));
        }
    }
    out
}

/// Black-on-white sketch whose strokes satisfy `stroke(x, y)`.
pub fn canvas(h: usize, w: usize, stroke: impl Fn(usize, usize) -> bool) -> Raster {
    let data = (0..h * w).map(|i| if stroke(i % w, i / w) { 0.0 } else { 1.0 }).collect();
    Raster::new(h, w, 1, data).unwrap()
}

/// One-pixel ring; with `gap`, a one-pixel break on its right-hand side.
pub fn circle(h: usize, w: usize, cx: f64, cy: f64, r: f64, gap: bool) -> Raster {
    canvas(h, w, |x, y| {
        let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
        let in_gap = gap && (y as f64 - cy).abs() < 0.5 && x as f64 > cx;
        (d - r).abs() <= 0.5 && !in_gap
    })
}

/// A `rows × cols` grid of closed cells drawn with 2-px lines inside a margin.
pub fn grid(rows: usize, cols: usize, cell: usize) -> Raster {
    let margin = 6;
    let (h, w) = (2 * margin + rows * cell + 2, 2 * margin + cols * cell + 2);
    canvas(h, w, |x, y| {
        let inside = |v: usize, n: usize| v >= margin && v < margin + n * cell + 2;
        if !inside(x, cols) || !inside(y, rows) {
            return false;
        }
        let line = |v: usize| (v - margin) % cell < 2;
        line(x) || line(y)
    })
}

/// Guidance bundle of random maps, for exercising the network without extraction.
pub fn random_bundle(h: usize, w: usize, times: &[f64], seed: u64) -> GuidanceBundle {
    let mut r = rng(seed);
    let mut ras = || Raster::new(h, w, 1, (0..h * w).map(|_| r.gen::<f64>()).collect()).unwrap();
    let pixel = [ras(), ras()];
    let region = [ras(), ras()];
    let mut trace = GuidanceTrace::zeros(times, h, w);
    for l in &mut trace.layers {
        l.data.iter_mut().for_each(|v| *v = if r.gen::<f64>() < 0.1 { r.gen() } else { 0.0 });
    }
    GuidanceBundle { pixel, trace, region }
}

/// Chamfer distance by exhaustive pairwise search over stroke pixels (intensity < 0.5).
pub fn chamfer_brute(a: &Raster, b: &Raster) -> f64 {
    let (h, w) = (a.height(), a.width());
    let pts = |r: &Raster| -> Vec<(i64, i64)> {
        let g = r.to_gray();
        (0..h * w).filter(|&i| g.data[i] < 0.5).map(|i| ((i % w) as i64, (i / w) as i64)).collect()
    };
    let (pa, pb) = (pts(a), pts(b));
    let dir = |from: &[(i64, i64)], to: &[(i64, i64)]| {
        from.iter()
            .map(|p| to.iter().map(|q| (p.0 - q.0).pow(2) + (p.1 - q.1).pow(2)).min().unwrap() as f64)
            .sum::<f64>()
            / from.len() as f64
    };
    0.5 * (dir(&pa, &pb) + dir(&pb, &pa)) / (h * h + w * w) as f64 * 1e4
}

/// SSIM straight from its definition: explicit 11×11 Gaussian-weighted moments per window.
pub fn ssim_direct(a: &Raster, b: &Raster) -> f64 {
    let sigma: f64 = 1.5;
    let r = 5isize;
    let mut wts = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            wts.push((-((dx * dx + dy * dy) as f64) / (2.0 * sigma * sigma)).exp());
        }
    }
    let s: f64 = wts.iter().sum();
    wts.iter_mut().for_each(|v| *v /= s);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (h, w, ch) = a.dims();
    let n = 11;
    let mut total = 0.0;
    for c in 0..ch {
        let (mut acc, mut count) = (0.0, 0);
        for y0 in 0..=h - n {
            for x0 in 0..=w - n {
                let px = |r: &Raster, k: usize| r.get(x0 + k % n, y0 + k / n, c);
                let mx: f64 = (0..n * n).map(|k| wts[k] * px(a, k)).sum();
                let my: f64 = (0..n * n).map(|k| wts[k] * px(b, k)).sum();
                let vx: f64 = (0..n * n).map(|k| wts[k] * (px(a, k) - mx).powi(2)).sum();
                let vy: f64 = (0..n * n).map(|k| wts[k] * (px(b, k) - my).powi(2)).sum();
                let cov: f64 = (0..n * n).map(|k| wts[k] * (px(a, k) - mx) * (px(b, k) - my)).sum();
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        total += acc / count as f64;
    }
    total / ch as f64
}

/// Minimum assignment cost over all injective maps of the smaller side, by enumeration.
pub fn brute_assignment(cost: &[Vec<f64>]) -> f64 {
    let (n, m) = (cost.len(), cost[0].len());
    fn rec(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64, rows_first: bool) {
        let (n, m) = (cost.len(), cost[0].len());
        let (outer, inner) = if rows_first { (n, m) } else { (m, n) };
        if row == outer {
            *best = best.min(acc);
            return;
        }
        for j in 0..inner {
            if !used[j] {
                used[j] = true;
                let c = if rows_first { cost[row][j] } else { cost[j][row] };
                rec(cost, row + 1, used, acc + c, best, rows_first);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    let rows_first = n <= m;
    let inner = if rows_first { m } else { n };
    rec(cost, 0, &mut vec![false; inner], 0.0, &mut best, rows_first);
    best
}
