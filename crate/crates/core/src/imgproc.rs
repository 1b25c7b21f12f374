//! Small single-channel image kernels shared by the guidance extractors and metrics.
//!
//! Everything here works on [`Plane`], a bare `f64` grid without the size and
//! range invariants of [`Raster`](crate::Raster), so pyramids and intermediate
//! responses can use it freely.

use std::collections::VecDeque;

/// Dense single-channel grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width, "plane buffer size");
        Self {
            height,
            width,
            data,
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::new(height, width, vec![value; height * width])
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Border-clamped read.
    #[inline]
    pub fn get_clamped(&self, x: isize, y: isize) -> f64 {
        let x = x.clamp(0, self.width as isize - 1) as usize;
        let y = y.clamp(0, self.height as isize - 1) as usize;
        self.data[y * self.width + x]
    }

    /// Bilinear sample with border clamp.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> f64 {
        let maxx = (self.width - 1) as f64;
        let maxy = (self.height - 1) as f64;
        let x = x.clamp(0.0, maxx);
        let y = y.clamp(0.0, maxy);
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let x0 = x0 as usize;
        let y0 = y0 as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        if fx == 0.0 && fy == 0.0 {
            return self.get(x0, y0);
        }
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bot = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn flip_horizontal(&self) -> Plane {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(x, y, self.get(self.width - 1 - x, y));
            }
        }
        out
    }
}

pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur, radius `ceil(3σ)`, border clamp.
pub fn gaussian_blur(p: &Plane, sigma: f64) -> Plane {
    if sigma <= 0.0 {
        return p.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = Plane::filled(p.height, p.width, 0.0);
    for y in 0..p.height {
        for x in 0..p.width {
            let mut acc = 0.0;
            for (i, w) in k.iter().enumerate() {
                acc += w * p.get_clamped(x as isize + i as isize - r, y as isize);
            }
            tmp.set(x, y, acc);
        }
    }
    let mut out = Plane::filled(p.height, p.width, 0.0);
    for y in 0..p.height {
        for x in 0..p.width {
            let mut acc = 0.0;
            for (i, w) in k.iter().enumerate() {
                acc += w * tmp.get_clamped(x as isize, y as isize + i as isize - r);
            }
            out.set(x, y, acc);
        }
    }
    out
}

/// 2×2 box downsample; odd trailing rows/columns are clamped in.
pub fn downsample2(p: &Plane) -> Plane {
    let h = p.height.div_ceil(2);
    let w = p.width.div_ceil(2);
    let mut out = Plane::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = (2 * x as isize, 2 * y as isize);
            let v = p.get_clamped(sx, sy)
                + p.get_clamped(sx + 1, sy)
                + p.get_clamped(sx, sy + 1)
                + p.get_clamped(sx + 1, sy + 1);
            out.set(x, y, v * 0.25);
        }
    }
    out
}

/// Central-difference gradients with border clamp.
pub fn gradients(p: &Plane) -> (Plane, Plane) {
    let mut gx = Plane::filled(p.height, p.width, 0.0);
    let mut gy = Plane::filled(p.height, p.width, 0.0);
    for y in 0..p.height as isize {
        for x in 0..p.width as isize {
            let dx = 0.5 * (p.get_clamped(x + 1, y) - p.get_clamped(x - 1, y));
            let dy = 0.5 * (p.get_clamped(x, y + 1) - p.get_clamped(x, y - 1));
            gx.set(x as usize, y as usize, dx);
            gy.set(x as usize, y as usize, dy);
        }
    }
    (gx, gy)
}

/// Stand-in for "no feature pixel" in squared distance transforms.
pub const EDT_INF: f64 = 1e12;

/// 1D squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let parabola = |p: usize| {
            ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64))
        };
        let mut s = parabola(v[k]);
        while s <= z[k] {
            k -= 1;
            s = parabola(v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest `true` pixel.
///
/// Pixels are at integer coordinates, so every finite result is an integer.
/// With no feature pixels at all every entry is [`EDT_INF`] or larger.
pub fn squared_edt(mask: &[bool], height: usize, width: usize) -> Vec<f64> {
    assert_eq!(mask.len(), height * width);
    let mut grid: Vec<f64> = mask
        .iter()
        .map(|&m| if m { 0.0 } else { EDT_INF })
        .collect();
    let n = height.max(width);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    for x in 0..width {
        for y in 0..height {
            f[y] = grid[y * width + x];
        }
        edt_1d(&f[..height], &mut out[..height], &mut v, &mut z);
        for y in 0..height {
            grid[y * width + x] = out[y];
        }
    }
    for y in 0..height {
        f[..width].copy_from_slice(&grid[y * width..(y + 1) * width]);
        edt_1d(&f[..width], &mut out[..width], &mut v, &mut z);
        grid[y * width..(y + 1) * width].copy_from_slice(&out[..width]);
    }
    grid
}

/// Connected components of `mask`. Labels start at 1 in raster-scan order of each
/// component's first pixel; 0 marks pixels outside the mask.
pub fn connected_components(
    mask: &[bool],
    height: usize,
    width: usize,
    eight: bool,
) -> (Vec<u32>, u32) {
    let mut labels = vec![0u32; mask.len()];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (x, y) = ((i % width) as isize, (i / width) as isize);
            for (dx, dy) in neighbours(eight) {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                    continue;
                }
                let j = ny as usize * width + nx as usize;
                if mask[j] && labels[j] == 0 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            }
        }
    }
    (labels, next)
}

pub fn neighbours(eight: bool) -> &'static [(isize, isize)] {
    const N4: [(isize, isize); 4] = [(0, -1), (-1, 0), (1, 0), (0, 1)];
    const N8: [(isize, isize); 8] = [
        (-1, -1),
        (0, -1),
        (1, -1),
        (-1, 0),
        (1, 0),
        (-1, 1),
        (0, 1),
        (1, 1),
    ];
    if eight {
        &N8
    } else {
        &N4
    }
}

/// Offsets `(dx, dy)` with `dx² + dy² ≤ r²`.
pub fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Pixels where the whole disk lies inside `mask`. Out-of-frame pixels count as inside.
pub fn erode_disk(mask: &[bool], height: usize, width: usize, radius: usize) -> Vec<bool> {
    let disk = disk_offsets(radius);
    let mut out = vec![false; mask.len()];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let i = y as usize * width + x as usize;
            if !mask[i] {
                continue;
            }
            out[i] = disk.iter().all(|&(dx, dy)| {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                    true
                } else {
                    mask[ny as usize * width + nx as usize]
                }
            });
        }
    }
    out
}

/// Otsu threshold over `values` using a 256-bin histogram on `[lo, hi]`.
/// Returns the upper edge of the lower class.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !(hi > lo) {
        return hi;
    }
    const BINS: usize = 256;
    let width = (hi - lo) / BINS as f64;
    let mut hist = [0u64; BINS];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(BINS - 1);
        hist[b] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_bin) = (-1.0, 0usize);
    for (i, &c) in hist.iter().enumerate().take(BINS - 1) {
        w0 += c as f64;
        sum0 += i as f64 * c as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best {
            best = between;
            best_bin = i;
        }
    }
    lo + (best_bin + 1) as f64 * width
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_edt(mask: &[bool], h: usize, w: usize) -> Vec<f64> {
        let pts: Vec<(usize, usize)> = (0..h * w).filter(|&i| mask[i]).map(|i| (i % w, i / w)).collect();
        (0..h * w)
            .map(|i| {
                let (x, y) = (i % w, i / w);
                pts.iter()
                    .map(|&(px, py)| {
                        let dx = px as f64 - x as f64;
                        let dy = py as f64 - y as f64;
                        dx * dx + dy * dy
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    #[test]
    fn edt_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (h, w) = (rng.gen_range(1..20), rng.gen_range(1..20));
            let mask: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.1)).collect();
            if !mask.iter().any(|&m| m) {
                continue;
            }
            assert_eq!(squared_edt(&mask, h, w), brute_edt(&mask, h, w));
        }
    }

    #[test]
    fn components_count_two_blobs() {
        let w = 6;
        let mask: Vec<bool> = "110000\n110011\n000011"
            .lines()
            .flat_map(|l| l.chars().map(|c| c == '1').collect::<Vec<_>>())
            .collect();
        let (labels, n) = connected_components(&mask, 3, w, false);
        assert_eq!(n, 2);
        assert_eq!(labels[0], 1);
        assert_eq!(labels[w + 4], 2);
    }

    #[test]
    fn otsu_splits_bimodal() {
        let mut v = vec![0.1; 50];
        v.extend(vec![0.9; 50]);
        let t = otsu_threshold(&v);
        assert!(t > 0.1 && t <= 0.9, "{t}");
    }

    #[test]
    fn bilinear_is_exact_on_grid() {
        let p = Plane::new(2, 2, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(p.sample_bilinear(1.0, 1.0), 3.0);
        assert_eq!(p.sample_bilinear(0.5, 0.0), 0.5);
        assert_eq!(p.sample_bilinear(-4.0, 9.0), 2.0);
    }
}
