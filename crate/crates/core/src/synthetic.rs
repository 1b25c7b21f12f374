//! Seeded synthetic sketch triplets: outlined shapes translating at constant
//! velocity, for smoke tests and sanity training runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::frames_io::{Raster, Triplet};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Square,
    Ring,
    Triangle,
    Cross,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Square, Shape::Ring, Shape::Triangle, Shape::Cross];

    /// Whether the pixel centre `(px, py)` is ink for a shape of half-size
    /// `r` centred at `(cx, cy)` drawn with stroke half-width `hw`.
    fn ink(self, px: f64, py: f64, cx: f64, cy: f64, r: f64, hw: f64) -> bool {
        let (dx, dy) = (px - cx, py - cy);
        match self {
            Shape::Square => (dx.abs().max(dy.abs()) - r).abs() <= hw,
            Shape::Ring => ((dx * dx + dy * dy).sqrt() - r).abs() <= hw,
            Shape::Triangle => {
                let v = [(0.0, -r), (-r, 0.8 * r), (r, 0.8 * r)];
                (0..3).any(|k| segment_distance((dx, dy), v[k], v[(k + 1) % 3]) <= hw)
            }
            Shape::Cross => {
                let arm = |a: f64, b: f64| a.abs() <= r && b.abs() <= hw;
                arm(dx, dy) || arm(dy, dx)
            }
        }
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (abx, aby) = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * abx + (p.1 - a.1) * aby) / (abx * abx + aby * aby)).clamp(0.0, 1.0);
    let (qx, qy) = (a.0 + t * abx - p.0, a.1 + t * aby - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Render shapes (centre, half-size) onto a white canvas.
pub fn render(h: usize, w: usize, shapes: &[(Shape, (f64, f64), f64)], stroke: f64) -> Result<Raster> {
    let data = (0..h * w)
        .map(|i| {
            let (px, py) = ((i % w) as f64, (i / w) as f64);
            let hit = shapes.iter().any(|&(s, (cx, cy), r)| s.ink(px, py, cx, cy, r, stroke / 2.0));
            if hit {
                0.0
            } else {
                1.0
            }
        })
        .collect();
    Raster::new(h, w, 1, data)
}

/// `n` triplets of one shape each, moving by an integer velocity `v` per half
/// interval: frame 0 at `c − v`, middle at `c`, frame 1 at `c + v`, |v| ≤ `max_speed`.
pub fn translating_shapes(n: usize, h: usize, w: usize, max_speed: i64, seed: u64) -> Result<Vec<Triplet>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = h.min(w) as f64;
    (0..n)
        .map(|k| {
            let shape = Shape::ALL[k % Shape::ALL.len()];
            let r = rng.gen_range(0.18..0.26) * side;
            let margin = r + 2.0 + max_speed as f64;
            let cx = rng.gen_range(margin..w as f64 - margin).round();
            let cy = rng.gen_range(margin..h as f64 - margin).round();
            let v = (rng.gen_range(-max_speed..=max_speed) as f64, rng.gen_range(-max_speed..=max_speed) as f64);
            let at = |s: f64| render(h, w, &[(shape, (cx + s * v.0, cy + s * v.1), r)], 2.0);
            Triplet::new(format!("synthetic{k:03}"), at(-1.0)?, at(0.0)?, at(1.0)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_are_drawn_and_move() {
        let ts = translating_shapes(8, 32, 32, 3, 1).unwrap();
        for t in &ts {
            for f in t.frames() {
                let ink = f.data().iter().filter(|&&v| v < 0.5).count();
                assert!(ink > 20, "{} has {ink} ink pixels", t.id);
            }
        }
        assert_eq!(ts, translating_shapes(8, 32, 32, 3, 1).unwrap());
    }
}
