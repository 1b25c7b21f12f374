//! Sketch-level correspondence: salient stroke points, soft mutual matching,
//! linear tracking, and rasterised traces.

use std::path::Path;

use crate::error::{ensure_contract, Error, Result};
use crate::frames_io::{stroke_mask, Raster};
use crate::imgproc::{gaussian_blur, gradients, squared_edt, Plane};

const HARRIS_K: f64 = 0.04;
const NMS_RADIUS: isize = 4;
/// Corners weaker than this fraction of the strongest response are ignored.
const RESPONSE_FLOOR: f64 = 0.01;
const PATCH: isize = 8;
pub const DESCRIPTOR_LEN: usize = (PATCH * PATCH) as usize;

#[derive(Clone, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// Detection confidence in `[0, 1]`.
    pub confidence: f64,
    /// Unit-norm descriptor of length [`DESCRIPTOR_LEN`].
    pub descriptor: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchPair {
    pub index_a: usize,
    pub index_b: usize,
    pub confidence: f64,
}

/// Harris corners on the blurred stroke mask with distance-transform patch descriptors.
///
/// Returns at most `max_n` points, strongest first. A blank sketch yields none.
pub fn detect_keypoints(sketch: &Raster, max_n: usize) -> Vec<Keypoint> {
    let (h, w) = (sketch.height(), sketch.width());
    let gray = sketch.to_gray();
    let ink = Plane::new(h, w, gray.data.iter().map(|v| 1.0 - v).collect());
    let ink = gaussian_blur(&ink, 1.0);
    let (gx, gy) = gradients(&ink);
    let prod = |a: &Plane, b: &Plane| Plane::new(h, w, a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect());
    let sxx = gaussian_blur(&prod(&gx, &gx), 1.0);
    let syy = gaussian_blur(&prod(&gy, &gy), 1.0);
    let sxy = gaussian_blur(&prod(&gx, &gy), 1.0);
    let response: Vec<f64> = (0..h * w)
        .map(|i| {
            let (a, b, c) = (sxx.data[i], syy.data[i], sxy.data[i]);
            a * b - c * c - HARRIS_K * (a + b) * (a + b)
        })
        .collect();
    let peak = response.iter().copied().fold(0.0, f64::max);
    if peak <= 1e-12 {
        return Vec::new();
    }

    let mut candidates = Vec::new();
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let r = response[i];
            if r < RESPONSE_FLOOR * peak {
                continue;
            }
            let mut is_max = true;
            'win: for ny in (y - NMS_RADIUS).max(0)..=(y + NMS_RADIUS).min(h as isize - 1) {
                for nx in (x - NMS_RADIUS).max(0)..=(x + NMS_RADIUS).min(w as isize - 1) {
                    let j = ny as usize * w + nx as usize;
                    if response[j] > r || (response[j] == r && j < i) {
                        is_max = false;
                        break 'win;
                    }
                }
            }
            if is_max {
                candidates.push(i);
            }
        }
    }
    candidates.sort_by(|&a, &b| response[b].total_cmp(&response[a]).then(a.cmp(&b)));

    let field = distance_field(sketch);
    candidates
        .into_iter()
        .filter_map(|i| {
            let (x, y) = (i % w, i / w);
            patch_descriptor(&field, x, y).map(|descriptor| Keypoint {
                x: x as f64,
                y: y as f64,
                confidence: (response[i] / peak).clamp(0.0, 1.0),
                descriptor,
            })
        })
        .take(max_n)
        .collect()
}

/// Blurred Euclidean distance to the nearest stroke pixel.
fn distance_field(sketch: &Raster) -> Plane {
    let (h, w) = (sketch.height(), sketch.width());
    let d = squared_edt(&stroke_mask(sketch), h, w);
    gaussian_blur(&Plane::new(h, w, d.iter().map(|v| v.sqrt()).collect()), 1.0)
}

fn patch_descriptor(field: &Plane, x: usize, y: usize) -> Option<Vec<f64>> {
    let mut d = Vec::with_capacity(DESCRIPTOR_LEN);
    for dy in -PATCH / 2..PATCH / 2 {
        for dx in -PATCH / 2..PATCH / 2 {
            d.push(field.get_clamped(x as isize + dx, y as isize + dy));
        }
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    d.iter_mut().for_each(|v| *v -= mean);
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < 1e-9 {
        return None;
    }
    d.iter_mut().for_each(|v| *v /= norm);
    Some(d)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchParams {
    /// Descriptor temperature.
    pub tau: f64,
    /// Spatial spread of the position prior, in pixels.
    pub sigma_xy: f64,
    /// Pairs must exceed this confidence.
    pub theta: f64,
}

impl MatchParams {
    pub fn for_frame(height: usize, width: usize) -> Self {
        Self {
            tau: 0.5,
            sigma_xy: 0.25 * height.max(width) as f64,
            theta: 0.5,
        }
    }
}

/// Pairwise score `exp(−‖dᵢ−dⱼ‖²/τ) · exp(−‖pᵢ−pⱼ‖²/(2σ²))`.
pub fn match_score(a: &Keypoint, b: &Keypoint, p: &MatchParams) -> f64 {
    let dd: f64 = a
        .descriptor
        .iter()
        .zip(&b.descriptor)
        .map(|(u, v)| (u - v) * (u - v))
        .sum();
    let dp = (a.x - b.x).powi(2) + (a.y - b.y).powi(2);
    (-dd / p.tau).exp() * (-dp / (2.0 * p.sigma_xy * p.sigma_xy)).exp()
}

/// Confidence matrix: `c_ij = s_ij · sqrt((s_ij / rowmax_i) · (s_ij / colmax_j))`,
/// which equals `s_ij` for mutual nearest neighbours and is smaller otherwise.
pub fn confidence_matrix(ka: &[Keypoint], kb: &[Keypoint], p: &MatchParams) -> Vec<Vec<f64>> {
    let s: Vec<Vec<f64>> = ka
        .iter()
        .map(|a| kb.iter().map(|b| match_score(a, b, p)).collect())
        .collect();
    let row_max: Vec<f64> = s.iter().map(|r| r.iter().copied().fold(0.0, f64::max)).collect();
    let col_max: Vec<f64> = (0..kb.len())
        .map(|j| s.iter().map(|r| r[j]).fold(0.0, f64::max))
        .collect();
    s.iter()
        .enumerate()
        .map(|(i, r)| {
            r.iter()
                .enumerate()
                .map(|(j, &v)| {
                    let norm = (row_max[i] * col_max[j]).sqrt();
                    if norm > 0.0 {
                        v * v / norm
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Mutual-nearest soft matching, thresholded at `θ` and made one-to-one greedily
/// in descending confidence (ties by index).
pub fn match_keypoints(ka: &[Keypoint], kb: &[Keypoint], p: &MatchParams) -> Result<Vec<MatchPair>> {
    if ka.is_empty() || kb.is_empty() {
        return Ok(Vec::new());
    }
    let dim = ka[0].descriptor.len();
    ensure_contract!(
        ka.iter().chain(kb).all(|k| k.descriptor.len() == dim),
        "descriptor lengths differ"
    );
    let c = confidence_matrix(ka, kb, p);
    let row_max: Vec<f64> = c.iter().map(|r| r.iter().copied().fold(0.0, f64::max)).collect();
    let col_max: Vec<f64> = (0..kb.len())
        .map(|j| c.iter().map(|r| r[j]).fold(0.0, f64::max))
        .collect();
    let mut pairs: Vec<MatchPair> = Vec::new();
    for (i, row) in c.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if v > p.theta && v == row_max[i] && v == col_max[j] {
                pairs.push(MatchPair {
                    index_a: i,
                    index_b: j,
                    confidence: v,
                });
            }
        }
    }
    pairs.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.index_a.cmp(&b.index_a))
            .then(a.index_b.cmp(&b.index_b))
    });
    let mut used_a = vec![false; ka.len()];
    let mut used_b = vec![false; kb.len()];
    Ok(pairs
        .into_iter()
        .filter(|m| {
            let free = !used_a[m.index_a] && !used_b[m.index_b];
            if free {
                used_a[m.index_a] = true;
                used_b[m.index_b] = true;
            }
            free
        })
        .collect())
}

/// Position of a matched point at time `t` on the straight path from `pa` (t=0) to `pb` (t=1).
pub fn track_point(pa: &Keypoint, pb: &Keypoint, t: f64) -> Result<(f64, f64)> {
    ensure_contract!((0.0..=1.0).contains(&t), "time must lie in [0, 1], got {t}");
    Ok(((1.0 - t) * pa.x + t * pb.x, (1.0 - t) * pa.y + t * pb.y))
}

/// Per-timestamp stack of splatted point traces.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceTrace {
    pub timestamps: Vec<f64>,
    pub layers: Vec<Plane>,
}

impl GuidanceTrace {
    pub fn zeros(timestamps: &[f64], height: usize, width: usize) -> Self {
        Self {
            timestamps: timestamps.to_vec(),
            layers: timestamps.iter().map(|_| Plane::filled(height, width, 0.0)).collect(),
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn mass(&self) -> f64 {
        self.layers.iter().flat_map(|l| l.data.iter()).sum()
    }
}

pub const SPLAT_SIGMA: f64 = 1.0;

/// Splat every tracked match as a Gaussian (σ = 1 px, cut at 3σ) of height `c_ij`,
/// combining overlaps by max.
pub fn rasterize_traces(
    matches: &[MatchPair],
    ka: &[Keypoint],
    kb: &[Keypoint],
    timestamps: &[f64],
    height: usize,
    width: usize,
) -> Result<GuidanceTrace> {
    ensure_contract!(!timestamps.is_empty(), "at least one trace timestamp is required");
    ensure_contract!(
        timestamps.iter().all(|&t| t > 0.0 && t < 1.0),
        "trace timestamps must lie in (0, 1): {timestamps:?}"
    );
    let mut trace = GuidanceTrace::zeros(timestamps, height, width);
    let reach = 3.0 * SPLAT_SIGMA;
    for (layer, &t) in trace.layers.iter_mut().zip(timestamps) {
        for m in matches {
            let (cx, cy) = track_point(&ka[m.index_a], &kb[m.index_b], t)?;
            let x0 = (cx - reach).ceil().max(0.0) as usize;
            let y0 = (cy - reach).ceil().max(0.0) as usize;
            let x1 = ((cx + reach).floor() as isize).min(width as isize - 1);
            let y1 = ((cy + reach).floor() as isize).min(height as isize - 1);
            if x1 < 0 || y1 < 0 {
                continue;
            }
            for y in y0..=y1 as usize {
                for x in x0..=x1 as usize {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    if d2 > reach * reach {
                        continue;
                    }
                    let v = m.confidence * (-d2 / (2.0 * SPLAT_SIGMA * SPLAT_SIGMA)).exp();
                    if v > layer.get(x, y) {
                        layer.set(x, y, v);
                    }
                }
            }
        }
    }
    Ok(trace)
}

/// Detection and matching behind one interface, so learned components can replace
/// the classical ones.
pub trait SketchMatcher: Send + Sync {
    fn detect(&self, sketch: &Raster) -> Vec<Keypoint>;
    fn correspond(&self, ka: &[Keypoint], kb: &[Keypoint], height: usize, width: usize) -> Result<Vec<MatchPair>>;
}

/// Harris + distance-transform descriptors + mutual soft matching.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassicalMatcher {
    pub max_keypoints: usize,
    pub tau: f64,
    /// Fraction of `max(H, W)` used as the spatial spread.
    pub sigma_fraction: f64,
    pub theta: f64,
}

impl Default for ClassicalMatcher {
    fn default() -> Self {
        Self {
            max_keypoints: 256,
            tau: 0.5,
            sigma_fraction: 0.25,
            theta: 0.5,
        }
    }
}

impl SketchMatcher for ClassicalMatcher {
    fn detect(&self, sketch: &Raster) -> Vec<Keypoint> {
        detect_keypoints(sketch, self.max_keypoints)
    }

    fn correspond(&self, ka: &[Keypoint], kb: &[Keypoint], height: usize, width: usize) -> Result<Vec<MatchPair>> {
        let p = MatchParams {
            tau: self.tau,
            sigma_xy: self.sigma_fraction * height.max(width) as f64,
            theta: self.theta,
        };
        match_keypoints(ka, kb, &p)
    }
}

/// Side-by-side keyframes with match lines coloured by confidence (red high, blue low).
pub fn save_match_overlay(
    path: impl AsRef<Path>,
    a: &Raster,
    b: &Raster,
    ka: &[Keypoint],
    kb: &[Keypoint],
    matches: &[MatchPair],
) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = (a.height() as u32, a.width() as u32);
    let mut img = image::RgbImage::new(2 * w, h);
    for (off, r) in [(0, a), (w, b)] {
        let g = r.to_gray();
        for y in 0..h {
            for x in 0..w {
                let v = (g.get(x as usize, y as usize) * 255.0).round() as u8;
                img.put_pixel(x + off, y, image::Rgb([v, v, v]));
            }
        }
    }
    for m in matches {
        let c = m.confidence.clamp(0.0, 1.0);
        let color = image::Rgb([(255.0 * c) as u8, 0, (255.0 * (1.0 - c)) as u8]);
        let (pa, pb) = (&ka[m.index_a], &kb[m.index_b]);
        draw_line(&mut img, (pa.x, pa.y), (pb.x + w as f64, pb.y), color);
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
}

pub(crate) fn draw_line(img: &mut image::RgbImage, a: (f64, f64), b: (f64, f64), color: image::Rgb<u8>) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        let x = (a.0 + t * (b.0 - a.0)).round();
        let y = (a.1 + t * (b.1 - a.1)).round();
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}
