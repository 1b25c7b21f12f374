//! Pixel-level motion: pyramid block-matching flow, linear time split, and
//! bilinear backward warping.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{ensure_contract, Error, Result};
use crate::frames_io::Raster;
use crate::imgproc::{downsample2, Plane};

/// Magic bytes of the binary flow dump.
pub const FLOW_MAGIC: &[u8; 8] = b"FCSFLOW1";

/// Dense displacement field in pixels: `+x` right, `+y` down. Stored as interleaved `(dx, dy)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width * 2],
        }
    }

    pub fn uniform(height: usize, width: usize, dx: f64, dy: f64) -> Self {
        let mut f = Self::zeros(height, width);
        for v in f.data.chunks_exact_mut(2) {
            v[0] = dx;
            v[1] = dy;
        }
        f
    }

    /// Checks finiteness and `|d| ≤ max(H, W)`.
    pub fn from_interleaved(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        ensure_contract!(
            data.len() == height * width * 2,
            "flow buffer holds {} values, expected {}",
            data.len(),
            height * width * 2
        );
        let limit = height.max(width) as f64;
        ensure_contract!(
            data.chunks_exact(2)
                .all(|d| d[0].is_finite() && d[1].is_finite() && d[0].hypot(d[1]) <= limit),
            "flow values must be finite with magnitude <= {limit}"
        );
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> (f64, f64) {
        let i = (y * self.width + x) * 2;
        (self.data[i], self.data[i + 1])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, d: (f64, f64)) {
        let i = (y * self.width + x) * 2;
        self.data[i] = d.0;
        self.data[i + 1] = d.1;
    }

    pub fn scaled(&self, k: f64) -> FlowField {
        FlowField {
            data: self.data.iter().map(|v| v * k).collect(),
            ..*self
        }
    }

    pub fn component(&self, c: usize) -> Plane {
        Plane::new(
            self.height,
            self.width,
            self.data.iter().skip(c).step_by(2).copied().collect(),
        )
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// `FCSFLOW1`, H and W as little-endian u32, then the dx plane and the dy
    /// plane as little-endian f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(FLOW_MAGIC);
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for c in 0..2 {
            for v in self.data.iter().skip(c).step_by(2) {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Contract(format!("flow dump: {m}"));
        if bytes.len() < 16 || &bytes[..8] != FLOW_MAGIC {
            return Err(bad("missing FCSFLOW1 header"));
        }
        let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let n = h * w;
        if bytes.len() != 16 + 8 * n {
            return Err(bad("payload size does not match header"));
        }
        let plane = |k: usize| {
            bytes[16 + 4 * n * k..16 + 4 * n * (k + 1)]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect::<Vec<_>>()
        };
        let (dx, dy) = (plane(0), plane(1));
        let data = dx.into_iter().zip(dy).flat_map(|(a, b)| [a, b]).collect();
        FlowField::from_interleaved(h, w, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&self.to_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlowParams {
    pub levels: usize,
    pub block: usize,
    /// Search radius per level, in that level's pixels.
    pub radius: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            levels: 3,
            block: 8,
            radius: 4,
        }
    }
}

/// Flow from `a` to `b` (`b(x + flow(x)) ≈ a(x)`) by coarse-to-fine block matching.
///
/// Each level searches integer offsets in `[-radius, radius]²` around the
/// upsampled coarser estimate, minimising the sum of absolute differences.
/// Ties go to the smallest total displacement, then the smallest `(dy, dx)`.
/// The block field is median filtered (3×3) and bilinearly densified.
pub fn estimate_flow(a: &Raster, b: &Raster, params: &FlowParams) -> Result<FlowField> {
    ensure_contract!(
        a.dims() == b.dims(),
        "flow inputs differ in size: {:?} vs {:?}",
        a.dims(),
        b.dims()
    );
    ensure_contract!(a.channels() == 1, "flow inputs must be single-channel");
    ensure_contract!(params.levels >= 1 && params.block >= 1, "flow levels and block must be positive");
    let mut pa = vec![a.to_gray()];
    let mut pb = vec![b.to_gray()];
    for _ in 1..params.levels {
        let (na, nb) = (downsample2(pa.last().unwrap()), downsample2(pb.last().unwrap()));
        if na.height < 2 || na.width < 2 {
            break;
        }
        pa.push(na);
        pb.push(nb);
    }

    let mut dense: Option<FlowField> = None;
    for level in (0..pa.len()).rev() {
        let (la, lb) = (&pa[level], &pb[level]);
        let init = match dense.take() {
            Some(coarse) => upsample_flow(&coarse, la.height, la.width),
            None => FlowField::zeros(la.height, la.width),
        };
        let blocks = match_blocks(la, lb, &init, params);
        dense = Some(densify(&median3(&blocks), la.height, la.width, params.block));
    }
    let flow = dense.expect("at least one level");
    let limit = a.height().max(a.width()) as f64;
    Ok(FlowField {
        data: flow.data.iter().map(|v| v.clamp(-limit, limit)).collect(),
        ..flow
    })
}

/// Block-grid displacement field (one entry per block).
struct BlockField {
    rows: usize,
    cols: usize,
    d: Vec<(f64, f64)>,
}

fn match_blocks(a: &Plane, b: &Plane, init: &FlowField, p: &FlowParams) -> BlockField {
    let rows = a.height.div_ceil(p.block);
    let cols = a.width.div_ceil(p.block);
    let r = p.radius as isize;
    let d: Vec<(f64, f64)> = (0..rows * cols)
        .into_par_iter()
        .map(|k| {
            let (by, bx) = (k / cols, k % cols);
            let y0 = by * p.block;
            let x0 = bx * p.block;
            let y1 = (y0 + p.block).min(a.height);
            let x1 = (x0 + p.block).min(a.width);
            let (cx, cy) = ((x0 + x1 - 1) / 2, (y0 + y1 - 1) / 2);
            let (ix, iy) = init.get(cx, cy);
            let (ix, iy) = (ix.round() as isize, iy.round() as isize);
            let mut best: Option<(f64, isize, isize)> = None;
            for oy in -r..=r {
                for ox in -r..=r {
                    let (dx, dy) = (ix + ox, iy + oy);
                    let mut sad = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            sad += (a.get(x, y) - b.get_clamped(x as isize + dx, y as isize + dy)).abs();
                        }
                    }
                    let better = match best {
                        None => true,
                        Some((bs, bdx, bdy)) => {
                            sad < bs
                                || (sad == bs
                                    && (dx * dx + dy * dy, dy, dx) < (bdx * bdx + bdy * bdy, bdy, bdx))
                        }
                    };
                    if better {
                        best = Some((sad, dx, dy));
                    }
                }
            }
            let (_, dx, dy) = best.expect("non-empty search window");
            (dx as f64, dy as f64)
        })
        .collect();
    BlockField { rows, cols, d }
}

fn median3(f: &BlockField) -> BlockField {
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let mut d = Vec::with_capacity(f.d.len());
    for r in 0..f.rows {
        for c in 0..f.cols {
            let mut xs = Vec::with_capacity(9);
            let mut ys = Vec::with_capacity(9);
            for rr in r.saturating_sub(1)..(r + 2).min(f.rows) {
                for cc in c.saturating_sub(1)..(c + 2).min(f.cols) {
                    let v = f.d[rr * f.cols + cc];
                    xs.push(v.0);
                    ys.push(v.1);
                }
            }
            d.push((median(xs), median(ys)));
        }
    }
    BlockField {
        rows: f.rows,
        cols: f.cols,
        d,
    }
}

/// Bilinear interpolation of block-centre values to every pixel.
fn densify(f: &BlockField, height: usize, width: usize, block: usize) -> FlowField {
    let px = Plane::new(f.rows, f.cols, f.d.iter().map(|v| v.0).collect());
    let py = Plane::new(f.rows, f.cols, f.d.iter().map(|v| v.1).collect());
    let mut out = FlowField::zeros(height, width);
    let half = (block as f64 - 1.0) / 2.0;
    for y in 0..height {
        let gy = (y as f64 - half) / block as f64;
        for x in 0..width {
            let gx = (x as f64 - half) / block as f64;
            out.set(x, y, (px.sample_bilinear(gx, gy), py.sample_bilinear(gx, gy)));
        }
    }
    out
}

/// ×2 spatial upsample with displacements doubled.
fn upsample_flow(f: &FlowField, height: usize, width: usize) -> FlowField {
    let (px, py) = (f.component(0), f.component(1));
    let mut out = FlowField::zeros(height, width);
    for y in 0..height {
        let sy = (y as f64 + 0.5) / 2.0 - 0.5;
        for x in 0..width {
            let sx = (x as f64 + 0.5) / 2.0 - 0.5;
            out.set(
                x,
                y,
                (2.0 * px.sample_bilinear(sx, sy), 2.0 * py.sample_bilinear(sx, sy)),
            );
        }
    }
    out
}

/// Linear-motion split of bi-directional flows to time `t`:
/// `O_{t→0} = −t·flow01`, `O_{t→1} = −(1−t)·flow10`.
pub fn split_time(flow01: &FlowField, flow10: &FlowField, t: f64) -> Result<(FlowField, FlowField)> {
    ensure_contract!(t > 0.0 && t < 1.0, "time must lie in (0, 1), got {t}");
    ensure_contract!(
        flow01.height == flow10.height && flow01.width == flow10.width,
        "flow fields differ in size"
    );
    Ok((flow01.scaled(-t), flow10.scaled(-(1.0 - t))))
}

/// Backward warp: `out(x) = img(x + flow(x))`, bilinear, border clamp, result clamped to `[0, 1]`.
///
/// # Panics
/// If `img` and `flow` differ in height or width.
pub fn warp(img: &Raster, flow: &FlowField) -> Raster {
    assert_eq!(
        (img.height(), img.width()),
        (flow.height, flow.width),
        "warp: image and flow sizes differ"
    );
    let (h, w, c) = img.dims();
    let planes: Vec<Plane> = (0..c).map(|k| img.channel(k)).collect();
    let mut data = vec![0.0; h * w * c];
    data.par_chunks_mut(w * c).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let (dx, dy) = flow.get(x, y);
            let (sx, sy) = (x as f64 + dx, y as f64 + dy);
            for (k, p) in planes.iter().enumerate() {
                row[x * c + k] = p.sample_bilinear(sx, sy).clamp(0.0, 1.0);
            }
        }
    });
    Raster::new(h, w, c, data).expect("warp preserves raster invariants")
}
