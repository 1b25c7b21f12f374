//! Evaluation metrics and the batch evaluation harness.
//!
//! Reporting scales: PSNR in dB (capped at [`PSNR_CAP`]), SSIM unitless,
//! IE = RMSE × 100, CD = symmetric mean squared nearest-stroke distance over
//! the squared frame diagonal × 10⁴.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{ensure_contract, Error, Result};
use crate::frames_io::{stroke_mask, Raster};
use crate::imgproc::{gaussian_kernel, squared_edt, Plane};
use crate::training::{TrainConfig, TripletSource};
use crate::u_transformer::{fcsin_forward, ModelParams};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;
/// CD reported when exactly one of the two frames has no strokes.
pub const CD_ONE_EMPTY: f64 = 1e4;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check(pred: &Raster, target: &Raster) -> Result<()> {
    ensure_contract!(
        pred.dims() == target.dims(),
        "metric operands differ in shape: {:?} vs {:?}",
        pred.dims(),
        target.dims()
    );
    Ok(())
}

fn mse(pred: &Raster, target: &Raster) -> f64 {
    let n = pred.data().len() as f64;
    pred.data().iter().zip(target.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n
}

pub fn psnr(pred: &Raster, target: &Raster) -> Result<f64> {
    check(pred, target)?;
    let m = mse(pred, target);
    Ok(if m == 0.0 { PSNR_CAP } else { (10.0 * (1.0 / m).log10()).min(PSNR_CAP) })
}

/// Root-mean-squared difference × 100.
pub fn interpolation_error(pred: &Raster, target: &Raster) -> Result<f64> {
    check(pred, target)?;
    Ok(mse(pred, target).sqrt() * 100.0)
}

/// Separable Gaussian filter keeping only fully-inside ("valid") positions.
fn filter_valid(p: &Plane, k: &[f64]) -> Plane {
    let n = k.len();
    let (h, w) = (p.height, p.width);
    let (vh, vw) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * vw];
    for y in 0..h {
        for x in 0..vw {
            rows[y * vw + x] = (0..n).map(|i| k[i] * p.data[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; vh * vw];
    for y in 0..vh {
        for x in 0..vw {
            out[y * vw + x] = (0..n).map(|i| k[i] * rows[(y + i) * vw + x]).sum();
        }
    }
    Plane {
        height: vh,
        width: vw,
        data: out,
    }
}

fn ssim_plane(a: &Plane, b: &Plane) -> f64 {
    let k = gaussian_kernel(SSIM_SIGMA);
    let map = |f: &dyn Fn(f64, f64) -> f64| Plane {
        height: a.height,
        width: a.width,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    };
    let mu_a = filter_valid(a, &k);
    let mu_b = filter_valid(b, &k);
    let aa = filter_valid(&map(&|x, _| x * x), &k);
    let bb = filter_valid(&map(&|_, y| y * y), &k);
    let ab = filter_valid(&map(&|x, y| x * y), &k);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let n = mu_a.data.len();
    (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
            let va = aa.data[i] - ma * ma;
            let vb = bb.data[i] - mb * mb;
            let cov = ab.data[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum::<f64>()
        / n as f64
}

/// Single-scale SSIM (11×11 Gaussian window, σ = 1.5, dynamic range 1),
/// averaged over valid window positions and channels.
pub fn ssim(pred: &Raster, target: &Raster) -> Result<f64> {
    check(pred, target)?;
    let k = gaussian_kernel(SSIM_SIGMA).len();
    ensure_contract!(
        pred.height() >= k && pred.width() >= k,
        "SSIM needs frames of at least {k}x{k}"
    );
    let c = pred.channels();
    Ok((0..c).map(|ch| ssim_plane(&pred.channel(ch), &target.channel(ch))).sum::<f64>() / c as f64)
}

/// Mean of the squared distance from each stroke pixel of `from` to the nearest stroke pixel of `to`.
fn directed(from: &[bool], to_edt: &[f64]) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for (i, &m) in from.iter().enumerate() {
        if m {
            s += to_edt[i];
            n += 1;
        }
    }
    s / n as f64
}

/// Symmetric Chamfer distance between stroke sets (intensity < 0.5).
pub fn chamfer_distance(pred: &Raster, target: &Raster) -> Result<f64> {
    check(pred, target)?;
    let (h, w) = (pred.height(), pred.width());
    let (a, b) = (stroke_mask(pred), stroke_mask(target));
    match (a.iter().any(|&v| v), b.iter().any(|&v| v)) {
        (false, false) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(CD_ONE_EMPTY),
        _ => {}
    }
    let (ea, eb) = (squared_edt(&a, h, w), squared_edt(&b, h, w));
    let mean = 0.5 * (directed(&a, &eb) + directed(&b, &ea));
    Ok(mean / (h * h + w * w) as f64 * 1e4)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricValues {
    pub psnr: f64,
    pub ssim: f64,
    pub ie: f64,
    pub cd: f64,
}

impl MetricValues {
    pub fn compute(pred: &Raster, target: &Raster) -> Result<Self> {
        Ok(Self {
            psnr: psnr(pred, target)?,
            ssim: ssim(pred, target)?,
            ie: interpolation_error(pred, target)?,
            cd: chamfer_distance(pred, target)?,
        })
    }

    /// Arithmetic mean; all zeros for an empty slice.
    pub fn mean(values: &[MetricValues]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let k = 1.0 / values.len() as f64;
        let sum = |f: fn(&MetricValues) -> f64| values.iter().map(f).sum::<f64>() * k;
        Self {
            psnr: sum(|v| v.psnr),
            ssim: sum(|v| v.ssim),
            ie: sum(|v| v.ie),
            cd: sum(|v| v.cd),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub id: String,
    pub values: MetricValues,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Per-triplet rows in dataset order.
    pub rows: Vec<MetricsRow>,
    pub mean: MetricValues,
    /// SHA-256 over the configuration text and the parameters, hex encoded.
    pub fingerprint: String,
}

pub const METRICS_CSV: &str = "metrics.csv";
pub const SUMMARY_TXT: &str = "summary.txt";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const METRICS_HEADER: &str = "PSNR,SSIM,IE,CD";

/// Hash identifying an evaluation setup.
pub fn fingerprint(cfg: &TrainConfig, params: &ModelParams) -> String {
    let mut h = Sha256::new();
    h.update(cfg.to_text().as_bytes());
    for (k, t) in &params.tensors {
        h.update(k.as_bytes());
        for v in &t.data {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Run the model over every triplet (or, with `eval.predict_target`, score
/// the ground truth against itself) and gather all four metrics.
pub fn evaluate(cfg: &TrainConfig, params: &ModelParams, source: &dyn TripletSource) -> Result<MetricsReport> {
    if source.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    let net = cfg.net_config();
    let guidance = cfg.guidance_config();
    let rows = (0..source.len())
        .into_par_iter()
        .map(|i| {
            let t = source.triplet(i)?;
            let pred = if cfg.predict_target {
                t.frame_mid.clone()
            } else {
                fcsin_forward(&t.frame0, &t.frame1, &net, params, &guidance)?
            };
            Ok(MetricsRow {
                values: MetricValues::compute(&pred, &t.frame_mid)?,
                id: t.id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<MetricValues> = rows.iter().map(|r| r.values).collect();
    Ok(MetricsReport {
        mean: MetricValues::mean(&values),
        rows,
        fingerprint: fingerprint(cfg, params),
    })
}

fn csv_values(v: &MetricValues) -> String {
    format!("{:.6},{:.6},{:.6},{:.6}", v.psnr, v.ssim, v.ie, v.cd)
}

impl MetricsReport {
    /// One-line aggregate in table column order.
    pub fn summary_line(&self) -> String {
        let m = &self.mean;
        format!(
            "PSNR {:.2}  SSIM {:.4}  IE {:.2}  CD {:.2}  (n={})",
            m.psnr,
            m.ssim,
            m.ie,
            m.cd,
            self.rows.len()
        )
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = format!("id,{METRICS_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{}", r.id, csv_values(&r.values));
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        format!("{METRICS_HEADER},count,fingerprint\n{},{},{}\n", csv_values(&self.mean), self.rows.len(), self.fingerprint)
    }

    pub fn summary_text(&self) -> String {
        let m = &self.mean;
        format!(
            "{:>10} {:>10} {:>10} {:>10}\n{:>10.2} {:>10.4} {:>10.2} {:>10.2}\n\ntriplets: {}\nfingerprint: {}\n",
            "PSNR",
            "SSIM",
            "IE",
            "CD",
            m.psnr,
            m.ssim,
            m.ie,
            m.cd,
            self.rows.len(),
            self.fingerprint
        )
    }

    /// Write `metrics.csv`, `summary.txt` and `summary.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [
            (METRICS_CSV, self.metrics_csv()),
            (SUMMARY_TXT, self.summary_text()),
            (SUMMARY_CSV, self.summary_csv()),
        ] {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(v: f64) -> Raster {
        Raster::filled(32, 32, 1, v).unwrap()
    }

    #[test]
    fn closed_forms() {
        assert_eq!(psnr(&uniform(0.5), &uniform(0.5)).unwrap(), PSNR_CAP);
        assert!((psnr(&uniform(0.6), &uniform(0.5)).unwrap() - 20.0).abs() < 1e-9);
        assert!((psnr(&uniform(1.0), &uniform(0.5)).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
        assert!((interpolation_error(&uniform(0.6), &uniform(0.5)).unwrap() - 10.0).abs() < 1e-9);
        assert_eq!(ssim(&uniform(0.3), &uniform(0.3)).unwrap(), 1.0);
    }

    #[test]
    fn chamfer_single_points() {
        let dot = |x: usize| {
            let mut d = vec![1.0; 100 * 100];
            d[50 * 100 + x] = 0.0;
            Raster::new(100, 100, 1, d).unwrap()
        };
        assert!((chamfer_distance(&dot(20), &dot(30)).unwrap() - 50.0).abs() < 1e-12);
        let white = Raster::filled(100, 100, 1, 1.0).unwrap();
        assert_eq!(chamfer_distance(&white, &white).unwrap(), 0.0);
        assert_eq!(chamfer_distance(&white, &dot(3)).unwrap(), CD_ONE_EMPTY);
    }

    #[test]
    fn negative_halves_score_low_ssim() {
        let half = |a: f64, b: f64| Raster::new(32, 32, 1, (0..1024).map(|i| if i % 32 < 16 { a } else { b }).collect()).unwrap();
        let s = ssim(&half(0.9, 0.1), &half(0.1, 0.9)).unwrap();
        assert!(s < 0.5, "{s}");
    }
}
