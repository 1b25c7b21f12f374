use std::path::Path;

use crate::error::{ensure_contract, Error, Result};
use crate::imgproc::Plane;

/// Smallest accepted frame side.
pub const MIN_SIDE: usize = 16;

/// Dense `H×W×C` image with intensities in `[0, 1]`, stored interleaved row-major.
///
/// Sketches are single-channel with dark strokes on a white background.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        ensure_contract!(
            height >= MIN_SIDE && width >= MIN_SIDE,
            "raster must be at least {MIN_SIDE}x{MIN_SIDE}, got {height}x{width}"
        );
        ensure_contract!(
            channels == 1 || channels == 3,
            "raster channels must be 1 or 3, got {channels}"
        );
        ensure_contract!(
            data.len() == height * width * channels,
            "raster buffer holds {} values, expected {}",
            data.len(),
            height * width * channels
        );
        ensure_contract!(
            data.iter().all(|v| (0.0..=1.0).contains(v)),
            "raster values must lie in [0, 1]"
        );
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Single-channel raster from a plane; values are clamped into `[0, 1]`.
    pub fn from_plane(p: &Plane) -> Result<Self> {
        Self::new(
            p.height,
            p.width,
            1,
            p.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Luminance plane (Rec. 601 weights for colour input).
    pub fn to_gray(&self) -> Plane {
        let data = if self.channels == 1 {
            self.data.clone()
        } else {
            self.data
                .chunks_exact(3)
                .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                .collect()
        };
        Plane::new(self.height, self.width, data)
    }

    /// Grey replicated into three channels.
    pub fn to_rgb(&self) -> Raster {
        if self.channels == 3 {
            return self.clone();
        }
        Raster {
            height: self.height,
            width: self.width,
            channels: 3,
            data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }

    pub fn flip_horizontal(&self) -> Raster {
        let mut data = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in (0..self.width).rev() {
                let i = (y * self.width + x) * self.channels;
                data.extend_from_slice(&self.data[i..i + self.channels]);
            }
        }
        Raster { data, ..*self }
    }

    /// Bilinear resize (pixel-centre aligned).
    pub fn resize(&self, height: usize, width: usize) -> Result<Raster> {
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        let planes: Vec<Plane> = (0..self.channels).map(|c| self.channel(c)).collect();
        let mut data = Vec::with_capacity(height * width * self.channels);
        for y in 0..height {
            let fy = (y as f64 + 0.5) * sy - 0.5;
            for x in 0..width {
                let fx = (x as f64 + 0.5) * sx - 0.5;
                for p in &planes {
                    data.push(p.sample_bilinear(fx, fy).clamp(0.0, 1.0));
                }
            }
        }
        Raster::new(height, width, self.channels, data)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Raster> {
        ensure_contract!(
            top + height <= self.height && left + width <= self.width,
            "crop {height}x{width}+{left}+{top} exceeds {}x{}",
            self.height,
            self.width
        );
        let mut data = Vec::with_capacity(height * width * self.channels);
        for y in top..top + height {
            let row = (y * self.width + left) * self.channels;
            data.extend_from_slice(&self.data[row..row + width * self.channels]);
        }
        Raster::new(height, width, self.channels, data)
    }

    pub fn channel(&self, c: usize) -> Plane {
        Plane::new(
            self.height,
            self.width,
            self.data
                .iter()
                .skip(c)
                .step_by(self.channels)
                .copied()
                .collect(),
        )
    }

    /// Quantise to 8-bit and write a PNG (grey or RGB by channel count).
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_u8();
        let result = if self.channels == 1 {
            image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
                .expect("buffer size")
                .save_with_format(path, image::ImageFormat::Png)
        } else {
            image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
                .expect("buffer size")
                .save_with_format(path, image::ImageFormat::Png)
        };
        result.map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

/// Read an 8-bit grey or RGB image into `[0, 1]` (`v / 255`). Alpha is dropped,
/// grey+alpha becomes grey.
pub fn load_raster(path: impl AsRef<Path>) -> Result<Raster> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, raw) = if img.color().has_color() {
        (3, img.to_rgb8().into_raw())
    } else {
        (1, img.to_luma8().into_raw())
    };
    Raster::new(
        h,
        w,
        channels,
        raw.into_iter().map(|b| b as f64 / 255.0).collect(),
    )
    .map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray_png(dir: &Path, value: u8) -> std::path::PathBuf {
        let p = dir.join(format!("g{value}.png"));
        image::GrayImage::from_pixel(16, 16, image::Luma([value]))
            .save(&p)
            .unwrap();
        p
    }

    #[test]
    fn load_scales_by_255() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(load_raster(gray_png(dir.path(), 255)).unwrap().get(3, 3, 0), 1.0);
        assert_eq!(load_raster(gray_png(dir.path(), 0)).unwrap().get(3, 3, 0), 0.0);
        let mid = load_raster(gray_png(dir.path(), 128)).unwrap();
        assert!((mid.get(0, 0, 0) - 128.0 / 255.0).abs() < 1e-12);
        assert!((mid.get(0, 0, 0) - 0.50196).abs() < 1e-5);
        assert_eq!(mid.channels(), 1);
    }

    #[test]
    fn load_keeps_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        image::RgbImage::from_pixel(20, 17, image::Rgb([255, 0, 51]))
            .save(&p)
            .unwrap();
        let r = load_raster(&p).unwrap();
        assert_eq!(r.dims(), (17, 20, 3));
        assert_eq!(r.get(0, 0, 2), 0.2);
    }

    #[test]
    fn load_errors_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("broken.png");
        std::fs::write(&p, b"not a png").unwrap();
        let msg = load_raster(&p).unwrap_err().to_string();
        assert!(msg.contains("broken.png"), "{msg}");
        let missing = dir.path().join("missing.png");
        let msg = load_raster(&missing).unwrap_err().to_string();
        assert!(msg.contains("missing.png"), "{msg}");
    }

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(Raster::filled(8, 32, 1, 1.0).is_err());
        assert!(Raster::filled(16, 16, 2, 1.0).is_err());
        assert!(Raster::new(16, 16, 1, vec![1.5; 256]).is_err());
    }

    #[test]
    fn png_round_trip_is_exact_for_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..16 * 16).map(|i| (i % 256) as f64 / 255.0).collect();
        let r = Raster::new(16, 16, 1, data).unwrap();
        let p = dir.path().join("r.png");
        r.save_png(&p).unwrap();
        assert_eq!(load_raster(&p).unwrap(), r);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let r = Raster::filled(20, 30, 1, 0.25).unwrap();
        let s = r.resize(41, 17).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }
}
