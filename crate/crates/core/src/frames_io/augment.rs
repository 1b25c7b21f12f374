//! Training-time augmentation: aspect-preserving resize, seeded crop, seeded flip.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

use super::{Raster, Triplet};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    pub width: usize,
    pub height: usize,
    /// Allow the seeded horizontal flip.
    pub flip: bool,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            width: 384,
            height: 192,
            flip: true,
        }
    }
}

/// Concrete, seed-resolved augmentation for one triplet.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentPlan {
    pub resized: (usize, usize),
    pub top: usize,
    pub left: usize,
    pub crop: (usize, usize),
    pub flip: bool,
}

impl AugmentPlan {
    pub fn new(height: usize, width: usize, params: &AugmentParams, seed: u64) -> Self {
        let scale = (params.width as f64 / width as f64).max(params.height as f64 / height as f64);
        let rh = ((height as f64 * scale).round() as usize).max(params.height);
        let rw = ((width as f64 * scale).round() as usize).max(params.width);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let top = rng.gen_range(0..=rh - params.height);
        let left = rng.gen_range(0..=rw - params.width);
        let flip = params.flip && rng.gen_bool(0.5);
        Self {
            resized: (rh, rw),
            top,
            left,
            crop: (params.height, params.width),
            flip,
        }
    }

    pub fn apply(&self, frame: &Raster) -> Result<Raster> {
        let r = frame
            .resize(self.resized.0, self.resized.1)?
            .crop(self.top, self.left, self.crop.0, self.crop.1)?;
        Ok(if self.flip { r.flip_horizontal() } else { r })
    }

    pub fn apply_triplet(&self, t: &Triplet) -> Result<Triplet> {
        Ok(Triplet {
            frame0: self.apply(&t.frame0)?,
            frame_mid: self.apply(&t.frame_mid)?,
            frame1: self.apply(&t.frame1)?,
            id: t.id.clone(),
        })
    }
}

/// Resize so the target crop fits, crop at a seed-chosen offset and flip all
/// three frames identically when the seed says so.
pub fn augment(t: &Triplet, seed: u64, params: &AugmentParams) -> Result<Triplet> {
    AugmentPlan::new(t.frame0.height(), t.frame0.width(), params, seed).apply_triplet(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_triplet(h: usize, w: usize) -> Triplet {
        let mk = |shift: usize| {
            let data = (0..h * w)
                .map(|i| if (i % w + shift) % 17 == 0 { 0.0 } else { 1.0 })
                .collect();
            Raster::new(h, w, 1, data).unwrap()
        };
        Triplet::new("c/t", mk(0), mk(1), mk(2)).unwrap()
    }

    #[test]
    fn output_has_target_dims() {
        let t = ramp_triplet(100, 150);
        let out = augment(&t, 7, &AugmentParams::default()).unwrap();
        for f in out.frames() {
            assert_eq!((f.height(), f.width(), f.channels()), (192, 384, 1));
        }
    }

    #[test]
    fn same_seed_same_output() {
        let t = ramp_triplet(200, 420);
        let p = AugmentParams::default();
        assert_eq!(augment(&t, 3, &p).unwrap(), augment(&t, 3, &p).unwrap());
    }

    #[test]
    fn flip_commutes_with_crop() {
        let t = ramp_triplet(200, 420);
        let p = AugmentParams::default();
        let seed = (0..64)
            .find(|&s| AugmentPlan::new(200, 420, &p, s).flip)
            .expect("some seed flips");
        let plan = AugmentPlan::new(200, 420, &p, seed);
        let unflipped = AugmentPlan { flip: false, ..plan };
        let a = plan.apply_triplet(&t).unwrap();
        let b = unflipped.apply_triplet(&t).unwrap();
        assert_eq!(a.frame0, b.frame0.flip_horizontal());
        assert_eq!(a.frame1, b.frame1.flip_horizontal());
    }

    #[test]
    fn temporal_order_is_kept() {
        let t = ramp_triplet(192, 384);
        let p = AugmentParams { flip: false, ..Default::default() };
        let out = augment(&t, 11, &p).unwrap();
        assert_eq!(out.frame0, t.frame0);
        assert_eq!(out.frame_mid, t.frame_mid);
        assert_eq!(out.frame1, t.frame1);
    }
}
