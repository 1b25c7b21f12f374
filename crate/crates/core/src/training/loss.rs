//! Reconstruction and perceptual losses.
//!
//! The perceptual term uses a frozen, seed-determined featurizer: three
//! stride-2 3×3 convolutions with SiLU, each stage's features unit-normalised
//! across channels. The loss is the mean over stages of the mean squared
//! feature difference.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{ensure_contract, Result};
use crate::frames_io::Raster;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub lpips: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l1: 70.0, lpips: 30.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        ensure_contract!(
            self.l1 >= 0.0 && self.lpips >= 0.0 && self.l1.is_finite() && self.lpips.is_finite(),
            "loss weights must be finite and non-negative, got l1={} lpips={}",
            self.l1,
            self.lpips
        );
        Ok(())
    }
}

/// Components of the training objective for one prediction.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l1: f64,
    pub lpips: f64,
    pub total: f64,
}

fn same_dims(a: &Raster, b: &Raster) -> Result<()> {
    ensure_contract!(
        a.dims() == b.dims(),
        "loss operands differ in shape: {:?} vs {:?}",
        a.dims(),
        b.dims()
    );
    Ok(())
}

/// Mean absolute pixel difference.
pub fn loss_l1(pred: &Raster, target: &Raster) -> Result<f64> {
    same_dims(pred, target)?;
    let n = pred.data().len() as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

/// Channel widths of the featurizer stages.
pub const FEATURE_WIDTHS: [usize; 3] = [8, 16, 16];

/// Frozen random-feature network standing in for a learned perceptual metric.
#[derive(Clone, Debug, PartialEq)]
pub struct Featurizer {
    /// `(weight [O, I, 3, 3], bias [O])` per stage.
    stages: Vec<(Tensor, Tensor)>,
    channels: usize,
}

impl Featurizer {
    /// Featurizer for `channels`-deep inputs with weights drawn from `seed`.
    pub fn new(seed: u64, channels: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut inputs = channels;
        let stages = FEATURE_WIDTHS
            .iter()
            .map(|&o| {
                let fan_in = 9 * inputs;
                let bound = (3.0 / fan_in as f64).sqrt();
                let w = (0..o * fan_in).map(|_| rng.gen_range(-bound..bound)).collect();
                let w = Tensor::new(vec![o, inputs, 3, 3], w);
                inputs = o;
                (w, Tensor::zeros(&[o]))
            })
            .collect();
        Self { stages, channels }
    }

    fn stage_vars(&self, g: &mut Graph, x: Var) -> Vec<Var> {
        let mut h = x;
        let mut out = Vec::with_capacity(self.stages.len());
        for (w, b) in &self.stages {
            let (w, b) = (g.constant(w.clone()), g.constant(b.clone()));
            let y = g.conv2d(h, w, b, 2);
            let y = g.silu(y);
            h = g.channel_norm(y);
            out.push(h);
        }
        out
    }

    /// Normalised features of every stage.
    pub fn features(&self, image: &Tensor) -> Vec<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        self.stage_vars(&mut g, x).into_iter().map(|v| g.value(v).clone()).collect()
    }

    /// Differentiable perceptual distance of `pred` to a fixed target image.
    pub fn graph_loss(&self, g: &mut Graph, pred: Var, target: &Tensor) -> Var {
        let target_feats = self.features(target);
        let pred_feats = self.stage_vars(g, pred);
        let k = 1.0 / pred_feats.len() as f64;
        let terms: Vec<(Var, f64)> = pred_feats
            .into_iter()
            .zip(&target_feats)
            .map(|(p, t)| (g.mse_to(p, t), k))
            .collect();
        g.lincomb(&terms)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

pub(crate) fn raster_tensor(r: &Raster) -> Tensor {
    let data = (0..r.channels()).flat_map(|c| r.channel(c).data).collect();
    Tensor::new(vec![r.channels(), r.height(), r.width()], data)
}

/// Perceptual distance under the featurizer seeded with `featurizer_seed`.
pub fn loss_perceptual(pred: &Raster, target: &Raster, featurizer_seed: u64) -> Result<f64> {
    same_dims(pred, target)?;
    let f = Featurizer::new(featurizer_seed, pred.channels());
    let (fp, ft) = (f.features(&raster_tensor(pred)), f.features(&raster_tensor(target)));
    let k = 1.0 / fp.len() as f64;
    Ok(fp
        .iter()
        .zip(&ft)
        .map(|(a, b)| k * a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
        .sum())
}

/// Weighted sum of the reconstruction and perceptual terms.
pub fn total_loss(pred: &Raster, target: &Raster, w: &LossWeights, featurizer_seed: u64) -> Result<LossBreakdown> {
    let l1 = loss_l1(pred, target)?;
    let lpips = loss_perceptual(pred, target, featurizer_seed)?;
    Ok(LossBreakdown {
        l1,
        lpips,
        total: combine(l1, lpips, w),
    })
}

pub fn combine(l1: f64, lpips: f64, w: &LossWeights) -> f64 {
    w.l1 * l1 + w.lpips * lpips
}

/// Build the training objective on the tape; returns `(total, l1, lpips)` vars.
pub fn graph_total_loss(
    g: &mut Graph,
    pred: Var,
    target: &Tensor,
    w: &LossWeights,
    featurizer: &Featurizer,
) -> (Var, Var, Var) {
    let l1 = g.l1_to(pred, target);
    let lp = featurizer.graph_loss(g, pred, target);
    let total = g.lincomb(&[(l1, w.l1), (lp, w.lpips)]);
    (total, l1, lp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Raster {
        Raster::new(h, w, 1, (0..h * w).map(|i| f(i % w, i / w)).collect()).unwrap()
    }

    #[test]
    fn l1_closed_forms() {
        let a = Raster::filled(16, 16, 1, 0.5).unwrap();
        let b = Raster::filled(16, 16, 1, 0.25).unwrap();
        assert_eq!(loss_l1(&a, &b).unwrap(), 0.25);
        assert_eq!(loss_l1(&b, &a).unwrap(), 0.25);
        assert_eq!(loss_l1(&a, &a).unwrap(), 0.0);
        assert!(loss_l1(&a, &Raster::filled(16, 17, 1, 0.5).unwrap()).is_err());
    }

    #[test]
    fn weighted_total_arithmetic() {
        assert!((combine(0.1, 0.02, &LossWeights::default()) - 7.6).abs() < 1e-12);
    }

    #[test]
    fn perceptual_zero_on_identity_positive_otherwise() {
        let a = img(16, 16, |x, y| if (x + y) % 5 == 0 { 0.0 } else { 1.0 });
        let b = img(16, 16, |x, _| if x == 7 { 0.0 } else { 1.0 });
        assert_eq!(loss_perceptual(&a, &a, 3).unwrap(), 0.0);
        let d = loss_perceptual(&a, &b, 3).unwrap();
        assert!(d > 0.0);
        assert_eq!(d, loss_perceptual(&a, &b, 3).unwrap());
        assert_ne!(d, loss_perceptual(&a, &b, 4).unwrap());
    }

    #[test]
    fn graph_loss_matches_direct_evaluation() {
        let a = img(16, 16, |x, y| ((x * 7 + y * 3) % 11) as f64 / 10.0);
        let b = img(16, 16, |x, y| ((x + y * 5) % 7) as f64 / 6.0);
        let w = LossWeights::default();
        let f = Featurizer::new(9, 1);
        let mut g = Graph::new();
        let p = g.param(raster_tensor(&a));
        let (total, l1, lp) = graph_total_loss(&mut g, p, &raster_tensor(&b), &w, &f);
        let direct = total_loss(&a, &b, &w, 9).unwrap();
        assert!((g.value(l1).item() - direct.l1).abs() < 1e-12);
        assert!((g.value(lp).item() - direct.lpips).abs() < 1e-12);
        assert!((g.value(total).item() - direct.total).abs() < 1e-10);
    }
}
