//! Training: losses, the AdaMax optimizer, the run configuration, checkpoints
//! and the seeded training loop.
//!
//! A run is fully determined by its configuration: shuffling is seeded per
//! epoch, augmentation per (epoch, triplet), and per-sample gradients are
//! computed in parallel but summed in batch order, so the loss curve does not
//! depend on the thread count.

mod adamax;
mod checkpoint;
mod config;
mod loss;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::{Graph, Tensor};
use crate::error::{ensure_contract, Error, Result};
use crate::frames_io::{augment, DatasetIndex, Triplet};
use crate::guidance::extract_guidance;
use crate::u_transformer::{forward_linear, GuidanceBundle, ModelParams, NetConfig};

pub use adamax::{adamax_step, DecayMode, OptimConfig, OptimState, StepOutcome};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use config::{DataConfig, TrainConfig, CONFIG_KEYS};
pub use loss::{
    combine, graph_total_loss, loss_l1, loss_perceptual, total_loss, Featurizer, LossBreakdown, LossWeights,
    FEATURE_WIDTHS,
};

pub(crate) use loss::raster_tensor;

/// File names written into the run directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const LOSS_LOG_FILE: &str = "loss.csv";
pub const LOSS_LOG_HEADER: &str = "step,l1,lpips,total";

/// Random-access triplet provider.
pub trait TripletSource: Sync {
    fn len(&self) -> usize;
    fn triplet(&self, i: usize) -> Result<Triplet>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl TripletSource for DatasetIndex {
    fn len(&self) -> usize {
        DatasetIndex::len(self)
    }

    fn triplet(&self, i: usize) -> Result<Triplet> {
        self.load_triplet(i)
    }
}

impl TripletSource for Vec<Triplet> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn triplet(&self, i: usize) -> Result<Triplet> {
        self.get(i)
            .cloned()
            .ok_or_else(|| Error::Dataset(format!("triplet {i} out of range ({} triplets)", self.as_slice().len())))
    }
}

/// Loss values of one optimizer step (batch means).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based count of processed batches.
    pub step: u64,
    pub l1: f64,
    pub lpips: f64,
    pub total: f64,
    pub outcome: StepOutcome,
}

impl StepRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.step, self.l1, self.lpips, self.total)
    }
}

/// Network inputs and target for one (possibly augmented) triplet.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub bundle: GuidanceBundle,
    pub target: Tensor,
}

struct SampleResult {
    loss: LossBreakdown,
    grads: BTreeMap<String, Tensor>,
}

/// SplitMix64 finaliser over a pair of words.
pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Triplet visiting order of an epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch)));
    order
}

/// Guidance and target tensors for a triplet, exactly as the trainer sees it.
pub fn prepare_triplet(t: &Triplet, cfg: &TrainConfig) -> Result<Prepared> {
    let g = extract_guidance(&t.frame0, &t.frame1, &cfg.guidance_config())?;
    Ok(Prepared {
        bundle: g.bundle,
        target: raster_tensor(&t.frame_mid),
    })
}

/// Loss and per-parameter gradients of the network on one prepared sample.
pub fn loss_and_grads(
    net: &NetConfig,
    params: &ModelParams,
    prep: &Prepared,
    weights: &LossWeights,
    featurizer: &Featurizer,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let out = forward_linear(&mut g, net, &bound, &prep.bundle)?;
    let (total, l1, lp) = graph_total_loss(&mut g, out, &prep.target, weights, featurizer);
    let loss = LossBreakdown {
        l1: g.value(l1).item(),
        lpips: g.value(lp).item(),
        total: g.value(total).item(),
    };
    if !loss.total.is_finite() {
        return Ok((loss, BTreeMap::new()));
    }
    let grads = g.backward(total);
    let grads = bound
        .vars
        .iter()
        .map(|(k, &v)| {
            let t = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(&g.value(v).shape));
            (k.clone(), t)
        })
        .collect();
    Ok((loss, grads))
}

/// Seeded training loop state.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    net: NetConfig,
    source: &'a dyn TripletSource,
    params: ModelParams,
    optim: OptimState,
    featurizer: Featurizer,
    epoch: u64,
    batch: u64,
    /// Prepared samples, reused across epochs when augmentation is off.
    cache: Vec<OnceLock<Prepared>>,
}

impl<'a> Trainer<'a> {
    /// Fresh run: parameters initialised from `train.seed`.
    pub fn new(cfg: TrainConfig, source: &'a dyn TripletSource) -> Result<Self> {
        cfg.validate()?;
        let net = cfg.net_config();
        let params = ModelParams::init(&net, cfg.seed)?;
        let optim = OptimState::new(&params.tensors);
        Self::assemble(cfg, source, params, optim, 0, 0)
    }

    /// Continue a run exactly where `ck` left it.
    pub fn from_checkpoint(ck: Checkpoint, source: &'a dyn TripletSource) -> Result<Self> {
        ck.config.validate()?;
        Self::assemble(ck.config, source, ck.params, ck.optim, ck.epoch, ck.batch)
    }

    fn assemble(
        cfg: TrainConfig,
        source: &'a dyn TripletSource,
        params: ModelParams,
        optim: OptimState,
        epoch: u64,
        batch: u64,
    ) -> Result<Self> {
        if source.is_empty() {
            return Err(Error::Dataset("training set is empty".into()));
        }
        let featurizer = Featurizer::new(cfg.featurizer_seed, 1);
        Ok(Self {
            net: cfg.net_config(),
            featurizer,
            cache: (0..source.len()).map(|_| OnceLock::new()).collect(),
            cfg,
            source,
            params,
            optim,
            epoch,
            batch,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn net(&self) -> &NetConfig {
        &self.net
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    pub fn optim(&self) -> &OptimState {
        &self.optim
    }

    /// Batches processed so far (applied plus rejected steps).
    pub fn steps_done(&self) -> u64 {
        self.optim.step + self.optim.faults
    }

    /// Change the stopping point (e.g. to extend a resumed run).
    pub fn set_stop(&mut self, epochs: usize, max_steps: u64) {
        self.cfg.epochs = epochs;
        self.cfg.max_steps = max_steps;
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            seed: self.cfg.seed,
            epoch: self.epoch,
            batch: self.batch,
            params: self.params.clone(),
            optim: self.optim.clone(),
        }
    }

    fn prepare(&self, epoch: u64, index: usize) -> Result<Prepared> {
        if !self.cfg.data.augment {
            if let Some(p) = self.cache[index].get() {
                return Ok(p.clone());
            }
        }
        let t = self.source.triplet(index)?;
        let t = if self.cfg.data.augment {
            augment(&t, mix(mix(self.cfg.seed, epoch), index as u64), &self.cfg.augment_params())?
        } else {
            t
        };
        let p = prepare_triplet(&t, &self.cfg)?;
        if !self.cfg.data.augment {
            let _ = self.cache[index].set(p.clone());
        }
        Ok(p)
    }

    fn sample(&self, epoch: u64, index: usize) -> Result<SampleResult> {
        let prep = self.prepare(epoch, index)?;
        let (loss, grads) = loss_and_grads(&self.net, &self.params, &prep, &self.cfg.loss, &self.featurizer)?;
        Ok(SampleResult { loss, grads })
    }

    /// Forward/backward over `indices` (samples in parallel, reduced in order),
    /// then one optimizer step on the mean gradient.
    pub fn step_batch(&mut self, epoch: u64, indices: &[usize]) -> Result<StepRecord> {
        ensure_contract!(!indices.is_empty(), "empty batch");
        let results: Vec<Result<SampleResult>> = indices.par_iter().map(|&i| self.sample(epoch, i)).collect();
        let results = results.into_iter().collect::<Result<Vec<_>>>()?;
        let k = 1.0 / results.len() as f64;
        let step = self.steps_done() + 1;
        let mean = |f: fn(&LossBreakdown) -> f64| results.iter().map(|r| f(&r.loss)).sum::<f64>() * k;
        let (l1, lpips, total) = (mean(|l| l.l1), mean(|l| l.lpips), mean(|l| l.total));
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
        for r in &results {
            for (name, g) in &r.grads {
                match grads.get_mut(name) {
                    Some(acc) => acc.data.iter_mut().zip(&g.data).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(name.clone(), g.clone());
                    }
                }
            }
        }
        grads.values_mut().for_each(|g| g.data.iter_mut().for_each(|v| *v *= k));
        let outcome = adamax_step(&mut self.params.tensors, &grads, &mut self.optim, &self.cfg.optim)?;
        if outcome == StepOutcome::Rejected {
            log::warn!("step {step}: non-finite gradient, update skipped");
        }
        Ok(StepRecord {
            step,
            l1,
            lpips,
            total,
            outcome,
        })
    }

    fn done(&self) -> bool {
        self.epoch >= self.cfg.epochs as u64 || (self.cfg.max_steps > 0 && self.steps_done() >= self.cfg.max_steps)
    }

    /// Train until the epoch or step limit. With `out_dir`, the loss log is
    /// appended to `loss.csv` and the checkpoint is refreshed every
    /// `train.checkpoint_every` steps and at the end. A non-finite loss aborts
    /// with [`Error::NonFiniteLoss`], leaving the last checkpoint in place.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<Vec<StepRecord>> {
        let mut log = match out_dir {
            Some(dir) => Some(LossLog::open(dir, self.steps_done())?),
            None => None,
        };
        let ckpt_path = out_dir.map(|d| d.join(CHECKPOINT_FILE));
        if let Some(p) = &ckpt_path {
            if self.steps_done() == 0 {
                self.checkpoint().save(p)?;
            }
        }
        let n = self.source.len();
        let bs = self.cfg.batch_size;
        let batches = n.div_ceil(bs) as u64;
        let mut records = Vec::new();
        while !self.done() {
            let order = epoch_order(n, self.cfg.seed, self.epoch);
            while self.batch < batches && !self.done() {
                let b = self.batch as usize;
                let idx = &order[b * bs..((b + 1) * bs).min(n)];
                let rec = self.step_batch(self.epoch, idx)?;
                self.batch += 1;
                if self.batch == batches {
                    self.epoch += 1;
                    self.batch = 0;
                }
                if let Some(l) = log.as_mut() {
                    l.push(&rec)?;
                }
                log::debug!("step {} total {:.6} l1 {:.6}", rec.step, rec.total, rec.l1);
                records.push(rec);
                let every = self.cfg.checkpoint_every;
                if let Some(p) = &ckpt_path {
                    if every > 0 && rec.step % every == 0 {
                        self.checkpoint().save(p)?;
                    }
                }
                if self.batch == 0 {
                    break;
                }
            }
            log::info!("epoch {} done after {} steps", self.epoch, self.steps_done());
        }
        if let Some(p) = &ckpt_path {
            self.checkpoint().save(p)?;
        }
        Ok(records)
    }
}

/// Append-only `step,l1,lpips,total` log that drops rows past a resume point.
struct LossLog {
    file: std::fs::File,
    path: PathBuf,
}

impl LossLog {
    fn open(dir: &Path, resume_step: u64) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOSS_LOG_FILE);
        let mut text = format!("{LOSS_LOG_HEADER}\n");
        if resume_step > 0 {
            if let Ok(old) = std::fs::read_to_string(&path) {
                for line in old.lines().skip(1) {
                    let step: Option<u64> = line.split(',').next().and_then(|s| s.parse().ok());
                    if step.is_some_and(|s| s <= resume_step) {
                        text.push_str(line);
                        text.push('\n');
                    }
                }
            }
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        let file = std::fs::OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { file, path })
    }

    fn push(&mut self, r: &StepRecord) -> Result<()> {
        writeln!(self.file, "{}", r.csv_row()).map_err(|e| Error::io(&self.path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames_io::Raster;

    pub(crate) fn toy_triplets(n: usize, size: usize) -> Vec<Triplet> {
        let square = |x0: usize| {
            Raster::new(
                size,
                size,
                1,
                (0..size * size)
                    .map(|i| {
                        let (x, y) = (i % size, i / size);
                        let on = (x0..x0 + 8).contains(&x) && (6..14).contains(&y);
                        let edge = x == x0 || x == x0 + 7 || y == 6 || y == 13;
                        if on && edge {
                            0.0
                        } else {
                            1.0
                        }
                    })
                    .collect(),
            )
            .unwrap()
        };
        (0..n)
            .map(|k| Triplet::new(format!("t{k}"), square(2 + k), square(4 + k), square(6 + k)).unwrap())
            .collect()
    }

    fn tiny_cfg() -> TrainConfig {
        let mut c = TrainConfig::default();
        c.net = NetConfig::tiny();
        c.batch_size = 2;
        c.epochs = 2;
        c.data.augment = false;
        c
    }

    #[test]
    fn epochs_zero_keeps_initialisation() {
        let data = toy_triplets(2, 20);
        let mut c = tiny_cfg();
        c.epochs = 0;
        let mut t = Trainer::new(c.clone(), &data).unwrap();
        assert!(t.run(None).unwrap().is_empty());
        assert_eq!(t.params(), &ModelParams::init(&c.net_config(), c.seed).unwrap());
    }

    #[test]
    fn empty_source_is_rejected() {
        let data: Vec<Triplet> = Vec::new();
        assert!(Trainer::new(tiny_cfg(), &data).is_err());
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(10, 1, 0);
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..10).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(10, 1, 0));
        assert_ne!(a, epoch_order(10, 1, 1));
    }

    #[test]
    fn nan_parameters_abort_with_non_finite_loss() {
        let data = toy_triplets(2, 20);
        let mut t = Trainer::new(tiny_cfg(), &data).unwrap();
        t.params_mut()
            .tensors
            .get_mut("fuse.conv1.b")
            .unwrap()
            .data
            .iter_mut()
            .for_each(|v| *v = f64::NAN);
        let dir = tempfile::tempdir().unwrap();
        let e = t.run(Some(dir.path())).unwrap_err();
        assert!(matches!(e, Error::NonFiniteLoss { step: 1 }), "{e}");
        assert!(dir.path().join(CHECKPOINT_FILE).exists());
    }

    #[test]
    fn two_steps_run_and_log() {
        let data = toy_triplets(3, 20);
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(tiny_cfg(), &data).unwrap();
        let recs = t.run(Some(dir.path())).unwrap();
        assert_eq!(recs.len(), 4);
        assert!(recs.iter().all(|r| r.total.is_finite() && r.outcome == StepOutcome::Applied));
        let log = std::fs::read_to_string(dir.path().join(LOSS_LOG_FILE)).unwrap();
        assert_eq!(log.lines().count(), 5);
        assert_eq!(log.lines().next().unwrap(), LOSS_LOG_HEADER);
        let ck = Checkpoint::load(dir.path().join(CHECKPOINT_FILE)).unwrap();
        assert_eq!((ck.epoch, ck.batch, ck.optim.step), (2, 0, 4));
    }
}
