//! Flat `key = value` run configuration.
//!
//! Every tunable of the pipeline lives under one dotted key. The text form is
//! canonical: [`TrainConfig::to_text`] lists every key in schema order, and
//! parsing it back yields an identical configuration.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::frames_io::{AugmentParams, SketchParams, MIN_SIDE};
use crate::guidance::GuidanceConfig;
use crate::pixel_flow::FlowParams;
use crate::region_corr::{DEFAULT_ACCEPT, DEFAULT_RADII};
use crate::sketch_corr::ClassicalMatcher;
use crate::u_transformer::{Ablation, NetConfig};

use super::adamax::{DecayMode, OptimConfig};
use super::loss::LossWeights;

/// Every accepted key with a one-line description, in serialisation order.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("net.channels", "stem channel width"),
    ("net.scales", "encoder blocks per stream"),
    ("net.window", "attention window side"),
    ("net.heads", "attention heads"),
    ("net.max_channels", "cap of the per-scale channel doubling"),
    ("ablate", "comma list of disabled components: no-pixel, no-sketch, no-region, no-ccb"),
    ("trace_times", "comma list of point-trace timestamps in (0, 1)"),
    ("loss.l1", "weight of the L1 reconstruction term"),
    ("loss.lpips", "weight of the perceptual term"),
    ("loss.featurizer_seed", "seed of the frozen perceptual featurizer"),
    ("optim.lr", "AdaMax learning rate"),
    ("optim.beta1", "first-moment decay"),
    ("optim.beta2", "infinity-norm decay"),
    ("optim.eps", "denominator epsilon"),
    ("optim.weight_decay", "weight-decay factor"),
    ("optim.decay_mode", "param (decoupled parameter decay) or lr (exponential step-size decay)"),
    ("train.batch_size", "triplets per optimizer step"),
    ("train.epochs", "passes over the dataset"),
    ("train.seed", "seed for initialisation, shuffling and augmentation"),
    ("train.checkpoint_every", "steps between checkpoints (0 = only at the end)"),
    ("train.max_steps", "stop after this many steps (0 = no limit)"),
    ("train.out_dir", "directory for checkpoints and the loss log"),
    ("train.resume", "checkpoint to resume from (empty = fresh run)"),
    ("data.root", "dataset directory holding the manifest"),
    ("data.crop_width", "training crop width"),
    ("data.crop_height", "training crop height"),
    ("data.flip", "allow random horizontal flips"),
    ("data.augment", "apply resize/crop/flip augmentation"),
    ("dataset.stride", "frame offset between triplet members when building a dataset"),
    ("dataset.split", "split name recorded in the dataset manifest"),
    ("sketch.dog_sigma_fine", "inner Gaussian of the contour detector"),
    ("sketch.dog_sigma_coarse", "outer Gaussian of the contour detector"),
    ("sketch.min_stroke_px", "stroke fragments with fewer pixels are dropped"),
    ("flow.levels", "pyramid levels of the block-matching flow"),
    ("flow.block", "block side of the flow matcher"),
    ("flow.radius", "per-level search radius"),
    ("match.max_keypoints", "keypoints detected per keyframe"),
    ("match.tau", "descriptor temperature"),
    ("match.sigma_fraction", "spatial spread as a fraction of the frame size"),
    ("match.theta", "match confidence threshold"),
    ("region.radii", "comma list of trapped-ball radii, descending"),
    ("region.accept", "maximum accepted region-match cost"),
    ("runtime.threads", "worker threads (0 = all cores); never changes results"),
    ("output.dump_guidance", "write guidance maps and flows next to the prediction"),
    ("output.dump_overlays", "write keypoint-match and region debug images"),
    ("eval.predict_target", "oracle mode: score the ground truth against itself"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub root: String,
    pub crop_width: usize,
    pub crop_height: usize,
    pub flip: bool,
    pub augment: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        let a = AugmentParams::default();
        Self {
            root: String::new(),
            crop_width: a.width,
            crop_height: a.height,
            flip: a.flip,
            augment: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Architecture; the `use_*` flags and `trace_depth` are derived from
    /// `ablate` and `trace_times` by [`TrainConfig::net_config`].
    pub net: NetConfig,
    pub ablate: Vec<Ablation>,
    pub trace_times: Vec<f64>,
    pub loss: LossWeights,
    pub featurizer_seed: u64,
    pub optim: OptimConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub max_steps: u64,
    pub out_dir: String,
    pub resume: String,
    pub data: DataConfig,
    pub dataset_stride: usize,
    pub dataset_split: String,
    pub sketch: SketchParams,
    pub flow: FlowParams,
    pub matcher: ClassicalMatcher,
    pub radii: Vec<usize>,
    pub accept: f64,
    pub threads: usize,
    pub dump_guidance: bool,
    pub dump_overlays: bool,
    pub predict_target: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            ablate: Vec::new(),
            trace_times: vec![0.5],
            loss: LossWeights::default(),
            featurizer_seed: 0,
            optim: OptimConfig::default(),
            batch_size: 4,
            epochs: 50,
            seed: 0,
            checkpoint_every: 1000,
            max_steps: 0,
            out_dir: "runs".into(),
            resume: String::new(),
            data: DataConfig::default(),
            dataset_stride: 1,
            dataset_split: "train".into(),
            sketch: SketchParams::default(),
            flow: FlowParams::default(),
            matcher: ClassicalMatcher::default(),
            radii: DEFAULT_RADII.to_vec(),
            accept: DEFAULT_ACCEPT,
            threads: 0,
            dump_guidance: false,
            dump_overlays: false,
            predict_target: false,
        }
    }
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for {key}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|p| parse(key, p.trim())).collect()
}

impl TrainConfig {
    /// Architecture with ablations and trace depth applied.
    pub fn net_config(&self) -> NetConfig {
        let mut n = NetConfig {
            trace_depth: self.trace_times.len(),
            use_pixel: true,
            use_sketch: true,
            use_region: true,
            use_ccb: true,
            ..self.net.clone()
        };
        for &a in &self.ablate {
            n = n.with_ablation(a);
        }
        n
    }

    pub fn guidance_config(&self) -> GuidanceConfig {
        GuidanceConfig {
            flow: self.flow,
            matcher: self.matcher.clone(),
            radii: self.radii.clone(),
            accept: self.accept,
            trace_times: self.trace_times.clone(),
            target_time: 0.5,
        }
    }

    pub fn augment_params(&self) -> AugmentParams {
        AugmentParams {
            width: self.data.crop_width,
            height: self.data.crop_height,
            flip: self.data.flip,
        }
    }

    /// Current value of `key` in canonical text form.
    pub fn get(&self, key: &str) -> Result<String> {
        let v = match key {
            "net.channels" => self.net.channels.to_string(),
            "net.scales" => self.net.scales.to_string(),
            "net.window" => self.net.window.to_string(),
            "net.heads" => self.net.heads.to_string(),
            "net.max_channels" => self.net.max_channels.to_string(),
            "ablate" => list(&self.ablate),
            "trace_times" => list(&self.trace_times),
            "loss.l1" => self.loss.l1.to_string(),
            "loss.lpips" => self.loss.lpips.to_string(),
            "loss.featurizer_seed" => self.featurizer_seed.to_string(),
            "optim.lr" => self.optim.lr.to_string(),
            "optim.beta1" => self.optim.beta1.to_string(),
            "optim.beta2" => self.optim.beta2.to_string(),
            "optim.eps" => self.optim.eps.to_string(),
            "optim.weight_decay" => self.optim.weight_decay.to_string(),
            "optim.decay_mode" => self.optim.decay_mode.to_string(),
            "train.batch_size" => self.batch_size.to_string(),
            "train.epochs" => self.epochs.to_string(),
            "train.seed" => self.seed.to_string(),
            "train.checkpoint_every" => self.checkpoint_every.to_string(),
            "train.max_steps" => self.max_steps.to_string(),
            "train.out_dir" => self.out_dir.clone(),
            "train.resume" => self.resume.clone(),
            "dataset.stride" => self.dataset_stride.to_string(),
            "dataset.split" => self.dataset_split.clone(),
            "sketch.dog_sigma_fine" => self.sketch.dog_sigmas.0.to_string(),
            "sketch.dog_sigma_coarse" => self.sketch.dog_sigmas.1.to_string(),
            "sketch.min_stroke_px" => self.sketch.min_stroke_px.to_string(),
            "data.root" => self.data.root.clone(),
            "data.crop_width" => self.data.crop_width.to_string(),
            "data.crop_height" => self.data.crop_height.to_string(),
            "data.flip" => self.data.flip.to_string(),
            "data.augment" => self.data.augment.to_string(),
            "flow.levels" => self.flow.levels.to_string(),
            "flow.block" => self.flow.block.to_string(),
            "flow.radius" => self.flow.radius.to_string(),
            "match.max_keypoints" => self.matcher.max_keypoints.to_string(),
            "match.tau" => self.matcher.tau.to_string(),
            "match.sigma_fraction" => self.matcher.sigma_fraction.to_string(),
            "match.theta" => self.matcher.theta.to_string(),
            "region.radii" => list(&self.radii),
            "region.accept" => self.accept.to_string(),
            "runtime.threads" => self.threads.to_string(),
            "output.dump_guidance" => self.dump_guidance.to_string(),
            "output.dump_overlays" => self.dump_overlays.to_string(),
            "eval.predict_target" => self.predict_target.to_string(),
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        };
        Ok(v)
    }

    /// Set `key` from its text form. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "net.channels" => self.net.channels = parse(key, v)?,
            "net.scales" => self.net.scales = parse(key, v)?,
            "net.window" => self.net.window = parse(key, v)?,
            "net.heads" => self.net.heads = parse(key, v)?,
            "net.max_channels" => self.net.max_channels = parse(key, v)?,
            "ablate" => {
                let mut a: Vec<Ablation> = parse_list(key, v).map_err(|_| {
                    let bad = v.split(',').map(str::trim).find(|s| s.parse::<Ablation>().is_err()).unwrap_or(v);
                    bad.parse::<Ablation>().unwrap_err()
                })?;
                a.sort();
                a.dedup();
                self.ablate = a;
            }
            "trace_times" => self.trace_times = parse_list(key, v)?,
            "loss.l1" => self.loss.l1 = parse(key, v)?,
            "loss.lpips" => self.loss.lpips = parse(key, v)?,
            "loss.featurizer_seed" => self.featurizer_seed = parse(key, v)?,
            "optim.lr" => self.optim.lr = parse(key, v)?,
            "optim.beta1" => self.optim.beta1 = parse(key, v)?,
            "optim.beta2" => self.optim.beta2 = parse(key, v)?,
            "optim.eps" => self.optim.eps = parse(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse(key, v)?,
            "optim.decay_mode" => self.optim.decay_mode = v.parse::<DecayMode>()?,
            "train.batch_size" => self.batch_size = parse(key, v)?,
            "train.epochs" => self.epochs = parse(key, v)?,
            "train.seed" => self.seed = parse(key, v)?,
            "train.checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "train.max_steps" => self.max_steps = parse(key, v)?,
            "train.out_dir" => self.out_dir = v.to_string(),
            "train.resume" => self.resume = v.to_string(),
            "dataset.stride" => self.dataset_stride = parse(key, v)?,
            "dataset.split" => self.dataset_split = v.to_string(),
            "sketch.dog_sigma_fine" => self.sketch.dog_sigmas.0 = parse(key, v)?,
            "sketch.dog_sigma_coarse" => self.sketch.dog_sigmas.1 = parse(key, v)?,
            "sketch.min_stroke_px" => self.sketch.min_stroke_px = parse(key, v)?,
            "data.root" => self.data.root = v.to_string(),
            "data.crop_width" => self.data.crop_width = parse(key, v)?,
            "data.crop_height" => self.data.crop_height = parse(key, v)?,
            "data.flip" => self.data.flip = parse(key, v)?,
            "data.augment" => self.data.augment = parse(key, v)?,
            "flow.levels" => self.flow.levels = parse(key, v)?,
            "flow.block" => self.flow.block = parse(key, v)?,
            "flow.radius" => self.flow.radius = parse(key, v)?,
            "match.max_keypoints" => self.matcher.max_keypoints = parse(key, v)?,
            "match.tau" => self.matcher.tau = parse(key, v)?,
            "match.sigma_fraction" => self.matcher.sigma_fraction = parse(key, v)?,
            "match.theta" => self.matcher.theta = parse(key, v)?,
            "region.radii" => self.radii = parse_list(key, v)?,
            "region.accept" => self.accept = parse(key, v)?,
            "runtime.threads" => self.threads = parse(key, v)?,
            "output.dump_guidance" => self.dump_guidance = parse(key, v)?,
            "output.dump_overlays" => self.dump_overlays = parse(key, v)?,
            "eval.predict_target" => self.predict_target = parse(key, v)?,
            _ => {
                return Err(Error::Config(format!(
                    "unknown config key '{key}'; see the key list in the documentation"
                )))
            }
        }
        Ok(())
    }

    /// Canonical text: every key in schema order.
    pub fn to_text(&self) -> String {
        CONFIG_KEYS
            .iter()
            .map(|(k, _)| format!("{k} = {}\n", self.get(k).expect("schema keys are known")))
            .collect()
    }

    /// Defaults overridden by the `key = value` lines of `text`; `#` starts a comment line.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Apply the `key = value` lines of `text` on top of `self`; returns the keys set.
    pub fn apply_text(&mut self, text: &str) -> Result<Vec<String>> {
        let mut seen = std::collections::BTreeSet::new();
        let mut order = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{line}'", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key '{k}'", n + 1)));
            }
            self.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
            order.push(k.to_string());
        }
        Ok(order)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.net_config().validate()?;
        self.loss.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.optim.validate()?;
        if self.trace_times.is_empty() || self.trace_times.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return bad(format!("trace_times must be a non-empty list inside (0, 1), got {:?}", self.trace_times));
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if self.data.crop_width < MIN_SIDE || self.data.crop_height < MIN_SIDE {
            return bad(format!("crop must be at least {MIN_SIDE}x{MIN_SIDE}"));
        }
        if self.radii.is_empty() || !self.radii.windows(2).all(|p| p[0] > p[1]) || self.radii.contains(&0) {
            return bad(format!("region.radii must be positive and strictly descending, got {:?}", self.radii));
        }
        if self.flow.levels == 0 || self.flow.block == 0 {
            return bad("flow.levels and flow.block must be positive".into());
        }
        if self.dataset_stride == 0 {
            return bad("dataset.stride must be at least 1".into());
        }
        let (f, c) = self.sketch.dog_sigmas;
        if !(f > 0.0 && c > f) {
            return bad(format!("sketch sigmas must satisfy 0 < fine < coarse, got {f} and {c}"));
        }
        if !(self.accept > 0.0) {
            return bad("region.accept must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.set("ablate", "no-ccb,no-pixel").unwrap();
        c.set("trace_times", "0.25, 0.5, 0.75").unwrap();
        c.set("optim.eps", "1e-8").unwrap();
        let back = TrainConfig::parse_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), c.to_text());
        assert_eq!(c.net_config().trace_depth, 3);
        assert!(!c.net_config().use_ccb && !c.net_config().use_pixel);
    }

    #[test]
    fn every_schema_key_is_gettable_and_settable() {
        let mut c = TrainConfig::default();
        for (k, _) in CONFIG_KEYS {
            let v = c.get(k).unwrap();
            c.set(k, &v).unwrap();
        }
        assert_eq!(c, TrainConfig::default());
    }

    #[test]
    fn unknown_and_malformed_input_is_rejected() {
        assert!(TrainConfig::parse_text("net.bogus = 3").is_err());
        assert!(TrainConfig::parse_text("net.channels").is_err());
        assert!(TrainConfig::parse_text("net.channels = x").is_err());
        assert!(TrainConfig::parse_text("net.channels = 4\nnet.channels = 8").is_err());
        let e = TrainConfig::parse_text("ablate = no-foo").unwrap_err().to_string();
        assert!(e.contains("no-pixel") && e.contains("no-ccb"), "{e}");
        let c = TrainConfig::parse_text("# comment\n\ntrain.seed = 7\n").unwrap();
        assert_eq!(c.seed, 7);
    }

    #[test]
    fn validation_catches_bad_values() {
        assert!(TrainConfig::default().validate().is_ok());
        for (k, v) in [
            ("trace_times", "0.5,1.0"),
            ("train.batch_size", "0"),
            ("region.radii", "2,3"),
            ("net.heads", "5"),
            ("optim.lr", "0"),
            ("loss.l1", "-1"),
        ] {
            let mut c = TrainConfig::default();
            c.set(k, v).unwrap();
            assert!(c.validate().is_err(), "{k}={v}");
        }
    }
}
