//! The multi-stream U-Transformer.
//!
//! * coarse fusion: the guidance maps are concatenated and passed through two
//!   3×3 convolutions;
//! * CSB stream: encoder blocks of stride-2 convolution followed by windowed
//!   multi-head self-attention (residual), U-Net decoder with transposed
//!   convolutions and skip connections;
//! * two CCB streams: same shape, but queries come from one keyframe's refined
//!   copies while keys/values come from a parallel pyramid of the point traces;
//! * fusion: stream outputs are concatenated, two convolutions map them to one
//!   channel, clamped to `[0, 1]`.
//!
//! Parameter names are stable strings (`csb.enc1.attn.wq`, ...) so checkpoints
//! stay readable.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{ensure_contract, Error, Result};
use crate::frames_io::Raster;
use crate::imgproc::Plane;
use crate::sketch_corr::GuidanceTrace;

/// Bias of the final 1-channel projection at initialisation; starts outputs
/// inside the clamp range so every pixel receives gradient.
pub const OUTPUT_BIAS_INIT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Ablation {
    NoPixel,
    NoSketch,
    NoRegion,
    NoCcb,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::NoPixel, Ablation::NoSketch, Ablation::NoRegion, Ablation::NoCcb];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoPixel => "no-pixel",
            Ablation::NoSketch => "no-sketch",
            Ablation::NoRegion => "no-region",
            Ablation::NoCcb => "no-ccb",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Ablation::ALL.iter().map(|a| a.name()).collect();
                Error::Config(format!("unknown ablation '{s}'; valid names: {}", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    /// Stem width.
    pub channels: usize,
    /// Encoder blocks per stream.
    pub scales: usize,
    /// Attention window side.
    pub window: usize,
    pub heads: usize,
    /// Cap of the ×2 per-scale channel growth.
    pub max_channels: usize,
    /// Number of trace rasters (timestamps) fed to the network.
    pub trace_depth: usize,
    pub use_pixel: bool,
    pub use_sketch: bool,
    pub use_region: bool,
    pub use_ccb: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            channels: 24,
            scales: 3,
            window: 8,
            heads: 2,
            max_channels: 96,
            trace_depth: 1,
            use_pixel: true,
            use_sketch: true,
            use_region: true,
            use_ccb: true,
        }
    }
}

impl NetConfig {
    /// Small configuration used by tests and smoke runs.
    pub fn tiny() -> Self {
        Self {
            channels: 8,
            scales: 2,
            window: 4,
            ..Self::default()
        }
    }

    pub fn with_ablation(mut self, a: Ablation) -> Self {
        match a {
            Ablation::NoPixel => self.use_pixel = false,
            Ablation::NoSketch => self.use_sketch = false,
            Ablation::NoRegion => self.use_region = false,
            Ablation::NoCcb => self.use_ccb = false,
        }
        self
    }

    pub fn ablations(&self) -> Vec<Ablation> {
        let mut v = Vec::new();
        if !self.use_pixel {
            v.push(Ablation::NoPixel);
        }
        if !self.use_sketch {
            v.push(Ablation::NoSketch);
        }
        if !self.use_region {
            v.push(Ablation::NoRegion);
        }
        if !self.use_ccb {
            v.push(Ablation::NoCcb);
        }
        v
    }

    /// Channel width at scale `s` (0 = stem).
    pub fn width(&self, s: usize) -> usize {
        let mut c = self.channels;
        for _ in 0..s {
            c = (2 * c).min(self.max_channels);
        }
        c
    }

    pub fn ccb_enabled(&self) -> bool {
        self.use_ccb && self.use_sketch
    }

    /// Depth of the coarse-fusion input.
    pub fn csb_input_depth(&self) -> usize {
        2 * usize::from(self.use_pixel) + self.trace_depth * usize::from(self.use_sketch) + 2 * usize::from(self.use_region)
    }

    /// Depth of a CCB query input.
    pub fn ccb_query_depth(&self) -> usize {
        usize::from(self.use_pixel) + usize::from(self.use_region)
    }

    pub fn stream_count(&self) -> usize {
        1 + 2 * usize::from(self.ccb_enabled())
    }

    /// Spatial multiple the padded input must satisfy.
    pub fn pad_multiple(&self) -> usize {
        (1 << self.scales) * self.window
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels == 0 || self.scales == 0 || self.window == 0 || self.heads == 0 {
            return bad("channels, scales, window and heads must be positive".into());
        }
        if self.max_channels < self.channels {
            return bad(format!("max_channels {} below channels {}", self.max_channels, self.channels));
        }
        for s in 0..=self.scales {
            if self.width(s) % self.heads != 0 {
                return bad(format!("width {} at scale {s} not divisible by {} heads", self.width(s), self.heads));
            }
        }
        if self.trace_depth == 0 {
            return bad("trace_depth must be at least 1".into());
        }
        if self.csb_input_depth() == 0 {
            return bad("every guidance input is disabled".into());
        }
        if self.ccb_enabled() && self.ccb_query_depth() == 0 {
            return bad("cross-attention streams need pixel or region guidance as queries".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    /// Biases start at this constant; weights are drawn uniformly.
    pub bias_init: Option<f64>,
}

fn conv_specs(out: &mut Vec<ParamSpec>, name: &str, i: usize, o: usize) {
    out.push(ParamSpec {
        name: format!("{name}.w"),
        shape: vec![o, i, 3, 3],
        fan_in: 9 * i,
        bias_init: None,
    });
    out.push(ParamSpec {
        name: format!("{name}.b"),
        shape: vec![o],
        fan_in: 9 * i,
        bias_init: Some(0.0),
    });
}

fn convt_specs(out: &mut Vec<ParamSpec>, name: &str, i: usize, o: usize) {
    out.push(ParamSpec {
        name: format!("{name}.w"),
        shape: vec![i, o, 2, 2],
        fan_in: i,
        bias_init: None,
    });
    out.push(ParamSpec {
        name: format!("{name}.b"),
        shape: vec![o],
        fan_in: i,
        bias_init: Some(0.0),
    });
}

fn attn_specs(out: &mut Vec<ParamSpec>, name: &str, c: usize) {
    for p in ["wq", "wk", "wv", "wo"] {
        out.push(ParamSpec {
            name: format!("{name}.{p}"),
            shape: vec![c, c],
            fan_in: c,
            bias_init: None,
        });
    }
}

fn decoder_specs(out: &mut Vec<ParamSpec>, prefix: &str, cfg: &NetConfig) {
    for s in 0..cfg.scales {
        let (lo, hi) = (cfg.width(s), cfg.width(s + 1));
        convt_specs(out, &format!("{prefix}.dec{s}.up"), hi, lo);
        conv_specs(out, &format!("{prefix}.dec{s}.conv"), 2 * lo, lo);
    }
}

/// Every parameter the configuration instantiates.
pub fn param_specs(cfg: &NetConfig) -> Vec<ParamSpec> {
    let mut v = Vec::new();
    let c = cfg.channels;
    conv_specs(&mut v, "coarse.conv0", cfg.csb_input_depth(), c);
    conv_specs(&mut v, "coarse.conv1", c, c);
    for s in 0..cfg.scales {
        conv_specs(&mut v, &format!("csb.enc{s}.conv"), cfg.width(s), cfg.width(s + 1));
        attn_specs(&mut v, &format!("csb.enc{s}.attn"), cfg.width(s + 1));
    }
    decoder_specs(&mut v, "csb", cfg);
    if cfg.ccb_enabled() {
        for k in 0..2 {
            let p = format!("ccb{k}");
            conv_specs(&mut v, &format!("{p}.stem_x"), cfg.ccb_query_depth(), c);
            conv_specs(&mut v, &format!("{p}.stem_y"), cfg.trace_depth, c);
            for s in 0..cfg.scales {
                conv_specs(&mut v, &format!("{p}.enc{s}.conv_x"), cfg.width(s), cfg.width(s + 1));
                conv_specs(&mut v, &format!("{p}.enc{s}.conv_y"), cfg.width(s), cfg.width(s + 1));
                attn_specs(&mut v, &format!("{p}.enc{s}.attn"), cfg.width(s + 1));
            }
            decoder_specs(&mut v, &p, cfg);
        }
    }
    conv_specs(&mut v, "fuse.conv0", cfg.stream_count() * c, c);
    conv_specs(&mut v, "fuse.conv1", c, 1);
    if let Some(b) = v.iter_mut().find(|p| p.name == "fuse.conv1.b") {
        b.bias_init = Some(OUTPUT_BIAS_INIT);
    }
    v
}

/// Closed-form parameter count: conv(i,o) = 9io+o, convT(i,o) = 4io+o, attention(c) = 4c².
pub fn param_count(cfg: &NetConfig) -> usize {
    let conv = |i: usize, o: usize| 9 * i * o + o;
    let convt = |i: usize, o: usize| 4 * i * o + o;
    let attn = |c: usize| 4 * c * c;
    let c = cfg.channels;
    let decoder: usize = (0..cfg.scales)
        .map(|s| convt(cfg.width(s + 1), cfg.width(s)) + conv(2 * cfg.width(s), cfg.width(s)))
        .sum();
    let mut n = conv(cfg.csb_input_depth(), c) + conv(c, c) + decoder;
    n += (0..cfg.scales)
        .map(|s| conv(cfg.width(s), cfg.width(s + 1)) + attn(cfg.width(s + 1)))
        .sum::<usize>();
    if cfg.ccb_enabled() {
        let enc: usize = (0..cfg.scales)
            .map(|s| 2 * conv(cfg.width(s), cfg.width(s + 1)) + attn(cfg.width(s + 1)))
            .sum();
        n += 2 * (conv(cfg.ccb_query_depth(), c) + conv(cfg.trace_depth, c) + enc + decoder);
    }
    n + conv(cfg.stream_count() * c, c) + conv(c, 1)
}

/// Named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Fan-in scaled uniform weights `U(−1/√fan_in, 1/√fan_in)`, constant biases.
    pub fn init(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut specs = param_specs(cfg);
        specs.sort_by(|a, b| a.name.cmp(&b.name));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = specs
            .into_iter()
            .map(|s| {
                let n = s.shape.iter().product();
                let data = match s.bias_init {
                    Some(b) => vec![b; n],
                    None => {
                        let bound = 1.0 / (s.fan_in as f64).sqrt();
                        (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                    }
                };
                (s.name, Tensor::new(s.shape, data))
            })
            .collect();
        Ok(Self { tensors })
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Put every tensor on the tape, trainable or frozen.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, t)| {
                    let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                    (k.clone(), v)
                })
                .collect(),
        }
    }
}

pub struct BoundParams {
    pub vars: BTreeMap<String, Var>,
}

impl BoundParams {
    fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing for this configuration"))
    }

    fn conv(&self, g: &mut Graph, name: &str, x: Var, stride: usize) -> Var {
        let (w, b) = (self.get(&format!("{name}.w")), self.get(&format!("{name}.b")));
        g.conv2d(x, w, b, stride)
    }

    fn conv_silu(&self, g: &mut Graph, name: &str, x: Var, stride: usize) -> Var {
        let y = self.conv(g, name, x, stride);
        g.silu(y)
    }

    fn attention(&self, g: &mut Graph, name: &str, x: Var, y: Var, cfg: &NetConfig) -> Var {
        let p = |k: &str| self.get(&format!("{name}.{k}"));
        g.window_attention(x, y, p("wq"), p("wk"), p("wv"), p("wo"), cfg.heads, cfg.window)
    }
}

/// The five guidance maps consumed by the network.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceBundle {
    /// Pixel-flow refined keyframes `(İ0, İ1)`.
    pub pixel: [Raster; 2],
    pub trace: GuidanceTrace,
    /// Region-flow refined keyframes `(Ï0, Ï1)`.
    pub region: [Raster; 2],
}

impl GuidanceBundle {
    pub fn dims(&self) -> (usize, usize) {
        (self.pixel[0].height(), self.pixel[0].width())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dims();
        ensure_contract!(self.trace.depth() >= 1, "guidance trace is empty");
        for r in self.pixel.iter().chain(&self.region) {
            ensure_contract!(r.channels() == 1, "guidance rasters must be single-channel");
            ensure_contract!(
                (r.height(), r.width()) == d,
                "guidance raster {}x{} differs from {}x{}",
                r.height(),
                r.width(),
                d.0,
                d.1
            );
        }
        for l in &self.trace.layers {
            ensure_contract!((l.height, l.width) == d, "trace layer size differs from keyframes");
        }
        Ok(())
    }
}

fn stack(planes: &[&[f64]], h: usize, w: usize) -> Tensor {
    Tensor::new(vec![planes.len(), h, w], planes.iter().flat_map(|p| p.iter().copied()).collect())
}

/// Channel stacks fed to the network, reflect-padded to the configured multiple.
struct Inputs {
    csb: Tensor,
    queries: [Option<Tensor>; 2],
    trace: Tensor,
}

fn prepare(cfg: &NetConfig, b: &GuidanceBundle) -> Result<(Inputs, usize, usize)> {
    b.validate()?;
    ensure_contract!(
        b.trace.depth() == cfg.trace_depth,
        "bundle carries {} trace rasters, network expects {}",
        b.trace.depth(),
        cfg.trace_depth
    );
    let (h, w) = b.dims();
    let m = cfg.pad_multiple();
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let trace: Vec<&[f64]> = b.trace.layers.iter().map(|l: &Plane| l.data.as_slice()).collect();
    // keyframes enter as ink density so that, like the traces, strokes are the
    // sparse non-zero signal on a zero background
    let ink = |r: &Raster| r.data().iter().map(|v| 1.0 - v).collect::<Vec<f64>>();
    let pixel = [ink(&b.pixel[0]), ink(&b.pixel[1])];
    let region = [ink(&b.region[0]), ink(&b.region[1])];
    let mut csb: Vec<&[f64]> = Vec::new();
    if cfg.use_pixel {
        csb.extend([pixel[0].as_slice(), pixel[1].as_slice()]);
    }
    if cfg.use_sketch {
        csb.extend(trace.iter().copied());
    }
    if cfg.use_region {
        csb.extend([region[0].as_slice(), region[1].as_slice()]);
    }
    let query = |k: usize| {
        let mut q: Vec<&[f64]> = Vec::new();
        if cfg.use_pixel {
            q.push(&pixel[k]);
        }
        if cfg.use_region {
            q.push(&region[k]);
        }
        stack(&q, h, w).reflect_pad(ph, pw)
    };
    let queries = if cfg.ccb_enabled() { [Some(query(0)), Some(query(1))] } else { [None, None] };
    Ok((
        Inputs {
            csb: stack(&csb, h, w).reflect_pad(ph, pw),
            queries,
            trace: stack(&trace, h, w).reflect_pad(ph, pw),
        },
        h,
        w,
    ))
}

/// Coarse fusion: two 3×3 convolutions with SiLU.
pub fn coarse_fuse(g: &mut Graph, p: &BoundParams, input: Var) -> Var {
    let x = p.conv_silu(g, "coarse.conv0", input, 1);
    p.conv_silu(g, "coarse.conv1", x, 1)
}

/// Conv (stride 2, SiLU) then windowed self-attention with residual.
pub fn csb_block(g: &mut Graph, p: &BoundParams, cfg: &NetConfig, prefix: &str, x: Var) -> Var {
    let x = p.conv_silu(g, &format!("{prefix}.conv"), x, 2);
    let a = p.attention(g, &format!("{prefix}.attn"), x, x, cfg);
    g.add(x, a)
}

/// Both paths downsample (stride-2 conv, SiLU); queries from X, keys/values from Y.
pub fn ccb_block(g: &mut Graph, p: &BoundParams, cfg: &NetConfig, prefix: &str, x: Var, y: Var) -> Result<(Var, Var)> {
    ensure_contract!(
        g.value(x).shape == g.value(y).shape,
        "cross-attention inputs differ: {:?} vs {:?}",
        g.value(x).shape,
        g.value(y).shape
    );
    let x = p.conv_silu(g, &format!("{prefix}.conv_x"), x, 2);
    let y = p.conv_silu(g, &format!("{prefix}.conv_y"), y, 2);
    let a = p.attention(g, &format!("{prefix}.attn"), x, y, cfg);
    Ok((g.add(x, a), y))
}

/// U-Net decoder: per scale, transposed conv up, concat with the skip, conv.
fn decode(g: &mut Graph, p: &BoundParams, cfg: &NetConfig, prefix: &str, skips: &[Var], deepest: Var) -> Var {
    let mut d = deepest;
    for s in (0..cfg.scales).rev() {
        let up_w = p.get(&format!("{prefix}.dec{s}.up.w"));
        let up_b = p.get(&format!("{prefix}.dec{s}.up.b"));
        let u = g.conv_t2(d, up_w, up_b);
        let u = g.silu(u);
        let cat = g.concat(&[u, skips[s]]);
        d = p.conv_silu(g, &format!("{prefix}.dec{s}.conv"), cat, 1);
    }
    d
}

fn csb_stream(g: &mut Graph, p: &BoundParams, cfg: &NetConfig, x0: Var) -> Var {
    let mut skips = vec![x0];
    let mut x = x0;
    for s in 0..cfg.scales {
        x = csb_block(g, p, cfg, &format!("csb.enc{s}"), x);
        skips.push(x);
    }
    decode(g, p, cfg, "csb", &skips, x)
}

fn ccb_stream(g: &mut Graph, p: &BoundParams, cfg: &NetConfig, k: usize, query: Var, trace: Var) -> Result<Var> {
    let prefix = format!("ccb{k}");
    let mut x = p.conv_silu(g, &format!("{prefix}.stem_x"), query, 1);
    let mut y = p.conv_silu(g, &format!("{prefix}.stem_y"), trace, 1);
    let mut skips = vec![x];
    for s in 0..cfg.scales {
        (x, y) = ccb_block(g, p, cfg, &format!("{prefix}.enc{s}"), x, y)?;
        skips.push(x);
    }
    Ok(decode(g, p, cfg, &prefix, &skips, x))
}

/// Concatenate stream maps, conv + SiLU, linear 1-channel conv (no clamp).
pub fn fuse_streams(g: &mut Graph, p: &BoundParams, maps: &[Var]) -> Result<Var> {
    if maps.is_empty() {
        return Err(Error::Config("no stream enabled for fusion".into()));
    }
    let cat = g.concat(maps);
    let x = p.conv_silu(g, "fuse.conv0", cat, 1);
    Ok(p.conv(g, "fuse.conv1", x, 1))
}

/// Network forward on a guidance bundle; returns the `[1, H, W]` prediction
/// clamped to `[0, 1]`.
pub fn forward(g: &mut Graph, cfg: &NetConfig, p: &BoundParams, bundle: &GuidanceBundle) -> Result<Var> {
    let y = forward_linear(g, cfg, p, bundle)?;
    Ok(g.clamp01(y))
}

/// The prediction before the output clamp. Training losses are taken here: the
/// clamp has zero derivative outside `[0, 1]`, so a pixel that overshoots
/// would otherwise never receive gradient again.
pub fn forward_linear(g: &mut Graph, cfg: &NetConfig, p: &BoundParams, bundle: &GuidanceBundle) -> Result<Var> {
    cfg.validate()?;
    let (inputs, h, w) = prepare(cfg, bundle)?;
    let csb_in = g.constant(inputs.csb);
    let coarse = coarse_fuse(g, p, csb_in);
    let mut maps = vec![csb_stream(g, p, cfg, coarse)];
    if cfg.ccb_enabled() {
        let trace = g.constant(inputs.trace);
        for (k, q) in inputs.queries.into_iter().enumerate() {
            let q = g.constant(q.expect("query present when streams are enabled"));
            maps.push(ccb_stream(g, p, cfg, k, q, trace)?);
        }
    }
    let fused = fuse_streams(g, p, &maps)?;
    Ok(g.crop(fused, h, w))
}

/// Inference helper: forward with frozen parameters, returned as a raster.
pub fn predict(cfg: &NetConfig, params: &ModelParams, bundle: &GuidanceBundle) -> Result<Raster> {
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let out = forward(&mut g, cfg, &p, bundle)?;
    let (h, w) = bundle.dims();
    Raster::new(h, w, 1, g.value(out).data.clone())
}

/// End-to-end interpolation: guidance extraction followed by the network.
pub fn fcsin_forward(
    i0: &Raster,
    i1: &Raster,
    cfg: &NetConfig,
    params: &ModelParams,
    guidance: &crate::guidance::GuidanceConfig,
) -> Result<Raster> {
    let g = crate::guidance::extract_guidance(i0, i1, guidance)?;
    predict(cfg, params, &g.bundle)
}
