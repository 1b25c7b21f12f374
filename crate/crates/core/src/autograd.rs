//! Minimal tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Only the operations the interpolation network and its losses need are
//! provided. Feature maps are `[C, H, W]`. Work is split across rayon threads
//! by output channel or window, and every reduction runs in a fixed order, so
//! values and gradients do not depend on the thread count.

use rayon::prelude::*;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape/data mismatch");
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(shape.to_vec(), vec![0.0; shape.iter().product()])
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(vec![1], vec![v])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(C, H, W)` of a feature map.
    pub fn chw(&self) -> (usize, usize, usize) {
        assert_eq!(self.shape.len(), 3, "expected a [C, H, W] tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2])
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Reflect-pad a feature map on the bottom and right to `(h, w)`.
    pub fn reflect_pad(&self, h: usize, w: usize) -> Tensor {
        let (c, oh, ow) = self.chw();
        assert!(h >= oh && w >= ow);
        if (h, w) == (oh, ow) {
            return self.clone();
        }
        let mut out = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                let sy = mirror(y, oh);
                for x in 0..w {
                    out.push(self.data[(ch * oh + sy) * ow + mirror(x, ow)]);
                }
            }
        }
        Tensor::new(vec![c, h, w], out)
    }
}

/// Reflection without edge repeat, periodic for indices far past the end.
fn mirror(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let k = i % period;
    if k < n {
        k
    } else {
        period - k
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var, stride: usize },
    ConvT2 { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Concat(Vec<Var>),
    Silu(Var),
    Crop { x: Var, h: usize, w: usize },
    Clamp01(Var),
    Attention(AttnSpec),
    L1To { x: Var, target: Tensor },
    MseTo { x: Var, target: Tensor },
    Mse(Var, Var),
    ChannelNorm(Var),
    LinComb(Vec<(Var, f64)>),
}

#[derive(Clone, Debug)]
struct AttnSpec {
    x: Var,
    y: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    heads: usize,
    window: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Statistics gathered from softmax rows during forward passes.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AttentionProbe {
    pub rows: usize,
    pub max_row_error: f64,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    probe: AttentionProbe,
}

const NORM_EPS: f64 = 1e-6;

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn probe(&self) -> AttentionProbe {
        self.probe
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// 3×3 convolution with zero padding 1; `w: [O, I, 3, 3]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let out = conv2d_forward(self.value(x), self.value(w), self.value(b), stride);
        self.push(out, Op::Conv2d { x, w, b, stride }, &[x, w, b])
    }

    /// 2×2 stride-2 transposed convolution; `w: [I, O, 2, 2]`, `b: [O]`.
    pub fn conv_t2(&mut self, x: Var, w: Var, b: Var) -> Var {
        let out = convt_forward(self.value(x), self.value(w), self.value(b));
        self.push(out, Op::ConvT2 { x, w, b }, &[x, w, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "add shape mismatch");
        let out = Tensor::new(ta.shape.clone(), ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect());
        self.push(out, Op::Add(a, b), &[a, b])
    }

    /// Channel concatenation of feature maps with equal spatial size.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let (_, h, w) = self.value(parts[0]).chw();
        let mut c = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (pc, ph, pw) = t.chw();
            assert_eq!((ph, pw), (h, w), "concat spatial mismatch");
            c += pc;
            data.extend_from_slice(&t.data);
        }
        self.push(Tensor::new(vec![c, h, w], data), Op::Concat(parts.to_vec()), parts)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape.clone(), t.data.iter().map(|&v| v * sigmoid(v)).collect());
        self.push(out, Op::Silu(x), &[x])
    }

    /// Top-left `h × w` window of a feature map.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Var {
        let t = self.value(x);
        let (c, th, tw) = t.chw();
        assert!(h <= th && w <= tw);
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                let row = (ch * th + y) * tw;
                data.extend_from_slice(&t.data[row..row + w]);
            }
        }
        self.push(Tensor::new(vec![c, h, w], data), Op::Crop { x, h, w }, &[x])
    }

    pub fn clamp01(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape.clone(), t.data.iter().map(|v| v.clamp(0.0, 1.0)).collect());
        self.push(out, Op::Clamp01(x), &[x])
    }

    /// Windowed multi-head attention, queries from `x`, keys/values from `y`
    /// (pass the same var for self-attention). Projections are `[C, C]`
    /// (out × in) without bias; returns only the projected attention output.
    #[allow(clippy::too_many_arguments)]
    pub fn window_attention(&mut self, x: Var, y: Var, wq: Var, wk: Var, wv: Var, wo: Var, heads: usize, window: usize) -> Var {
        let spec = AttnSpec {
            x,
            y,
            wq,
            wk,
            wv,
            wo,
            heads,
            window,
        };
        let (out, probe) = attention_forward(self, &spec);
        self.probe.rows += probe.rows;
        self.probe.max_row_error = self.probe.max_row_error.max(probe.max_row_error);
        self.push(out, Op::Attention(spec), &[x, y, wq, wk, wv, wo])
    }

    /// Mean absolute difference to a constant target.
    pub fn l1_to(&mut self, x: Var, target: &Tensor) -> Var {
        let t = self.value(x);
        assert_eq!(t.shape, target.shape, "l1 shape mismatch");
        let v = t.data.iter().zip(&target.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / t.len() as f64;
        self.push(
            Tensor::scalar(v),
            Op::L1To {
                x,
                target: target.clone(),
            },
            &[x],
        )
    }

    /// Mean squared difference to a constant target.
    pub fn mse_to(&mut self, x: Var, target: &Tensor) -> Var {
        let t = self.value(x);
        assert_eq!(t.shape, target.shape, "mse shape mismatch");
        let v = t.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / t.len() as f64;
        self.push(
            Tensor::scalar(v),
            Op::MseTo {
                x,
                target: target.clone(),
            },
            &[x],
        )
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape, tb.shape, "mse shape mismatch");
        let v = ta.data.iter().zip(&tb.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / ta.len() as f64;
        self.push(Tensor::scalar(v), Op::Mse(a, b), &[a, b])
    }

    /// Per-pixel unit normalisation across channels: `x / sqrt(Σ_c x² + ε)`.
    pub fn channel_norm(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (c, h, w) = t.chw();
        let hw = h * w;
        let mut out = t.data.clone();
        for p in 0..hw {
            let n = norm_at(&t.data, c, hw, p);
            for ch in 0..c {
                out[ch * hw + p] /= n;
            }
        }
        self.push(Tensor::new(t.shape.clone(), out), Op::ChannelNorm(x), &[x])
    }

    /// `Σ kᵢ·xᵢ` over scalar vars.
    pub fn lincomb(&mut self, terms: &[(Var, f64)]) -> Var {
        let v = terms.iter().map(|&(x, k)| k * self.value(x).item()).sum();
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(Tensor::scalar(v), Op::LinComb(terms.to_vec()), &inputs)
    }

    /// Gradients of the scalar `root` with respect to every node that requires them.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let contributions = self.local_grads(&node.op, &node.value, &g);
            grads[i] = Some(g);
            for (v, t) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.data.iter_mut().zip(&t.data).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(t),
                }
            }
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, op: &Op, out: &Tensor, g: &Tensor) -> Vec<(Var, Tensor)> {
        match op {
            Op::Leaf => Vec::new(),
            Op::Conv2d { x, w, b, stride } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let mut r = Vec::new();
                if self.needs(*x) {
                    r.push((*x, conv2d_grad_input(g, tw, tx.chw(), *stride)));
                }
                if self.needs(*w) {
                    r.push((*w, conv2d_grad_weight(g, tx, tw.shape[0], *stride)));
                }
                if self.needs(*b) {
                    r.push((*b, bias_grad(g)));
                }
                r
            }
            Op::ConvT2 { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let mut r = Vec::new();
                if self.needs(*x) {
                    r.push((*x, convt_grad_input(g, tw, tx.chw())));
                }
                if self.needs(*w) {
                    r.push((*w, convt_grad_weight(g, tx, tw.shape[1])));
                }
                if self.needs(*b) {
                    r.push((*b, bias_grad(g)));
                }
                r
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Concat(parts) => {
                let mut off = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = self.value(p).len();
                        let t = Tensor::new(self.value(p).shape.clone(), g.data[off..off + n].to_vec());
                        off += n;
                        (p, t)
                    })
                    .collect()
            }
            Op::Silu(x) => {
                let tx = self.value(*x);
                let d = tx
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&v, &gv)| {
                        let s = sigmoid(v);
                        gv * (s + v * s * (1.0 - s))
                    })
                    .collect();
                vec![(*x, Tensor::new(tx.shape.clone(), d))]
            }
            Op::Crop { x, h, w } => {
                let tx = self.value(*x);
                let (c, th, tw) = tx.chw();
                let mut d = Tensor::zeros(&tx.shape);
                for ch in 0..c {
                    for y in 0..*h {
                        let src = (ch * h + y) * w;
                        let dst = (ch * th + y) * tw;
                        d.data[dst..dst + w].copy_from_slice(&g.data[src..src + w]);
                    }
                }
                vec![(*x, d)]
            }
            Op::Clamp01(x) => {
                let tx = self.value(*x);
                let d = tx
                    .data
                    .iter()
                    .zip(&g.data)
                    .map(|(&v, &gv)| if v > 0.0 && v < 1.0 { gv } else { 0.0 })
                    .collect();
                vec![(*x, Tensor::new(tx.shape.clone(), d))]
            }
            Op::Attention(spec) => attention_backward(self, spec, g),
            Op::L1To { x, target } => {
                let tx = self.value(*x);
                let k = g.item() / tx.len() as f64;
                let d = tx
                    .data
                    .iter()
                    .zip(&target.data)
                    .map(|(a, b)| k * sign(a - b))
                    .collect();
                vec![(*x, Tensor::new(tx.shape.clone(), d))]
            }
            Op::MseTo { x, target } => {
                let tx = self.value(*x);
                let k = 2.0 * g.item() / tx.len() as f64;
                let d = tx.data.iter().zip(&target.data).map(|(a, b)| k * (a - b)).collect();
                vec![(*x, Tensor::new(tx.shape.clone(), d))]
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let k = 2.0 * g.item() / ta.len() as f64;
                let da: Vec<f64> = ta.data.iter().zip(&tb.data).map(|(x, y)| k * (x - y)).collect();
                let db = da.iter().map(|v| -v).collect();
                vec![
                    (*a, Tensor::new(ta.shape.clone(), da)),
                    (*b, Tensor::new(tb.shape.clone(), db)),
                ]
            }
            Op::ChannelNorm(x) => {
                let tx = self.value(*x);
                let (c, h, w) = tx.chw();
                let hw = h * w;
                let mut d = vec![0.0; tx.len()];
                for p in 0..hw {
                    let n = norm_at(&tx.data, c, hw, p);
                    let dot: f64 = (0..c).map(|ch| g.data[ch * hw + p] * out.data[ch * hw + p]).sum();
                    for ch in 0..c {
                        let i = ch * hw + p;
                        d[i] = (g.data[i] - out.data[i] * dot) / n;
                    }
                }
                vec![(*x, Tensor::new(tx.shape.clone(), d))]
            }
            Op::LinComb(terms) => terms
                .iter()
                .map(|&(v, k)| (v, Tensor::scalar(k * g.item())))
                .collect(),
        }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a var; `None` when it does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn norm_at(data: &[f64], c: usize, hw: usize, p: usize) -> f64 {
    ((0..c).map(|ch| data[ch * hw + p].powi(2)).sum::<f64>() + NORM_EPS).sqrt()
}

fn out_size(n: usize, stride: usize) -> usize {
    (n - 1) / stride + 1
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Tensor {
    let (ci, h, wd) = x.chw();
    let co = w.shape[0];
    assert_eq!(w.shape, vec![co, ci, 3, 3], "conv weight shape {:?} vs input channels {ci}", w.shape);
    assert_eq!(b.shape, vec![co]);
    let (oh, ow) = (out_size(h, stride), out_size(wd, stride));
    let mut out = vec![0.0; co * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(o, plane)| {
        plane.iter_mut().for_each(|v| *v = b.data[o]);
        for i in 0..ci {
            let xin = &x.data[i * h * wd..(i + 1) * h * wd];
            for ky in 0..3 {
                for kx in 0..3 {
                    let k = w.data[((o * ci + i) * 3 + ky) * 3 + kx];
                    if k == 0.0 {
                        continue;
                    }
                    for y in 0..oh {
                        let iy = (y * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &xin[iy as usize * wd..(iy as usize + 1) * wd];
                        let orow = &mut plane[y * ow..(y + 1) * ow];
                        for (xo, ov) in orow.iter_mut().enumerate() {
                            let ix = (xo * stride + kx) as isize - 1;
                            if ix >= 0 && ix < wd as isize {
                                *ov += k * row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![co, oh, ow], out)
}

fn conv2d_grad_input(g: &Tensor, w: &Tensor, (ci, h, wd): (usize, usize, usize), stride: usize) -> Tensor {
    let (co, oh, ow) = g.chw();
    let mut d = vec![0.0; ci * h * wd];
    d.par_chunks_mut(h * wd).enumerate().for_each(|(i, plane)| {
        for o in 0..co {
            let gp = &g.data[o * oh * ow..(o + 1) * oh * ow];
            for ky in 0..3 {
                for kx in 0..3 {
                    let k = w.data[((o * ci + i) * 3 + ky) * 3 + kx];
                    for y in 0..oh {
                        let iy = (y * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for xo in 0..ow {
                            let ix = (xo * stride + kx) as isize - 1;
                            if ix >= 0 && ix < wd as isize {
                                plane[iy as usize * wd + ix as usize] += k * gp[y * ow + xo];
                            }
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![ci, h, wd], d)
}

fn conv2d_grad_weight(g: &Tensor, x: &Tensor, co: usize, stride: usize) -> Tensor {
    let (ci, h, wd) = x.chw();
    let (_, oh, ow) = g.chw();
    let mut d = vec![0.0; co * ci * 9];
    d.par_chunks_mut(ci * 9).enumerate().for_each(|(o, wo)| {
        let gp = &g.data[o * oh * ow..(o + 1) * oh * ow];
        for i in 0..ci {
            let xin = &x.data[i * h * wd..(i + 1) * h * wd];
            for ky in 0..3 {
                for kx in 0..3 {
                    let mut s = 0.0;
                    for y in 0..oh {
                        let iy = (y * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for xo in 0..ow {
                            let ix = (xo * stride + kx) as isize - 1;
                            if ix >= 0 && ix < wd as isize {
                                s += gp[y * ow + xo] * xin[iy as usize * wd + ix as usize];
                            }
                        }
                    }
                    wo[(i * 3 + ky) * 3 + kx] = s;
                }
            }
        }
    });
    Tensor::new(vec![co, ci, 3, 3], d)
}

fn bias_grad(g: &Tensor) -> Tensor {
    let (c, h, w) = g.chw();
    Tensor::new(vec![c], g.data.chunks(h * w).map(|p| p.iter().sum()).collect())
}

fn convt_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (ci, h, wd) = x.chw();
    let co = w.shape[1];
    assert_eq!(w.shape, vec![ci, co, 2, 2], "transposed conv weight shape {:?}", w.shape);
    let (oh, ow) = (2 * h, 2 * wd);
    let mut out = vec![0.0; co * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(o, plane)| {
        plane.iter_mut().for_each(|v| *v = b.data[o]);
        for i in 0..ci {
            let xin = &x.data[i * h * wd..(i + 1) * h * wd];
            for ky in 0..2 {
                for kx in 0..2 {
                    let k = w.data[((i * co + o) * 2 + ky) * 2 + kx];
                    for y in 0..h {
                        for xx in 0..wd {
                            plane[(2 * y + ky) * ow + 2 * xx + kx] += k * xin[y * wd + xx];
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![co, oh, ow], out)
}

fn convt_grad_input(g: &Tensor, w: &Tensor, (ci, h, wd): (usize, usize, usize)) -> Tensor {
    let (co, _, ow) = g.chw();
    let mut d = vec![0.0; ci * h * wd];
    d.par_chunks_mut(h * wd).enumerate().for_each(|(i, plane)| {
        for o in 0..co {
            let gp = &g.data[o * 4 * h * wd..(o + 1) * 4 * h * wd];
            for ky in 0..2 {
                for kx in 0..2 {
                    let k = w.data[((i * co + o) * 2 + ky) * 2 + kx];
                    for y in 0..h {
                        for xx in 0..wd {
                            plane[y * wd + xx] += k * gp[(2 * y + ky) * ow + 2 * xx + kx];
                        }
                    }
                }
            }
        }
    });
    Tensor::new(vec![ci, h, wd], d)
}

fn convt_grad_weight(g: &Tensor, x: &Tensor, co: usize) -> Tensor {
    let (ci, h, wd) = x.chw();
    let ow = 2 * wd;
    let mut d = vec![0.0; ci * co * 4];
    d.par_chunks_mut(co * 4).enumerate().for_each(|(i, wi)| {
        let xin = &x.data[i * h * wd..(i + 1) * h * wd];
        for o in 0..co {
            let gp = &g.data[o * 4 * h * wd..(o + 1) * 4 * h * wd];
            for ky in 0..2 {
                for kx in 0..2 {
                    let mut s = 0.0;
                    for y in 0..h {
                        for xx in 0..wd {
                            s += xin[y * wd + xx] * gp[(2 * y + ky) * ow + 2 * xx + kx];
                        }
                    }
                    wi[(o * 2 + ky) * 2 + kx] = s;
                }
            }
        }
    });
    Tensor::new(vec![ci, co, 2, 2], d)
}

/// Split a `[C, H, W]` map into `M×M` windows of `[M², C]` token rows, windows in raster order.
pub fn window_partition(t: &Tensor, m: usize) -> Vec<Vec<f64>> {
    let (c, h, w) = t.chw();
    assert!(h % m == 0 && w % m == 0, "window {m} must divide {h}x{w}");
    let mut out = Vec::with_capacity(h / m * (w / m));
    for wy in 0..h / m {
        for wx in 0..w / m {
            let mut tok = Vec::with_capacity(m * m * c);
            for dy in 0..m {
                for dx in 0..m {
                    let (y, x) = (wy * m + dy, wx * m + dx);
                    for ch in 0..c {
                        tok.push(t.data[(ch * h + y) * w + x]);
                    }
                }
            }
            out.push(tok);
        }
    }
    out
}

/// Inverse of [`window_partition`].
pub fn window_merge(windows: &[Vec<f64>], c: usize, h: usize, w: usize, m: usize) -> Tensor {
    let mut data = vec![0.0; c * h * w];
    let per_row = w / m;
    for (k, tok) in windows.iter().enumerate() {
        let (wy, wx) = (k / per_row, k % per_row);
        for dy in 0..m {
            for dx in 0..m {
                let (y, x) = (wy * m + dy, wx * m + dx);
                let n = dy * m + dx;
                for ch in 0..c {
                    data[(ch * h + y) * w + x] = tok[n * c + ch];
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], data)
}

/// `rows[n×k] · wᵀ` for `w: [o × k]`.
fn matmul_t(rows: &[f64], n: usize, k: usize, w: &[f64], o: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * o];
    for r in 0..n {
        let a = &rows[r * k..(r + 1) * k];
        for j in 0..o {
            let b = &w[j * k..(j + 1) * k];
            out[r * o + j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// Softmax attention of one head: returns (P, O) with P `[n×n]`, O `[n×dh]`.
/// `q`, `k`, `v` are `[n × C]` with the head occupying columns `off..off+dh`.
fn head_forward(q: &[f64], k: &[f64], v: &[f64], n: usize, c: usize, off: usize, dh: usize) -> (Vec<f64>, Vec<f64>) {
    let scale = 1.0 / (dh as f64).sqrt();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let qi = &q[i * c + off..i * c + off + dh];
        let row = &mut p[i * n..(i + 1) * n];
        for (j, s) in row.iter_mut().enumerate() {
            let kj = &k[j * c + off..j * c + off + dh];
            *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
        }
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for s in row.iter_mut() {
            *s = (*s - mx).exp();
            z += *s;
        }
        row.iter_mut().for_each(|s| *s /= z);
    }
    let mut o = vec![0.0; n * dh];
    for i in 0..n {
        for j in 0..n {
            let pij = p[i * n + j];
            let vj = &v[j * c + off..j * c + off + dh];
            for (od, vd) in o[i * dh..(i + 1) * dh].iter_mut().zip(vj) {
                *od += pij * vd;
            }
        }
    }
    (p, o)
}

/// Scaled dot-product attention of explicit row matrices (single head):
/// `softmax(Q Kᵀ / √d) V`.
pub fn attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    assert_eq!(k.len(), v.len(), "keys and values must have equal row counts");
    let scale = 1.0 / (q[0].len() as f64).sqrt();
    q.iter()
        .map(|qi| {
            let logits: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut row = vec![0.0; v[0].len()];
            for (p, vj) in e.iter().zip(v) {
                for (r, x) in row.iter_mut().zip(vj) {
                    *r += p / z * x;
                }
            }
            row
        })
        .collect()
}

struct WindowOut {
    out: Vec<f64>,
    rows: usize,
    err: f64,
}

fn attention_forward(g: &Graph, s: &AttnSpec) -> (Tensor, AttentionProbe) {
    let (tx, ty) = (g.value(s.x), g.value(s.y));
    assert_eq!(tx.shape, ty.shape, "attention query/key maps differ: {:?} vs {:?}", tx.shape, ty.shape);
    let (c, h, w) = tx.chw();
    assert!(c % s.heads == 0, "channels {c} not divisible by heads {}", s.heads);
    let (wq, wk, wv, wo) = (&g.value(s.wq).data, &g.value(s.wk).data, &g.value(s.wv).data, &g.value(s.wo).data);
    let xs = window_partition(tx, s.window);
    let ys = if s.x == s.y { xs.clone() } else { window_partition(ty, s.window) };
    let n = s.window * s.window;
    let dh = c / s.heads;
    let results: Vec<WindowOut> = xs
        .par_iter()
        .zip(ys.par_iter())
        .map(|(xw, yw)| {
            let q = matmul_t(xw, n, c, wq, c);
            let k = matmul_t(yw, n, c, wk, c);
            let v = matmul_t(yw, n, c, wv, c);
            let mut o = vec![0.0; n * c];
            let mut err: f64 = 0.0;
            for hd in 0..s.heads {
                let (p, oh) = head_forward(&q, &k, &v, n, c, hd * dh, dh);
                for i in 0..n {
                    let rs: f64 = p[i * n..(i + 1) * n].iter().sum();
                    err = err.max((rs - 1.0).abs());
                    o[i * c + hd * dh..i * c + (hd + 1) * dh].copy_from_slice(&oh[i * dh..(i + 1) * dh]);
                }
            }
            WindowOut {
                out: matmul_t(&o, n, c, wo, c),
                rows: n * s.heads,
                err,
            }
        })
        .collect();
    let probe = AttentionProbe {
        rows: results.iter().map(|r| r.rows).sum(),
        max_row_error: results.iter().map(|r| r.err).fold(0.0, f64::max),
    };
    let outs: Vec<Vec<f64>> = results.into_iter().map(|r| r.out).collect();
    (window_merge(&outs, c, h, w, s.window), probe)
}

struct WindowGrad {
    dx: Vec<f64>,
    dy: Vec<f64>,
    dwq: Vec<f64>,
    dwk: Vec<f64>,
    dwv: Vec<f64>,
    dwo: Vec<f64>,
}

/// `acc[o×k] += aᵀ b` for `a: [n×o]`, `b: [n×k]`.
fn add_outer(acc: &mut [f64], a: &[f64], b: &[f64], n: usize, o: usize, k: usize) {
    for r in 0..n {
        for i in 0..o {
            let ai = a[r * o + i];
            if ai == 0.0 {
                continue;
            }
            for (d, bj) in acc[i * k..(i + 1) * k].iter_mut().zip(&b[r * k..(r + 1) * k]) {
                *d += ai * bj;
            }
        }
    }
}

/// `a[n×o] · w[o×k]`.
fn matmul(a: &[f64], n: usize, o: usize, w: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * k];
    for r in 0..n {
        for i in 0..o {
            let ai = a[r * o + i];
            if ai == 0.0 {
                continue;
            }
            for (d, wj) in out[r * k..(r + 1) * k].iter_mut().zip(&w[i * k..(i + 1) * k]) {
                *d += ai * wj;
            }
        }
    }
    out
}

fn attention_backward(g: &Graph, s: &AttnSpec, grad: &Tensor) -> Vec<(Var, Tensor)> {
    let (tx, ty) = (g.value(s.x), g.value(s.y));
    let (c, h, w) = tx.chw();
    let (wq, wk, wv, wo) = (&g.value(s.wq).data, &g.value(s.wk).data, &g.value(s.wv).data, &g.value(s.wo).data);
    let xs = window_partition(tx, s.window);
    let ys = window_partition(ty, s.window);
    let gs = window_partition(grad, s.window);
    let n = s.window * s.window;
    let dh = c / s.heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let parts: Vec<WindowGrad> = (0..xs.len())
        .into_par_iter()
        .map(|k| {
            let (xw, yw, gw) = (&xs[k], &ys[k], &gs[k]);
            let q = matmul_t(xw, n, c, wq, c);
            let kk = matmul_t(yw, n, c, wk, c);
            let v = matmul_t(yw, n, c, wv, c);
            let mut o = vec![0.0; n * c];
            let mut probs = Vec::with_capacity(s.heads);
            for hd in 0..s.heads {
                let (p, oh) = head_forward(&q, &kk, &v, n, c, hd * dh, dh);
                for i in 0..n {
                    o[i * c + hd * dh..i * c + (hd + 1) * dh].copy_from_slice(&oh[i * dh..(i + 1) * dh]);
                }
                probs.push(p);
            }
            let mut dwo = vec![0.0; c * c];
            add_outer(&mut dwo, gw, &o, n, c, c);
            let d_o = matmul(gw, n, c, wo, c);

            let mut dq = vec![0.0; n * c];
            let mut dk = vec![0.0; n * c];
            let mut dv = vec![0.0; n * c];
            for (hd, p) in probs.iter().enumerate() {
                let off = hd * dh;
                for i in 0..n {
                    let doi = &d_o[i * c + off..i * c + off + dh];
                    // dP_ij = dO_i · V_j ; dS = P ⊙ (dP − Σ_j P dP)
                    let mut dp = vec![0.0; n];
                    for (j, dpj) in dp.iter_mut().enumerate() {
                        *dpj = doi.iter().zip(&v[j * c + off..j * c + off + dh]).map(|(a, b)| a * b).sum();
                    }
                    let prow = &p[i * n..(i + 1) * n];
                    let dot: f64 = prow.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        let pij = prow[j];
                        // dV_j += P_ij dO_i
                        for (t, d) in doi.iter().enumerate() {
                            dv[j * c + off + t] += pij * d;
                        }
                        let ds = pij * (dp[j] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for t in 0..dh {
                            dq[i * c + off + t] += ds * kk[j * c + off + t];
                            dk[j * c + off + t] += ds * q[i * c + off + t];
                        }
                    }
                }
            }
            let mut dwq = vec![0.0; c * c];
            let mut dwk = vec![0.0; c * c];
            let mut dwv = vec![0.0; c * c];
            add_outer(&mut dwq, &dq, xw, n, c, c);
            add_outer(&mut dwk, &dk, yw, n, c, c);
            add_outer(&mut dwv, &dv, yw, n, c, c);
            let dx = matmul(&dq, n, c, wq, c);
            let mut dy = matmul(&dk, n, c, wk, c);
            let dyv = matmul(&dv, n, c, wv, c);
            dy.iter_mut().zip(&dyv).for_each(|(a, b)| *a += b);
            WindowGrad {
                dx,
                dy,
                dwq,
                dwk,
                dwv,
                dwo,
            }
        })
        .collect();

    let mut sums = [vec![0.0; c * c], vec![0.0; c * c], vec![0.0; c * c], vec![0.0; c * c]];
    for p in &parts {
        for (acc, d) in sums.iter_mut().zip([&p.dwq, &p.dwk, &p.dwv, &p.dwo]) {
            acc.iter_mut().zip(d).for_each(|(a, b)| *a += b);
        }
    }
    let dx_windows: Vec<Vec<f64>> = parts.iter().map(|p| p.dx.clone()).collect();
    let dy_windows: Vec<Vec<f64>> = parts.iter().map(|p| p.dy.clone()).collect();
    let [dwq, dwk, dwv, dwo] = sums;
    let mat = |d: Vec<f64>| Tensor::new(vec![c, c], d);
    vec![
        (s.x, window_merge(&dx_windows, c, h, w, s.window)),
        (s.y, window_merge(&dy_windows, c, h, w, s.window)),
        (s.wq, mat(dwq)),
        (s.wk, mat(dwk)),
        (s.wv, mat(dwv)),
        (s.wo, mat(dwo)),
    ]
}
