//! Minimal reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only tape: every op evaluates eagerly, stores its
//! value, and records its inputs. Insertion order is a topological order, so
//! [`Graph::backward`] walks the tape in reverse. Gradients reach only nodes
//! that depend on a trainable leaf.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Norm;
use crate::par;
use crate::spectrum;
use crate::tensor::{Shape, Tensor};
use crate::wavelet::{self, BandQuad, Filter, FilterBank, ScaleMode};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const DEMOD_EPS: f64 = 1e-8;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    ScalarMul(Var, f64),
    Hadamard(Var, Var),
    AddBias(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        k: usize,
    },
    ModConv {
        x: Var,
        w: Var,
        s: Var,
        k: usize,
        demod: bool,
        // modulated (and demodulated) kernel used in the forward pass
        w_eff: Tensor,
        // per-output-channel demodulation factors, when enabled
        d: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    LeakyRelu(Var),
    Sigmoid(Var),
    Upsample(Var),
    AvgPool(Var),
    HaarInverse {
        bands: [Var; 4],
        bank: FilterBank,
    },
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
    },
    MeanSquare(Var),
    MeanAbs(Var),
    SubbandLoss {
        a: Var,
        b: Var,
        filter: Filter,
        level: usize,
        norm: Norm,
        mode: ScaleMode,
    },
    WaveletLossK {
        a: Var,
        b: Var,
        k: usize,
        mode: ScaleMode,
    },
    SpectralLoss {
        a: Var,
        grad: Tensor,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` if `v` received none.
    pub fn get_or_zeros(&self, v: Var, shape: Shape) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn mismatch(a: Shape, b: Shape) -> Error {
    Error::shape(a, b)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `1×1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor, trainable: bool) -> Var {
        if trainable {
            self.param(t)
        } else {
            self.constant(t)
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add(a, b), v, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub(a, b), v, &[a, b]))
    }

    pub fn scalar_mul(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).scale(k);
        self.push(Op::ScalarMul(a, k), v, &[a])
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Hadamard(a, b), v, &[a, b]))
    }

    /// `g ⊙ x + h`.
    pub fn scale_shift(&mut self, x: Var, g: Var, h: Var) -> Result<Var> {
        let gx = self.hadamard(g, x)?;
        self.add(gx, h)
    }

    /// Adds `b` (`C×1×1`) to every pixel of channel `c` of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if bs != Shape::new(xs.channels, 1, 1) {
            return Err(mismatch(Shape::new(xs.channels, 1, 1), bs));
        }
        let bias = self.value(b).data().to_vec();
        let plane = xs.plane();
        let mut v = self.value(x).clone();
        for (c, chunk) in v.data_mut().chunks_mut(plane).enumerate() {
            chunk.iter_mut().for_each(|p| *p += bias[c]);
        }
        Ok(self.push(Op::AddBias(x, b), v, &[x, b]))
    }

    /// Zero-padded stride-1 convolution. `w` is `C_out×C_in×k²`, `k ∈ {1, 3}`.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let k = kernel_side(self.shape(x), self.shape(w))?;
        let v = conv_forward(self.value(x), self.value(w), k);
        Ok(self.push(Op::Conv2d { x, w, k }, v, &[x, w]))
    }

    /// Style-modulated convolution: the kernel is scaled per input channel by
    /// `s` (`C_in×1×1`) and, if `demod`, each output filter is renormalized
    /// by `1/√(Σ w² + 1e-8)`.
    pub fn modulated_conv2d(&mut self, x: Var, w: Var, s: Var, demod: bool) -> Result<Var> {
        let k = kernel_side(self.shape(x), self.shape(w))?;
        let ws = self.shape(w);
        let ss = self.shape(s);
        if ss != Shape::new(ws.height, 1, 1) {
            return Err(mismatch(Shape::new(ws.height, 1, 1), ss));
        }
        let (w_eff, d) = modulate(self.value(w), self.value(s), demod);
        let v = conv_forward(self.value(x), &w_eff, k);
        Ok(self.push(
            Op::ModConv {
                x,
                w,
                s,
                k,
                demod,
                w_eff,
                d,
            },
            v,
            &[x, w, s],
        ))
    }

    /// `y = W·x + b` for `x: 1×1×D`, `W: O×1×D`, `b: O×1×1`; output `O×1×1`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.channels != 1 || xs.height != 1 {
            return Err(mismatch(Shape::new(1, 1, xs.width), xs));
        }
        if ws.height != 1 || ws.width != xs.width {
            return Err(mismatch(Shape::new(ws.channels, 1, xs.width), ws));
        }
        if bs != Shape::new(ws.channels, 1, 1) {
            return Err(mismatch(Shape::new(ws.channels, 1, 1), bs));
        }
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let d = xs.width;
        let out: Vec<f64> = (0..ws.channels)
            .map(|o| {
                let row = &wv.data()[o * d..(o + 1) * d];
                bv.data()[o] + row.iter().zip(xv.data()).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        let v = Tensor::from_vec(Shape::new(ws.channels, 1, 1), out)?;
        Ok(self.push(Op::Linear { x, w, b }, v, &[x, w, b]))
    }

    pub fn leaky_relu(&mut self, x: Var) -> Var {
        let v = self
            .value(x)
            .map(|t| if t >= 0.0 { t } else { LEAKY_SLOPE * t });
        self.push(Op::LeakyRelu(x), v, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(Op::Sigmoid(x), v, &[x])
    }

    /// Nearest-neighbour ×2 upsampling.
    pub fn nearest_upsample(&mut self, x: Var) -> Var {
        let v = upsample(self.value(x));
        self.push(Op::Upsample(x), v, &[x])
    }

    /// 2×2 mean pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        self.value(x).expect_divisible(2)?;
        let v = avg_pool(self.value(x));
        Ok(self.push(Op::AvgPool(x), v, &[x]))
    }

    pub fn haar_inverse(&mut self, bands: [Var; 4], bank: FilterBank) -> Result<Var> {
        let quad = BandQuad {
            ll: self.value(bands[0]).clone(),
            lh: self.value(bands[1]).clone(),
            hl: self.value(bands[2]).clone(),
            hh: self.value(bands[3]).clone(),
        };
        let v = wavelet::haar_inverse(&quad, &bank)?;
        Ok(self.push(Op::HaarInverse { bands, bank }, v, &bands))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_channels(&values)?;
        Ok(self.push(Op::Concat(parts.to_vec()), v, parts))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let v = self.value(x).slice_channels(start, count)?;
        Ok(self.push(Op::Slice { x, start }, v, &[x]))
    }

    pub fn mean_square(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum_squares() / t.len() as f64);
        self.push(Op::MeanSquare(x), v, &[x])
    }

    pub fn mean_abs(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let v = Tensor::scalar(t.data().iter().map(|v| v.abs()).sum::<f64>() / t.len() as f64);
        self.push(Op::MeanAbs(x), v, &[x])
    }

    /// `L_{p,f}` between `a` and `b` at decomposition level `level`.
    pub fn subband_loss(
        &mut self,
        a: Var,
        b: Var,
        filter: Filter,
        level: usize,
        norm: Norm,
        mode: ScaleMode,
    ) -> Result<Var> {
        let v =
            crate::metrics::subband_loss(self.value(a), self.value(b), filter, level, norm, mode)?;
        Ok(self.push(
            Op::SubbandLoss {
                a,
                b,
                filter,
                level,
                norm,
                mode,
            },
            Tensor::scalar(v),
            &[a, b],
        ))
    }

    /// Multi-level wavelet loss (levels `0..=k`, high bands, L2).
    pub fn wavelet_loss_k(&mut self, a: Var, b: Var, k: usize, mode: ScaleMode) -> Result<Var> {
        let v = crate::metrics::wavelet_loss_k(self.value(a), self.value(b), k, mode)?;
        Ok(self.push(
            Op::WaveletLossK { a, b, k, mode },
            Tensor::scalar(v),
            &[a, b],
        ))
    }

    /// Log reduced-spectrum distance of `a` to a fixed target log-spectrum.
    pub fn spectral_loss(&mut self, a: Var, target_log: &[f64]) -> Result<Var> {
        let (v, grad) = spectrum::spectral_loss_with_grad(self.value(a), target_log)?;
        Ok(self.push(Op::SpectralLoss { a, grad }, Tensor::scalar(v), &[a]))
    }

    /// Accumulates gradients of the scalar `root` into every node that
    /// depends on a trainable leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rs = self.shape(root);
        if rs != Shape::scalar() {
            return Err(Error::Argument(format!(
                "backward needs a scalar root, got {rs}"
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(Tensor::scalar(1.0));
        }
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let contributions = self.node_backward(node, &g)?;
            for (v, dg) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&dg)?,
                    slot @ None => *slot = Some(dg),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::ScalarMul(a, k) => vec![(*a, g.scale(*k))],
            Op::Hadamard(a, b) => {
                let mut r = Vec::new();
                if self.needs(*a) {
                    r.push((*a, g.zip_map(self.value(*b), |x, y| x * y)?));
                }
                if self.needs(*b) {
                    r.push((*b, g.zip_map(self.value(*a), |x, y| x * y)?));
                }
                r
            }
            Op::AddBias(x, b) => {
                let plane = g.shape().plane();
                let gb: Vec<f64> = g.data().chunks(plane).map(|c| c.iter().sum()).collect();
                vec![(*x, g.clone()), (*b, Tensor::from_vec(self.shape(*b), gb)?)]
            }
            Op::Conv2d { x, w, k } => {
                let mut r = Vec::new();
                if self.needs(*x) {
                    r.push((
                        *x,
                        conv_backward_input(g, self.value(*w), *k, self.shape(*x)),
                    ));
                }
                if self.needs(*w) {
                    r.push((
                        *w,
                        conv_backward_weight(g, self.value(*x), *k, self.shape(*w)),
                    ));
                }
                r
            }
            Op::ModConv {
                x,
                w,
                s,
                k,
                demod,
                w_eff,
                d,
            } => {
                let mut r = Vec::new();
                if self.needs(*x) {
                    r.push((*x, conv_backward_input(g, w_eff, *k, self.shape(*x))));
                }
                if self.needs(*w) || self.needs(*s) {
                    let g_eff = conv_backward_weight(g, self.value(*x), *k, w_eff.shape());
                    let (gw, gs) = modulate_backward(
                        &g_eff,
                        self.value(*w),
                        self.value(*s),
                        if *demod { Some(d.as_slice()) } else { None },
                    );
                    r.push((*w, gw));
                    r.push((*s, gs));
                }
                r
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let d = xv.width();
                let o = wv.channels();
                let mut gx = vec![0.0; d];
                let mut gw = vec![0.0; o * d];
                for oi in 0..o {
                    let go = g.data()[oi];
                    for di in 0..d {
                        gx[di] += go * wv.data()[oi * d + di];
                        gw[oi * d + di] = go * xv.data()[di];
                    }
                }
                vec![
                    (*x, Tensor::from_vec(xv.shape(), gx)?),
                    (*w, Tensor::from_vec(wv.shape(), gw)?),
                    (*b, g.clone()),
                ]
            }
            Op::LeakyRelu(x) => {
                let gx = g.zip_map(self.value(*x), |gv, xv| {
                    if xv >= 0.0 {
                        gv
                    } else {
                        LEAKY_SLOPE * gv
                    }
                })?;
                vec![(*x, gx)]
            }
            Op::Sigmoid(x) => {
                let gx = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y))?;
                vec![(*x, gx)]
            }
            Op::Upsample(x) => vec![(*x, upsample_backward(g))],
            Op::AvgPool(x) => vec![(*x, upsample(g).scale(0.25))],
            Op::HaarInverse { bands, bank } => {
                let q = wavelet::haar_inverse_adjoint(g, bank)?;
                vec![
                    (bands[0], q.ll),
                    (bands[1], q.lh),
                    (bands[2], q.hl),
                    (bands[3], q.hh),
                ]
            }
            Op::Concat(parts) => {
                let mut start = 0;
                let mut r = Vec::with_capacity(parts.len());
                for p in parts {
                    let c = self.shape(*p).channels;
                    r.push((*p, g.slice_channels(start, c)?));
                    start += c;
                }
                r
            }
            Op::Slice { x, start } => {
                let xs = self.shape(*x);
                let mut gx = Tensor::zeros(xs);
                let plane = xs.plane();
                gx.data_mut()[start * plane..start * plane + g.len()].copy_from_slice(g.data());
                vec![(*x, gx)]
            }
            Op::MeanSquare(x) => {
                let t = self.value(*x);
                let k = 2.0 * g.data()[0] / t.len() as f64;
                vec![(*x, t.scale(k))]
            }
            Op::MeanAbs(x) => {
                let t = self.value(*x);
                let k = g.data()[0] / t.len() as f64;
                vec![(*x, t.map(|v| k * sign(v)))]
            }
            Op::SubbandLoss {
                a,
                b,
                filter,
                level,
                norm,
                mode,
            } => {
                let diff = self.value(*a).sub(self.value(*b))?;
                let gd = subband_grad(&diff, *filter, *level, *norm, *mode)?.scale(g.data()[0]);
                vec![(*a, gd.clone()), (*b, gd.scale(-1.0))]
            }
            Op::WaveletLossK { a, b, k, mode } => {
                let diff = self.value(*a).sub(self.value(*b))?;
                let gd = wavelet_k_grad(&diff, *k, *mode)?.scale(g.data()[0]);
                vec![(*a, gd.clone()), (*b, gd.scale(-1.0))]
            }
            Op::SpectralLoss { a, grad } => vec![(*a, grad.scale(g.data()[0]))],
        };
        Ok(out)
    }
}

#[inline]
fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn kernel_side(xs: Shape, ws: Shape) -> Result<usize> {
    if ws.height != xs.channels {
        return Err(Error::shape(
            format!("kernel with {} input channels", xs.channels),
            ws,
        ));
    }
    match ws.width {
        1 => Ok(1),
        9 => Ok(3),
        n => Err(Error::Argument(format!(
            "kernel must be 1×1 or 3×3, got {n} taps"
        ))),
    }
}

// Valid output rows/cols for a tap offset `d` on an axis of length `n`.
#[inline]
fn tap_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d.max(0)).max(0) as usize;
    (lo, hi.max(lo))
}

fn conv_forward(x: &Tensor, w: &Tensor, k: usize) -> Tensor {
    let (cin, h, wd) = (x.channels(), x.height(), x.width());
    let cout = w.channels();
    let p = (k / 2) as isize;
    let planes = par::map_indexed(cout, |co| {
        let mut out = vec![0.0; h * wd];
        for ci in 0..cin {
            let src = x.channel(ci);
            for ky in 0..k {
                let dy = ky as isize - p;
                let (y0, y1) = tap_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - p;
                    let (x0, x1) = tap_range(wd, dx);
                    let wt = w.at(co, ci, ky * k + kx);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let orow = &mut out[y * wd + x0..y * wd + x1];
                        let s0 = (x0 as isize + dx) as usize;
                        let irow = &src[sy * wd + s0..sy * wd + s0 + (x1 - x0)];
                        for (o, i) in orow.iter_mut().zip(irow) {
                            *o += wt * i;
                        }
                    }
                }
            }
        }
        out
    });
    Tensor::from_vec(Shape::new(cout, h, wd), planes.concat()).expect("conv output size")
}

fn conv_backward_input(g: &Tensor, w: &Tensor, k: usize, xs: Shape) -> Tensor {
    let (h, wd) = (xs.height, xs.width);
    let cout = w.channels();
    let p = (k / 2) as isize;
    let planes = par::map_indexed(xs.channels, |ci| {
        let mut out = vec![0.0; h * wd];
        for co in 0..cout {
            let gp = g.channel(co);
            for ky in 0..k {
                let dy = ky as isize - p;
                let (y0, y1) = tap_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - p;
                    let (x0, x1) = tap_range(wd, dx);
                    let wt = w.at(co, ci, ky * k + kx);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s0 = (x0 as isize + dx) as usize;
                        let grow = &gp[y * wd + x0..y * wd + x1];
                        let orow = &mut out[sy * wd + s0..sy * wd + s0 + (x1 - x0)];
                        for (o, gv) in orow.iter_mut().zip(grow) {
                            *o += wt * gv;
                        }
                    }
                }
            }
        }
        out
    });
    Tensor::from_vec(xs, planes.concat()).expect("conv input grad size")
}

fn conv_backward_weight(g: &Tensor, x: &Tensor, k: usize, ws: Shape) -> Tensor {
    let (h, wd) = (x.height(), x.width());
    let cin = x.channels();
    let p = (k / 2) as isize;
    let planes = par::map_indexed(ws.channels, |co| {
        let gp = g.channel(co);
        let mut out = vec![0.0; cin * k * k];
        for ci in 0..cin {
            let src = x.channel(ci);
            for ky in 0..k {
                let dy = ky as isize - p;
                let (y0, y1) = tap_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - p;
                    let (x0, x1) = tap_range(wd, dx);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s0 = (x0 as isize + dx) as usize;
                        let grow = &gp[y * wd + x0..y * wd + x1];
                        let irow = &src[sy * wd + s0..sy * wd + s0 + (x1 - x0)];
                        acc += grow.iter().zip(irow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    out[ci * k * k + ky * k + kx] = acc;
                }
            }
        }
        out
    });
    Tensor::from_vec(ws, planes.concat()).expect("conv weight grad size")
}

fn modulate(w: &Tensor, s: &Tensor, demod: bool) -> (Tensor, Vec<f64>) {
    let (cout, cin, taps) = (w.channels(), w.height(), w.width());
    let mut we = w.clone();
    for o in 0..cout {
        for i in 0..cin {
            let si = s.data()[i];
            for t in 0..taps {
                let idx = we.index(o, i, t);
                we.data_mut()[idx] *= si;
            }
        }
    }
    let mut d = Vec::new();
    if demod {
        let per = cin * taps;
        for (o, chunk) in we.data_mut().chunks_mut(per).enumerate() {
            let ss: f64 = chunk.iter().map(|v| v * v).sum();
            let f = 1.0 / (ss + DEMOD_EPS).sqrt();
            chunk.iter_mut().for_each(|v| *v *= f);
            debug_assert_eq!(d.len(), o);
            d.push(f);
        }
    }
    (we, d)
}

// Given dL/dw_eff, returns (dL/dw, dL/ds).
fn modulate_backward(
    g_eff: &Tensor,
    w: &Tensor,
    s: &Tensor,
    d: Option<&[f64]>,
) -> (Tensor, Tensor) {
    let (cout, cin, taps) = (w.channels(), w.height(), w.width());
    let per = cin * taps;
    // w' = w·s (pre-demodulation)
    let mut gw_mod = g_eff.clone();
    if let Some(d) = d {
        for o in 0..cout {
            let f = d[o];
            let wrow = &w.data()[o * per..(o + 1) * per];
            let grow = &g_eff.data()[o * per..(o + 1) * per];
            let mut dot = 0.0;
            for i in 0..cin {
                for t in 0..taps {
                    dot += grow[i * taps + t] * wrow[i * taps + t] * s.data()[i];
                }
            }
            let out = &mut gw_mod.data_mut()[o * per..(o + 1) * per];
            for i in 0..cin {
                for t in 0..taps {
                    let wp = wrow[i * taps + t] * s.data()[i];
                    out[i * taps + t] = f * grow[i * taps + t] - f * f * f * wp * dot;
                }
            }
        }
    }
    let mut gw = gw_mod.clone();
    let mut gs = vec![0.0; cin];
    for o in 0..cout {
        for i in 0..cin {
            for t in 0..taps {
                let idx = o * per + i * taps + t;
                gw.data_mut()[idx] = gw_mod.data()[idx] * s.data()[i];
                gs[i] += gw_mod.data()[idx] * w.data()[idx];
            }
        }
    }
    (
        gw,
        Tensor::from_vec(s.shape(), gs).expect("style grad size"),
    )
}

fn upsample(x: &Tensor) -> Tensor {
    let s = x.shape();
    Tensor::from_fn(
        Shape::new(s.channels, 2 * s.height, 2 * s.width),
        |c, y, xx| x.at(c, y / 2, xx / 2),
    )
}

fn upsample_backward(g: &Tensor) -> Tensor {
    let s = g.shape();
    Tensor::from_fn(
        Shape::new(s.channels, s.height / 2, s.width / 2),
        |c, y, x| {
            g.at(c, 2 * y, 2 * x)
                + g.at(c, 2 * y, 2 * x + 1)
                + g.at(c, 2 * y + 1, 2 * x)
                + g.at(c, 2 * y + 1, 2 * x + 1)
        },
    )
}

fn avg_pool(x: &Tensor) -> Tensor {
    upsample_backward(x).scale(0.25)
}

// Gradient of subband_loss(diff) w.r.t. diff.
fn subband_grad(
    diff: &Tensor,
    filter: Filter,
    level: usize,
    norm: Norm,
    mode: ScaleMode,
) -> Result<Tensor> {
    let bank = FilterBank::new(mode);
    let mut lls = vec![diff.clone()];
    for _ in 0..level {
        let next = wavelet::haar_forward(lls.last().expect("nonempty"), &bank)?.ll;
        lls.push(next);
    }
    let quad = wavelet::haar_forward(lls.last().expect("nonempty"), &bank)?;
    let band = quad.band(filter);
    let n = band.len() as f64;
    let gband = match norm {
        Norm::L1 => band.map(|v| sign(v) / n),
        Norm::L2 => band.scale(2.0 / n),
    };
    let zeros = Tensor::zeros(band.shape());
    let mut gq = BandQuad {
        ll: zeros.clone(),
        lh: zeros.clone(),
        hl: zeros.clone(),
        hh: zeros,
    };
    match filter {
        Filter::LL => gq.ll = gband,
        Filter::LH => gq.lh = gband,
        Filter::HL => gq.hl = gband,
        Filter::HH => gq.hh = gband,
    }
    let mut g = wavelet::haar_forward_adjoint(&gq, &bank)?;
    for _ in 0..level {
        let z = Tensor::zeros(Shape::new(g.channels(), g.height(), g.width()));
        g = wavelet::haar_forward_adjoint(
            &BandQuad {
                ll: g,
                lh: z.clone(),
                hl: z.clone(),
                hh: z,
            },
            &bank,
        )?;
    }
    Ok(g)
}

// Gradient of wavelet_loss_k(diff) w.r.t. diff.
fn wavelet_k_grad(diff: &Tensor, k: usize, mode: ScaleMode) -> Result<Tensor> {
    let bank = FilterBank::new(mode);
    let pyr = wavelet::decompose(diff, k + 1, &bank)?;
    let mut g_ll = Tensor::zeros(pyr.approx.shape());
    for lvl in pyr.levels.iter().rev() {
        let n = lvl.lh.len() as f64;
        let quad = BandQuad {
            ll: g_ll,
            lh: lvl.lh.scale(2.0 / n),
            hl: lvl.hl.scale(2.0 / n),
            hh: lvl.hh.scale(2.0 / n),
        };
        g_ll = wavelet::haar_forward_adjoint(&quad, &bank)?;
    }
    Ok(g_ll)
}

/// Per-tensor first/second moment estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(shapes: impl IntoIterator<Item = Shape>) -> Self {
        let (m, v): (Vec<_>, Vec<_>) = shapes
            .into_iter()
            .map(|s| (Tensor::zeros(s), Tensor::zeros(s)))
            .unzip();
        AdamState { m, v, t: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every tensor in `params`.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Argument(format!(
            "adam: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        p.expect_shape(g.shape())?;
        m.expect_shape(g.shape())?;
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, pv) in p.data_mut().iter_mut().enumerate() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mh = m[j] / bc1;
            let vh = v[j] / bc2;
            *pv -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
