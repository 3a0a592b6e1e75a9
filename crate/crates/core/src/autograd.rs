//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every op appends one node holding its output value; inputs always precede
//! the node that consumes them, so reverse append order is a valid
//! topological order for the backward sweep. A tape is rebuilt for each
//! forward pass.
//!
//! Gradients of leaf nodes are accumulated into per-leaf buffers: calling
//! [`Tape::backward`] twice sums both contributions until
//! [`Tape::zero_grads`] resets them.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    /// tanh approximation
    Gelu,
    Sigmoid,
    Exp,
    Log,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
    pub groups: usize,
}

impl Conv2dOpts {
    pub fn new(stride: usize, pad: usize, groups: usize) -> Self {
        Self {
            stride: (stride, stride),
            pad: (pad, pad),
            groups,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    Add {
        a: Var,
        b: Var,
        b_strides: Option<Vec<usize>>,
    },
    Mul {
        a: Var,
        b: Var,
        b_strides: Option<Vec<usize>>,
    },
    Affine {
        a: Var,
        scale: f32,
    },
    Unary {
        a: Var,
        kind: Unary,
    },
    Softmax {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        rstd: Vec<f32>,
        /// statistics are constants (inference mode)
        frozen: bool,
    },
    Resize {
        x: Var,
        in_hw: (usize, usize),
    },
    Reshape {
        a: Var,
    },
    Transpose {
        a: Var,
        d0: usize,
        d1: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Sum {
        a: Var,
        scale: f32,
    },
    SiLog {
        pred: Var,
        /// ∂L/∂pred, filled at forward time (closed form).
        dpred: Vec<f32>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// ReLU activation patterns, recorded at one point and replayed at nearby
/// points so finite differences see a function without kinks.
#[derive(Default)]
enum ReluMasks {
    #[default]
    Off,
    Record(Vec<Vec<bool>>),
    Replay(Vec<Vec<bool>>, usize),
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f32>>>,
    relu_masks: ReluMasks,
}

/// Stride of `b` along each axis of `a` when `b` broadcasts into `a`
/// (right-aligned, every `b` dim equal to the `a` dim or 1).
fn broadcast_strides(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if b.len() > a.len() {
        return None;
    }
    let offset = a.len() - b.len();
    let mut strides = vec![0usize; a.len()];
    let mut s = 1;
    for i in (0..b.len()).rev() {
        let (ad, bd) = (a[offset + i], b[i]);
        if bd == ad {
            strides[offset + i] = if bd == 1 { 0 } else { s };
        } else if bd != 1 {
            return None;
        }
        s *= bd;
    }
    Some(strides)
}

/// Calls `f(out_index, b_index)` for every element of `a_shape`.
fn for_each_broadcast(a_shape: &[usize], b_strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = a_shape.len();
    let last = a_shape[rank - 1];
    let last_stride = b_strides[rank - 1];
    let mut counter = vec![0usize; rank];
    let mut b_base = 0usize;
    let total = numel(a_shape);
    let mut out = 0usize;
    while out < total {
        let mut bi = b_base;
        for _ in 0..last {
            f(out, bi);
            out += 1;
            bi += last_stride;
        }
        // advance the odometer over the leading axes
        let mut ax = rank - 1;
        while ax > 0 {
            ax -= 1;
            counter[ax] += 1;
            b_base += b_strides[ax];
            if counter[ax] < a_shape[ax] {
                break;
            }
            b_base -= b_strides[ax] * counter[ax];
            counter[ax] = 0;
        }
    }
}

fn swap_axes(data: &[f32], shape: &[usize], d0: usize, d1: usize) -> (Vec<f32>, Vec<usize>) {
    let (d0, d1) = (d0.min(d1), d0.max(d1));
    let outer: usize = shape[..d0].iter().product();
    let s0 = shape[d0];
    let mid: usize = shape[d0 + 1..d1].iter().product();
    let s1 = shape[d1];
    let inner: usize = shape[d1 + 1..].iter().product();
    let mut out = vec![0.0f32; data.len()];
    for o in 0..outer {
        for i in 0..s0 {
            for m in 0..mid {
                for j in 0..s1 {
                    let src = ((((o * s0 + i) * mid + m) * s1) + j) * inner;
                    let dst = ((((o * s1 + j) * mid + m) * s0) + i) * inner;
                    out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
                }
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape.swap(d0, d1);
    (out, new_shape)
}

// Pointwise and reduction kernels evaluate in f64 and round once, so each
// f32 output is within half an ulp.

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())) as f32
}

fn gelu_grad(x: f32) -> f32 {
    let x = x as f64;
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du) as f32
}

/// Kept strictly inside (0, 1) so bounded outputs such as depth never
/// touch their endpoints, even when the logit saturates.
const SIGMOID_FLOOR: f32 = f32::EPSILON;

fn sigmoid(x: f32) -> f32 {
    let x = x as f64;
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    (y as f32).clamp(SIGMOID_FLOOR, 1.0 - SIGMOID_FLOOR)
}

fn add_into(dst: &mut Option<Vec<f32>>, src: &[f32]) {
    match dst {
        Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
        None => *dst = Some(src.to_vec()),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    // ---------------------------------------------------------------- ops

    /// Batched matrix product `[…,M,K] × […,K,N]`; leading dims must match exactly.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let r = sa.len();
        if r < 2 || sb.len() != r || sa[..r - 2] != sb[..r - 2] || sa[r - 1] != sb[r - 2] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[r - 2], sa[r - 1], sb[r - 1]);
        let batch: usize = sa[..r - 2].iter().product();
        let mut out = vec![0.0f32; batch * m * n];
        {
            let (da, db) = (self.value(a).data(), self.value(b).data());
            for bi in 0..batch {
                kernels::gemm_nn(
                    m,
                    k,
                    n,
                    &da[bi * m * k..(bi + 1) * m * k],
                    &db[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let mut shape = sa.clone();
        shape[r - 1] = n;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b, batch, m, k, n }, rg))
    }

    /// 2-D cross-correlation over `[N,Cin,H,W]` with weights `[Cout,Cin/groups,Kh,Kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, opts: Conv2dOpts) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(Error::dim("conv2d", &sx, &sw));
        }
        let groups = opts.groups.max(1);
        let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, cin_g, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(Error::dim("conv2d", &sx, &sw));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::dim("conv2d bias", self.shape(b), &[cout]));
            }
        }
        let (sh, sww) = opts.stride;
        if sh == 0 || sww == 0 {
            return Err(Error::Geometry("conv2d stride must be positive".into()));
        }
        let span_h = (h + 2 * opts.pad.0) as isize - kh as isize;
        let span_w = (wd + 2 * opts.pad.1) as isize - kw as isize;
        if span_h < 0 || span_w < 0 {
            return Err(Error::Geometry(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {h}x{wd} (pad {:?})",
                opts.pad
            )));
        }
        let geom = ConvGeom {
            batch: n,
            in_c: cin,
            in_h: h,
            in_w: wd,
            out_c: cout,
            k_h: kh,
            k_w: kw,
            stride: opts.stride,
            pad: opts.pad,
            groups,
            out_h: span_h as usize / sh + 1,
            out_w: span_w as usize / sww + 1,
        };
        let out = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            bias.map(|b| self.value(b).data()),
        );
        let mut deps = vec![x, w];
        deps.extend(bias);
        let rg = self.needs(&deps);
        Ok(self.push(
            Tensor::new(&[n, cout, geom.out_h, geom.out_w], out)?,
            Op::Conv2d { x, w, bias, geom },
            rg,
        ))
    }

    fn bcast(&self, op: &'static str, a: Var, b: Var) -> Result<Option<Vec<usize>>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(None);
        }
        broadcast_strides(sa, sb)
            .map(Some)
            .ok_or_else(|| Error::dim(op, sa, sb))
    }

    /// `a + b`, where `b` either matches `a` or broadcasts into it.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let b_strides = self.bcast("add", a, b)?;
        let mut out = self.value(a).clone();
        let bd = self.value(b).data();
        match &b_strides {
            None => out.data_mut().iter_mut().zip(bd).for_each(|(o, v)| *o += v),
            Some(st) => {
                let shape = out.shape().to_vec();
                let od = out.data_mut();
                for_each_broadcast(&shape, st, |i, j| od[i] += bd[j]);
            }
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add { a, b, b_strides }, rg))
    }

    /// `a ⊙ b`, where `b` either matches `a` or broadcasts into it.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let b_strides = self.bcast("mul", a, b)?;
        let mut out = self.value(a).clone();
        let bd = self.value(b).data();
        match &b_strides {
            None => out.data_mut().iter_mut().zip(bd).for_each(|(o, v)| *o *= v),
            Some(st) => {
                let shape = out.shape().to_vec();
                let od = out.data_mut();
                for_each_broadcast(&shape, st, |i, j| od[i] *= bd[j]);
            }
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul { a, b, b_strides }, rg))
    }

    /// `a · scale` for a constant scale.
    pub fn scale(&mut self, a: Var, scale: f32) -> Var {
        let out = self.value(a).map(|v| v * scale);
        let rg = self.needs(&[a]);
        self.push(out, Op::Affine { a, scale }, rg)
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Result<Var> {
        let x = self.value(a);
        if kind == Unary::Log {
            if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                return Err(Error::Domain(format!("log of non-positive value {bad}")));
            }
        }
        let out = match kind {
            Unary::Relu => x.map(|v| v.max(0.0)),
            Unary::Gelu => x.map(gelu),
            Unary::Sigmoid => x.map(sigmoid),
            Unary::Exp => x.map(f32::exp),
            Unary::Log => x.map(f32::ln),
        };
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Unary { a, kind }, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let replayed = match &mut self.relu_masks {
            ReluMasks::Off => None,
            ReluMasks::Record(masks) => {
                masks.push(self.nodes[a.0].value.data().iter().map(|&v| v > 0.0).collect());
                None
            }
            ReluMasks::Replay(masks, next) => {
                *next += 1;
                Some(masks[*next - 1].iter().map(|&on| if on { 1.0 } else { 0.0 }).collect())
            }
        };
        match replayed {
            Some(mask) => {
                let m = Tensor::new(self.shape(a), mask).expect("replayed mask matches the recorded shape");
                let mv = self.constant(m);
                self.mul(a, mv).expect("same shape")
            }
            None => self.unary(a, Unary::Relu).expect("relu is total"),
        }
    }

    /// Starts recording the activation pattern of every later `relu` call.
    pub fn record_relu_masks(&mut self) {
        self.relu_masks = ReluMasks::Record(Vec::new());
    }

    /// The patterns recorded so far, in call order.
    pub fn take_relu_masks(&mut self) -> Vec<Vec<bool>> {
        match std::mem::take(&mut self.relu_masks) {
            ReluMasks::Record(m) | ReluMasks::Replay(m, _) => m,
            ReluMasks::Off => Vec::new(),
        }
    }

    /// Makes the `i`-th later `relu` call apply recorded pattern `i` as a
    /// fixed 0/1 mask instead of thresholding its input.
    pub fn replay_relu_masks(&mut self, masks: Vec<Vec<bool>>) {
        self.relu_masks = ReluMasks::Replay(masks, 0);
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu).expect("gelu is total")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid).expect("sigmoid is total")
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a).data();
        let mut out = vec![0.0f32; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| x[idx(j)]).fold(f32::NEG_INFINITY, f32::max) as f64;
                let mut sum = 0.0f64;
                for j in 0..len {
                    sum += (x[idx(j)] as f64 - mx).exp();
                }
                for j in 0..len {
                    out[idx(j)] = ((x[idx(j)] as f64 - mx).exp() / sum) as f32;
                }
            }
        }
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax { a, outer, len, inner }, rg))
    }

    /// Normalizes over the last dim, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::dim("layer_norm", &shape, self.shape(p)));
            }
        }
        let rows = numel(&shape) / c;
        let xd = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0f32; xd.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * c..(r + 1) * c];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + eps as f64).sqrt();
            for j in 0..c {
                out[r * c + j] = ((row[j] as f64 - mean) * rstd * g[j] as f64 + b[j] as f64) as f32;
            }
            means.push(mean as f32);
            rstds.push(rstd as f32);
        }
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            rg,
        ))
    }

    fn channel_layout(&self, op: &'static str, x: Var, params: &[Var]) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        if shape.len() < 2 {
            return Err(Error::dim(op, shape, &[]));
        }
        let c = shape[1];
        for &p in params {
            if self.shape(p) != [c] {
                return Err(Error::dim(op, shape, self.shape(p)));
            }
        }
        Ok((shape[0], c, shape[2..].iter().product()))
    }

    /// Batch normalization with batch statistics over `[N, C, …]`.
    /// Returns the output and the (biased) per-channel batch mean and variance.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<(Var, Vec<f32>, Vec<f32>)> {
        let (n, c, sp) = self.channel_layout("batch_norm", x, &[gamma, beta])?;
        let xd = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let count = (n * sp) as f64;
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for ch in 0..c {
            let mut s = 0.0f64;
            for ni in 0..n {
                s += xd[(ni * c + ch) * sp..][..sp].iter().map(|&v| v as f64).sum::<f64>();
            }
            let m = s / count;
            let mut v = 0.0f64;
            for ni in 0..n {
                v += xd[(ni * c + ch) * sp..][..sp]
                    .iter()
                    .map(|&x| (x as f64 - m).powi(2))
                    .sum::<f64>();
            }
            mean[ch] = m;
            var[ch] = v / count;
        }
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps as f64).sqrt()).collect();
        let mut out = vec![0.0f32; xd.len()];
        for ni in 0..n {
            for ch in 0..c {
                let base = (ni * c + ch) * sp;
                let (m, r, gg, bb) = (mean[ch], rstd[ch], g[ch] as f64, b[ch] as f64);
                for i in base..base + sp {
                    out[i] = ((xd[i] as f64 - m) * r * gg + bb) as f32;
                }
            }
        }
        let mean: Vec<f32> = mean.iter().map(|&v| v as f32).collect();
        let var: Vec<f32> = var.iter().map(|&v| v as f32).collect();
        let rstd: Vec<f32> = rstd.iter().map(|&v| v as f32).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs(&[x, gamma, beta]);
        let v = self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                rstd,
                frozen: false,
            },
            rg,
        );
        Ok((v, mean, var))
    }

    /// Batch normalization with fixed statistics (inference mode).
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f32],
        running_var: &[f32],
        eps: f32,
    ) -> Result<Var> {
        let (n, c, sp) = self.channel_layout("batch_norm", x, &[gamma, beta])?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim("batch_norm stats", &[c], &[running_mean.len()]));
        }
        let xd = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rstd: Vec<f64> = running_var
            .iter()
            .map(|&v| 1.0 / (v as f64 + eps as f64).sqrt())
            .collect();
        let mut out = vec![0.0f32; xd.len()];
        for ni in 0..n {
            for ch in 0..c {
                let base = (ni * c + ch) * sp;
                let (m, r, gg, bb) = (running_mean[ch] as f64, rstd[ch], g[ch] as f64, b[ch] as f64);
                for i in base..base + sp {
                    out[i] = ((xd[i] as f64 - m) * r * gg + bb) as f32;
                }
            }
        }
        let rstd: Vec<f32> = rstd.iter().map(|&v| v as f32).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                rstd,
                frozen: true,
            },
            rg,
        ))
    }

    /// Half-pixel bilinear resize of `[N, C, H, W]` to `[N, C, out_h, out_w]`.
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::dim("resize_bilinear", &shape, &[out_h, out_w]));
        }
        if out_h == 0 || out_w == 0 {
            return Err(Error::Geometry("resize to zero size".into()));
        }
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let out = kernels::bilinear_forward(n * c, (h, w), (out_h, out_w), self.value(x).data());
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(&[n, c, out_h, out_w], out)?,
            Op::Resize { x, in_hw: (h, w) },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Reshape { a }, rg))
    }

    /// Swaps two axes (materializing the permuted buffer).
    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if d0 >= shape.len() || d1 >= shape.len() || d0 == d1 {
            return Err(Error::Contract(format!(
                "transpose axes ({d0},{d1}) invalid for {shape:?}"
            )));
        }
        let (data, new_shape) = swap_axes(self.value(a).data(), &shape, d0, d1);
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new(&new_shape, data)?, Op::Transpose { a, d0, d1 }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Contract(format!("concat axis {axis} for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[..axis] != first[..axis] || s[axis + 1..] != first[axis + 1..] {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = self.needs(parts);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, 1)
    }

    /// Range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Contract(format!(
                "slice [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let rg = self.needs(&[a]);
        Ok(self.push(Tensor::new(&new_shape, out)?, Op::Slice { a, axis, start }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        let rg = self.needs(&[a]);
        self.push(Tensor::scalar(s as f32), Op::Sum { a, scale: 1.0 }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        let rg = self.needs(&[a]);
        self.push(
            Tensor::scalar((s / n as f64) as f32),
            Op::Sum {
                a,
                scale: 1.0 / n as f32,
            },
            rg,
        )
    }

    /// Scale-invariant log loss over the pixels where `valid` is set:
    /// `(1/n)Σd² − λ(1/n²)(Σd)²` with `d = ln gt − ln pred`.
    pub fn silog(&mut self, pred: Var, gt: &[f32], valid: &[bool], lambda: f32) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != gt.len() || p.len() != valid.len() {
            return Err(Error::dim("silog", self.shape(pred), &[gt.len()]));
        }
        let n = valid.iter().filter(|&&v| v).count();
        if n == 0 {
            return Err(Error::Contract("silog over zero valid pixels".into()));
        }
        let mut d = vec![0.0f64; p.len()];
        for i in 0..p.len() {
            if !valid[i] {
                continue;
            }
            if gt[i] <= 0.0 || p[i] <= 0.0 || !gt[i].is_finite() {
                return Err(Error::Domain(format!(
                    "silog needs positive depths, got pred {} gt {} at {i}",
                    p[i], gt[i]
                )));
            }
            d[i] = (gt[i] as f64).ln() - (p[i] as f64).ln();
        }
        let nf = n as f64;
        let lam = lambda as f64;
        let sum_d: f64 = d.iter().sum();
        let sum_d2: f64 = d.iter().map(|v| v * v).sum();
        let loss = sum_d2 / nf - lam * sum_d * sum_d / (nf * nf);
        // ∂L/∂pred_i = −(2d_i/n − 2λΣd/n²) / pred_i
        let dpred: Vec<f32> = (0..p.len())
            .map(|i| {
                if valid[i] {
                    (-(2.0 * d[i] / nf - 2.0 * lam * sum_d / (nf * nf)) / p[i] as f64) as f32
                } else {
                    0.0
                }
            })
            .collect();
        let rg = self.needs(&[pred]);
        Ok(self.push(Tensor::scalar(loss as f32), Op::SiLog { pred, dpred }, rg))
    }

    // ------------------------------------------------------------ backward

    /// Back-propagates from a single-element `loss`, accumulating into leaf
    /// gradients. Each node is visited once, in reverse append order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                add_into(&mut self.leaf_grads[idx], &g);
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[idx];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, contrib: Vec<f32>| match &mut grads[v.0] {
            Some(d) => d.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, batch, m, k, n } => {
                let (da, db) = (self.value(a).data(), self.value(b).data());
                if needs(a) {
                    let mut ga = vec![0.0f32; batch * m * k];
                    for bi in 0..batch {
                        kernels::gemm_nt(
                            m,
                            n,
                            k,
                            &g[bi * m * n..(bi + 1) * m * n],
                            &db[bi * k * n..(bi + 1) * k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                    acc(a, ga);
                }
                if needs(b) {
                    let mut gb = vec![0.0f32; batch * k * n];
                    for bi in 0..batch {
                        kernels::gemm_tn(
                            k,
                            m,
                            n,
                            &da[bi * m * k..(bi + 1) * m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                    acc(b, gb);
                }
            }
            &Op::Conv2d { x, w, bias, ref geom } => {
                let mut gx = needs(x).then(|| vec![0.0f32; self.value(x).numel()]);
                let mut gw = needs(w).then(|| vec![0.0f32; self.value(w).numel()]);
                let mut gb = bias.filter(|&b| needs(b)).map(|b| vec![0.0f32; self.value(b).numel()]);
                kernels::conv2d_backward(
                    geom,
                    self.value(x).data(),
                    self.value(w).data(),
                    g,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(v) = gx {
                    acc(x, v);
                }
                if let Some(v) = gw {
                    acc(w, v);
                }
                if let (Some(b), Some(v)) = (bias, gb) {
                    acc(b, v);
                }
            }
            Op::Add { a, b, b_strides } => {
                if needs(*a) {
                    acc(*a, g.to_vec());
                }
                if needs(*b) {
                    match b_strides {
                        None => acc(*b, g.to_vec()),
                        Some(st) => {
                            let mut gb = vec![0.0f32; self.value(*b).numel()];
                            for_each_broadcast(self.shape(*a), st, |i, j| gb[j] += g[i]);
                            acc(*b, gb);
                        }
                    }
                }
            }
            Op::Mul { a, b, b_strides } => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                match b_strides {
                    None => {
                        if needs(*a) {
                            acc(*a, g.iter().zip(db).map(|(g, v)| g * v).collect());
                        }
                        if needs(*b) {
                            acc(*b, g.iter().zip(da).map(|(g, v)| g * v).collect());
                        }
                    }
                    Some(st) => {
                        let shape = self.shape(*a);
                        if needs(*a) {
                            let mut ga = vec![0.0f32; da.len()];
                            for_each_broadcast(shape, st, |i, j| ga[i] = g[i] * db[j]);
                            acc(*a, ga);
                        }
                        if needs(*b) {
                            let mut gb = vec![0.0f32; db.len()];
                            for_each_broadcast(shape, st, |i, j| gb[j] += g[i] * da[i]);
                            acc(*b, gb);
                        }
                    }
                }
            }
            &Op::Affine { a, scale } => acc(a, g.iter().map(|v| v * scale).collect()),
            &Op::Unary { a, kind } => {
                let x = self.value(a).data();
                let y = node.value.data();
                let ga: Vec<f32> = match kind {
                    Unary::Relu => g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                    Unary::Gelu => g.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect(),
                    Unary::Sigmoid => g.iter().zip(y).map(|(g, &y)| g * y * (1.0 - y)).collect(),
                    Unary::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                    Unary::Log => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                };
                acc(a, ga);
            }
            &Op::Softmax { a, outer, len, inner } => {
                let y = node.value.data();
                let mut ga = vec![0.0f32; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dotp: f32 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..len {
                            ga[idx(j)] = y[idx(j)] * (g[idx(j)] - dotp);
                        }
                    }
                }
                acc(a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xd = self.value(*x).data();
                let gd = self.value(*gamma).data();
                let c = gd.len();
                let rows = xd.len() / c;
                let mut gx = vec![0.0f32; xd.len()];
                let mut ggamma = vec![0.0f32; c];
                let mut gbeta = vec![0.0f32; c];
                let mut xhat = vec![0.0f32; c];
                let mut dxhat = vec![0.0f32; c];
                for r in 0..rows {
                    let (m, rs) = (mean[r], rstd[r]);
                    for j in 0..c {
                        xhat[j] = (xd[r * c + j] - m) * rs;
                        dxhat[j] = g[r * c + j] * gd[j];
                        ggamma[j] += g[r * c + j] * xhat[j];
                        gbeta[j] += g[r * c + j];
                    }
                    let mean_d: f32 = dxhat.iter().sum::<f32>() / c as f32;
                    let mean_dx: f32 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f32>() / c as f32;
                    for j in 0..c {
                        gx[r * c + j] = rs * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                }
                if needs(*x) {
                    acc(*x, gx);
                }
                if needs(*gamma) {
                    acc(*gamma, ggamma);
                }
                if needs(*beta) {
                    acc(*beta, gbeta);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
                frozen,
            } => {
                let frozen = *frozen;
                let shape = self.shape(*x);
                let (n, c) = (shape[0], shape[1]);
                let sp: usize = shape[2..].iter().product();
                let xd = self.value(*x).data();
                let gd = self.value(*gamma).data();
                let center = |ch: usize| mean[ch];
                let count = (n * sp) as f32;
                let mut ggamma = vec![0.0f32; c];
                let mut gbeta = vec![0.0f32; c];
                for ni in 0..n {
                    for ch in 0..c {
                        let base = (ni * c + ch) * sp;
                        for i in base..base + sp {
                            ggamma[ch] += g[i] * (xd[i] - center(ch)) * rstd[ch];
                            gbeta[ch] += g[i];
                        }
                    }
                }
                if needs(*x) {
                    let mut gx = vec![0.0f32; xd.len()];
                    for ch in 0..c {
                        let (r, gg) = (rstd[ch], gd[ch]);
                        let (mean_d, mean_dx) = if frozen {
                            (0.0, 0.0)
                        } else {
                            // gbeta = Σ g, ggamma = Σ g·x̂
                            (gbeta[ch] * gg / count, ggamma[ch] * gg / count)
                        };
                        for ni in 0..n {
                            let base = (ni * c + ch) * sp;
                            for i in base..base + sp {
                                let xhat = (xd[i] - center(ch)) * r;
                                gx[i] = r * (g[i] * gg - mean_d - xhat * mean_dx);
                            }
                        }
                    }
                    acc(*x, gx);
                }
                if needs(*gamma) {
                    acc(*gamma, ggamma);
                }
                if needs(*beta) {
                    acc(*beta, gbeta);
                }
            }
            &Op::Resize { x, in_hw } => {
                let s = node.value.shape();
                let mut gx = vec![0.0f32; self.value(x).numel()];
                kernels::bilinear_backward(s[0] * s[1], in_hw, (s[2], s[3]), g, &mut gx);
                acc(x, gx);
            }
            &Op::Reshape { a } => acc(a, g.to_vec()),
            &Op::Transpose { a, d0, d1 } => {
                let (ga, _) = swap_axes(g, node.value.shape(), d0, d1);
                acc(a, ga);
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    if needs(p) {
                        let mut gp = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            gp.extend_from_slice(&g[o * total + offset..o * total + offset + len]);
                        }
                        acc(p, gp);
                    }
                    offset += len;
                }
            }
            &Op::Slice { a, axis, start } => {
                let src = self.shape(a);
                let outer: usize = src[..axis].iter().product();
                let inner: usize = src[axis + 1..].iter().product();
                let len = node.value.shape()[axis] * inner;
                let mut ga = vec![0.0f32; self.value(a).numel()];
                for o in 0..outer {
                    let base = (o * src[axis] + start) * inner;
                    ga[base..base + len].copy_from_slice(&g[o * len..(o + 1) * len]);
                }
                acc(a, ga);
            }
            &Op::Sum { a, scale } => acc(a, vec![g[0] * scale; self.value(a).numel()]),
            Op::SiLog { pred, dpred } => acc(*pred, dpred.iter().map(|d| d * g[0]).collect()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let i = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let p = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(p).data(), &[5.0, 6.0, 7.0, 8.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let p = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(p).data(), &[11.0]);

        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let r = tape.constant(Tensor::from_fn(&[3, 4], |i| i as f32 - 5.0));
        let p = tape.matmul(z, r).unwrap();
        assert_eq!(tape.value(p), &Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[4, 2]));
        match tape.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 2]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn conv2d_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.conv2d(x, w, None, Conv2dOpts::new(1, 0, 1)).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[5.0]);

        let xr = tape.constant(Tensor::from_fn(&[2, 1, 3, 3], |i| i as f32 * 0.3 - 1.0));
        let one = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(xr, one, None, Conv2dOpts::new(1, 0, 1)).unwrap();
        assert_eq!(tape.value(y), tape.value(xr));

        let wz = tape.constant(Tensor::zeros(&[2, 1, 3, 3]));
        let bias = tape.constant(t(&[2], &[0.5, -2.0]));
        let y = tape.conv2d(xr, wz, Some(bias), Conv2dOpts::new(1, 1, 1)).unwrap();
        let yd = tape.value(y).data();
        assert!(yd[..9].iter().all(|&v| v == 0.5));
        assert!(yd[9..18].iter().all(|&v| v == -2.0));
    }

    #[test]
    fn conv2d_rejects_empty_output() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let w = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(
            tape.conv2d(x, w, None, Conv2dOpts::new(1, 0, 1)),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn depthwise_identity_conv() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[1, 3, 4, 4], |i| (i as f32).sin()));
        let w = tape.constant(Tensor::ones(&[3, 1, 1, 1]));
        let y = tape.conv2d(x, w, None, Conv2dOpts::new(1, 0, 3)).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, -3.0, 3.0]));
        let s = tape.sigmoid(x);
        assert_eq!(tape.value(s).data()[0], 0.5);
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 3.0]);
        let g = tape.gelu(x);
        assert_eq!(tape.value(g).data()[0], 0.0);
        assert!(matches!(tape.unary(x, Unary::Log), Err(Error::Domain(_))));
    }

    #[test]
    fn relu_masks_replay_the_recorded_pattern() {
        let mut tape = Tape::new();
        tape.record_relu_masks();
        let x = tape.constant(t(&[4], &[-1.0, 2.0, -0.5, 3.0]));
        tape.relu(x);
        let masks = tape.take_relu_masks();
        assert_eq!(masks, vec![vec![false, true, false, true]]);

        // signs flipped, but the recorded gating still applies
        let mut tape = Tape::new();
        tape.replay_relu_masks(masks);
        let x = tape.constant(t(&[4], &[1.0, -2.0, 0.5, 3.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, -2.0, 0.0, 3.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3, 2], &[0.0, 0.0, 2f32.ln(), 0.0, 1000.0, 0.0]));
        let s = tape.softmax(x, 1).unwrap();
        let d = tape.value(s).data();
        assert_eq!(&d[..2], &[0.5, 0.5]);
        assert!((d[2] - 2.0 / 3.0).abs() < 1e-6 && (d[3] - 1.0 / 3.0).abs() < 1e-6);
        assert!((d[4] - 1.0).abs() < 1e-6 && d[5].abs() < 1e-6);
        assert!(d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let ones = tape.constant(Tensor::ones(&[2]));
        let zeros = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[2, 2], &[4.0, 4.0, 1.0, 3.0]));
        let y = tape.layer_norm(x, ones, zeros, 1e-12).unwrap();
        let d = tape.value(y).data();
        assert_eq!(&d[..2], &[0.0, 0.0]);
        assert!((d[2] + 1.0).abs() < 1e-5 && (d[3] - 1.0).abs() < 1e-5);

        let beta = tape.constant(t(&[2], &[0.3, -0.7]));
        let y = tape.layer_norm(x, zeros, beta, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.3, -0.7, 0.3, -0.7]);
    }

    #[test]
    fn batch_norm_examples() {
        let mut tape = Tape::new();
        let gamma = tape.constant(t(&[2], &[1.5, 1.0]));
        let beta = tape.constant(t(&[2], &[0.25, 0.0]));
        // channel 0 constant, channel 1 varying
        let x = tape.constant(t(&[2, 2, 1, 2], &[3.0, 3.0, 1.0, 2.0, 3.0, 3.0, 5.0, 0.0]));
        let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        let d = tape.value(y).data().to_vec();
        for i in [0, 1, 4, 5] {
            assert_eq!(d[i], 0.25);
        }
        // momentum 1 makes running stats equal the batch stats
        let ye = tape.batch_norm_eval(x, gamma, beta, &mean, &var, 1e-5).unwrap();
        for (a, b) in d.iter().zip(tape.value(ye).data()) {
            assert!((a - b).abs() < 1e-5);
        }

        let one = tape.constant(Tensor::ones(&[1]));
        let zero = tape.constant(Tensor::zeros(&[1]));
        let xn = tape.constant(t(&[4, 1, 1, 1], &[-1.0, 1.0, -1.0, 1.0]));
        let (y, _, _) = tape.batch_norm_train(xn, one, zero, 0.0).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(xn)) < 1e-5);
    }

    #[test]
    fn resize_examples() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[1, 2, 3, 5], 0.7));
        let y = tape.resize_bilinear(c, 7, 4).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.7));
        let one = tape.constant(t(&[1, 1, 1, 1], &[2.5]));
        let y = tape.resize_bilinear(one, 3, 6).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 2.5));
        let x = tape.constant(Tensor::from_fn(&[2, 3, 4, 5], |i| (i as f32 * 0.37).cos()));
        let y = tape.resize_bilinear(x, 4, 5).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn rearrange_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f32));
        let r = tape.reshape(x, &[3, 2]).unwrap();
        assert_eq!(tape.value(r).data(), tape.value(x).data());
        assert!(tape.reshape(x, &[4, 2]).is_err());

        let a = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let b = tape.constant(Tensor::ones(&[1, 3, 4, 4]));
        let c = tape.concat_channels(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), &[1, 5, 4, 4]);
        let bad = tape.constant(Tensor::ones(&[1, 3, 4, 5]));
        assert!(tape.concat_channels(&[a, bad]).is_err());

        let x = tape.constant(Tensor::from_fn(&[2, 5, 2, 3], |i| i as f32));
        let lo = tape.slice(x, 1, 0, 2).unwrap();
        let hi = tape.slice(x, 1, 2, 3).unwrap();
        let back = tape.concat_channels(&[lo, hi]).unwrap();
        assert_eq!(tape.value(back), tape.value(x));

        let tr = tape.transpose(x, 1, 3).unwrap();
        assert_eq!(tape.shape(tr), &[2, 3, 2, 5]);
        let tt = tape.transpose(tr, 1, 3).unwrap();
        assert_eq!(tape.value(tt), tape.value(x));
    }

    #[test]
    fn broadcast_add_per_channel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 3, 2, 2]));
        let b = tape.constant(t(&[3, 1, 1], &[1.0, 2.0, 3.0]));
        let y = tape.add(x, b).unwrap();
        let d = tape.value(y).data();
        assert_eq!(&d[..4], &[1.0; 4]);
        assert_eq!(&d[20..24], &[3.0; 4]);
        let last = tape.constant(t(&[2], &[1.0, 2.0]));
        let y = tape.add(x, last).unwrap();
        assert_eq!(&tape.value(y).data()[..4], &[1.0, 2.0, 1.0, 2.0]);
        let bad = tape.constant(Tensor::zeros(&[4]));
        assert!(tape.add(x, bad).is_err());
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_twice_accumulates_exactly() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f32 * 0.3 - 0.4), true);
        let w = tape.leaf(Tensor::from_fn(&[3, 2], |i| 0.5 - i as f32 * 0.2), true);
        let y = tape.matmul(x, w).unwrap();
        let y = tape.gelu(y);
        let l = tape.mean(y);
        tape.backward(l).unwrap();
        let first: Vec<f32> = tape.grad(x).unwrap().to_vec();
        tape.backward(l).unwrap();
        let second = tape.grad(x).unwrap();
        for (a, b) in first.iter().zip(second) {
            assert_eq!(2.0 * a, *b);
        }
        tape.zero_grads();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn silog_hand_case() {
        let mut tape = Tape::new();
        let p = tape.leaf(t(&[2], &[2.0, 4.0]), true);
        let l = tape.silog(p, &[1.0, 2.0], &[true, true], 0.5).unwrap();
        let expect = 0.5 * 2f64.ln().powi(2);
        assert!((tape.value(l).data()[0] as f64 - expect).abs() < 1e-6);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..7, scale in 0.1f32..50.0, seed in 0u64..1000) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::randn(&[rows, cols], scale, &mut rng));
            let s = tape.softmax(x, 1).unwrap();
            for row in tape.value(s).data().chunks(cols) {
                proptest::prop_assert!(row.iter().all(|&v| v >= 0.0));
                proptest::prop_assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() <= 1e-6);
            }
        }

        #[test]
        fn same_size_resize_is_exact_identity(c in 1usize..4, h in 1usize..7, w in 1usize..7, seed in 0u64..1000) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::randn(&[1, c, h, w], 1.0, &mut rng));
            let y = tape.resize_bilinear(x, h, w).unwrap();
            proptest::prop_assert_eq!(tape.value(y), tape.value(x));
        }
    }
}
