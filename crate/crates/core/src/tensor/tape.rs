//! Operation tape for reverse-mode differentiation.
//!
//! Every op appends one node holding its output value and enough context to
//! run its vector-Jacobian product later. Nodes are only ever appended, so
//! inputs always precede outputs and a single reverse sweep visits each op
//! exactly once.

use std::fmt;

use super::kernels::{self, Window};
use super::{ParameterSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Registry of differentiable operators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    Scale,
    AddRowBias,
    Transpose,
    Reshape,
    Concat,
    Narrow,
    RepeatRows,
    Softmax,
    LayerNorm,
    Gelu,
    Sigmoid,
    Conv2d,
    ConvTranspose2d,
    ResampleBilinear,
    Sum,
    Mean,
    BevLoss,
}

impl OpKind {
    pub const ALL: [OpKind; 19] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Scale,
        OpKind::AddRowBias,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::Concat,
        OpKind::Narrow,
        OpKind::RepeatRows,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::Sigmoid,
        OpKind::Conv2d,
        OpKind::ConvTranspose2d,
        OpKind::ResampleBilinear,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::BevLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Scale => "scale",
            OpKind::AddRowBias => "add_row_bias",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::Concat => "concat",
            OpKind::Narrow => "narrow",
            OpKind::RepeatRows => "repeat_rows",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Conv2d => "conv2d",
            OpKind::ConvTranspose2d => "conv_transpose2d",
            OpKind::ResampleBilinear => "resample_bilinear",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::BevLoss => "bev_loss",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn uniform(p: usize) -> Self {
        Padding {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    /// Total padding `k − s` split with the extra cell at the bottom/right,
    /// so an even extent divides exactly by the stride.
    pub fn same(kernel: usize, stride: usize) -> Self {
        let total = kernel.saturating_sub(stride);
        let before = total / 2;
        Padding {
            top: before,
            bottom: total - before,
            left: before,
            right: total - before,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: Padding,
}

impl ConvGeometry {
    pub fn new(stride: usize, pad: usize) -> Self {
        ConvGeometry {
            stride,
            padding: Padding::uniform(pad),
        }
    }
}

/// Which uncertainty term the fused BEV loss op applies on ambiguous cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LossForm {
    /// `1 − p·log₂ p`, as printed.
    #[default]
    Printed,
    /// `p·log₂ p + (1−p)·log₂(1−p)`, i.e. minus the binary entropy.
    EntropyBonus,
}

/// Backward rule for an op implemented outside this module.
pub(crate) trait CustomOp: Send + Sync {
    fn kind(&self) -> OpKind;
    /// Input gradients given the upstream gradient of the output.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Vec<f64>>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    AddRowBias(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    RepeatRows(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Sigmoid(Var),
    Conv2d { x: Var, kernel: Var, bias: Option<Var>, window: Window, cols: Vec<f64> },
    ConvTranspose2d { x: Var, kernel: Var, bias: Option<Var>, window: Window },
    Resample { x: Var, coords: Vec<f64> },
    Sum(Var),
    Mean(Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Scale(..) => OpKind::Scale,
            Op::AddRowBias(..) => OpKind::AddRowBias,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Concat { .. } => OpKind::Concat,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::RepeatRows(..) => OpKind::RepeatRows,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu(..) => OpKind::Gelu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::Resample { .. } => OpKind::ResampleBilinear,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::Custom { op, .. } => op.kind(),
        })
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of op applications for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(String, Var)>,
    grads: Vec<Option<Vec<f64>>>,
    fault: Option<OpKind>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Bilinear taps at continuous `(y, x)` on an `h×w` grid, zero outside.
#[inline]
fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let (y0, x0) = (y0 as isize, x0 as isize);
    let weights = [
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x0 + 1, (1.0 - fy) * fx),
        (y0 + 1, x0, fy * (1.0 - fx)),
        (y0 + 1, x0 + 1, fy * fx),
    ];
    let mut taps = [(0usize, 0.0f64); 4];
    for (tap, &(iy, ix, wgt)) in taps.iter_mut().zip(&weights) {
        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
            *tap = (iy as usize * w + ix as usize, wgt);
        } else {
            *tap = (usize::MAX, 0.0);
        }
    }
    taps
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Tape whose backward pass deliberately negates every gradient produced
    /// by ops of `kind`. Used to prove the gradient checker catches faults.
    pub fn with_fault(kind: OpKind) -> Self {
        Tape {
            fault: Some(kind),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records an input tensor; it receives a gradient iff `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let t = tensor.with_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    /// Binds a named parameter as a differentiable leaf.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        let mut t = params.get(name)?.clone();
        t.clear_grad();
        let v = self.push(t.with_requires_grad(true), Op::Leaf, true);
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn bound_params(&self) -> &[(String, Var)] {
        &self.params
    }

    fn dim_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
        Error::Dimension {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Self::dim_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::gemm(m, k, n, self.value(a).data(), self.value(b).data());
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Self::dim_err("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x]);
        self.push(Tensor::from_parts(shape, data), Op::Scale(x, factor), needs)
    }

    /// Adds `bias[n]` to every length-`n` trailing slice of `x`.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != Some(&sb[0]) {
            return Err(Self::dim_err("add_row_bias", sx, sb));
        }
        let n = sb[0];
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + b[i % n])
            .collect();
        let shape = sx.to_vec();
        let needs = self.needs(&[x, bias]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddRowBias(x, bias), needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Self::dim_err("transpose", s, &[]));
        }
        let (m, n) = (s[0], s[1]);
        let data = kernels::transpose(m, n, self.value(x).data());
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::from_parts(vec![n, m], data), Op::Transpose(x), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(&[x]);
        Ok(self.push(t.with_requires_grad(false), Op::Reshape(x), needs))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::usage("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Self::dim_err("concat", &base, &[axis]));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Self::dim_err("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis] * inner;
                data.extend_from_slice(&self.value(*v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = self.needs(inputs);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            needs,
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Self::dim_err("narrow", &s, &[axis, start, len]));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Narrow { x, axis, start }, needs))
    }

    /// Tiles a `1×n` row into `times×n`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != 1 || times == 0 {
            return Err(Self::dim_err("repeat_rows", s, &[times]));
        }
        let n = s[1];
        let row = self.value(x).data().to_vec();
        let data = row.repeat(times);
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::from_parts(vec![times, n], data), Op::RepeatRows(x), needs))
    }

    /// Softmax along `axis`, max-shifted for stability.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Self::dim_err("softmax", &s, &[axis]));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..n {
                    let e = (src[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    out[idx(k)] /= total;
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Tensor::from_parts(s, out), Op::Softmax { x, axis }, needs))
    }

    /// Normalizes every trailing vector of length `D` then applies `gain`, `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| Self::dim_err("layer_norm", &s, &[]))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Self::dim_err("layer_norm", &s, self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(Error::config("layer_norm eps must be positive"));
        }
        let rows = self.value(x).numel() / d;
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; src.len()];
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                out[r * d + j] = (row[j] - mean) * rstd * g[j] + b[j];
            }
            means.push(mean);
            rstds.push(rstd);
        }
        let needs = self.needs(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_parts(s, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
            needs,
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x]);
        self.push(Tensor::from_parts(shape, data), Op::Gelu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(&[x]);
        self.push(Tensor::from_parts(shape, data), Op::Sigmoid(x), needs)
    }

    fn conv_window(
        op: &'static str,
        xs: &[usize],
        kh: usize,
        kw: usize,
        g: ConvGeometry,
    ) -> Result<Window> {
        if g.stride == 0 {
            return Err(Error::config(format!("{op}: stride must be positive")));
        }
        let p = g.padding;
        let span_h = xs[1] + p.top + p.bottom;
        let span_w = xs[2] + p.left + p.right;
        if span_h < kh || span_w < kw {
            return Err(Error::config(format!("{op}: kernel larger than padded input {xs:?}")));
        }
        if (span_h - kh) % g.stride != 0 || (span_w - kw) % g.stride != 0 {
            return Err(Error::config(format!(
                "{op}: non-integral output extent for input {xs:?}, kernel {kh}x{kw}, {g:?}"
            )));
        }
        Ok(Window {
            channels: xs[0],
            in_h: xs[1],
            in_w: xs[2],
            kh,
            kw,
            stride: g.stride,
            pad_top: p.top,
            pad_left: p.left,
            out_h: (span_h - kh) / g.stride + 1,
            out_w: (span_w - kw) / g.stride + 1,
        })
    }

    /// Cross-correlation of `x[Cin×H×W]` with `kernel[Cout×Cin×kh×kw]`, plus optional `bias[Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 3 || ks.len() != 4 || ks[1] != xs[0] {
            return Err(Self::dim_err("conv2d", &xs, &ks));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ks[0]] {
                return Err(Self::dim_err("conv2d bias", &ks, self.shape(b)));
            }
        }
        let window = Self::conv_window("conv2d", &xs, ks[2], ks[3], geom)?;
        let cols = kernels::im2col(self.value(x).data(), &window);
        let n = window.out_h * window.out_w;
        let kdim = ks[1] * ks[2] * ks[3];
        let mut out = kernels::gemm(ks[0], kdim, n, self.value(kernel).data(), &cols);
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (co, chunk) in out.chunks_mut(n).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bv[co]);
            }
        }
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        let needs = self.needs(&inputs);
        let shape = vec![ks[0], window.out_h, window.out_w];
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Conv2d {
                x,
                kernel,
                bias,
                window,
                cols,
            },
            needs,
        ))
    }

    /// Transposed convolution of `x[Cin×H×W]` with `kernel[Cin×Cout×kh×kw]`;
    /// output extent `(H−1)·stride + kh − pad_top − pad_bottom`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 3 || ks.len() != 4 || ks[0] != xs[0] || geom.stride == 0 {
            return Err(Self::dim_err("conv_transpose2d", &xs, &ks));
        }
        let (cout, kh, kw) = (ks[1], ks[2], ks[3]);
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Self::dim_err("conv_transpose2d bias", &ks, self.shape(b)));
            }
        }
        let p = geom.padding;
        let full_h = (xs[1] - 1) * geom.stride + kh;
        let full_w = (xs[2] - 1) * geom.stride + kw;
        if full_h <= p.top + p.bottom || full_w <= p.left + p.right {
            return Err(Error::config("conv_transpose2d: padding exceeds output"));
        }
        // The adjoint view: a conv2d over the output grid lands on the input grid.
        let window = Window {
            channels: cout,
            in_h: full_h - p.top - p.bottom,
            in_w: full_w - p.left - p.right,
            kh,
            kw,
            stride: geom.stride,
            pad_top: p.top,
            pad_left: p.left,
            out_h: xs[1],
            out_w: xs[2],
        };
        let n = xs[1] * xs[2];
        let cols = kernels::gemm_tn(
            cout * kh * kw,
            xs[0],
            n,
            self.value(kernel).data(),
            self.value(x).data(),
        );
        let mut out = kernels::col2im(&cols, &window);
        let plane = window.in_h * window.in_w;
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for (co, chunk) in out.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v += bv[co]);
            }
        }
        let mut inputs = vec![x, kernel];
        inputs.extend(bias);
        let needs = self.needs(&inputs);
        let shape = vec![cout, window.in_h, window.in_w];
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::ConvTranspose2d {
                x,
                kernel,
                bias,
                window,
            },
            needs,
        ))
    }

    /// Samples `x[C×H×W]` at continuous `(row, col)` pairs `coords[H'×W'×2]`
    /// with bilinear weights; taps outside the grid contribute zero. The
    /// coordinates are constants and receive no gradient.
    pub fn resample_bilinear(&mut self, x: Var, coords: &Tensor) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let cs = coords.shape();
        if xs.len() != 3 || cs.len() != 3 || cs[2] != 2 {
            return Err(Self::dim_err("resample_bilinear", &xs, cs));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (oh, ow) = (cs[0], cs[1]);
        let src = self.value(x).data();
        let cd = coords.data();
        let n = oh * ow;
        let mut out = vec![0.0; c * n];
        for p in 0..n {
            let taps = bilinear_taps(cd[2 * p], cd[2 * p + 1], h, w);
            for ch in 0..c {
                let plane = &src[ch * h * w..(ch + 1) * h * w];
                let mut acc = 0.0;
                for &(idx, wgt) in &taps {
                    if idx != usize::MAX {
                        acc += wgt * plane[idx];
                    }
                }
                out[ch * n + p] = acc;
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![c, oh, ow], out),
            Op::Resample {
                x,
                coords: cd.to_vec(),
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let needs = self.needs(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), needs)
    }

    pub(crate) fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let needs = self.needs(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            needs,
        )
    }

    /// Reverse sweep from a scalar `loss`, populating gradients for every
    /// node that depends on a differentiable leaf. Fan-out accumulates.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut contributions = self.vjp(node, &g);
            if node.op.kind() == self.fault && self.fault.is_some() {
                for (_, c) in contributions.iter_mut() {
                    c.iter_mut().for_each(|v| *v = -*v);
                }
            }
            for (v, c) in contributions {
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        // Leaves keep their gradients; bound parameters that the loss never
        // reached get explicit zeros.
        for (_, v) in &self.params {
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![0.0; self.nodes[v.0].value.numel()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Adds `scale ×` each bound parameter's gradient into `params`.
    pub fn accumulate_param_grads(&self, params: &mut ParameterSet, scale: f64) -> Result<()> {
        for (name, v) in &self.params {
            let g = self
                .grad(*v)
                .ok_or_else(|| Error::usage(format!("no gradient for `{name}`; run backward first")))?;
            params.get_mut(name)?.accumulate_grad(g, scale);
        }
        Ok(())
    }

    fn vjp(&self, node: &Node, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                let mut out = Vec::new();
                if wants(*a) {
                    out.push((*a, kernels::gemm_nt(m, n, k, g, val(*b).data())));
                }
                if wants(*b) {
                    out.push((*b, kernels::gemm_tn(k, m, n, val(*a).data(), g)));
                }
                out
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Scale(x, f) => vec![(*x, g.iter().map(|v| v * f).collect())],
            Op::AddRowBias(x, bias) => {
                let n = val(*bias).numel();
                let mut gb = vec![0.0; n];
                for (i, v) in g.iter().enumerate() {
                    gb[i % n] += v;
                }
                vec![(*x, g.to_vec()), (*bias, gb)]
            }
            Op::Transpose(x) => {
                let s = val(*x).shape();
                vec![(*x, kernels::transpose(s[1], s[0], g))]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut parts: Vec<Vec<f64>> = inputs
                    .iter()
                    .map(|v| Vec::with_capacity(val(*v).numel()))
                    .collect();
                for o in 0..outer {
                    let mut offset = o * total * inner;
                    for (part, v) in parts.iter_mut().zip(inputs) {
                        let len = val(*v).shape()[*axis] * inner;
                        part.extend_from_slice(&g[offset..offset + len]);
                        offset += len;
                    }
                }
                inputs.iter().copied().zip(parts).collect()
            }
            Op::Narrow { x, axis, start } => {
                let s = val(*x).shape();
                let (outer, n, inner) = split_axis(s, *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![0.0; val(*x).numel()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![(*x, gx)]
            }
            Op::RepeatRows(x) => {
                let n = val(*x).numel();
                let mut gx = vec![0.0; n];
                for row in g.chunks(n) {
                    gx.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                vec![(*x, gx)]
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let dot: f64 = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
                        for k in 0..n {
                            gx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let xv = val(*x).data();
                let gv = val(*gain).data();
                let d = gv.len();
                let mut gx = vec![0.0; xv.len()];
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..mean.len() {
                    let row = &xv[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    for j in 0..d {
                        xhat[j] = (row[j] - mean[r]) * rstd[r];
                        dxhat[j] = gr[j] * gv[j];
                        ggain[j] += gr[j] * xhat[j];
                        gbias[j] += gr[j];
                    }
                    let m1 = dxhat.iter().sum::<f64>() / d as f64;
                    let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        gx[r * d + j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                vec![(*x, gx), (*gain, ggain), (*bias, gbias)]
            }
            Op::Gelu(x) => {
                let gx = val(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, gi)| {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        gi * (0.5 * (1.0 + t) + 0.5 * v * dt)
                    })
                    .collect();
                vec![(*x, gx)]
            }
            Op::Sigmoid(x) => {
                let gx = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(y, gi)| gi * y * (1.0 - y))
                    .collect();
                vec![(*x, gx)]
            }
            Op::Conv2d {
                x,
                kernel,
                bias,
                window,
                cols,
            } => {
                let ks = val(*kernel).shape();
                let cout = ks[0];
                let kdim = ks[1] * ks[2] * ks[3];
                let n = window.out_h * window.out_w;
                let mut out = Vec::new();
                if wants(*kernel) {
                    out.push((*kernel, kernels::gemm_nt(cout, n, kdim, g, cols)));
                }
                if wants(*x) {
                    let dcols = kernels::gemm_tn(kdim, cout, n, val(*kernel).data(), g);
                    out.push((*x, kernels::col2im(&dcols, window)));
                }
                if let Some(b) = bias {
                    out.push((*b, g.chunks(n).map(|c| c.iter().sum()).collect()));
                }
                out
            }
            Op::ConvTranspose2d {
                x,
                kernel,
                bias,
                window,
            } => {
                let ks = val(*kernel).shape();
                let (cin, kdim) = (ks[0], ks[1] * ks[2] * ks[3]);
                let n = window.out_h * window.out_w;
                let dcols = kernels::im2col(g, window);
                let mut out = Vec::new();
                if wants(*x) {
                    out.push((*x, kernels::gemm(cin, kdim, n, val(*kernel).data(), &dcols)));
                }
                if wants(*kernel) {
                    out.push((*kernel, kernels::gemm_nt(cin, n, kdim, val(*x).data(), &dcols)));
                }
                if let Some(b) = bias {
                    let plane = window.in_h * window.in_w;
                    out.push((*b, g.chunks(plane).map(|c| c.iter().sum()).collect()));
                }
                out
            }
            Op::Resample { x, coords } => {
                let s = val(*x).shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let n = coords.len() / 2;
                let mut gx = vec![0.0; c * h * w];
                for p in 0..n {
                    let taps = bilinear_taps(coords[2 * p], coords[2 * p + 1], h, w);
                    for ch in 0..c {
                        let gp = g[ch * n + p];
                        let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
                        for &(idx, wgt) in &taps {
                            if idx != usize::MAX {
                                plane[idx] += wgt * gp;
                            }
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).numel()])],
            Op::Mean(x) => {
                let n = val(*x).numel();
                vec![(*x, vec![g[0] / n as f64; n])]
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| val(*v)).collect();
                inputs
                    .iter()
                    .copied()
                    .zip(op.backward(&ins, &node.value, g))
                    .collect()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let m = tape.constant(t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(t2(&[vec![1.0, 2.0]]));
        let b = tape.constant(t2(&[vec![3.0], vec![4.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![3], vec![0.0; 3]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1].abs() < 1e-12);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[2, 4], 3.5));
        let g = tape.constant(Tensor::ones(&[4]));
        let b = tape.constant(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, g, b, 1e-6).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gelu_fixed_points() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![2], vec![0.0, 10.0]).unwrap());
        let y = tape.gelu(x);
        let d = tape.value(y).data();
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 10.0).abs() < 1e-6);
    }

    #[test]
    fn conv_identity_and_box_sum() {
        let mut tape = Tape::new();
        let mut rng = crate::tensor::SeededRng::new(1);
        let xt = Tensor::randn(&[3, 4, 5], 1.0, &mut rng);
        let x = tape.constant(xt.clone());
        let mut k = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            k.set(&[c, c, 0, 0], 1.0);
        }
        let k = tape.constant(k);
        let y = tape.conv2d(x, k, None, ConvGeometry::new(1, 0)).unwrap();
        assert_eq!(tape.value(y), &xt);

        let ones = tape.constant(Tensor::ones(&[1, 5, 5]));
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let y = tape.conv2d(ones, k, None, ConvGeometry::new(1, 0)).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 3]);
        assert!(tape.value(y).data().iter().all(|v| *v == 9.0));
    }

    #[test]
    fn conv_rejects_non_integral_extent() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 6, 6]));
        let k = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        let err = tape.conv2d(x, k, None, ConvGeometry::new(2, 1)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let same = ConvGeometry {
            stride: 2,
            padding: Padding::same(3, 2),
        };
        let y = tape.conv2d(x, k, None, same).unwrap();
        assert_eq!(tape.shape(y), &[1, 3, 3]);
    }

    #[test]
    fn transposed_conv_upsamples_by_stride() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[2, 3, 3]));
        let k = tape.constant(Tensor::ones(&[2, 4, 2, 2]));
        let y = tape.conv_transpose2d(x, k, None, ConvGeometry::new(2, 0)).unwrap();
        assert_eq!(tape.shape(y), &[4, 6, 6]);
        assert!(tape.value(y).data().iter().all(|v| *v == 2.0));
    }

    #[test]
    fn resample_corner_mean_and_gather() {
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let c = Tensor::new(vec![1, 1, 2], vec![0.5, 0.5]).unwrap();
        let y = tape.resample_bilinear(f, &c).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);
        let c = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = tape.resample_bilinear(f, &c).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 2.0]);
    }

    #[test]
    fn sum_gradient_is_ones_and_fanout_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_requires_grad(true));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, -1.0]).unwrap().with_requires_grad(true));
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]).with_requires_grad(true));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn shared_subgraph_gradient_is_sum_of_uses() {
        let mut rng = crate::tensor::SeededRng::new(9);
        let xt = Tensor::randn(&[3, 4], 1.0, &mut rng).with_requires_grad(true);
        let wt = Tensor::randn(&[4, 4], 1.0, &mut rng);

        let grad_of = |uses: &[bool; 2]| {
            let mut tape = Tape::new();
            let x = tape.leaf(xt.clone());
            let w = tape.constant(wt.clone());
            let shared = tape.matmul(x, w).unwrap();
            let shared = tape.gelu(shared);
            let a = tape.softmax(shared, 1).unwrap();
            let b = tape.scale(shared, 3.0);
            let mut terms = Vec::new();
            if uses[0] {
                terms.push(tape.sum(a));
            }
            if uses[1] {
                terms.push(tape.sum(b));
            }
            let total = if terms.len() == 2 {
                tape.add(terms[0], terms[1]).unwrap()
            } else {
                terms[0]
            };
            tape.backward(total).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let both = grad_of(&[true, true]);
        let first = grad_of(&[true, false]);
        let second = grad_of(&[false, true]);
        for i in 0..both.len() {
            assert!((both[i] - (first[i] + second[i])).abs() < 1e-13);
        }
    }
}
