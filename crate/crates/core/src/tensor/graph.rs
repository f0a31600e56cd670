use std::fmt;
use std::str::FromStr;

use super::kernels::{self, cell_center, denormalize, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Silu,
    Sigmoid,
    Relu,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "silu" | "swish" => Ok(Activation::Silu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Activation::Gelu => "gelu",
            Activation::Silu => "silu",
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
        };
        f.write_str(s)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2)),
            Activation::Silu => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Relu => x.max(0.0),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x * INV_SQRT_2));
                cdf + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Convolution hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(kernel: usize, stride: usize, padding: usize, groups: usize) -> Self {
        ConvSpec {
            kernel,
            stride,
            padding,
            groups,
        }
    }

    /// `kernel×kernel`, stride 1, "same" padding, single group.
    pub fn same(kernel: usize) -> Self {
        ConvSpec::new(kernel, 1, kernel / 2, 1)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sum(Var),
    SumLast(Var),
    CenterLast(Var),
    Sqrt(Var),
    Log(Var),
    Softmax {
        x: Var,
        scale: f64,
    },
    LogSoftmax(Var),
    Act(Var, Activation),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Reshape(Var),
    ConcatLast(Vec<Var>),
    SliceLast {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Resample {
        x: Var,
        offsets: Var,
        groups: usize,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    DoubleCenter(Var),
    Nll {
        logp: Var,
        targets: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation graph. Nodes are appended in evaluation order,
/// so every node's inputs precede it and reverse index order is a valid
/// reverse topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    pub fn get_slice(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
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

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            other => Err(Error::shape(op, other, &[0, 0])),
        }
    }

    fn dims3(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize)> {
        match self.shape(v) {
            &[h, w, c] => Ok((h, w, c)),
            other => Err(Error::shape(op, other, &[0, 0, 0])),
        }
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("transpose", a)?;
        let t = Tensor::new(vec![c, r], kernels::transpose(self.value(a).data(), r, c))?;
        Ok(self.push(t, Op::Transpose(a), &[a]))
    }

    // ---- elementwise ----

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, node, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(a);
        let t = Tensor {
            shape: src.shape().to_vec(),
            data: src.data().iter().map(|&x| f(x)).collect(),
        };
        self.push(t, op, &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        self.map(a, |x| kind.apply(x), Op::Act(a, kind))
    }

    // ---- reductions ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Sums over the last dimension.
    pub fn sum_last(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let n = src.last_dim();
        let mut shape = src.shape()[..src.rank() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let data = src.data().chunks(n).map(|c| c.iter().sum()).collect();
        self.push(Tensor { shape, data }, Op::SumLast(a), &[a])
    }

    /// Subtracts the mean of every last-dimension slice.
    pub fn center_last(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let n = src.last_dim();
        let mut data = src.data().to_vec();
        for c in data.chunks_mut(n) {
            let m = c.iter().sum::<f64>() / n as f64;
            c.iter_mut().for_each(|v| *v -= m);
        }
        let t = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        self.push(t, Op::CenterLast(a), &[a])
    }

    /// `G − row means − column means + grand mean`, i.e. `C·G·C` with the
    /// centering matrix `C = I − 11ᵀ/n`.
    pub fn double_center(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2("double_center", a)?;
        if r != c {
            return Err(Error::shape("double_center", &[r, c], &[r, r]));
        }
        let t = Tensor::new(vec![r, r], double_center_raw(self.value(a).data(), r))?;
        Ok(self.push(t, Op::DoubleCenter(a), &[a]))
    }

    // ---- normalisation ----

    /// Numerically stable softmax of `x / scale` over the last dimension.
    pub fn softmax_last(&mut self, x: Var, scale: f64) -> Result<Var> {
        if !(scale > 0.0) {
            return Err(Error::config(format!("softmax scale must be positive, got {scale}")));
        }
        let src = self.value(x);
        let n = src.last_dim();
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_row(row, scale);
        }
        let t = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        Ok(self.push(t, Op::Softmax { x, scale }, &[x]))
    }

    pub fn log_softmax_last(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let n = src.last_dim();
        let mut data = src.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor {
            shape: src.shape().to_vec(),
            data,
        };
        self.push(t, Op::LogSoftmax(x), &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::config("layer_norm eps must be positive"));
        }
        let c = self.value(x).last_dim();
        if self.shape(gain) != [c] || self.shape(bias) != [c] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / c;
        let mut out = vec![0.0; src.len()];
        let mut xhat = vec![0.0; src.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * g[j] + b[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    // ---- convolution / spatial ----

    /// Grouped cross-correlation with zero padding over an `H×W×C` map.
    /// Weights are `[c_out, k, k, c_in/groups]`, bias `[c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (h, wd, c_in) = self.dims3("conv2d", x)?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 {
            return Err(Error::shape("conv2d weights", &ws, &[0, 0, 0, 0]));
        }
        let c_out = ws[0];
        if spec.groups == 0 || c_in % spec.groups != 0 || !c_out.is_multiple_of(spec.groups) {
            return Err(Error::config(format!(
                "channels (in {c_in}, out {c_out}) not divisible by groups {}",
                spec.groups
            )));
        }
        if spec.kernel.is_multiple_of(2) {
            return Err(Error::config(format!("kernel must be odd, got {}", spec.kernel)));
        }
        if spec.stride == 0 {
            return Err(Error::config("stride must be positive"));
        }
        if ws[1] != spec.kernel || ws[2] != spec.kernel || ws[3] != c_in / spec.groups {
            return Err(Error::shape(
                "conv2d weights",
                &ws,
                &[c_out, spec.kernel, spec.kernel, c_in / spec.groups],
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[c_out]));
            }
        }
        let span_h = h + 2 * spec.padding;
        let span_w = wd + 2 * spec.padding;
        if span_h < spec.kernel || span_w < spec.kernel {
            return Err(Error::shape("conv2d", &[h, wd], &[spec.kernel, spec.kernel]));
        }
        let geom = ConvGeom {
            h,
            w: wd,
            c_in,
            c_out,
            kernel: spec.kernel,
            stride: spec.stride,
            padding: spec.padding,
            groups: spec.groups,
            out_h: (span_h - spec.kernel) / spec.stride + 1,
            out_w: (span_w - spec.kernel) / spec.stride + 1,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let t = Tensor::new(vec![geom.out_h, geom.out_w, c_out], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(t, Op::Conv { x, w, b, geom }, &inputs))
    }

    /// Bilinear upsampling of an `H×W×C` map by an integer factor
    /// (half-pixel centers, edge clamped).
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (h, w, c) = self.dims3("upsample", x)?;
        if factor == 0 {
            return Err(Error::config("upsample factor must be positive"));
        }
        let ty = kernels::upsample_table(h, h * factor);
        let tx = kernels::upsample_table(w, w * factor);
        let src = self.value(x).data();
        let (oh, ow) = (h * factor, w * factor);
        let mut out = vec![0.0; oh * ow * c];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let o = (oy * ow + ox) * c;
                let taps = [
                    ((y0 * w + x0) * c, (1.0 - wy) * (1.0 - wx)),
                    ((y0 * w + x1) * c, (1.0 - wy) * wx),
                    ((y1 * w + x0) * c, wy * (1.0 - wx)),
                    ((y1 * w + x1) * c, wy * wx),
                ];
                for (base, wt) in taps {
                    for ch in 0..c {
                        out[o + ch] += wt * src[base + ch];
                    }
                }
            }
        }
        let t = Tensor::new(vec![oh, ow, c], out)?;
        Ok(self.push(t, Op::Upsample { x, factor }, &[x]))
    }

    /// Non-overlapping `k×k` average pooling over an `H×W×C` map.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (h, w, c) = self.dims3("avg_pool", x)?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::config(format!("pool size {k} does not divide {h}×{w}")));
        }
        let (oh, ow) = (h / k, w / k);
        let src = self.value(x).data();
        let mut out = vec![0.0; oh * ow * c];
        let inv = 1.0 / (k * k) as f64;
        for y in 0..h {
            for xx in 0..w {
                let o = ((y / k) * ow + xx / k) * c;
                let s = (y * w + xx) * c;
                for ch in 0..c {
                    out[o + ch] += src[s + ch] * inv;
                }
            }
        }
        let t = Tensor::new(vec![oh, ow, c], out)?;
        Ok(self.push(t, Op::AvgPool { x, k }, &[x]))
    }

    /// Group-wise bilinear gather of an `H×W×C` map at the points
    /// `reference + offset`. `offsets` is `H_g×W_g×2S` holding `(dy, dx)` per
    /// group in normalised `[-1, 1]` units; reference points sit on cell
    /// centers of the `H_g×W_g` grid. Samples outside the map read zeros.
    pub fn resample(&mut self, x: Var, offsets: Var, groups: usize) -> Result<Var> {
        let (h, w, c) = self.dims3("resample", x)?;
        let (hg, wg, oc) = self.dims3("resample offsets", offsets)?;
        if groups == 0 || c % groups != 0 || oc != 2 * groups {
            return Err(Error::config(format!(
                "resample: {c} channels / {oc} offset channels incompatible with {groups} groups"
            )));
        }
        let out = resample_forward(
            self.value(x).data(),
            self.value(offsets).data(),
            h,
            w,
            c,
            hg,
            wg,
            groups,
        );
        let t = Tensor::new(vec![hg, wg, c], out)?;
        Ok(self.push(t, Op::Resample { x, offsets, groups }, &[x, offsets]))
    }

    // ---- shape plumbing ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Concatenates along the last dimension; leading dims must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let lead = &self.shape(first)[..self.shape(first).len() - 1];
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(Error::shape("concat_last", self.shape(first), s));
            }
            total += s[s.len() - 1];
        }
        let rows: usize = lead.iter().product();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for &p in parts {
            let n = self.value(p).last_dim();
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + off..r * total + off + n].copy_from_slice(&src[r * n..(r + 1) * n]);
            }
            off += n;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::ConcatLast(parts.to_vec()), parts))
    }

    /// Channels `start..start+len` of the last dimension.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(x);
        let n = src.last_dim();
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_last", src.shape(), &[start, len]));
        }
        let data = src
            .data()
            .chunks(n)
            .flat_map(|c| c[start..start + len].iter().copied())
            .collect();
        let mut shape = src.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::SliceLast { x, start }, &[x]))
    }

    /// Stacks 2-D tensors along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let (_, cols) = self.dims2("concat_rows", first)?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.dims2("concat_rows", p)?;
            if c != cols {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let t = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Selects rows of a 2-D tensor (repeats allowed). Doubles as an
    /// embedding-table lookup.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2("gather_rows", x)?;
        if rows.is_empty() {
            return Err(Error::contract("gather_rows needs at least one index"));
        }
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", &[r, c], &[bad]));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(vec![rows.len(), c], data)?;
        Ok(self.push(t, Op::GatherRows { x, rows: rows.to_vec() }, &[x]))
    }

    /// Mean negative log-likelihood of `targets` under row-wise
    /// log-probabilities `logp: B×N`.
    pub fn nll(&mut self, logp: Var, targets: &[usize]) -> Result<Var> {
        let (b, n) = self.dims2("nll", logp)?;
        if targets.len() != b {
            return Err(Error::shape("nll", &[b, n], &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::shape("nll target", &[n], &[bad]));
        }
        let src = self.value(logp).data();
        let loss = -targets.iter().enumerate().map(|(i, &t)| src[i * n + t]).sum::<f64>() / b as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Nll {
                logp,
                targets: targets.to_vec(),
            },
            &[logp],
        ))
    }

    // ---- backward ----

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn accumulate_with(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn backprop_node(&self, node: &Node, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate_with(grads, *a, |ga| kernels::gemm_nt_acc(gout, bv, ga, m, n, k));
                self.accumulate_with(grads, *b, |gb| kernels::gemm_tn_acc(av, gout, gb, k, m, n));
            }
            Op::Transpose(a) => {
                let (r, c) = (self.shape(*a)[0], self.shape(*a)[1]);
                self.accumulate(grads, *a, kernels::transpose(gout, c, r));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.to_vec());
                self.accumulate(grads, *b, gout.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gout.to_vec());
                self.accumulate(grads, *b, gout.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, gout.iter().zip(bv).map(|(g, y)| g * y).collect());
                self.accumulate(grads, *b, gout.iter().zip(av).map(|(g, x)| g * x).collect());
            }
            Op::Div(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, gout.iter().zip(bv).map(|(g, y)| g / y).collect());
                self.accumulate(
                    grads,
                    *b,
                    gout.iter()
                        .zip(av.iter().zip(bv))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect(),
                );
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, gout.iter().map(|g| g * s).collect()),
            Op::AddScalar(a) => self.accumulate(grads, *a, gout.to_vec()),
            Op::Sqrt(a) => {
                self.accumulate(grads, *a, gout.iter().zip(out).map(|(g, y)| 0.5 * g / y).collect());
            }
            Op::Log(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, gout.iter().zip(av).map(|(g, x)| g / x).collect());
            }
            Op::Act(a, kind) => {
                let av = self.value(*a).data();
                self.accumulate(
                    grads,
                    *a,
                    gout.iter().zip(av).map(|(g, &x)| g * kind.derivative(x)).collect(),
                );
            }
            Op::Sum(a) => {
                let len = self.value(*a).len();
                self.accumulate(grads, *a, vec![gout[0]; len]);
            }
            Op::SumLast(a) => {
                let n = self.value(*a).last_dim();
                let g = gout.iter().flat_map(|&g| std::iter::repeat_n(g, n)).collect();
                self.accumulate(grads, *a, g);
            }
            Op::CenterLast(a) => {
                let n = self.value(*a).last_dim();
                let mut g = gout.to_vec();
                for c in g.chunks_mut(n) {
                    let m = c.iter().sum::<f64>() / n as f64;
                    c.iter_mut().for_each(|v| *v -= m);
                }
                self.accumulate(grads, *a, g);
            }
            Op::DoubleCenter(a) => {
                let n = self.shape(*a)[0];
                self.accumulate(grads, *a, double_center_raw(gout, n));
            }
            Op::Softmax { x, scale } => {
                let n = node.value.last_dim();
                let mut g = vec![0.0; out.len()];
                for ((gr, yr), dr) in gout.chunks(n).zip(out.chunks(n)).zip(g.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot) / scale;
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::LogSoftmax(x) => {
                let n = node.value.last_dim();
                let mut g = vec![0.0; out.len()];
                for ((gr, yr), dr) in gout.chunks(n).zip(out.chunks(n)).zip(g.chunks_mut(n)) {
                    let s: f64 = gr.iter().sum();
                    for j in 0..n {
                        dr[j] = gr[j] - yr[j].exp() * s;
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = node.value.last_dim();
                let gv = self.value(*gain).data();
                let mut dx = vec![0.0; out.len()];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for (r, &rs) in rstd.iter().enumerate() {
                    let go = &gout[r * c..(r + 1) * c];
                    let xh = &xhat[r * c..(r + 1) * c];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        let d = go[j] * gv[j];
                        mean_d += d;
                        mean_dx += d * xh[j];
                        dg[j] += go[j] * xh[j];
                        db[j] += go[j];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for j in 0..c {
                        dx[r * c + j] = rs * (go[j] * gv[j] - mean_d - xh[j] * mean_dx);
                    }
                }
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gain, dg);
                self.accumulate(grads, *bias, db);
            }
            Op::Conv { x, w, b, geom } => {
                let need_dx = self.nodes[x.0].requires_grad;
                let need_dw = self.nodes[w.0].requires_grad;
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gout,
                    geom,
                    need_dx,
                    need_dw,
                );
                if need_dx {
                    self.accumulate(grads, *x, dx);
                }
                if need_dw {
                    self.accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Upsample { x, factor } => {
                let (h, w, c) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let ty = kernels::upsample_table(h, h * factor);
                let tx = kernels::upsample_table(w, w * factor);
                let ow = w * factor;
                self.accumulate_with(grads, *x, |dx| {
                    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                            let o = (oy * ow + ox) * c;
                            let taps = [
                                ((y0 * w + x0) * c, (1.0 - wy) * (1.0 - wx)),
                                ((y0 * w + x1) * c, (1.0 - wy) * wx),
                                ((y1 * w + x0) * c, wy * (1.0 - wx)),
                                ((y1 * w + x1) * c, wy * wx),
                            ];
                            for (base, wt) in taps {
                                for ch in 0..c {
                                    dx[base + ch] += wt * gout[o + ch];
                                }
                            }
                        }
                    }
                });
            }
            Op::AvgPool { x, k } => {
                let (h, w, c) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let ow = w / k;
                let inv = 1.0 / (k * k) as f64;
                let mut dx = vec![0.0; h * w * c];
                for y in 0..h {
                    for xx in 0..w {
                        let o = ((y / k) * ow + xx / k) * c;
                        let s = (y * w + xx) * c;
                        for ch in 0..c {
                            dx[s + ch] = gout[o + ch] * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Resample { x, offsets, groups } => {
                let (h, w, c) = (self.shape(*x)[0], self.shape(*x)[1], self.shape(*x)[2]);
                let (hg, wg) = (self.shape(*offsets)[0], self.shape(*offsets)[1]);
                let (dx, doff) = resample_backward(
                    self.value(*x).data(),
                    self.value(*offsets).data(),
                    gout,
                    h,
                    w,
                    c,
                    hg,
                    wg,
                    *groups,
                );
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *offsets, doff);
            }
            Op::Reshape(a) => self.accumulate(grads, *a, gout.to_vec()),
            Op::ConcatLast(parts) => {
                let total = node.value.last_dim();
                let rows = out.len() / total;
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).last_dim();
                    if self.nodes[p.0].requires_grad {
                        let mut g = vec![0.0; rows * n];
                        for r in 0..rows {
                            g[r * n..(r + 1) * n].copy_from_slice(&gout[r * total + off..r * total + off + n]);
                        }
                        self.accumulate(grads, p, g);
                    }
                    off += n;
                }
            }
            Op::SliceLast { x, start } => {
                let n = self.value(*x).last_dim();
                let len = node.value.last_dim();
                self.accumulate_with(grads, *x, |dx| {
                    for (dr, gr) in dx.chunks_mut(n).zip(gout.chunks(len)) {
                        for j in 0..len {
                            dr[start + j] += gr[j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, gout[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::GatherRows { x, rows } => {
                let c = self.shape(*x)[1];
                self.accumulate_with(grads, *x, |dx| {
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            dx[r * c + j] += gout[k * c + j];
                        }
                    }
                });
            }
            Op::Nll { logp, targets } => {
                let n = self.shape(*logp)[1];
                let b = targets.len() as f64;
                self.accumulate_with(grads, *logp, |dx| {
                    for (i, &t) in targets.iter().enumerate() {
                        dx[i * n + t] -= gout[0] / b;
                    }
                });
            }
        }
    }
}

pub(crate) fn softmax_row(row: &mut [f64], scale: f64) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / scale).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn double_center_raw(g: &[f64], n: usize) -> Vec<f64> {
    let mut row_mean = vec![0.0; n];
    let mut col_mean = vec![0.0; n];
    for i in 0..n {
        for j in 0..n {
            row_mean[i] += g[i * n + j];
            col_mean[j] += g[i * n + j];
        }
    }
    let inv = 1.0 / n as f64;
    row_mean.iter_mut().for_each(|v| *v *= inv);
    col_mean.iter_mut().for_each(|v| *v *= inv);
    let grand = row_mean.iter().sum::<f64>() * inv;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = g[i * n + j] - row_mean[i] - col_mean[j] + grand;
        }
    }
    out
}

struct Taps {
    y0: isize,
    x0: isize,
    fy: f64,
    fx: f64,
}

fn taps(py: f64, px: f64) -> Taps {
    let y0 = py.floor();
    let x0 = px.floor();
    Taps {
        y0: y0 as isize,
        x0: x0 as isize,
        fy: py - y0,
        fx: px - x0,
    }
}

#[allow(clippy::too_many_arguments)]
fn resample_forward(
    x: &[f64],
    off: &[f64],
    h: usize,
    w: usize,
    c: usize,
    hg: usize,
    wg: usize,
    groups: usize,
) -> Vec<f64> {
    let cg = c / groups;
    let mut out = vec![0.0; hg * wg * c];
    for r in 0..hg {
        for q in 0..wg {
            let cell = r * wg + q;
            for g in 0..groups {
                let ny = cell_center(r, hg) + off[cell * 2 * groups + 2 * g];
                let nx = cell_center(q, wg) + off[cell * 2 * groups + 2 * g + 1];
                let t = taps(denormalize(ny, h), denormalize(nx, w));
                for (dy, wy) in [(0, 1.0 - t.fy), (1, t.fy)] {
                    let yy = t.y0 + dy;
                    if yy < 0 || yy >= h as isize || wy == 0.0 {
                        continue;
                    }
                    for (dx, wx) in [(0, 1.0 - t.fx), (1, t.fx)] {
                        let xx = t.x0 + dx;
                        if xx < 0 || xx >= w as isize || wx == 0.0 {
                            continue;
                        }
                        let src = (yy as usize * w + xx as usize) * c + g * cg;
                        let dst = cell * c + g * cg;
                        let wt = wy * wx;
                        for ch in 0..cg {
                            out[dst + ch] += wt * x[src + ch];
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn resample_backward(
    x: &[f64],
    off: &[f64],
    gout: &[f64],
    h: usize,
    w: usize,
    c: usize,
    hg: usize,
    wg: usize,
    groups: usize,
) -> (Vec<f64>, Vec<f64>) {
    let cg = c / groups;
    let mut dx = vec![0.0; x.len()];
    let mut doff = vec![0.0; off.len()];
    let read = |yy: isize, xx: isize, ch: usize| -> f64 {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            x[(yy as usize * w + xx as usize) * c + ch]
        }
    };
    for r in 0..hg {
        for q in 0..wg {
            let cell = r * wg + q;
            for g in 0..groups {
                let oy = cell * 2 * groups + 2 * g;
                let ny = cell_center(r, hg) + off[oy];
                let nx = cell_center(q, wg) + off[oy + 1];
                let t = taps(denormalize(ny, h), denormalize(nx, w));
                let go = &gout[cell * c + g * cg..cell * c + (g + 1) * cg];
                for (dy, wy) in [(0, 1.0 - t.fy), (1, t.fy)] {
                    let yy = t.y0 + dy;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for (dxo, wx) in [(0, 1.0 - t.fx), (1, t.fx)] {
                        let xx = t.x0 + dxo;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        let base = (yy as usize * w + xx as usize) * c + g * cg;
                        let wt = wy * wx;
                        for ch in 0..cg {
                            dx[base + ch] += wt * go[ch];
                        }
                    }
                }
                // derivative of the interpolated value w.r.t. the pixel-space
                // sample location, then chain through denormalisation
                let mut d_py = 0.0;
                let mut d_px = 0.0;
                for ch in 0..cg {
                    let chn = g * cg + ch;
                    let v00 = read(t.y0, t.x0, chn);
                    let v01 = read(t.y0, t.x0 + 1, chn);
                    let v10 = read(t.y0 + 1, t.x0, chn);
                    let v11 = read(t.y0 + 1, t.x0 + 1, chn);
                    d_py += go[ch] * ((v10 - v00) * (1.0 - t.fx) + (v11 - v01) * t.fx);
                    d_px += go[ch] * ((v01 - v00) * (1.0 - t.fy) + (v11 - v10) * t.fy);
                }
                doff[oy] += d_py * h as f64 / 2.0;
                doff[oy + 1] += d_px * w as f64 / 2.0;
            }
        }
    }
    (dx, doff)
}
