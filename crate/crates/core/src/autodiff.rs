//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value and enough context to run
//! its backward rule. Nodes only ever reference earlier nodes, so a single
//! reverse sweep over the tape visits each op once in valid order.

use crate::error::{Error, Result};
use crate::linalg::{gemm, Strides};
use crate::moments::{mean_var, MomentScope};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    GlobalAvg,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        stride: usize,
        padding: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    AvgPool {
        input: Var,
        window: usize,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Standardize {
        input: Var,
        scope: MomentScope,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        input: Var,
        gamma: Var,
        beta: Var,
    },
    InstanceAffine {
        input: Var,
        scale: Var,
        shift: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    SliceAxis1 {
        input: Var,
        start: usize,
    },
    ConcatAxis1(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<Tensor> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.shapes[var.0].clone(), g.clone()))
    }

    /// Gradient, or zeros when nothing flowed into `var`.
    pub fn get_or_zeros(&self, var: Var) -> Tensor {
        self.get(var)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

fn check_axis1_split(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape("axis1", format!("rank {} < 2", shape.len())));
    }
    let outer = shape[0];
    let mid = shape[1];
    let inner = shape[2..].iter().product();
    Ok((outer, mid, inner))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf treated as constant by the backward pass.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, name: &'static str, value: Tensor, inputs: &[Var], op: Op) -> Result<Var> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        let (n, c, h, w) = x.dims4()?;
        let (o, ki, kh, kw) = k.dims4()?;
        if ki != c {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, kernel expects {ki}"),
            ));
        }
        if stride == 0 {
            return Err(Error::param("stride", "must be >= 1"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (+{padding})"),
            ));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w,
            kh,
            kw,
            stride,
            padding,
        };
        let cols = geom.im2col(x.data());
        let (rows, np) = (geom.rows(), geom.np());
        let mut out_t = vec![0.0; o * np];
        gemm(
            o,
            rows,
            np,
            k.data(),
            Strides::row_major(rows),
            &cols,
            Strides::row_major(np),
            0.0,
            &mut out_t,
            Strides::row_major(np),
        );
        let p = geom.p();
        let mut out = vec![0.0; n * o * p];
        for oc in 0..o {
            for b in 0..n {
                let src = &out_t[oc * np + b * p..oc * np + (b + 1) * p];
                out[(b * o + oc) * p..(b * o + oc + 1) * p].copy_from_slice(src);
            }
        }
        let value = Tensor::from_parts(vec![n, o, geom.ho(), geom.wo()], out);
        self.push(
            "conv2d",
            value,
            &[input, kernel],
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
        )
    }

    /// `input · weight + bias` for `input` N×D, `weight` D×M, `bias` M.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let wt = self.value(weight);
        let b = self.value(bias);
        let (n, d) = x.dims2()?;
        let (d2, m) = wt.dims2()?;
        if d != d2 {
            return Err(Error::shape("linear", format!("input width {d} vs weight rows {d2}")));
        }
        if b.shape() != [m] {
            return Err(Error::shape("linear", format!("bias {:?} vs {m} outputs", b.shape())));
        }
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(b.data());
        }
        gemm(
            n,
            d,
            m,
            x.data(),
            Strides::row_major(d),
            wt.data(),
            Strides::row_major(m),
            1.0,
            &mut out,
            Strides::row_major(m),
        );
        let value = Tensor::from_parts(vec![n, m], out);
        self.push("linear", value, &[input, weight, bias], Op::Linear { input, weight, bias })
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push("relu", value, &[input], Op::Relu(input))
    }

    pub fn pool2d(&mut self, input: Var, window: usize, mode: PoolMode) -> Result<Var> {
        match mode {
            PoolMode::Avg => self.avg_pool2d(input, window),
            PoolMode::GlobalAvg => self.global_avg_pool(input),
        }
    }

    /// Non-overlapping `window`×`window` average pooling.
    pub fn avg_pool2d(&mut self, input: Var, window: usize) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        if window == 0 || h % window != 0 || w % window != 0 {
            return Err(Error::shape(
                "avg_pool2d",
                format!("window {window} does not divide {h}x{w}"),
            ));
        }
        let (ho, wo) = (h / window, w / window);
        let scale = 1.0 / (window * window) as f64;
        let src = x.data();
        let mut out = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            let sp = &src[plane * h * w..(plane + 1) * h * w];
            let dp = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for y in 0..h {
                let row = &sp[y * w..(y + 1) * w];
                let drow = &mut dp[(y / window) * wo..(y / window + 1) * wo];
                for (x, v) in row.iter().enumerate() {
                    drow[x / window] += v;
                }
            }
            dp.iter_mut().for_each(|v| *v *= scale);
        }
        let value = Tensor::from_parts(vec![n, c, ho, wo], out);
        self.push("avg_pool2d", value, &[input], Op::AvgPool { input, window })
    }

    /// Spatial mean, N×C×H×W → N×C×1×1.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let out = x
            .data()
            .chunks_exact(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::from_parts(vec![n, c, 1, 1], out);
        self.push("global_avg_pool", value, &[input], Op::GlobalAvgPool(input))
    }

    pub fn reshape(&mut self, input: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(input).reshape(shape)?;
        self.push("reshape", value, &[input], Op::Reshape(input))
    }

    /// Collapses every axis after the first.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let shape = self.value(input).shape();
        let n = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(input, vec![n, rest])
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        let (n, c) = z.dims2()?;
        if labels.len() != n {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for (i, row) in z.data().chunks_exact(c).enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_sum = sum.ln() + max;
            for (j, v) in row.iter().enumerate() {
                probs[i * c + j] = (v - log_sum).exp();
            }
            loss += log_sum - row[labels[i]];
        }
        let value = Tensor::scalar(loss / n as f64);
        self.push(
            "softmax_cross_entropy",
            value,
            &[logits],
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    /// Subtracts the per-channel mean and divides by `sqrt(var + eps)`, with
    /// moments taken over `scope`. The moments are differentiated through.
    pub fn standardize(&mut self, input: Var, scope: MomentScope, eps: f64) -> Result<Var> {
        if !(eps >= 0.0) {
            return Err(Error::param("eps", "must be >= 0"));
        }
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let src = x.data();
        let mut out = vec![0.0; src.len()];
        let inv_std = match scope {
            MomentScope::PerInstance => {
                let mut inv_std = Vec::with_capacity(n * c);
                for (g, grp) in src.chunks_exact(hw).enumerate() {
                    let (mean, var) = mean_var(grp.iter().copied(), hw);
                    let inv = 1.0 / (var + eps).sqrt();
                    if !inv.is_finite() {
                        return Err(Error::NonFinite("standardize"));
                    }
                    for (o, v) in out[g * hw..(g + 1) * hw].iter_mut().zip(grp) {
                        *o = (v - mean) * inv;
                    }
                    inv_std.push(inv);
                }
                inv_std
            }
            MomentScope::PerBatch => {
                let mut inv_std = Vec::with_capacity(c);
                for ch in 0..c {
                    let values = (0..n).flat_map(|b| {
                        let off = (b * c + ch) * hw;
                        src[off..off + hw].iter().copied()
                    });
                    let (mean, var) = mean_var(values, n * hw);
                    let inv = 1.0 / (var + eps).sqrt();
                    if !inv.is_finite() {
                        return Err(Error::NonFinite("standardize"));
                    }
                    for b in 0..n {
                        let off = (b * c + ch) * hw;
                        for i in off..off + hw {
                            out[i] = (src[i] - mean) * inv;
                        }
                    }
                    inv_std.push(inv);
                }
                inv_std
            }
        };
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        self.push(
            "standardize",
            value,
            &[input],
            Op::Standardize {
                input,
                scope,
                inv_std,
            },
        )
    }

    /// `gamma[c] · x + beta[c]` for NCHW `x`.
    pub fn channel_affine(&mut self, input: Var, gamma: Var, beta: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        let g = self.value(gamma);
        let b = self.value(beta);
        if g.shape() != [c] || b.shape() != [c] {
            return Err(Error::shape(
                "channel_affine",
                format!("gamma {:?} / beta {:?} for {c} channels", g.shape(), b.shape()),
            ));
        }
        let hw = h * w;
        let mut out = x.data().to_vec();
        for (plane, chunk) in out.chunks_exact_mut(hw).enumerate() {
            let ch = plane % c;
            let (gv, bv) = (g.data()[ch], b.data()[ch]);
            chunk.iter_mut().for_each(|v| *v = gv * *v + bv);
        }
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        self.push(
            "channel_affine",
            value,
            &[input, gamma, beta],
            Op::ChannelAffine { input, gamma, beta },
        )
    }

    /// `scale[n, c] · x + shift[n, c]` for NCHW `x`, one code per instance.
    pub fn instance_affine(&mut self, input: Var, scale: Var, shift: Var) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4()?;
        let s = self.value(scale);
        let t = self.value(shift);
        if s.shape() != [n, c] || t.shape() != [n, c] {
            return Err(Error::shape(
                "instance_affine",
                format!("scale {:?} / shift {:?} for {n}x{c}", s.shape(), t.shape()),
            ));
        }
        let hw = h * w;
        let mut out = x.data().to_vec();
        for (plane, chunk) in out.chunks_exact_mut(hw).enumerate() {
            let (sv, tv) = (s.data()[plane], t.data()[plane]);
            chunk.iter_mut().for_each(|v| *v = sv * *v + tv);
        }
        let value = Tensor::from_parts(vec![n, c, h, w], out);
        self.push(
            "instance_affine",
            value,
            &[input, scale, shift],
            Op::InstanceAffine { input, scale, shift },
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        self.push("add", value, &[a, b], Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        self.push("mul", value, &[a, b], Op::Mul(a, b))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        let value = self.value(input).map(|v| v * factor);
        self.push("scale", value, &[input], Op::Scale(input, factor))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(input).data().iter().sum());
        self.push("sum", value, &[input], Op::Sum(input))
    }

    /// Entries `[start, end)` along axis 1 (channels for NCHW, columns for N×D).
    pub fn slice_axis1(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let x = self.value(input);
        let (outer, mid, inner) = check_axis1_split(x.shape())?;
        if start >= end || end > mid {
            return Err(Error::shape("slice_axis1", format!("[{start}, {end}) of {mid}")));
        }
        let width = end - start;
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let off = (o * mid + start) * inner;
            out.extend_from_slice(&x.data()[off..off + width * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[1] = width;
        let value = Tensor::from_parts(shape, out);
        self.push("slice_axis1", value, &[input], Op::SliceAxis1 { input, start })
    }

    pub fn concat_axis1(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (oa, ma, ia) = check_axis1_split(va.shape())?;
        let (ob, mb, ib) = check_axis1_split(vb.shape())?;
        if oa != ob || ia != ib || va.shape()[2..] != vb.shape()[2..] {
            return Err(Error::shape(
                "concat_axis1",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for o in 0..oa {
            out.extend_from_slice(&va.data()[o * ma * ia..(o + 1) * ma * ia]);
            out.extend_from_slice(&vb.data()[o * mb * ib..(o + 1) * mb * ib]);
        }
        let mut shape = va.shape().to_vec();
        shape[1] = ma + mb;
        let value = Tensor::from_parts(shape, out);
        self.push("concat_axis1", value, &[a, b], Op::ConcatAxis1(a, b))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                let (n, c, h, w) = x.dims4().expect("checked in forward");
                let (o, _, kh, kw) = k.dims4().expect("checked in forward");
                let geom = ConvGeom {
                    n,
                    c,
                    h,
                    w,
                    kh,
                    kw,
                    stride: *stride,
                    padding: *padding,
                };
                let (rows, np, p) = (geom.rows(), geom.np(), geom.p());
                let mut g_t = vec![0.0; o * np];
                for oc in 0..o {
                    for b in 0..n {
                        g_t[oc * np + b * p..oc * np + (b + 1) * p]
                            .copy_from_slice(&g[(b * o + oc) * p..(b * o + oc + 1) * p]);
                    }
                }
                if self.wants(*kernel) {
                    let cols = geom.im2col(x.data());
                    let dk = accum(grads, *kernel, k.len());
                    gemm(
                        o,
                        np,
                        rows,
                        &g_t,
                        Strides::row_major(np),
                        &cols,
                        Strides::transposed(np),
                        1.0,
                        dk,
                        Strides::row_major(rows),
                    );
                }
                if self.wants(*input) {
                    let mut dcols = vec![0.0; rows * np];
                    gemm(
                        rows,
                        o,
                        np,
                        k.data(),
                        Strides::transposed(rows),
                        &g_t,
                        Strides::row_major(np),
                        0.0,
                        &mut dcols,
                        Strides::row_major(np),
                    );
                    let dx = accum(grads, *input, x.len());
                    geom.col2im(&dcols, dx);
                }
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(*input);
                let wt = self.value(*weight);
                let (n, d) = x.dims2().expect("checked in forward");
                let m = wt.shape()[1];
                if self.wants(*input) {
                    let dx = accum(grads, *input, n * d);
                    gemm(
                        n,
                        m,
                        d,
                        g,
                        Strides::row_major(m),
                        wt.data(),
                        Strides::transposed(m),
                        1.0,
                        dx,
                        Strides::row_major(d),
                    );
                }
                if self.wants(*weight) {
                    let dw = accum(grads, *weight, d * m);
                    gemm(
                        d,
                        n,
                        m,
                        x.data(),
                        Strides::transposed(d),
                        g,
                        Strides::row_major(m),
                        1.0,
                        dw,
                        Strides::row_major(m),
                    );
                }
                if self.wants(*bias) {
                    let db = accum(grads, *bias, m);
                    for row in g.chunks_exact(m) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Relu(input) => {
                let x = self.value(*input);
                let dx = accum(grads, *input, x.len());
                for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(x.data()) {
                    if xv > 0.0 {
                        *d += gv;
                    }
                }
            }
            Op::AvgPool { input, window } => {
                let x = self.value(*input);
                let (n, c, h, w) = x.dims4().expect("checked in forward");
                let (ho, wo) = (h / window, w / window);
                let scale = 1.0 / (window * window) as f64;
                let dx = accum(grads, *input, x.len());
                for plane in 0..n * c {
                    let gp = &g[plane * ho * wo..(plane + 1) * ho * wo];
                    let dp = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..h {
                        let grow = &gp[(y / window) * wo..(y / window + 1) * wo];
                        for (x_, d) in dp[y * w..(y + 1) * w].iter_mut().enumerate() {
                            *d += grow[x_ / window] * scale;
                        }
                    }
                }
            }
            Op::GlobalAvgPool(input) => {
                let x = self.value(*input);
                let (_, _, h, w) = x.dims4().expect("checked in forward");
                let hw = h * w;
                let dx = accum(grads, *input, x.len());
                for (plane, chunk) in dx.chunks_exact_mut(hw).enumerate() {
                    let v = g[plane] / hw as f64;
                    chunk.iter_mut().for_each(|d| *d += v);
                }
            }
            Op::Reshape(input) => {
                let dx = accum(grads, *input, g.len());
                dx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = g[0] / n as f64;
                let dz = accum(grads, *logits, probs.len());
                for (i, &label) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        dz[i * c + j] += (probs[i * c + j] - onehot) * scale;
                    }
                }
            }
            Op::Standardize {
                input,
                scope,
                inv_std,
            } => {
                let xhat = node.value.data();
                let (n, c, h, w) = node.value.dims4().expect("checked in forward");
                let hw = h * w;
                let dx = accum(grads, *input, xhat.len());
                match scope {
                    MomentScope::PerInstance => {
                        for (grp, &inv) in inv_std.iter().enumerate() {
                            let r = grp * hw..(grp + 1) * hw;
                            standardize_backward(&g[r.clone()], &xhat[r.clone()], inv, &mut dx[r]);
                        }
                    }
                    MomentScope::PerBatch => {
                        for (ch, &inv) in inv_std.iter().enumerate() {
                            let count = (n * hw) as f64;
                            let mut mg = 0.0;
                            let mut mgx = 0.0;
                            for b in 0..n {
                                let off = (b * c + ch) * hw;
                                for i in off..off + hw {
                                    mg += g[i];
                                    mgx += g[i] * xhat[i];
                                }
                            }
                            mg /= count;
                            mgx /= count;
                            for b in 0..n {
                                let off = (b * c + ch) * hw;
                                for i in off..off + hw {
                                    dx[i] += inv * (g[i] - mg - xhat[i] * mgx);
                                }
                            }
                        }
                    }
                }
            }
            Op::ChannelAffine { input, gamma, beta } => {
                let x = self.value(*input);
                let gm = self.value(*gamma);
                let (_, c, h, w) = x.dims4().expect("checked in forward");
                let hw = h * w;
                if self.wants(*input) {
                    let dx = accum(grads, *input, x.len());
                    for (plane, chunk) in dx.chunks_exact_mut(hw).enumerate() {
                        let gv = gm.data()[plane % c];
                        for (d, v) in chunk.iter_mut().zip(&g[plane * hw..(plane + 1) * hw]) {
                            *d += gv * v;
                        }
                    }
                }
                if self.wants(*gamma) {
                    let dg = accum(grads, *gamma, c);
                    for (plane, xs) in x.data().chunks_exact(hw).enumerate() {
                        let gs = &g[plane * hw..(plane + 1) * hw];
                        dg[plane % c] += xs.iter().zip(gs).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                if self.wants(*beta) {
                    let db = accum(grads, *beta, c);
                    for (plane, gs) in g.chunks_exact(hw).enumerate() {
                        db[plane % c] += gs.iter().sum::<f64>();
                    }
                }
            }
            Op::InstanceAffine {
                input,
                scale,
                shift,
            } => {
                let x = self.value(*input);
                let s = self.value(*scale);
                let (_, _, h, w) = x.dims4().expect("checked in forward");
                let hw = h * w;
                if self.wants(*input) {
                    let dx = accum(grads, *input, x.len());
                    for (plane, chunk) in dx.chunks_exact_mut(hw).enumerate() {
                        let sv = s.data()[plane];
                        for (d, v) in chunk.iter_mut().zip(&g[plane * hw..(plane + 1) * hw]) {
                            *d += sv * v;
                        }
                    }
                }
                if self.wants(*scale) {
                    let ds = accum(grads, *scale, s.len());
                    for (plane, xs) in x.data().chunks_exact(hw).enumerate() {
                        let gs = &g[plane * hw..(plane + 1) * hw];
                        ds[plane] += xs.iter().zip(gs).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                if self.wants(*shift) {
                    let dt = accum(grads, *shift, s.len());
                    for (plane, gs) in g.chunks_exact(hw).enumerate() {
                        dt[plane] += gs.iter().sum::<f64>();
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        let d = accum(grads, *v, g.len());
                        d.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    if self.wants(*v) {
                        let o = self.value(*other).data();
                        let d = accum(grads, *v, g.len());
                        for ((x, y), z) in d.iter_mut().zip(g).zip(o) {
                            *x += y * z;
                        }
                    }
                }
            }
            Op::Scale(input, factor) => {
                let d = accum(grads, *input, g.len());
                d.iter_mut().zip(g).for_each(|(x, y)| *x += y * factor);
            }
            Op::Sum(input) => {
                let n = self.value(*input).len();
                let d = accum(grads, *input, n);
                d.iter_mut().for_each(|x| *x += g[0]);
            }
            Op::SliceAxis1 { input, start } => {
                let x = self.value(*input);
                let (outer, mid, inner) = check_axis1_split(x.shape()).expect("checked");
                let width = node.value.shape()[1];
                let d = accum(grads, *input, x.len());
                for o in 0..outer {
                    let off = (o * mid + start) * inner;
                    let src = &g[o * width * inner..(o + 1) * width * inner];
                    d[off..off + width * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::ConcatAxis1(a, b) => {
                let (oa, ma, ia) = check_axis1_split(self.value(*a).shape()).expect("checked");
                let mb = self.value(*b).shape()[1];
                let total = ma + mb;
                for (v, off, width) in [(a, 0, ma), (b, ma, mb)] {
                    if !self.wants(*v) {
                        continue;
                    }
                    let d = accum(grads, *v, oa * width * ia);
                    for o in 0..oa {
                        let src = &g[(o * total + off) * ia..(o * total + off + width) * ia];
                        d[o * width * ia..(o + 1) * width * ia]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
    }
}

fn accum(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn standardize_backward(g: &[f64], xhat: &[f64], inv: f64, dx: &mut [f64]) {
    let count = g.len() as f64;
    let mg = g.iter().sum::<f64>() / count;
    let mgx = g.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / count;
    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(xhat) {
        *d += inv * (gv - mg - xv * mgx);
    }
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn ho(&self) -> usize {
        (self.h + 2 * self.padding - self.kh) / self.stride + 1
    }

    fn wo(&self) -> usize {
        (self.w + 2 * self.padding - self.kw) / self.stride + 1
    }

    fn p(&self) -> usize {
        self.ho() * self.wo()
    }

    fn np(&self) -> usize {
        self.n * self.p()
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Source coordinate for output index `o` and kernel offset `k`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }

    /// Lays input patches out as a `rows × (N·P)` matrix.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (ho, wo, p, np) = (self.ho(), self.wo(), self.p(), self.np());
        let mut cols = vec![0.0; self.rows() * np];
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (ch * self.kh + ky) * self.kw + kx;
                    let row = &mut cols[r * np..(r + 1) * np];
                    for b in 0..self.n {
                        let plane = &x[(b * self.c + ch) * self.h * self.w..][..self.h * self.w];
                        for oy in 0..ho {
                            let Some(iy) = self.src(oy, ky, self.h) else { continue };
                            let dst = &mut row[b * p + oy * wo..b * p + (oy + 1) * wo];
                            let src_row = &plane[iy * self.w..(iy + 1) * self.w];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                if let Some(ix) = self.src(ox, kx, self.w) {
                                    *d = src_row[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatter-adds a `rows × (N·P)` matrix back onto the input layout.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (ho, wo, p, np) = (self.ho(), self.wo(), self.p(), self.np());
        for ch in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (ch * self.kh + ky) * self.kw + kx;
                    let row = &cols[r * np..(r + 1) * np];
                    for b in 0..self.n {
                        let plane =
                            &mut dx[(b * self.c + ch) * self.h * self.w..][..self.h * self.w];
                        for oy in 0..ho {
                            let Some(iy) = self.src(oy, ky, self.h) else { continue };
                            let src = &row[b * p + oy * wo..b * p + (oy + 1) * wo];
                            let dst_row = &mut plane[iy * self.w..(iy + 1) * self.w];
                            for (ox, v) in src.iter().enumerate() {
                                if let Some(ix) = self.src(ox, kx, self.w) {
                                    dst_row[ix] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Central-difference check of the gradient of a scalar function.
///
/// Returns the largest per-coordinate relative error
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::param("h", "must be > 0"));
    }
    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let y = f(&mut tape, x)?;
    if tape.value(y).len() != 1 {
        return Err(Error::shape("grad_check", "function must be scalar-valued"));
    }
    let analytic = tape.backward(y)?.get_or_zeros(x);

    let eval = |values: Vec<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(Tensor::new(point.shape().to_vec(), values)?);
        let out = f(&mut t, v)?;
        let r = t.value(out).data()[0];
        if !r.is_finite() {
            return Err(Error::NonFinite("grad_check"));
        }
        Ok(r)
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.data().to_vec();
        let mut minus = point.data().to_vec();
        plus[i] += h;
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn conv_ones_center_sums_nine() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let k = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(x, k, 1, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 3, 3]);
        assert_eq!(tape.value(y).data()[4], 9.0);
        assert_eq!(tape.value(y).data()[0], 4.0);
    }

    #[test]
    fn conv_zero_kernel_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::randn(&[2, 3, 5, 5], 1.0, &mut rng));
        let k = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let y = tape.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 4, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

        let bad = tape.constant(Tensor::zeros(&[4, 2, 3, 3]));
        assert!(matches!(tape.conv2d(x, bad, 1, 1), Err(Error::Shape { .. })));
        assert!(tape.conv2d(x, k, 0, 1).is_err());
    }

    #[test]
    fn linear_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let b = tape.constant(t(&[1], &[1.0]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[12.0]);

        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zb = tape.constant(Tensor::zeros(&[2]));
        let y = tape.linear(x, eye, zb).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let xs = tape.constant(t(&[3, 2], &[1.0, -2.0, 0.5, 4.0, 9.0, 1.0]));
        let zw = tape.constant(Tensor::zeros(&[2, 3]));
        let bias = tape.constant(t(&[3], &[0.1, 0.2, 0.3]));
        let y = tape.linear(xs, zw, bias).unwrap();
        for row in tape.value(y).data().chunks(3) {
            assert_eq!(row, &[0.1, 0.2, 0.3]);
        }
        assert!(tape.linear(xs, eye, bias).is_err());
    }

    #[test]
    fn relu_forward_and_backward() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn pooling_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.pool2d(x, 2, PoolMode::Avg).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);

        let c = tape.constant(Tensor::full(&[2, 3, 4, 4], 0.7));
        let y = tape.avg_pool2d(c, 2).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        let y = tape.pool2d(c, 0, PoolMode::GlobalAvg).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 3, 1, 1]);

        let odd = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(tape.avg_pool2d(odd, 2).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2, 10]));
        let l = tape.softmax_cross_entropy(z, &[3, 9]).unwrap();
        assert!((tape.value(l).data()[0] - 10f64.ln()).abs() < 1e-12);

        let z = tape.constant(t(&[1, 2], &[0.0, 3f64.ln()]));
        let l = tape.softmax_cross_entropy(z, &[1]).unwrap();
        assert!((tape.value(l).data()[0] + 0.75f64.ln()).abs() < 1e-12);
        assert!((tape.value(l).data()[0] - 0.287682).abs() < 1e-6);

        assert!(matches!(
            tape.softmax_cross_entropy(z, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let err = grad_check(|t, x| t.softmax_cross_entropy(x, &[0, 4, 2, 2]), &p, 1e-5).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn grad_check_square_and_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Tensor::randn(&[6], 2.0, &mut rng);
        let err = grad_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                t.sum(sq)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-7, "{err}");

        let err = grad_check(
            |t, x| {
                let s = t.scale(x, 3.0)?;
                t.sum(s)
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn nonfinite_values_are_rejected() {
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 1, 2, 2], 5.0));
        assert!(matches!(
            tape.standardize(x, MomentScope::PerInstance, 0.0),
            Err(Error::NonFinite(_))
        ));
        let big = tape.constant(Tensor::full(&[2], 1e308));
        assert!(matches!(tape.scale(big, 10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn slicing_and_concat_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let x = tape.param(Tensor::randn(&[2, 4, 3, 3], 1.0, &mut rng));
        let a = tape.slice_axis1(x, 0, 1).unwrap();
        let b = tape.slice_axis1(x, 1, 4).unwrap();
        let y = tape.concat_axis1(a, b).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn backward_skips_constant_branches() {
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::full(&[3], 2.0));
        let p = tape.param(Tensor::full(&[3], 1.0));
        let y = tape.mul(c, p).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().data(), &[2.0, 2.0, 2.0]);
    }
}
