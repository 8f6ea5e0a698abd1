use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv1d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dilation: usize,
    },
    Relu(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Concat(Vec<Var>),
    WeightedSum {
        values: Var,
        weights: Var,
    },
    Add(Var, Var),
    Matmul(Var, Var),
    Scale(Var, f64),
    SliceRows {
        x: Var,
        start: usize,
    },
    SoftCrossEntropy {
        logits: Var,
        targets: Vec<f64>,
        probs: Vec<f64>,
    },
    Sum(Var),
    SumSquares(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive applications in execution order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every trainable leaf of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a trainable leaf; `None` for constants and intermediate nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Offsets of tap `j` and the output range `[t0, t1)` for which the input index is in bounds.
#[inline]
fn tap_range(j: usize, half: usize, dilation: usize, t: usize) -> (isize, usize, usize) {
    let off = (j as isize - half as isize) * dilation as isize;
    if off >= 0 {
        (off, 0, t.saturating_sub(off as usize))
    } else {
        (off, ((-off) as usize).min(t), t)
    }
}

/// Layout of a softmax axis: (outer groups, axis length, stride).
fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let stride = shape[axis + 1..].iter().product();
    (outer, shape[axis], stride)
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Length-preserving dilated convolution over the last axis.
    ///
    /// `x` is `[c_in, t]`, `w` is `[c_out, c_in, k]` with odd `k`, `b` is `[c_out]`. The input
    /// is zero-padded by `dilation * (k - 1) / 2` frames on each side.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (ci, t) = xv.dims2();
        let [co, wci, k] = *wv.shape() else {
            return Err(Error::shape("conv1d", format!("weight shape {:?}", wv.shape())));
        };
        if wci != ci {
            return Err(Error::shape(
                "conv1d",
                format!("input has {ci} channels, weight expects {wci}"),
            ));
        }
        if k % 2 == 0 || dilation == 0 {
            return Err(Error::shape(
                "conv1d",
                format!("kernel {k} must be odd and dilation {dilation} positive"),
            ));
        }
        if let Some(b) = b {
            if self.value(b).len() != co {
                return Err(Error::shape(
                    "conv1d",
                    format!("bias has {} entries for {co} outputs", self.value(b).len()),
                ));
            }
        }
        let half = (k - 1) / 2;
        let xd = xv.data();
        let wd = wv.data();
        let mut y = vec![0.0; co * t];
        for o in 0..co {
            let yrow = &mut y[o * t..(o + 1) * t];
            if let Some(b) = b {
                yrow.fill(self.nodes[b.0].value.data()[o]);
            }
            for i in 0..ci {
                let xrow = &xd[i * t..(i + 1) * t];
                for j in 0..k {
                    let wt = wd[(o * ci + i) * k + j];
                    let (off, t0, t1) = tap_range(j, half, dilation, t);
                    if t0 >= t1 {
                        continue;
                    }
                    let xs = &xrow[(t0 as isize + off) as usize..(t1 as isize + off) as usize];
                    for (yv, xv) in yrow[t0..t1].iter_mut().zip(xs) {
                        *yv += wt * xv;
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.any_grad(&inputs);
        Ok(self.push(
            Tensor::new(vec![co, t], y)?,
            Op::Conv1d { x, w, b, dilation },
            rg,
        ))
    }

    /// 1x1 convolution: a per-frame linear map across channels.
    pub fn pointwise_conv(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let k = self.value(w).shape().get(2).copied();
        if k != Some(1) {
            return Err(Error::shape(
                "pointwise_conv",
                format!("weight shape {:?} is not [c_out, c_in, 1]", self.value(w).shape()),
            ));
        }
        self.conv1d(x, w, b, 1)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(0.0)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// Inverted dropout. Identity (the same `Var`) when `train` is false or `p` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} not in [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let v = self.value(x);
        let mask: Vec<f64> = (0..v.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }

    /// `w x + b` for a vector `x` of length `in`, `w` of shape `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(w);
        let (out, inp) = wv.dims2();
        if wv.shape().len() != 2 || xv.len() != inp {
            return Err(Error::shape(
                "linear",
                format!("weight {:?} applied to input of {} entries", wv.shape(), xv.len()),
            ));
        }
        let mut y: Vec<f64> = match b {
            Some(b) if self.value(b).len() != out => {
                return Err(Error::shape("linear", format!("bias length for {out} outputs")))
            }
            Some(b) => self.value(b).data().to_vec(),
            None => vec![0.0; out],
        };
        let xd = xv.data();
        for (o, yo) in y.iter_mut().enumerate() {
            *yo += wv.data()[o * inp..(o + 1) * inp]
                .iter()
                .zip(xd)
                .map(|(a, b)| a * b)
                .sum::<f64>();
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.any_grad(&inputs);
        Ok(self.push(Tensor::vector(y), Op::Linear { x, w, b }, rg))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let v = self.value(x);
        if axis >= v.shape().len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} for shape {:?}", v.shape()),
            ));
        }
        let (outer, len, stride) = axis_layout(v.shape(), axis);
        let xd = v.data();
        let mut y = vec![0.0; xd.len()];
        for o in 0..outer {
            for s in 0..stride {
                let idx = |l: usize| o * len * stride + l * stride + s;
                let max = (0..len).map(|l| xd[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (xd[idx(l)] - max).exp();
                    y[idx(l)] = e;
                    z += e;
                }
                for l in 0..len {
                    y[idx(l)] /= z;
                }
            }
        }
        let value = Tensor::new(v.shape().to_vec(), y)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    /// Concatenation along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("concat", "no inputs"));
        };
        let trailing = self.value(*first).shape()[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = self.value(*p);
            if v.shape()[1..] != trailing[..] {
                return Err(Error::shape(
                    "concat",
                    format!("shape {:?} vs trailing dims {trailing:?}", v.shape()),
                ));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(trailing);
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(parts.to_vec()), rg))
    }

    /// `sum_t weights[t] * values[:, t]` for `values` of shape `[c, t]`.
    pub fn weighted_sum(&mut self, values: Var, weights: Var) -> Result<Var> {
        let vv = self.value(values);
        let wv = self.value(weights);
        let (c, t) = vv.dims2();
        if wv.len() != t {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {t} frames", wv.len()),
            ));
        }
        let wd = wv.data();
        let y = (0..c)
            .map(|r| {
                vv.data()[r * t..(r + 1) * t]
                    .iter()
                    .zip(wd)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        let rg = self.any_grad(&[values, weights]);
        Ok(self.push(Tensor::vector(y), Op::WeightedSum { values, weights }, rg))
    }

    /// Elementwise sum of two same-shape tensors (residual connection).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn residual_add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add(a, b)
    }

    /// Matrix product of `[m, k]` and `[k, n]`; 1-D operands are single rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (k2, n) = self.value(b).dims2();
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!(
                    "{:?} x {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut y = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut y[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                for (yv, bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *yv += av * bv;
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], y)?, Op::Matmul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a * c).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    /// Rows `start..start + len` of the first axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let rows = v.shape()[0];
        if start + len > rows || v.shape().len() < 2 {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{} of shape {:?}", start + len, v.shape()),
            ));
        }
        let width: usize = v.shape()[1..].iter().product();
        let data = v.data()[start * width..(start + len) * width].to_vec();
        let mut shape = v.shape().to_vec();
        shape[0] = len;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::SliceRows { x, start }, rg))
    }

    /// `-sum_k targets[k] * log softmax(logits)[k]`.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != targets.len() {
            return Err(Error::shape(
                "soft_cross_entropy",
                format!("{} logits, {} targets", z.len(), targets.len()),
            ));
        }
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = -targets.iter().zip(z).map(|(t, v)| t * (v - lse)).sum::<f64>();
        let probs = z.iter().map(|v| (v - lse).exp()).collect();
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::SumSquares(x), rg)
    }

    /// Reverse pass from a scalar node. Every trainable leaf gets a gradient, zero if the
    /// loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop_node(node, &gy, &mut grads);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let g = grads[v.0].get_or_insert_with(|| Tensor::zeros(node.value.shape()));
        f(g.data_mut());
    }

    fn backprop_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let g = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d { x, w, b, dilation } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (ci, t) = xv.dims2();
                let [co, _, k] = *wv.shape() else { unreachable!() };
                let half = (k - 1) / 2;
                let d = *dilation;
                if let Some(b) = b {
                    self.accumulate(grads, *b, |gb| {
                        for o in 0..co {
                            gb[o] += g[o * t..(o + 1) * t].iter().sum::<f64>();
                        }
                    });
                }
                self.accumulate(grads, *w, |gw| {
                    let xd = xv.data();
                    for o in 0..co {
                        let grow = &g[o * t..(o + 1) * t];
                        for i in 0..ci {
                            let xrow = &xd[i * t..(i + 1) * t];
                            for j in 0..k {
                                let (off, t0, t1) = tap_range(j, half, d, t);
                                if t0 >= t1 {
                                    continue;
                                }
                                let xs = &xrow
                                    [(t0 as isize + off) as usize..(t1 as isize + off) as usize];
                                gw[(o * ci + i) * k + j] +=
                                    grow[t0..t1].iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    let wd = wv.data();
                    for o in 0..co {
                        let grow = &g[o * t..(o + 1) * t];
                        for i in 0..ci {
                            let gxrow = &mut gx[i * t..(i + 1) * t];
                            for j in 0..k {
                                let wt = wd[(o * ci + i) * k + j];
                                let (off, t0, t1) = tap_range(j, half, d, t);
                                if t0 >= t1 {
                                    continue;
                                }
                                let dst = &mut gxrow
                                    [(t0 as isize + off) as usize..(t1 as isize + off) as usize];
                                for (a, b) in dst.iter_mut().zip(&grow[t0..t1]) {
                                    *a += wt * b;
                                }
                            }
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for ((a, &xv), &gv) in gx.iter_mut().zip(xd).zip(g) {
                        if xv > 0.0 {
                            *a += gv;
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                self.accumulate(grads, *x, |gx| {
                    for ((a, m), gv) in gx.iter_mut().zip(mask).zip(g) {
                        *a += m * gv;
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let xd = self.value(*x).data();
                let wd = self.value(*w).data();
                let inp = xd.len();
                if let Some(b) = b {
                    self.accumulate(grads, *b, |gb| {
                        for (a, gv) in gb.iter_mut().zip(g) {
                            *a += gv;
                        }
                    });
                }
                self.accumulate(grads, *w, |gw| {
                    for (o, gv) in g.iter().enumerate() {
                        for (a, xv) in gw[o * inp..(o + 1) * inp].iter_mut().zip(xd) {
                            *a += gv * xv;
                        }
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    for (o, gv) in g.iter().enumerate() {
                        for (a, wv) in gx.iter_mut().zip(&wd[o * inp..(o + 1) * inp]) {
                            *a += gv * wv;
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, stride) = axis_layout(node.value.shape(), *axis);
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for s in 0..stride {
                            let idx = |l: usize| o * len * stride + l * stride + s;
                            let dot: f64 = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                            for l in 0..len {
                                gx[idx(l)] += y[idx(l)] * (g[idx(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    self.accumulate(grads, *p, |gp| {
                        for (a, gv) in gp.iter_mut().zip(&g[offset..offset + n]) {
                            *a += gv;
                        }
                    });
                    offset += n;
                }
            }
            Op::WeightedSum { values, weights } => {
                let vv = self.value(*values);
                let wd = self.value(*weights).data();
                let (c, t) = vv.dims2();
                self.accumulate(grads, *values, |gv| {
                    for r in 0..c {
                        for (a, w) in gv[r * t..(r + 1) * t].iter_mut().zip(wd) {
                            *a += g[r] * w;
                        }
                    }
                });
                self.accumulate(grads, *weights, |gw| {
                    for r in 0..c {
                        for (a, v) in gw.iter_mut().zip(&vv.data()[r * t..(r + 1) * t]) {
                            *a += g[r] * v;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    self.accumulate(grads, *v, |gv| {
                        for (x, gy) in gv.iter_mut().zip(g) {
                            *x += gy;
                        }
                    });
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = self.value(*a).dims2();
                let (_, n) = self.value(*b).dims2();
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            ga[i * k + p] += g[i * n..(i + 1) * n]
                                .iter()
                                .zip(&bd[p * n..(p + 1) * n])
                                .map(|(x, y)| x * y)
                                .sum::<f64>();
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            for (x, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *x += av * gv;
                            }
                        }
                    }
                });
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, |gx| {
                    for (a, gv) in gx.iter_mut().zip(g) {
                        *a += c * gv;
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let width: usize = node.value.shape()[1..].iter().product();
                let off = start * width;
                self.accumulate(grads, *x, |gx| {
                    for (a, gv) in gx[off..off + g.len()].iter_mut().zip(g) {
                        *a += gv;
                    }
                });
            }
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let mass: f64 = targets.iter().sum();
                self.accumulate(grads, *logits, |gz| {
                    for ((a, p), t) in gz.iter_mut().zip(probs).zip(targets) {
                        *a += g[0] * (p * mass - t);
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |gx| {
                    for a in gx.iter_mut() {
                        *a += g[0];
                    }
                });
            }
            Op::SumSquares(x) => {
                let xd = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for (a, v) in gx.iter_mut().zip(xd) {
                        *a += 2.0 * v * g[0];
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution with explicit zero padding.
    fn conv_oracle(x: &[Vec<f64>], w: &[Vec<Vec<f64>>], b: &[f64], d: usize) -> Vec<Vec<f64>> {
        let t = x[0].len() as isize;
        let k = w[0][0].len();
        let half = ((k - 1) / 2) as isize;
        (0..w.len())
            .map(|o| {
                (0..t)
                    .map(|tt| {
                        let mut s = b[o];
                        for (i, xi) in x.iter().enumerate() {
                            for j in 0..k {
                                let src = tt + (j as isize - half) * d as isize;
                                if src >= 0 && src < t {
                                    s += w[o][i][j] * xi[src as usize];
                                }
                            }
                        }
                        s
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn zero_conv_gives_zero_output() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 5, (0..10).map(f64::from).collect()).unwrap());
        let w = tape.param(Tensor::zeros(&[3, 2, 3]));
        let b = tape.param(Tensor::zeros(&[3]));
        let y = tape.conv1d(x, w, Some(b), 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[3, 5]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn left_tap_dilated_conv_matches_oracle() {
        let input = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 6, input.clone()).unwrap());
        let w = tape.param(Tensor::new(vec![1, 1, 3], vec![1.0, 0.0, 0.0]).unwrap());
        let y = tape.conv1d(x, w, None, 2).unwrap();
        let want = conv_oracle(&[input], &[vec![vec![1.0, 0.0, 0.0]]], &[0.0], 2);
        assert_eq!(want[0], vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(tape.value(y).data(), &want[0][..]);
    }

    #[test]
    fn random_conv_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &(ci, co, k, d, t) in &[(3, 2, 3, 1, 7), (2, 4, 5, 3, 4), (1, 1, 3, 8, 3), (4, 3, 1, 1, 1)] {
            let x: Vec<Vec<f64>> = (0..ci).map(|_| (0..t).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let w: Vec<Vec<Vec<f64>>> = (0..co)
                .map(|_| (0..ci).map(|_| (0..k).map(|_| rng.random_range(-1.0..1.0)).collect()).collect())
                .collect();
            let b: Vec<f64> = (0..co).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::matrix(ci, t, x.concat()).unwrap());
            let wv = tape.param(Tensor::new(vec![co, ci, k], w.iter().flatten().flatten().copied().collect()).unwrap());
            let bv = tape.param(Tensor::vector(b.clone()));
            let y = tape.conv1d(xv, wv, Some(bv), d).unwrap();
            let want = conv_oracle(&x, &w, &b, d).concat();
            for (a, b) in tape.value(y).data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_shape_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 4]));
        let w = tape.param(Tensor::zeros(&[1, 3, 3]));
        assert!(matches!(tape.conv1d(x, w, None, 1), Err(Error::Shape { .. })));
        let w = tape.param(Tensor::zeros(&[1, 2, 2]));
        assert!(tape.conv1d(x, w, None, 1).is_err());
        let w = tape.param(Tensor::zeros(&[1, 2, 3]));
        assert!(tape.pointwise_conv(x, w, None).is_err());
    }

    #[test]
    fn softmax_equal_logits_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.7; 4]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -5.0, 0.0, 50.0]).unwrap());
        for axis in [0, 1] {
            let y = tape.softmax(x, axis).unwrap();
            let d = tape.value(y).data().to_vec();
            if axis == 1 {
                assert!((d[0] + d[1] + d[2] - 1.0).abs() < 1e-15);
                assert!((d[3] + d[4] + d[5] - 1.0).abs() < 1e-15);
            } else {
                assert!((d[0] + d[3] - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn sum_of_squares_gradient_is_two_x() {
        let mut tape = Tape::new();
        let xs = vec![1.5, -2.0, 0.25];
        let x = tape.param(Tensor::vector(xs.clone()));
        let y = tape.sum_squares(x);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn soft_cross_entropy_gradient_is_p_minus_t() {
        let mut tape = Tape::new();
        let z = vec![0.3, -1.2, 2.0, 0.0];
        let t = vec![0.1, 0.2, 0.6, 0.1];
        let x = tape.param(Tensor::vector(z.clone()));
        let l = tape.soft_cross_entropy(x, &t).unwrap();
        let g = tape.backward(l).unwrap();
        let zsum: f64 = z.iter().map(|v| v.exp()).sum();
        for k in 0..4 {
            let p = z[k].exp() / zsum;
            assert!((g.get(x).unwrap().data()[k] - (p - t[k])).abs() < 1e-15);
        }
    }

    #[test]
    fn unused_param_gets_zero_gradient_and_fanout_accumulates() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::vector(vec![2.0]));
        let unused = tape.param(Tensor::vector(vec![5.0, 6.0]));
        let s = tape.add(a, a).unwrap();
        let l = tape.sum(s);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[2.0]);
        assert_eq!(g.get(unused).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(a), Err(Error::Shape { .. })));
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(tape.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        assert!(tape.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_preserves_expectation() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = tape.constant(Tensor::vector(vec![1.0; 100_000]));
        let y = tape.dropout(x, 0.3, true, &mut rng).unwrap();
        let mean = tape.value(y).data().iter().sum::<f64>() / 1e5;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
        let dropped = tape.value(y).data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
        assert!((dropped - 0.3).abs() < 0.01);
    }

    #[test]
    fn weighted_sum_and_matmul_values() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let w = tape.constant(Tensor::vector(vec![0.5, 0.25, 0.25]));
        let s = tape.weighted_sum(v, w).unwrap();
        assert_eq!(tape.value(s).data(), &[1.75, 4.75]);
        let q = tape.constant(Tensor::matrix(1, 2, vec![1.0, -1.0]).unwrap());
        let m = tape.matmul(q, v).unwrap();
        assert_eq!(tape.value(m).data(), &[-3.0, -3.0, -3.0]);
        assert_eq!(tape.value(m).shape(), &[1, 3]);
    }
}
