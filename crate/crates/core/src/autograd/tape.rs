//! Reverse-mode differentiation over a linear record of primitive ops.
//!
//! Every op appends one node holding its output value. Nodes whose inputs
//! all have `requires_grad == false` are constants and are skipped by
//! [`Tape::backward`].

use super::gemm::gemm;
use super::{AutogradError, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D convolution over `N × C × H × W` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self { stride: 1, pad: 0 }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    ColDot(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        spec: Conv2dSpec,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Mean(Var),
    Sum(Var),
    RowSum(Var),
    DivRows(Var, Var),
    Log(Var),
    Exp(Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Transpose(Var),
    Reshape(Var),
    RowSoftmax(Var),
    LogSoftmax(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    GradReverse(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    ic: usize,
    h: usize,
    w: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.ic * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }
}

/// Gradients produced by one backward traversal, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; `None` if `var` does not
    /// require gradients.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

/// Recorded computation graph for a single forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize), AutogradError> {
    t.dims2().ok_or_else(|| AutogradError::BadRank {
        op,
        expected: "a rank-2 tensor",
        shape: t.shape().to_vec(),
    })
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> AutogradError {
    AutogradError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// Numerically stable `ln(σ(x))`.
fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Registers an input tensor. Leaves with `requires_grad` receive a
    /// gradient from [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn zip_same(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, AutogradError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op_name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`C` vector to every row of an `R × C` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, AutogradError> {
        let (tx, tb) = (self.value(x), self.value(row));
        let (r, c) = dims2("add_row", tx)?;
        if tb.shape() != [c] {
            return Err(mismatch("add_row", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for i in 0..r {
            for (v, b) in data[i * c..(i + 1) * c].iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let out = Tensor::from_parts(vec![r, c], data);
        let rg = self.rg(&[x, row]);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = dims2("matmul", ta)?;
        let (k2, n) = dims2("matmul", tb)?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut data = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, 0.0, &mut data);
        let out = Tensor::from_parts(vec![m, n], data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// Dot products between all column pairs: `out[i][j] = ⟨a[:, i], b[:, j]⟩`,
    /// i.e. `aᵀ · b`.
    pub fn col_dot(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (rows, ca) = dims2("col_dot", ta)?;
        let (rows2, cb) = dims2("col_dot", tb)?;
        if rows != rows2 {
            return Err(mismatch("col_dot", ta, tb));
        }
        let mut data = vec![0.0; ca * cb];
        gemm(ca, rows, cb, ta.data(), true, tb.data(), false, 0.0, &mut data);
        let out = Tensor::from_parts(vec![ca, cb], data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::ColDot(a, b), rg))
    }

    /// Cross-correlation of `N × IC × H × W` input with an `OC × IC × KH × KW`
    /// kernel plus a per-channel bias. Out-of-bounds taps read zero.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, spec: Conv2dSpec) -> Result<Var, AutogradError> {
        let (tx, tw, tb) = (self.value(input), self.value(weight), self.value(bias));
        let (&[n, ic, h, w], &[oc, wic, kh, kw]) = (tx.shape(), tw.shape()) else {
            return Err(mismatch("conv2d", tx, tw));
        };
        if wic != ic || tb.shape() != [oc] || spec.stride == 0 {
            return Err(mismatch("conv2d", tx, tw));
        }
        if h + 2 * spec.pad < kh || w + 2 * spec.pad < kw {
            return Err(mismatch("conv2d", tx, tw));
        }
        let oh = (h + 2 * spec.pad - kh) / spec.stride + 1;
        let ow = (w + 2 * spec.pad - kw) / spec.stride + 1;
        let geom = ConvGeom {
            n,
            ic,
            h,
            w,
            oc,
            kh,
            kw,
            oh,
            ow,
        };
        let cols = im2col(tx.data(), geom, spec);
        let (k, p) = (geom.k(), geom.p());
        let np = n * p;
        // oc × (n·p) then scatter into n × oc × p
        let mut tmp = vec![0.0; oc * np];
        gemm(oc, k, np, tw.data(), false, &cols, false, 0.0, &mut tmp);
        let mut data = vec![0.0; n * oc * p];
        for c in 0..oc {
            let b = tb.data()[c];
            for img in 0..n {
                let src = &tmp[c * np + img * p..c * np + (img + 1) * p];
                let dst = &mut data[(img * oc + c) * p..(img * oc + c + 1) * p];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
        let out = Tensor::from_parts(vec![n, oc, oh, ow], data);
        let rg = self.rg(&[input, weight, bias]);
        let cols = if rg { cols } else { Vec::new() };
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
                geom,
                cols,
            },
            rg,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    /// Non-overlapping `size × size` max pooling over the last two axes of an
    /// `N × C × H × W` tensor; trailing rows/columns that do not fill a window
    /// are dropped.
    pub fn max_pool(&mut self, input: Var, size: usize) -> Result<Var, AutogradError> {
        let tx = self.value(input);
        let &[n, c, h, w] = tx.shape() else {
            return Err(AutogradError::BadRank {
                op: "max_pool",
                expected: "an N×C×H×W tensor",
                shape: tx.shape().to_vec(),
            });
        };
        if size == 0 || h < size || w < size {
            return Err(AutogradError::BadRank {
                op: "max_pool",
                expected: "spatial dims at least the window size",
                shape: tx.shape().to_vec(),
            });
        }
        let (oh, ow) = (h / size, w / size);
        let x = tx.data();
        let mut data = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + i * size * w + j * size;
                    for di in 0..size {
                        for dj in 0..size {
                            let idx = base + (i * size + di) * w + j * size + dj;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    data.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::from_parts(vec![n, c, oh, ow], data);
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::MaxPool { input, argmax }, rg))
    }

    /// Mean of all elements, as a shape-`[1]` tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(m), Op::Mean(a), rg)
    }

    /// Sum of all elements, as a shape-`[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum::<f64>();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Row sums of an `R × C` matrix, shape `[R]`.
    pub fn row_sum(&mut self, a: Var) -> Result<Var, AutogradError> {
        let t = self.value(a);
        let (r, c) = dims2("row_sum", t)?;
        let data = (0..r).map(|i| t.data()[i * c..(i + 1) * c].iter().sum()).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![r], data), Op::RowSum(a), rg))
    }

    /// Divides row `i` of an `R × C` matrix by `d[i]`.
    pub fn div_rows(&mut self, x: Var, d: Var) -> Result<Var, AutogradError> {
        let (tx, td) = (self.value(x), self.value(d));
        let (r, c) = dims2("div_rows", tx)?;
        if td.shape() != [r] {
            return Err(mismatch("div_rows", tx, td));
        }
        let mut data = tx.data().to_vec();
        for i in 0..r {
            let di = td.data()[i];
            data[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= di);
        }
        let rg = self.rg(&[x, d]);
        Ok(self.push(Tensor::from_parts(vec![r, c], data), Op::DivRows(x, d), rg))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    /// Multiplies every element by the constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutogradError> {
        let t = self.value(a);
        let (r, c) = dims2("transpose", t)?;
        let out = Tensor::from_parts(vec![c, r], transpose_data(r, c, t.data()));
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutogradError> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.numel() || shape.contains(&0) {
            return Err(AutogradError::ShapeMismatch {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = Tensor::from_parts(shape.to_vec(), t.data().to_vec());
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Softmax over each row of an `R × C` matrix.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var, AutogradError> {
        let t = self.value(a);
        let (r, c) = dims2("row_softmax", t)?;
        let mut data = t.data().to_vec();
        for i in 0..r {
            softmax_in_place(&mut data[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![r, c], data), Op::RowSoftmax(a), rg))
    }

    /// Log-softmax over each row, shifted by the row maximum.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var, AutogradError> {
        let t = self.value(a);
        let (r, c) = dims2("log_softmax", t)?;
        let mut data = t.data().to_vec();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::from_parts(vec![r, c], data), Op::LogSoftmax(a), rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// `ln σ(x)` without overflow for large `|x|`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, log_sigmoid, Op::LogSigmoid(a))
    }

    /// Identity in the forward pass; negates the gradient in the backward pass.
    pub fn grad_reverse(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        let rg = self.rg(&[a]);
        self.push(out, Op::GradReverse(a), rg)
    }

    /// Back-propagates from a scalar `loss` and returns the gradient of every
    /// `requires_grad` leaf. Leaves that do not influence the loss receive
    /// zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutogradError> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(AutogradError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::from_parts(lt.shape().to_vec(), vec![1.0]));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, g, &mut grads);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            let is_param = node.requires_grad && matches!(node.op, Op::Leaf);
            if !is_param {
                *g = None;
            } else if g.is_none() {
                *g = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node, g: Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *b, g.clone());
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *b, g.map(|v| -v));
                self.accumulate(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = zip(&g, tb, |gv, bv| gv * bv);
                    self.accumulate(grads, *a, d);
                }
                if self.requires_grad(*b) {
                    let d = zip(&g, ta, |gv, av| gv * av);
                    self.accumulate(grads, *b, d);
                }
            }
            Op::AddRow(x, row) => {
                if self.requires_grad(*row) {
                    let (r, c) = g.dims2().expect("rank 2");
                    let mut db = vec![0.0; c];
                    for i in 0..r {
                        for (acc, v) in db.iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *row, Tensor::vector(db));
                }
                self.accumulate(grads, *x, g);
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2().expect("rank 2");
                let n = tb.shape()[1];
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, 0.0, &mut da);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![m, k], da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, 0.0, &mut db);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::ColDot(a, b) => {
                // out = aᵀb; da = b·gᵀ, db = a·g
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (rows, ca) = ta.dims2().expect("rank 2");
                let cb = tb.shape()[1];
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; rows * ca];
                    gemm(rows, cb, ca, tb.data(), false, g.data(), true, 0.0, &mut da);
                    self.accumulate(grads, *a, Tensor::from_parts(vec![rows, ca], da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; rows * cb];
                    gemm(rows, ca, cb, ta.data(), false, g.data(), false, 0.0, &mut db);
                    self.accumulate(grads, *b, Tensor::from_parts(vec![rows, cb], db));
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
                geom,
                cols,
            } => self.conv2d_backward(*input, *weight, *bias, *spec, *geom, cols, &g, grads),
            Op::Relu(a) => {
                let d = zip(&g, y, |gv, yv| if yv > 0.0 { gv } else { 0.0 });
                self.accumulate(grads, *a, d);
            }
            Op::MaxPool { input, argmax } => {
                let mut d = Tensor::zeros(self.value(*input).shape());
                let dd = d.data_mut();
                for (&src, gv) in argmax.iter().zip(g.data()) {
                    dd[src] += gv;
                }
                self.accumulate(grads, *input, d);
            }
            Op::Mean(a) => {
                let t = self.value(*a);
                let v = g.item() / t.numel() as f64;
                self.accumulate(grads, *a, Tensor::full(t.shape(), v));
            }
            Op::Sum(a) => {
                let t = self.value(*a);
                self.accumulate(grads, *a, Tensor::full(t.shape(), g.item()));
            }
            Op::RowSum(a) => {
                let t = self.value(*a);
                let (r, c) = t.dims2().expect("rank 2");
                let mut d = Vec::with_capacity(r * c);
                for gv in g.data() {
                    d.extend(std::iter::repeat(*gv).take(c));
                }
                self.accumulate(grads, *a, Tensor::from_parts(vec![r, c], d));
            }
            Op::DivRows(x, dv) => {
                let (tx, td) = (self.value(*x), self.value(*dv));
                let (r, c) = tx.dims2().expect("rank 2");
                if self.requires_grad(*x) {
                    let mut dx = g.data().to_vec();
                    for i in 0..r {
                        let di = td.data()[i];
                        dx[i * c..(i + 1) * c].iter_mut().for_each(|v| *v /= di);
                    }
                    self.accumulate(grads, *x, Tensor::from_parts(vec![r, c], dx));
                }
                if self.requires_grad(*dv) {
                    let dd = (0..r)
                        .map(|i| {
                            let di = td.data()[i];
                            let dot: f64 = g.row(i).iter().zip(tx.row(i)).map(|(a, b)| a * b).sum();
                            -dot / (di * di)
                        })
                        .collect();
                    self.accumulate(grads, *dv, Tensor::vector(dd));
                }
            }
            Op::Log(a) => {
                let d = zip(&g, self.value(*a), |gv, xv| gv / xv);
                self.accumulate(grads, *a, d);
            }
            Op::Exp(a) => {
                let d = zip(&g, y, |gv, yv| gv * yv);
                self.accumulate(grads, *a, d);
            }
            Op::Neg(a) | Op::GradReverse(a) => self.accumulate(grads, *a, g.map(|v| -v)),
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g),
            Op::Transpose(a) => {
                let (r, c) = g.dims2().expect("rank 2");
                let d = Tensor::from_parts(vec![c, r], transpose_data(r, c, g.data()));
                self.accumulate(grads, *a, d);
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().to_vec();
                self.accumulate(grads, *a, Tensor::from_parts(shape, g.into_data()));
            }
            Op::RowSoftmax(a) => {
                let (r, c) = y.dims2().expect("rank 2");
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(vec![r, c], d));
            }
            Op::LogSoftmax(a) => {
                let (r, c) = y.dims2().expect("rank 2");
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..c {
                        d[i * c + j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                self.accumulate(grads, *a, Tensor::from_parts(vec![r, c], d));
            }
            Op::Sigmoid(a) => {
                let d = zip(&g, y, |gv, s| gv * s * (1.0 - s));
                self.accumulate(grads, *a, d);
            }
            Op::LogSigmoid(a) => {
                let d = zip(&g, self.value(*a), |gv, xv| gv * sigmoid(-xv));
                self.accumulate(grads, *a, d);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        input: Var,
        weight: Var,
        bias: Var,
        spec: Conv2dSpec,
        geom: ConvGeom,
        cols: &[f64],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (k, p) = (geom.k(), geom.p());
        let (n, oc) = (geom.n, geom.oc);
        let np = n * p;
        // gather n × oc × p into oc × (n·p)
        let mut gm = vec![0.0; oc * np];
        for img in 0..n {
            for c in 0..oc {
                let src = &g.data()[(img * oc + c) * p..(img * oc + c + 1) * p];
                gm[c * np + img * p..c * np + (img + 1) * p].copy_from_slice(src);
            }
        }
        if self.requires_grad(bias) {
            let db = (0..oc).map(|c| gm[c * np..(c + 1) * np].iter().sum()).collect();
            self.accumulate(grads, bias, Tensor::vector(db));
        }
        let tw = self.value(weight);
        if self.requires_grad(weight) {
            let mut dw = vec![0.0; oc * k];
            gemm(oc, np, k, &gm, false, cols, true, 0.0, &mut dw);
            self.accumulate(grads, weight, Tensor::from_parts(tw.shape().to_vec(), dw));
        }
        if self.requires_grad(input) {
            let mut dcols = vec![0.0; k * np];
            gemm(k, oc, np, tw.data(), true, &gm, false, 0.0, &mut dcols);
            let dx = col2im(&dcols, geom, spec);
            let shape = self.value(input).shape().to_vec();
            self.accumulate(grads, input, Tensor::from_parts(shape, dx));
        }
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn transpose_data(r: usize, c: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

/// `ln Σ exp(x)` shifted by the maximum.
pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    row.iter_mut().for_each(|v| *v /= z);
}

/// Unfolds input patches into a `K × (N·P)` matrix, `K = IC·KH·KW`.
fn im2col(x: &[f64], g: ConvGeom, spec: Conv2dSpec) -> Vec<f64> {
    let (k, p) = (g.k(), g.p());
    let np = g.n * p;
    let mut cols = vec![0.0; k * np];
    for c in 0..g.ic {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                for img in 0..g.n {
                    let plane = &x[(img * g.ic + c) * g.h * g.w..(img * g.ic + c + 1) * g.h * g.w];
                    let dst = &mut cols[row * np + img * p..row * np + (img + 1) * p];
                    for oi in 0..g.oh {
                        let ii = (oi * spec.stride + ki) as isize - spec.pad as isize;
                        let drow = &mut dst[oi * g.ow..(oi + 1) * g.ow];
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        let srow = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                        for (oj, d) in drow.iter_mut().enumerate() {
                            let jj = (oj * spec.stride + kj) as isize - spec.pad as isize;
                            if jj >= 0 && jj < g.w as isize {
                                *d = srow[jj as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters-and-adds column gradients back to pixels.
fn col2im(cols: &[f64], g: ConvGeom, spec: Conv2dSpec) -> Vec<f64> {
    let p = g.p();
    let np = g.n * p;
    let mut x = vec![0.0; g.n * g.ic * g.h * g.w];
    for c in 0..g.ic {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                for img in 0..g.n {
                    let base = (img * g.ic + c) * g.h * g.w;
                    let src = &cols[row * np + img * p..row * np + (img + 1) * p];
                    for oi in 0..g.oh {
                        let ii = (oi * spec.stride + ki) as isize - spec.pad as isize;
                        if ii < 0 || ii >= g.h as isize {
                            continue;
                        }
                        let drow = &mut x[base + ii as usize * g.w..base + (ii as usize + 1) * g.w];
                        for oj in 0..g.ow {
                            let jj = (oj * spec.stride + kj) as isize - spec.pad as isize;
                            if jj >= 0 && jj < g.w as isize {
                                drow[jj as usize] += src[oi * g.ow + oj];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}
