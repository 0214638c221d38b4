//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation evaluates eagerly and appends a node holding its value and
//! the op that produced it. [`Tape::backward`] walks the nodes in reverse and
//! accumulates each input's gradient once per use. Nodes built only from
//! constants never receive gradients.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, invalid, Result};
use crate::ops::{self, ConvGeometry};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, stride: usize, padding: usize },
    ChannelBias { input: Var, bias: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Sum(Var),
    Concat(Vec<Var>),
    Resample(Var),
    MatVec { x: Var, w: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of the operations of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss or is a constant.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
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

    /// A differentiable input (parameter or input of interest).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let g = ConvGeometry::new(self.value(input), self.value(kernel), stride, padding)?;
        let out = ops::conv2d_forward(&g, self.value(input), self.value(kernel));
        Ok(self.push(out, Op::Conv2d { input, kernel, stride, padding }, &[input, kernel]))
    }

    /// Adds a per-channel bias vector `[C]` to an HWC tensor.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (_, _, c) = self.value(input).hwc()?;
        let b = self.value(bias);
        ensure!(b.len() == c, "bias of length {} for {} channels", b.len(), c);
        let mut out = self.value(input).clone();
        for px in out.data_mut().chunks_exact_mut(c) {
            for (v, bv) in px.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        Ok(self.push(out, Op::ChannelBias { input, bias }, &[input, bias]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Adds the constant `c` to every entry.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::Offset(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(libm::tanh);
        self.push(out, Op::Tanh(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::abs);
        self.push(out, Op::Abs(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        self.push(out, Op::Square(a), &[a])
    }

    /// Elementwise square root; inputs must be non-negative.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        ensure!(self.value(a).data().iter().all(|&v| v >= 0.0), "sqrt of a negative value");
        let out = self.value(a).map(libm::sqrt);
        Ok(self.push(out, Op::Sqrt(a), &[a]))
    }

    /// Sum of all entries as a scalar `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Root of the sum of squares, as a scalar.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let sq = self.square(a);
        let s = self.sum(sq);
        self.sqrt(s)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|v| self.value(*v)).collect();
        let out = Tensor::concat_channels(&values)?;
        Ok(self.push(out, Op::Concat(parts.to_vec()), parts))
    }

    pub fn resample_bilinear(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let out = ops::resample_bilinear(self.value(a), out_h, out_w)?;
        Ok(self.push(out, Op::Resample(a), &[a]))
    }

    /// `x [E]` times `w [E, C]`, giving `[C]`.
    pub fn matvec(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        ensure!(wv.dims().len() == 2, "matvec weight must be rank 2, got {:?}", wv.dims());
        let (e, c) = (wv.dims()[0], wv.dims()[1]);
        ensure!(xv.len() == e, "vector of length {} against {}x{} weight", xv.len(), e, c);
        let mut out = vec![0.0; c];
        for (xe, row) in xv.data().iter().zip(wv.data().chunks_exact(c)) {
            for (o, wc) in out.iter_mut().zip(row) {
                *o += xe * wc;
            }
        }
        let out = Tensor::from_parts(vec![c], out);
        Ok(self.push(out, Op::MatVec { x, w }, &[x, w]))
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let seed = self.nodes.get(loss.0).ok_or_else(|| invalid!("unknown node {}", loss.0))?;
        ensure!(seed.value.len() == 1, "backward needs a scalar loss, got dims {:?}", seed.value.dims());
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(seed.value.dims(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, stride, padding } => {
                let (x, k) = (self.value(*input), self.value(*kernel));
                let geom = ConvGeometry::new(x, k, *stride, *padding)?;
                if self.wants(*kernel) {
                    self.accumulate(grads, *kernel, ops::conv2d_grad_kernel(&geom, x, g));
                }
                if self.wants(*input) {
                    self.accumulate(grads, *input, ops::conv2d_grad_input(&geom, k, g));
                }
            }
            Op::ChannelBias { input, bias } => {
                if self.wants(*bias) {
                    let c = self.value(*bias).len();
                    let mut db = vec![0.0; c];
                    for px in g.data().chunks_exact(c) {
                        for (d, v) in db.iter_mut().zip(px) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *bias, Tensor::from_parts(vec![c], db));
                }
                self.accumulate(grads, *input, g.clone());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.scale(-1.0));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |gv, bv| gv * bv)?);
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |gv, av| gv * av)?);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::LeakyRelu(a, slope) => {
                let d = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { slope * gv })?;
                self.accumulate(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = g.zip_map(&node.value, |gv, y| gv * (1.0 - y * y))?;
                self.accumulate(grads, *a, d);
            }
            Op::Abs(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                })?;
                self.accumulate(grads, *a, d);
            }
            Op::Square(a) => {
                let d = g.zip_map(self.value(*a), |gv, x| 2.0 * x * gv)?;
                self.accumulate(grads, *a, d);
            }
            Op::Sqrt(a) => {
                // The derivative is unbounded at 0; use 0 there so an exact
                // zero norm does not poison the gradient.
                let d = g.zip_map(&node.value, |gv, y| if y > 0.0 { 0.5 * gv / y } else { 0.0 })?;
                self.accumulate(grads, *a, d);
            }
            Op::Sum(a) => {
                let dims = self.value(*a).dims();
                self.accumulate(grads, *a, Tensor::full(dims, g.item()));
            }
            Op::Concat(parts) => {
                let (h, w, total) = node.value.hwc()?;
                let mut start = 0;
                for p in parts {
                    let c = self.value(*p).dims()[2];
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(h * w * c);
                        for px in g.data().chunks_exact(total) {
                            d.extend_from_slice(&px[start..start + c]);
                        }
                        self.accumulate(grads, *p, Tensor::from_parts(vec![h, w, c], d));
                    }
                    start += c;
                }
            }
            Op::Resample(a) => {
                let (h, w, _) = self.value(*a).hwc()?;
                self.accumulate(grads, *a, ops::resample_bilinear_adjoint(g, h, w));
            }
            Op::MatVec { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let c = wv.dims()[1];
                if self.wants(*x) {
                    let dx = wv.data().chunks_exact(c).map(|row| row.iter().zip(g.data()).map(|(a, b)| a * b).sum()).collect();
                    self.accumulate(grads, *x, Tensor::from_parts(xv.dims().to_vec(), dx));
                }
                if self.wants(*w) {
                    let mut dw = Vec::with_capacity(wv.len());
                    for xe in xv.data() {
                        dw.extend(g.data().iter().map(|gc| xe * gc));
                    }
                    self.accumulate(grads, *w, Tensor::from_parts(wv.dims().to_vec(), dw));
                }
            }
        }
        Ok(())
    }
}
