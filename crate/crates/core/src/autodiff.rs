//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op as a node whose parents have smaller
//! indices, so a reverse sweep over the node list is a valid topological
//! order. Leaves created from trainable [`Parameter`]s are bound to their
//! [`ParamId`] and receive gradients; frozen leaves and constants never do.

use crate::error::{Error, Result};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{self, col2im, gemm, im2col, kernel_dims, ConvGeom, ResizeMode, ResizePlan, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Vec<f64>),
    Square(Var),
    Sqrt(Var),
    Relu(Var),
    Sigmoid(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    Softmax { x: Var, axis: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeom, cols: Vec<f64> },
    ChannelBias(Var, Var),
    Resize { x: Var, plan: ResizePlan },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    /// Persistent gradient for leaves; accumulates across `backward` calls.
    grad: Option<Vec<f64>>,
}

pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<(ParamId, Var)>,
    record: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            bindings: Vec::new(),
            record: true,
        }
    }

    /// A graph that only evaluates: no node ever requires a gradient.
    pub fn no_grad() -> Self {
        Graph {
            record: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.record,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated on a leaf, if any.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free leaf that requires a gradient (used by tests and oracles).
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a stored parameter as a leaf. Frozen parameters become constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let mut value = p.value.clone();
        value.grad = None;
        let v = self.push(value, Op::Leaf, p.trainable);
        if p.trainable && self.record {
            self.bindings.push((id, v));
        }
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = tensor::dims2(self.value(a))?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Reshape(a), ng))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension(format!(
                "{name}: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v * s);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v + s);
        let ng = self.ng(a);
        self.push(t, Op::AddScalar(a), ng)
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(Error::Dimension(format!(
                "mul_const: {:?} vs {:?}",
                self.shape(a),
                c.shape()
            )));
        }
        let ta = self.value(a);
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::MulConst(a, c.data().to_vec()), ng))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v * v);
        let ng = self.ng(a);
        self.push(t, Op::Square(a), ng)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::sqrt);
        let ng = self.ng(a);
        self.push(t, Op::Sqrt(a), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.max(0.0));
        let ng = self.ng(a);
        self.push(t, Op::Relu(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        let ng = self.ng(a);
        self.push(t, Op::Sigmoid(a), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::ln);
        let ng = self.ng(a);
        self.push(t, Op::Log(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = tensor::softmax_axis(self.value(a), axis)?;
        let ng = self.ng(a);
        Ok(self.push(t, Op::Softmax { x: a, axis }, ng))
    }

    /// Cross-correlation of a `C×H×W` input with `F×C×k×k` kernels.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, wd) = self.value(x).chw()?;
        let (f, kc, k) = kernel_dims(self.value(w))?;
        if kc != c {
            return Err(Error::Dimension(format!(
                "kernel expects {kc} channels, input has {c}"
            )));
        }
        let geom = ConvGeom::new(c, h, wd, k, stride, pad)?;
        let cols = if k == 1 && stride == 1 && pad == 0 {
            Vec::new()
        } else {
            im2col(self.value(x).data(), &geom)
        };
        let src: &[f64] = if cols.is_empty() { self.value(x).data() } else { &cols };
        let mut out = vec![0.0; f * geom.out_len()];
        gemm(
            f,
            geom.patch_len(),
            geom.out_len(),
            self.value(w).data(),
            false,
            src,
            false,
            &mut out,
            false,
        );
        let t = Tensor::new(vec![f, geom.out_h, geom.out_w], out)?;
        let ng = self.ng(x) || self.ng(w);
        let cols = if self.record && ng { cols } else { Vec::new() };
        Ok(self.push(t, Op::Conv2d { x, w, geom, cols }, ng))
    }

    /// Adds a per-channel bias `b` (length C) to a `C×H×W` map.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if self.value(b).len() != c {
            return Err(Error::Dimension(format!(
                "bias of length {} for {c} channels",
                self.value(b).len()
            )));
        }
        let mut t = self.value(x).clone();
        let bias = self.value(b).data();
        for (ch, plane) in t.data_mut().chunks_mut(h * w).enumerate() {
            plane.iter_mut().for_each(|v| *v += bias[ch]);
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(t, Op::ChannelBias(x, b), ng))
    }

    pub fn resize(&mut self, x: Var, new_h: usize, new_w: usize, mode: ResizeMode) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let plan = ResizePlan::new(c, h, w, new_h, new_w, mode)?;
        let t = Tensor::new(vec![c, new_h, new_w], plan.forward(self.value(x).data()))?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Resize { x, plan }, ng))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            for (parent, pg) in self.local_grads(i, &g) {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let want = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = tensor::dims2(&self.nodes[a.0].value).unwrap();
                let n = g.len() / m;
                let mut res = Vec::new();
                if want(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g, false, val(*b), true, &mut da, false);
                    res.push((*a, da));
                }
                if want(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, val(*a), true, g, false, &mut db, false);
                    res.push((*b, db));
                }
                res
            }
            Op::Transpose(a) => {
                let (m, n) = tensor::dims2(&self.nodes[a.0].value).unwrap();
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                vec![(*a, da)]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(vb).map(|(g, y)| g * y).collect()),
                    (*b, g.iter().zip(va).map(|(g, x)| g * x).collect()),
                ]
            }
            Op::Scale(a, s) => vec![(*a, g.iter().map(|v| v * s).collect())],
            Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::MulConst(a, c) => vec![(*a, g.iter().zip(c).map(|(g, c)| g * c).collect())],
            Op::Square(a) => vec![(*a, g.iter().zip(val(*a)).map(|(g, x)| 2.0 * g * x).collect())],
            Op::Sqrt(a) => vec![(*a, g.iter().zip(out).map(|(g, y)| g / (2.0 * y)).collect())],
            Op::Relu(a) => vec![(
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            )],
            Op::Sigmoid(a) => vec![(*a, g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect())],
            Op::Log(a) => vec![(*a, g.iter().zip(val(*a)).map(|(g, x)| g / x).collect())],
            Op::Sum(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::Mean(a) => {
                let n = val(*a).len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::Softmax { x, axis } => {
                let (outer, k, inner) = tensor::axis_split(node.value.shape(), *axis);
                let mut dx = vec![0.0; out.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * k * inner + i;
                        let dot: f64 = (0..k).map(|c| g[base + c * inner] * out[base + c * inner]).sum();
                        for c in 0..k {
                            let j = base + c * inner;
                            dx[j] = out[j] * (g[j] - dot);
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Conv2d { x, w, geom, cols } => {
                let f = node.value.shape()[0];
                let (p, l) = (geom.patch_len(), geom.out_len());
                let src: &[f64] = if cols.is_empty() { val(*x) } else { cols };
                let mut res = Vec::new();
                if want(*w) {
                    let mut dw = vec![0.0; f * p];
                    gemm(f, l, p, g, false, src, true, &mut dw, false);
                    res.push((*w, dw));
                }
                if want(*x) {
                    let mut dcols = vec![0.0; p * l];
                    gemm(p, f, l, val(*w), true, g, false, &mut dcols, false);
                    let dx = if cols.is_empty() { dcols } else { col2im(&dcols, geom) };
                    res.push((*x, dx));
                }
                res
            }
            Op::ChannelBias(x, b) => {
                let c = val(*b).len();
                let hw = g.len() / c;
                let db = g.chunks(hw).map(|p| p.iter().sum()).collect();
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::Resize { x, plan } => vec![(*x, plan.backward(g))],
        }
    }

    /// Adds the gradient of every bound trainable leaf into its parameter.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, v) in &self.bindings {
            if let Some(g) = self.grad(v) {
                store.get_mut(id).value.accumulate_grad(g);
            }
        }
    }

    /// Clears leaf gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }
}

/// Central-difference gradient of `f` at `x`; independent of the tape.
pub fn finite_diff_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::Usage("finite difference step must be positive".into()));
    }
    let mut probe = x.clone();
    probe.grad = None;
    let mut out = vec![0.0; x.len()];
    for (i, slot) in out.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let up = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        *slot = (up - down) / (2.0 * eps);
    }
    Tensor::new(x.shape().to_vec(), out)
}
