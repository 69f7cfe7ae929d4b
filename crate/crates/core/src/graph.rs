//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order together with its
//! output value. [`Graph::backward`] walks the tape in exact reverse order and
//! accumulates cotangents additively, so a value used several times receives
//! the sum of its contributions.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::kernels::{self, Axis, ConvGeom};
use crate::par::Exec;
use crate::tensor::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Log,
    Square,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
    },
    Binary(Binary, Var, Var),
    Unary(Unary, Var),
    AddScalar(Var),
    Scale(Var, f64),
    Clamp(Var, f64, f64),
    Sum(Var),
    Concat(Var, Var),
    Diff(Var, Axis),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    exec: Exec,
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self {
            nodes: Vec::new(),
            exec,
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
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
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let geom = ConvGeom::new(x.dims4("conv2d")?, w.dims4("conv2d")?, stride, padding)?;
        self.value(bias).expect_shape("conv2d bias", &[geom.cout])?;
        let out = kernels::conv2d_forward(self.exec, &geom, x.data(), w.data(), self.value(bias).data());
        let value = Tensor::new(&[geom.n, geom.cout, geom.oh, geom.ow], out)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn max_pool2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4("max_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::InvalidArgument {
                op: "max_pool2",
                msg: format!("spatial size {h}x{w} is not even"),
            });
        }
        let (out, argmax) = kernels::max_pool2_forward(self.exec, n * c, h, w, x.data());
        let value = Tensor::new(&[n, c, h / 2, w / 2], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::MaxPool2 { input, argmax }, rg))
    }

    /// Bilinear upsampling with half-pixel-centre alignment.
    pub fn upsample(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4("bilinear_upsample")?;
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(TensorError::InvalidArgument {
                op: "bilinear_upsample",
                msg: "zero-size input or output".into(),
            });
        }
        if out_h < h || out_w < w {
            return Err(TensorError::InvalidArgument {
                op: "bilinear_upsample",
                msg: format!("output {out_h}x{out_w} smaller than input {h}x{w}"),
            });
        }
        let out = kernels::bilinear_forward(self.exec, n * c, (h, w), (out_h, out_w), x.data());
        let value = Tensor::new(&[n, c, out_h, out_w], out)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Upsample { input }, rg))
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let value = match kind {
            Binary::Add => x.zip_map(y, "add", |p, q| p + q)?,
            Binary::Sub => x.zip_map(y, "sub", |p, q| p - q)?,
            Binary::Mul => x.zip_map(y, "mul", |p, q| p * q)?,
        };
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Binary(kind, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, kind: Unary, a: Var) -> Result<Var> {
        let x = self.value(a);
        let value = match kind {
            Unary::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
            Unary::Sigmoid => x.map(sigmoid),
            Unary::Square => x.map(|v| v * v),
            Unary::Log => {
                // NaN passes through so that a diverged forward pass surfaces
                // as a non-finite loss rather than a domain error.
                if let Some((index, &value)) = x.data().iter().enumerate().find(|(_, &v)| v <= 0.0) {
                    return Err(TensorError::NonPositiveLog { index, value });
                }
                x.map(f64::ln)
            }
        };
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Unary(kind, a), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a).expect("relu is total")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a).expect("sigmoid is total")
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a).expect("square is total")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    /// `a + c` for a scalar constant `c`.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// `c · a` for a scalar constant `c`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// `c − a` for a scalar constant `c`.
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, c)
    }

    /// Clamps into `[lo, hi]`; the gradient passes only where the input is inside.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).map(|v| v.clamp(lo, hi));
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Clamp(a, lo, hi), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [n, ca, h, w] = self.value(a).dims4("concat_channels")?;
        let [nb, cb, hb, wb] = self.value(b).dims4("concat_channels")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                expected: vec![n, cb, h, w],
                got: vec![nb, cb, hb, wb],
            });
        }
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let (la, lb) = (ca * h * w, cb * h * w);
        let mut data = Vec::with_capacity(n * (la + lb));
        for i in 0..n {
            data.extend_from_slice(&xa[i * la..(i + 1) * la]);
            data.extend_from_slice(&xb[i * lb..(i + 1) * lb]);
        }
        let value = Tensor::new(&[n, ca + cb, h, w], data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    /// Forward difference along `axis` over the valid region (no padding).
    pub fn forward_diff(&mut self, a: Var, axis: Axis) -> Result<Var> {
        let [n, c, h, w] = self.value(a).dims4("forward_diff")?;
        let (oh, ow) = match axis {
            Axis::X if w >= 2 => (h, w - 1),
            Axis::Y if h >= 2 => (h - 1, w),
            _ => {
                return Err(TensorError::InvalidArgument {
                    op: "forward_diff",
                    msg: format!("spatial size {h}x{w} too small for {axis:?} differences"),
                })
            }
        };
        let out = kernels::diff_forward(n * c, h, w, axis, self.value(a).data());
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Diff(a, axis), rg))
    }

    /// Fingerprint of every piecewise decision taken in the recorded forward
    /// pass (ReLU signs, pooling winners, clamp activity). Two evaluations with
    /// the same fingerprint lie on the same smooth piece of the function.
    pub fn activation_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Unary(Unary::Relu, a) => {
                    for &v in self.value(*a).data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool2 { argmax, .. } => argmax.hash(&mut h),
                Op::Clamp(a, lo, hi) => {
                    for &v in self.value(*a).data() {
                        (v < *lo || v > *hi).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse pass from a scalar `loss`. Only leaves created with
    /// [`Graph::param`] keep their gradients; intermediates are dropped.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 || lv.rank() > 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut out: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    out[i] = Some(Tensor::new(node.value.shape(), g)?);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let need_input = self.requires_grad(*input);
                    let cg = kernels::conv2d_backward(
                        self.exec,
                        geom,
                        self.value(*input).data(),
                        self.value(*weight).data(),
                        &g,
                        need_input,
                    );
                    if let Some(dx) = cg.input {
                        self.accumulate(&mut grads, *input, dx);
                    }
                    self.accumulate(&mut grads, *weight, cg.weight);
                    self.accumulate(&mut grads, *bias, cg.bias);
                }
                Op::MaxPool2 { input, argmax } => {
                    let dx = kernels::max_pool2_backward(self.value(*input).len(), argmax, &g);
                    self.accumulate(&mut grads, *input, dx);
                }
                Op::Upsample { input } => {
                    let [n, c, h, w] = self.value(*input).dims4("bilinear_upsample")?;
                    let [_, _, oh, ow] = node.value.dims4("bilinear_upsample")?;
                    let dx = kernels::bilinear_backward(self.exec, n * c, (h, w), (oh, ow), &g);
                    self.accumulate(&mut grads, *input, dx);
                }
                Op::Binary(kind, a, b) => {
                    let (da, db) = match kind {
                        Binary::Add => (g.clone(), g),
                        Binary::Sub => (g.clone(), g.iter().map(|v| -v).collect()),
                        Binary::Mul => {
                            let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                            (
                                g.iter().zip(xb).map(|(g, y)| g * y).collect(),
                                g.iter().zip(xa).map(|(g, x)| g * x).collect(),
                            )
                        }
                    };
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::Unary(kind, a) => {
                    let x = self.value(*a).data();
                    let y = node.value.data();
                    let dx: Vec<f64> = match kind {
                        Unary::Relu => g.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                        Unary::Sigmoid => g.iter().zip(y).map(|(g, &y)| g * y * (1.0 - y)).collect(),
                        Unary::Log => g.iter().zip(x).map(|(g, &x)| g / x).collect(),
                        Unary::Square => g.iter().zip(x).map(|(g, &x)| 2.0 * x * g).collect(),
                    };
                    self.accumulate(&mut grads, *a, dx);
                }
                Op::AddScalar(a) => self.accumulate(&mut grads, *a, g),
                Op::Scale(a, c) => {
                    let dx = g.iter().map(|v| v * c).collect();
                    self.accumulate(&mut grads, *a, dx);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.value(*a).data();
                    let dx = g
                        .iter()
                        .zip(x)
                        .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                        .collect();
                    self.accumulate(&mut grads, *a, dx);
                }
                Op::Sum(a) => {
                    let dx = vec![g[0]; self.value(*a).len()];
                    self.accumulate(&mut grads, *a, dx);
                }
                Op::Concat(a, b) => {
                    let [n, ca, h, w] = self.value(*a).dims4("concat_channels")?;
                    let cb = self.value(*b).shape()[1];
                    let (la, lb) = (ca * h * w, cb * h * w);
                    let mut da = Vec::with_capacity(n * la);
                    let mut db = Vec::with_capacity(n * lb);
                    for chunk in g.chunks(la + lb) {
                        da.extend_from_slice(&chunk[..la]);
                        db.extend_from_slice(&chunk[la..]);
                    }
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::Diff(a, axis) => {
                    let [n, c, h, w] = self.value(*a).dims4("forward_diff")?;
                    let dx = kernels::diff_backward(n * c, h, w, *axis, &g);
                    self.accumulate(&mut grads, *a, dx);
                }
            }
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.value(y).item(), 0.5);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 0.25);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = g.square(x);
        let l = g.sum(sq);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn reused_value_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 7.0);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(&[3], vec![-3.0, 0.0, 2.0]).unwrap());
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let l = g.sum(r);
        assert_eq!(g.backward(l).unwrap().get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(g.log(x), Err(TensorError::NonPositiveLog { index: 1, .. })));
    }

    #[test]
    fn binary_ops_require_equal_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[4]));
        assert!(matches!(g.add(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let x = g.param(Tensor::scalar(5.0));
        let y = g.mul(c, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().item(), 2.0);
    }

    #[test]
    fn concat_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[1, 64, 4, 4]));
        let b = g.constant(Tensor::zeros(&[1, 64, 4, 4]));
        let c = g.concat_channels(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 128, 4, 4]);
        let d = g.constant(Tensor::zeros(&[1, 64, 4, 2]));
        assert!(g.concat_channels(a, d).is_err());
    }
}
