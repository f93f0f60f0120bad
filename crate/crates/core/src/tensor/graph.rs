use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{broadcast_shape, broadcast_strides, strided_for_each, strides, Result, Tensor, TensorError};

/// Handle to a value recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Exp,
    Log,
    /// Raise to a constant exponent.
    Power(f32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

/// Inputs handed to a node's backward closure.
pub struct BackwardArgs<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
    pub grad: &'a [f32],
    /// Whether input `i` wants a gradient at all.
    pub needs: Vec<bool>,
}

/// Vector-Jacobian product of one node: one optional gradient per input.
pub type BackwardFn = Box<dyn Fn(&BackwardArgs<'_>) -> Vec<Option<Vec<f32>>>>;

struct Node {
    value: Tensor,
    inputs: Vec<Var>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    op: &'static str,
}

/// Tape of primitive operations, in the order they were applied.
///
/// Nodes only ever reference earlier nodes, so the tape is already in
/// topological order and the backward pass is a single reverse sweep.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    backward_done: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Gradient tracking follows `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        let mut value = t;
        value.zero_grad();
        self.push(value, Vec::new(), None, requires_grad, "leaf")
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Records a copy of a trainable parameter.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.detached().with_requires_grad(true))
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

    /// Name of the primitive that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op
    }

    pub fn inputs(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    fn push(
        &mut self,
        value: Tensor,
        inputs: Vec<Var>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
        op: &'static str,
    ) -> Var {
        self.nodes.push(Node {
            value,
            inputs,
            backward,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Records a primitive whose gradient is given by `backward`.
    pub fn push_op(&mut self, op: &'static str, value: Tensor, inputs: Vec<Var>, backward: BackwardFn) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let backward = requires_grad.then_some(backward);
        self.push(value, inputs, backward, requires_grad, op)
    }

    /// A new leaf holding the current value of `v`, cut off from gradients.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).detached();
        self.constant(t)
    }

    pub fn elementwise(&mut self, op: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match op {
            Elementwise::Add | Elementwise::Sub | Elementwise::Mul | Elementwise::Div => {
                let name = match op {
                    Elementwise::Add => "add",
                    Elementwise::Sub => "sub",
                    Elementwise::Mul => "mul",
                    _ => "div",
                };
                let b = b.ok_or(TensorError::MissingOperand(name))?;
                self.binary(op, name, a, b)
            }
            Elementwise::Relu => Ok(self.relu(a)),
            Elementwise::Exp => Ok(self.exp(a)),
            Elementwise::Log => Ok(self.log(a)),
            Elementwise::Power(p) => Ok(self.powf(a, p)),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Elementwise::Div, "div", a, b)
    }

    fn binary(&mut self, op: Elementwise, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| TensorError::ShapeMismatch {
            op: name,
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        })?;
        let sa = broadcast_strides(ta.shape(), &out_shape);
        let sb = broadcast_strides(tb.shape(), &out_shape);
        let n: usize = out_shape.iter().product();
        let mut out = vec![0.0f32; n];
        let (da, db) = (ta.data(), tb.data());
        let f: fn(f32, f32) -> f32 = match op {
            Elementwise::Add => |x, y| x + y,
            Elementwise::Sub => |x, y| x - y,
            Elementwise::Mul => |x, y| x * y,
            _ => |x, y| x / y,
        };
        if ta.shape() == tb.shape() {
            for ((o, &x), &y) in out.iter_mut().zip(da).zip(db) {
                *o = f(x, y);
            }
        } else {
            strided_for_each(&out_shape, &sa, &sb, |o, i, j| out[o] = f(da[i], db[j]));
        }
        let value = Tensor::new(out_shape.clone(), out)?;
        let backward: BackwardFn = Box::new(move |args| {
            let (x, y) = (args.inputs[0].data(), args.inputs[1].data());
            let g = args.grad;
            let mut gx = args.needs[0].then(|| vec![0.0f32; x.len()]);
            let mut gy = args.needs[1].then(|| vec![0.0f32; y.len()]);
            strided_for_each(&out_shape, &sa, &sb, |o, i, j| {
                let go = g[o];
                let (dx, dy) = match op {
                    Elementwise::Add => (go, go),
                    Elementwise::Sub => (go, -go),
                    Elementwise::Mul => (go * y[j], go * x[i]),
                    _ => (go / y[j], -go * x[i] / (y[j] * y[j])),
                };
                if let Some(gx) = gx.as_mut() {
                    gx[i] += dx;
                }
                if let Some(gy) = gy.as_mut() {
                    gy[j] += dy;
                }
            });
            vec![gx, gy]
        });
        Ok(self.push_op(name, value, vec![a, b], backward))
    }

    fn unary(
        &mut self,
        name: &'static str,
        a: Var,
        forward: impl Fn(f32) -> f32,
        derivative: impl Fn(f32, f32) -> f32 + 'static,
    ) -> Var {
        let ta = self.value(a);
        let data: Vec<f32> = ta.data().iter().map(|&x| forward(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let backward: BackwardFn = Box::new(move |args| {
            let x = args.inputs[0].data();
            let y = args.output.data();
            let gx = args
                .grad
                .iter()
                .zip(x.iter().zip(y))
                .map(|(&g, (&xi, &yi))| g * derivative(xi, yi))
                .collect();
            vec![Some(gx)]
        });
        self.push_op(name, value, vec![a], backward)
    }

    /// Subgradient at exactly zero is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary("relu", a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary("exp", a, f32::exp, |_, y| y)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary("log", a, f32::ln, |x, _| 1.0 / x)
    }

    pub fn powf(&mut self, a: Var, p: f32) -> Var {
        self.unary("power", a, move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary("neg", a, |x| -x, |_, _| -1.0)
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        self.unary("scale", a, move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f32) -> Var {
        self.unary("add_scalar", a, move |x| x + s, |_, _| 1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 {
            return Err(TensorError::Rank { op: "matmul", expected: 2, shape: ta.shape().to_vec() });
        }
        if tb.rank() != 2 {
            return Err(TensorError::Rank { op: "matmul", expected: 2, shape: tb.shape().to_vec() });
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (k2, n) = (tb.shape()[0], tb.shape()[1]);
        if k != k2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, ta.data(), tb.data(), &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        let backward: BackwardFn = Box::new(move |args| {
            let (x, y, g) = (args.inputs[0].data(), args.inputs[1].data(), args.grad);
            let gx = args.needs[0].then(|| {
                let mut gx = vec![0.0; m * k];
                gemm_nt(m, n, k, g, y, &mut gx);
                gx
            });
            let gy = args.needs[1].then(|| {
                let mut gy = vec![0.0; k * n];
                gemm_tn(k, m, n, x, g, &mut gy);
                gy
            });
            vec![gx, gy]
        });
        Ok(self.push_op("matmul", value, vec![a, b], backward))
    }

    /// Reduces over `axes`. With `keepdim` the reduced axes stay as extent 1.
    /// `Max` routes its gradient to the first maximal element.
    pub fn reduce(&mut self, op: Reduce, t: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let tv = self.value(t);
        let in_shape = tv.shape().to_vec();
        let rank = in_shape.len();
        let mut reduced = vec![false; rank];
        for &ax in axes {
            if ax >= rank {
                return Err(TensorError::InvalidAxis { axis: ax, rank });
            }
            reduced[ax] = true;
        }
        let kept: Vec<usize> = (0..rank).map(|d| if reduced[d] { 1 } else { in_shape[d] }).collect();
        let out_shape: Vec<usize> = if keepdim {
            kept.clone()
        } else {
            (0..rank).filter(|&d| !reduced[d]).map(|d| in_shape[d]).collect()
        };
        let kept_strides = strides(&kept);
        let map: Vec<usize> = (0..rank).map(|d| if reduced[d] { 0 } else { kept_strides[d] }).collect();
        let zero = vec![0; rank];
        let n_out: usize = kept.iter().product();
        let count = (tv.numel() / n_out) as f32;
        let x = tv.data();
        let (out, argmax) = match op {
            Reduce::Sum | Reduce::Mean => {
                let mut acc = vec![0.0f32; n_out];
                strided_for_each(&in_shape, &map, &zero, |i, o, _| acc[o] += x[i]);
                if op == Reduce::Mean {
                    acc.iter_mut().for_each(|v| *v /= count);
                }
                (acc, Vec::new())
            }
            Reduce::Max => {
                let mut best = vec![f32::NEG_INFINITY; n_out];
                let mut arg = vec![usize::MAX; n_out];
                strided_for_each(&in_shape, &map, &zero, |i, o, _| {
                    if arg[o] == usize::MAX || x[i] > best[o] {
                        best[o] = x[i];
                        arg[o] = i;
                    }
                });
                (best, arg)
            }
        };
        let value = Tensor::new(out_shape, out)?;
        let name = match op {
            Reduce::Sum => "sum",
            Reduce::Mean => "mean",
            Reduce::Max => "max",
        };
        let backward: BackwardFn = Box::new(move |args| {
            let g = args.grad;
            let mut gx = vec![0.0f32; args.inputs[0].numel()];
            match op {
                Reduce::Sum => strided_for_each(&in_shape, &map, &zero, |i, o, _| gx[i] = g[o]),
                Reduce::Mean => strided_for_each(&in_shape, &map, &zero, |i, o, _| gx[i] = g[o] / count),
                Reduce::Max => {
                    for (o, &i) in argmax.iter().enumerate() {
                        gx[i] += g[o];
                    }
                }
            }
            vec![Some(gx)]
        });
        Ok(self.push_op(name, value, vec![t], backward))
    }

    pub fn sum_all(&mut self, t: Var) -> Var {
        let axes: Vec<usize> = (0..self.value(t).rank()).collect();
        self.reduce(Reduce::Sum, t, &axes, false).expect("valid axes")
    }

    pub fn mean_all(&mut self, t: Var) -> Var {
        let axes: Vec<usize> = (0..self.value(t).rank()).collect();
        self.reduce(Reduce::Mean, t, &axes, false).expect("valid axes")
    }

    pub fn reshape(&mut self, t: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(t).detached().reshape(shape)?;
        let backward: BackwardFn = Box::new(|args| vec![Some(args.grad.to_vec())]);
        Ok(self.push_op("reshape", value, vec![t], backward))
    }

    /// Populates gradients for every node that `loss` depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::StaleGraph);
        }
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(bw) = &node.backward {
                let needs: Vec<bool> = node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
                let args = BackwardArgs {
                    inputs: node.inputs.iter().map(|v| &self.nodes[v.0].value).collect(),
                    output: &node.value,
                    grad: &g,
                    needs: needs.clone(),
                };
                let input_grads = bw(&args);
                for ((v, gi), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                    if !need {
                        continue;
                    }
                    let gi = gi.expect("backward omitted a required gradient");
                    match &mut self.grads[v.0] {
                        Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                        slot => *slot = Some(gi),
                    }
                }
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let g = self.grad(v)?;
        Some(Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("grad matches value shape"))
    }

    /// Clears all gradients so `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }
}
