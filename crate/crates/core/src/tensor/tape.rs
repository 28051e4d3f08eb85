use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`]. Ids grow in creation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    All,
    Axis(usize),
}

/// Every op the tape can record.
///
/// Elementwise binary ops broadcast only in two cases: a single-element
/// operand, or an operand whose shape is a trailing suffix of the other's
/// (a leading batch dimension). Anything else needs an explicit reshape.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Transpose,
    Sum(Reduce),
    Mean(Reduce),
    /// Population variance (divides by n).
    Variance(Reduce),
    Exp,
    Log,
    Sigmoid,
    Tanh,
    Relu,
    Square,
    Scale(f64),
    Clamp {
        min: f64,
        max: f64,
    },
    Broadcast {
        shape: Vec<usize>,
    },
    Reshape {
        shape: Vec<usize>,
    },
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    Concat {
        axis: usize,
    },
}

#[derive(Clone, Debug)]
enum NodeOp {
    Leaf,
    Op(OpKind),
}

#[derive(Clone, Debug)]
struct Node {
    op: NodeOp,
    inputs: Vec<Var>,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, `None` if `v` does not require grad.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Owned gradient, zero-filled with `like`'s shape when absent.
    pub fn wrt(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

/// Single-threaded recording of forward ops.
///
/// `backward` does not consume or mutate the tape: calling it twice on the
/// same loss returns identical gradients, never accumulated ones.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn can_broadcast(from: &[usize], to: &[usize]) -> bool {
    let n: usize = from.iter().product();
    n == 1 || (from.len() <= to.len() && to.ends_with(from))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(NodeOp::Leaf, vec![], t, false)
    }

    /// Trainable leaf; always receives a gradient (zero if unused).
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(NodeOp::Leaf, vec![], t, true)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
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

    fn push(&mut self, op: NodeOp, inputs: Vec<Var>, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, inputs, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::UnknownNode(v.0))
        }
    }

    // Convenience wrappers over `apply`.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Div, &[a, b])
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Transpose, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sum(Reduce::All), &[a])
    }
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::Sum(Reduce::Axis(axis)), &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Mean(Reduce::All), &[a])
    }
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::Mean(Reduce::Axis(axis)), &[a])
    }
    pub fn variance(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Variance(Reduce::All), &[a])
    }
    pub fn variance_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.apply(OpKind::Variance(Reduce::Axis(axis)), &[a])
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Exp, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Log, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Sigmoid, &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Tanh, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Relu, &[a])
    }
    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Square, &[a])
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.apply(OpKind::Scale(c), &[a])
    }
    pub fn clamp(&mut self, a: Var, min: f64, max: f64) -> Result<Var> {
        self.apply(OpKind::Clamp { min, max }, &[a])
    }
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(OpKind::Broadcast { shape: shape.to_vec() }, &[a])
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(OpKind::Reshape { shape: shape.to_vec() }, &[a])
    }
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        self.apply(OpKind::Slice { axis, start, end }, &[a])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(OpKind::Concat { axis }, parts)
    }

    /// Record `op` applied to `inputs` and return the output node.
    pub fn apply(&mut self, op: OpKind, inputs: &[Var]) -> Result<Var> {
        for &v in inputs {
            self.check(v)?;
        }
        let arity = match &op {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div | OpKind::MatMul => Some(2),
            OpKind::Concat { .. } => None,
            _ => Some(1),
        };
        match arity {
            Some(n) if inputs.len() != n => {
                return Err(Error::shape(format!("{op:?} takes {n} inputs, got {}", inputs.len())))
            }
            None if inputs.is_empty() => return Err(Error::shape("concat of zero tensors")),
            _ => {}
        }

        let mut inputs = inputs.to_vec();
        if matches!(op, OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div) {
            let (sa, sb) = (self.shape(inputs[0]).to_vec(), self.shape(inputs[1]).to_vec());
            if sa != sb {
                let na: usize = sa.iter().product();
                let nb: usize = sb.iter().product();
                if nb <= na && can_broadcast(&sb, &sa) {
                    inputs[1] = self.broadcast(inputs[1], &sa)?;
                } else if can_broadcast(&sa, &sb) {
                    inputs[0] = self.broadcast(inputs[0], &sb)?;
                } else {
                    return Err(Error::shape(format!("{op:?}: {sa:?} vs {sb:?}")));
                }
            }
        }

        let value = self.forward(&op, &inputs)?;
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        Ok(self.push(NodeOp::Op(op), inputs, value, requires_grad))
    }

    fn forward(&self, op: &OpKind, inputs: &[Var]) -> Result<Tensor> {
        let a = self.value(inputs[0]);
        let unary =
            |f: &dyn Fn(f64) -> f64| Tensor { shape: a.shape.clone(), data: a.data.iter().map(|&x| f(x)).collect() };
        let binary = |f: &dyn Fn(f64, f64) -> f64| {
            let b = self.value(inputs[1]);
            Tensor { shape: a.shape.clone(), data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect() }
        };
        Ok(match op {
            OpKind::Add => binary(&|x, y| x + y),
            OpKind::Sub => binary(&|x, y| x - y),
            OpKind::Mul => binary(&|x, y| x * y),
            OpKind::Div => {
                let b = self.value(inputs[1]);
                if let Some(bad) = b.data.iter().find(|&&y| y == 0.0 || !y.is_finite()) {
                    return Err(Error::Domain(format!("division by {bad}")));
                }
                binary(&|x, y| x / y)
            }
            OpKind::MatMul => {
                let b = self.value(inputs[1]);
                if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                    return Err(Error::shape(format!("matmul {:?} x {:?}", a.shape, b.shape)));
                }
                let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
                Tensor { shape: vec![m, n], data: kernels::matmul(&a.data, &b.data, m, k, n) }
            }
            OpKind::Transpose => {
                if a.shape.len() != 2 {
                    return Err(Error::shape(format!("transpose of {:?}", a.shape)));
                }
                let (r, c) = (a.shape[0], a.shape[1]);
                Tensor { shape: vec![c, r], data: kernels::transpose(&a.data, r, c) }
            }
            OpKind::Sum(r) | OpKind::Mean(r) | OpKind::Variance(r) => {
                let (shape, outer, len, inner) = self.reduce_dims(a, *r)?;
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += a.data[base + i];
                        }
                    }
                }
                if !matches!(op, OpKind::Sum(_)) {
                    let inv = 1.0 / len as f64;
                    out.iter_mut().for_each(|v| *v *= inv);
                }
                if matches!(op, OpKind::Variance(_)) {
                    let mut var = vec![0.0; outer * inner];
                    for o in 0..outer {
                        for l in 0..len {
                            let base = (o * len + l) * inner;
                            for i in 0..inner {
                                let d = a.data[base + i] - out[o * inner + i];
                                var[o * inner + i] += d * d;
                            }
                        }
                    }
                    let inv = 1.0 / len as f64;
                    var.iter_mut().for_each(|v| *v *= inv);
                    out = var;
                }
                Tensor { shape, data: out }
            }
            OpKind::Exp => unary(&f64::exp),
            OpKind::Log => {
                if let Some(bad) = a.data.iter().find(|&&x| x <= 0.0 || x.is_nan()) {
                    return Err(Error::Domain(format!("log of {bad}")));
                }
                unary(&f64::ln)
            }
            OpKind::Sigmoid => unary(&sigmoid),
            OpKind::Tanh => unary(&f64::tanh),
            OpKind::Relu => unary(&|x| if x > 0.0 { x } else { 0.0 }),
            OpKind::Square => unary(&|x| x * x),
            OpKind::Scale(c) => unary(&|x| c * x),
            OpKind::Clamp { min, max } => {
                if !(min <= max) {
                    return Err(Error::Domain(format!("clamp bounds {min} > {max}")));
                }
                unary(&|x| x.clamp(*min, *max))
            }
            OpKind::Broadcast { shape } => {
                if !can_broadcast(&a.shape, shape) || shape.contains(&0) {
                    return Err(Error::shape(format!("broadcast {:?} -> {shape:?}", a.shape)));
                }
                let n: usize = shape.iter().product();
                let m = a.data.len();
                Tensor { shape: shape.clone(), data: (0..n).map(|i| a.data[i % m]).collect() }
            }
            OpKind::Reshape { shape } => Tensor::new(shape.clone(), a.data.clone())?,
            OpKind::Slice { axis, start, end } => {
                if *axis >= a.shape.len() || start >= end || *end > a.shape[*axis] {
                    return Err(Error::shape(format!("slice {start}..{end} on axis {axis} of {:?}", a.shape)));
                }
                let (outer, len, inner) = split_axis(&a.shape, *axis);
                let w = end - start;
                let mut data = Vec::with_capacity(outer * w * inner);
                for o in 0..outer {
                    let base = (o * len + start) * inner;
                    data.extend_from_slice(&a.data[base..base + w * inner]);
                }
                let mut shape = a.shape.clone();
                shape[*axis] = w;
                Tensor { shape, data }
            }
            OpKind::Concat { axis } => {
                let first = &a.shape;
                if *axis >= first.len() {
                    return Err(Error::shape(format!("concat axis {axis} of {first:?}")));
                }
                let mut total = 0;
                for &v in inputs {
                    let s = self.shape(v);
                    let compatible = s.len() == first.len()
                        && s.iter().zip(first).enumerate().all(|(d, (x, y))| d == *axis || x == y);
                    if !compatible {
                        return Err(Error::shape(format!("concat {first:?} with {s:?}")));
                    }
                    total += s[*axis];
                }
                let (outer, _, inner) = split_axis(first, *axis);
                let mut data = Vec::with_capacity(outer * total * inner);
                for o in 0..outer {
                    for &v in inputs {
                        let t = self.value(v);
                        let chunk = t.shape[*axis] * inner;
                        data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
                    }
                }
                let mut shape = first.clone();
                shape[*axis] = total;
                Tensor { shape, data }
            }
        })
    }

    fn reduce_dims(&self, a: &Tensor, r: Reduce) -> Result<(Vec<usize>, usize, usize, usize)> {
        match r {
            Reduce::All => Ok((vec![], 1, a.len(), 1)),
            Reduce::Axis(axis) => {
                if axis >= a.shape.len() {
                    return Err(Error::shape(format!("reduce axis {axis} of {:?}", a.shape)));
                }
                let (outer, len, inner) = split_axis(&a.shape, axis);
                let mut shape = a.shape.clone();
                shape.remove(axis);
                Ok((shape, outer, len, inner))
            }
        }
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every node that requires grad gets an entry; parameters the loss does
    /// not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let NodeOp::Op(op) = &node.op else { continue };
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(op, node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if !node.requires_grad {
                    return None;
                }
                let data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                Some(Tensor { shape: node.value.shape.clone(), data })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, op: &OpKind, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        let inp = |i: usize| &self.nodes[node.inputs[i].0];
        let wants = |i: usize| inp(i).requires_grad;

        // Adds `contrib` into the gradient slot of input `i`.
        let mut accumulate = |i: usize, contrib: Vec<f64>| {
            let slot = &mut grads[node.inputs[i].0];
            match slot {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                None => *slot = Some(contrib),
            }
        };
        let elementwise = |f: &dyn Fn(usize) -> f64| (0..g.len()).map(f).collect::<Vec<f64>>();

        match op {
            OpKind::Add => {
                for i in 0..2 {
                    if wants(i) {
                        accumulate(i, g.to_vec());
                    }
                }
            }
            OpKind::Sub => {
                if wants(0) {
                    accumulate(0, g.to_vec());
                }
                if wants(1) {
                    accumulate(1, g.iter().map(|v| -v).collect());
                }
            }
            OpKind::Mul => {
                let (a, b) = (&inp(0).value.data, &inp(1).value.data);
                if wants(0) {
                    accumulate(0, elementwise(&|k| g[k] * b[k]));
                }
                if wants(1) {
                    accumulate(1, elementwise(&|k| g[k] * a[k]));
                }
            }
            OpKind::Div => {
                let (a, b) = (&inp(0).value.data, &inp(1).value.data);
                if wants(0) {
                    accumulate(0, elementwise(&|k| g[k] / b[k]));
                }
                if wants(1) {
                    accumulate(1, elementwise(&|k| -g[k] * a[k] / (b[k] * b[k])));
                }
            }
            OpKind::MatMul => {
                let (a, b) = (&inp(0).value, &inp(1).value);
                let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
                if wants(0) {
                    accumulate(0, kernels::matmul_a_bt(g, &b.data, m, k, n));
                }
                if wants(1) {
                    accumulate(1, kernels::matmul_at_b(&a.data, g, m, k, n));
                }
            }
            OpKind::Transpose => {
                let (r, c) = (out.shape[0], out.shape[1]);
                accumulate(0, kernels::transpose(g, r, c));
            }
            OpKind::Sum(r) | OpKind::Mean(r) | OpKind::Variance(r) => {
                let a = &inp(0).value;
                let (_, outer, len, inner) = self.reduce_dims(a, *r).expect("validated during forward");
                let scale = match op {
                    OpKind::Sum(_) => 1.0,
                    OpKind::Mean(_) => 1.0 / len as f64,
                    _ => 2.0 / len as f64,
                };
                let mut contrib = vec![0.0; a.len()];
                // Variance needs the per-slot mean; recompute it from the input.
                let mut means = vec![0.0; outer * inner];
                if matches!(op, OpKind::Variance(_)) {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                means[o * inner + i] += a.data[(o * len + l) * inner + i];
                            }
                        }
                    }
                    means.iter_mut().for_each(|m| *m /= len as f64);
                }
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            let idx = (o * len + l) * inner + i;
                            let gi = g[o * inner + i] * scale;
                            contrib[idx] = match op {
                                OpKind::Variance(_) => gi * (a.data[idx] - means[o * inner + i]),
                                _ => gi,
                            };
                        }
                    }
                }
                accumulate(0, contrib);
            }
            OpKind::Exp => accumulate(0, elementwise(&|k| g[k] * out.data[k])),
            OpKind::Log => {
                let a = &inp(0).value.data;
                accumulate(0, elementwise(&|k| g[k] / a[k]));
            }
            OpKind::Sigmoid => accumulate(0, elementwise(&|k| g[k] * out.data[k] * (1.0 - out.data[k]))),
            OpKind::Tanh => accumulate(0, elementwise(&|k| g[k] * (1.0 - out.data[k] * out.data[k]))),
            OpKind::Relu => {
                let a = &inp(0).value.data;
                accumulate(0, elementwise(&|k| if a[k] > 0.0 { g[k] } else { 0.0 }));
            }
            OpKind::Square => {
                let a = &inp(0).value.data;
                accumulate(0, elementwise(&|k| 2.0 * a[k] * g[k]));
            }
            OpKind::Scale(c) => accumulate(0, elementwise(&|k| c * g[k])),
            OpKind::Clamp { min, max } => {
                let a = &inp(0).value.data;
                accumulate(0, elementwise(&|k| if a[k] >= *min && a[k] <= *max { g[k] } else { 0.0 }));
            }
            OpKind::Broadcast { .. } => {
                let m = inp(0).value.len();
                let mut contrib = vec![0.0; m];
                for (k, gv) in g.iter().enumerate() {
                    contrib[k % m] += gv;
                }
                accumulate(0, contrib);
            }
            OpKind::Reshape { .. } => accumulate(0, g.to_vec()),
            OpKind::Slice { axis, start, end } => {
                let a = &inp(0).value;
                let (outer, len, inner) = split_axis(&a.shape, *axis);
                let w = end - start;
                let mut contrib = vec![0.0; a.len()];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    let src = o * w * inner;
                    contrib[dst..dst + w * inner].copy_from_slice(&g[src..src + w * inner]);
                }
                accumulate(0, contrib);
            }
            OpKind::Concat { axis } => {
                let (outer, total, inner) = split_axis(&out.shape, *axis);
                let mut offset = 0;
                for i in 0..node.inputs.len() {
                    let part = &inp(i).value;
                    let w = part.shape[*axis];
                    if wants(i) {
                        let mut contrib = Vec::with_capacity(part.len());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            contrib.extend_from_slice(&g[base..base + w * inner]);
                        }
                        accumulate(i, contrib);
                    }
                    offset += w;
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
