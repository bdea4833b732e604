use std::cell::{Ref, RefCell};

use super::broadcast::{broadcast_shapes, broadcast_strides, reduce_to_shape, zip_indices};
use super::gemm::{gemm, Mat};
use super::special;
use super::Tensor;
use crate::error::{Error, Result};

/// Element-wise primitives with recorded derivatives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Square,
    Softplus,
    Sigmoid,
    Log,
    Exp,
    Neg,
    AddScalar(f64),
    MulScalar(f64),
    Reciprocal,
    Sqrt,
    Tanh,
    Gelu,
    Digamma,
    Lgamma,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Unary {
    fn check(self, x: f64) -> Result<()> {
        let ok = match self {
            Unary::Log | Unary::Digamma | Unary::Lgamma => x > 0.0,
            Unary::Reciprocal => x != 0.0,
            Unary::Sqrt => x >= 0.0,
            _ => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("{self:?} undefined at {x}")))
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Square => x * x,
            Unary::Softplus => softplus(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Log => x.ln(),
            Unary::Exp => x.exp(),
            Unary::Neg => -x,
            Unary::AddScalar(c) => x + c,
            Unary::MulScalar(c) => x * c,
            Unary::Reciprocal => 1.0 / x,
            Unary::Sqrt => x.sqrt(),
            Unary::Tanh => x.tanh(),
            Unary::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Unary::Digamma => special::digamma(x),
            Unary::Lgamma => special::lgamma(x),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Square => 2.0 * x,
            Unary::Softplus => sigmoid(x),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Log => 1.0 / x,
            Unary::Exp => y,
            Unary::Neg => -1.0,
            Unary::AddScalar(_) => 1.0,
            Unary::MulScalar(c) => c,
            Unary::Reciprocal => -y * y,
            Unary::Sqrt => 0.5 / y,
            Unary::Tanh => 1.0 - y * y,
            Unary::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Unary::Digamma => special::trigamma(x),
            Unary::Lgamma => special::digamma(x),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, usize, usize),
    Unary(Unary, usize),
    MatMul(usize, usize),
    /// `keep` is the input shape with reduced axes set to 1.
    Sum {
        input: usize,
        keep: Vec<usize>,
        scale: f64,
    },
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Narrow {
        input: usize,
        axis: usize,
        start: usize,
    },
    GatherTokens {
        input: usize,
        indices: Vec<usize>,
    },
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        input: usize,
        inv_std: Vec<f64>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of primitive operations.
///
/// Nodes are pushed in evaluation order, so every node's inputs precede it and
/// the backward sweep is a plain reverse iteration. A tape is single-threaded.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A tape that never tracks gradients, for evaluation.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records `t` as a leaf, honouring its `requires_grad` flag.
    pub fn leaf(&self, t: &Tensor) -> Var<'_> {
        self.push_leaf(t.shape.clone(), t.data.clone(), t.requires_grad)
    }

    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push_leaf(t.shape, t.data, false)
    }

    pub fn variable(&self, t: Tensor) -> Var<'_> {
        self.push_leaf(t.shape, t.data, true)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.push_leaf(vec![1], vec![value], false)
    }

    fn push_leaf(&self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var<'_> {
        self.push_node(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        })
    }

    fn push_node(&self, node: Node) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(
        &self,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        inputs: &[usize],
    ) -> Result<Var<'_>> {
        if let Some(bad) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "{op:?} produced non-finite value {} at flat index {bad}",
                value[bad]
            )));
        }
        let requires_grad = self.grad_enabled && {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|&i| nodes[i].requires_grad)
        };
        let op = if requires_grad { op } else { Op::Leaf };
        Ok(self.push_node(Node {
            shape,
            value,
            op,
            requires_grad,
        }))
    }

    fn nodes(&self) -> Ref<'_, Vec<Node>> {
        self.nodes.borrow()
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// The tape itself is not modified, so calling this twice yields
    /// identical gradients.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if root.requires_grad {
            grads[loss.id] = Some(vec![1.0]);
        }
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(buf) => buf.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        None => *slot = Some(delta),
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    match &node.op {
        Op::Leaf => {}
        Op::Binary(kind, a, b) => {
            let (na, nb) = (&nodes[*a], &nodes[*b]);
            let out = &node.shape;
            let sa = broadcast_strides(&na.shape, out);
            let sb = broadcast_strides(&nb.shape, out);
            if na.requires_grad {
                let mut ga = vec![0.0; na.value.len()];
                match kind {
                    BinaryKind::Add | BinaryKind::Sub => {
                        ga = reduce_to_shape(g, out, &na.shape);
                    }
                    BinaryKind::Mul => {
                        zip_indices(out, &sa, &sb, |o, ia, ib| ga[ia] += g[o] * nb.value[ib]);
                    }
                    BinaryKind::Div => {
                        zip_indices(out, &sa, &sb, |o, ia, ib| ga[ia] += g[o] / nb.value[ib]);
                    }
                }
                accumulate(&mut grads[*a], ga);
            }
            if nb.requires_grad {
                let mut gb = vec![0.0; nb.value.len()];
                match kind {
                    BinaryKind::Add => gb = reduce_to_shape(g, out, &nb.shape),
                    BinaryKind::Sub => {
                        gb = reduce_to_shape(g, out, &nb.shape);
                        gb.iter_mut().for_each(|v| *v = -*v);
                    }
                    BinaryKind::Mul => {
                        zip_indices(out, &sa, &sb, |o, ia, ib| gb[ib] += g[o] * na.value[ia]);
                    }
                    BinaryKind::Div => {
                        // d(a/b)/db = -out / b
                        zip_indices(out, &sa, &sb, |o, _, ib| {
                            gb[ib] -= g[o] * node.value[o] / nb.value[ib]
                        });
                    }
                }
                accumulate(&mut grads[*b], gb);
            }
        }
        Op::Unary(f, a) => {
            let na = &nodes[*a];
            let ga = g
                .iter()
                .zip(na.value.iter().zip(&node.value))
                .map(|(g, (&x, &y))| g * f.derivative(x, y))
                .collect();
            accumulate(&mut grads[*a], ga);
        }
        Op::MatMul(a, b) => {
            let (na, nb) = (&nodes[*a], &nodes[*b]);
            let ra = na.shape.len();
            let (m, k) = (na.shape[ra - 2], na.shape[ra - 1]);
            let n = nb.shape[nb.shape.len() - 1];
            if nb.shape.len() == 2 {
                let rows = na.value.len() / k;
                if na.requires_grad {
                    let mut ga = vec![0.0; na.value.len()];
                    gemm(
                        Mat::new(g, rows, n),
                        Mat::new(&nb.value, k, n).t(),
                        &mut ga,
                        false,
                    );
                    accumulate(&mut grads[*a], ga);
                }
                if nb.requires_grad {
                    let mut gb = vec![0.0; nb.value.len()];
                    gemm(
                        Mat::new(&na.value, rows, k).t(),
                        Mat::new(g, rows, n),
                        &mut gb,
                        false,
                    );
                    accumulate(&mut grads[*b], gb);
                }
            } else {
                let batch = na.value.len() / (m * k);
                if na.requires_grad {
                    let mut ga = vec![0.0; na.value.len()];
                    for i in 0..batch {
                        gemm(
                            Mat::new(&g[i * m * n..(i + 1) * m * n], m, n),
                            Mat::new(&nb.value[i * k * n..(i + 1) * k * n], k, n).t(),
                            &mut ga[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    accumulate(&mut grads[*a], ga);
                }
                if nb.requires_grad {
                    let mut gb = vec![0.0; nb.value.len()];
                    for i in 0..batch {
                        gemm(
                            Mat::new(&na.value[i * m * k..(i + 1) * m * k], m, k).t(),
                            Mat::new(&g[i * m * n..(i + 1) * m * n], m, n),
                            &mut gb[i * k * n..(i + 1) * k * n],
                            false,
                        );
                    }
                    accumulate(&mut grads[*b], gb);
                }
            }
        }
        Op::Sum { input, keep, scale } => {
            let na = &nodes[*input];
            let mut ga = vec![0.0; na.value.len()];
            let sk = broadcast_strides(keep, &na.shape);
            let zero = vec![0; na.shape.len()];
            zip_indices(&na.shape, &sk, &zero, |i, k, _| ga[i] = g[k] * scale);
            accumulate(&mut grads[*input], ga);
        }
        Op::Reshape(a) => accumulate(&mut grads[*a], g.to_vec()),
        Op::Permute(a, perm) => {
            let na = &nodes[*a];
            let mut ga = vec![0.0; na.value.len()];
            let strides = permuted_strides(&na.shape, perm);
            let zero = vec![0; perm.len()];
            zip_indices(&node.shape, &strides, &zero, |o, ia, _| ga[ia] += g[o]);
            accumulate(&mut grads[*a], ga);
        }
        Op::Narrow { input, axis, start } => {
            let na = &nodes[*input];
            let mut ga = vec![0.0; na.value.len()];
            let (outer, full, inner) = split_axis(&na.shape, *axis);
            let len = node.shape[*axis];
            for o in 0..outer {
                let src = &g[o * len * inner..(o + 1) * len * inner];
                let dst = (o * full + start) * inner;
                ga[dst..dst + len * inner].copy_from_slice(src);
            }
            accumulate(&mut grads[*input], ga);
        }
        Op::GatherTokens { input, indices } => {
            let na = &nodes[*input];
            let (p, r) = (na.shape[1], na.shape[2]);
            let mut ga = vec![0.0; na.value.len()];
            for (c, &idx) in indices.iter().enumerate() {
                let dst = (c * p + idx) * r;
                ga[dst..dst + r].copy_from_slice(&g[c * r..(c + 1) * r]);
            }
            accumulate(&mut grads[*input], ga);
        }
        Op::Softmax(a) => {
            let width = *node.shape.last().unwrap();
            let mut ga = vec![0.0; g.len()];
            for ((gr, yr), out) in g
                .chunks(width)
                .zip(node.value.chunks(width))
                .zip(ga.chunks_mut(width))
            {
                let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                for ((o, g), y) in out.iter_mut().zip(gr).zip(yr) {
                    *o = y * (g - dot);
                }
            }
            accumulate(&mut grads[*a], ga);
        }
        Op::LogSoftmax(a) => {
            let width = *node.shape.last().unwrap();
            let mut ga = vec![0.0; g.len()];
            for ((gr, yr), out) in g
                .chunks(width)
                .zip(node.value.chunks(width))
                .zip(ga.chunks_mut(width))
            {
                let total: f64 = gr.iter().sum();
                for ((o, g), y) in out.iter_mut().zip(gr).zip(yr) {
                    *o = g - y.exp() * total;
                }
            }
            accumulate(&mut grads[*a], ga);
        }
        Op::LayerNorm { input, inv_std } => {
            let width = *node.shape.last().unwrap();
            let w = width as f64;
            let mut ga = vec![0.0; g.len()];
            for (row, ((gr, yr), out)) in g
                .chunks(width)
                .zip(node.value.chunks(width))
                .zip(ga.chunks_mut(width))
                .enumerate()
            {
                let mean_g: f64 = gr.iter().sum::<f64>() / w;
                let mean_gy: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / w;
                for ((o, g), y) in out.iter_mut().zip(gr).zip(yr) {
                    *o = inv_std[row] * (g - mean_g - y * mean_gy);
                }
            }
            accumulate(&mut grads[*input], ga);
        }
    }
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Input strides reordered so that output axis `i` walks input axis `perm[i]`.
fn permuted_strides(input: &[usize], perm: &[usize]) -> Vec<usize> {
    let base = contiguous_strides(input);
    perm.iter().map(|&p| base[p]).collect()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<Tensor> {
        self.grads
            .get(v.id)
            .and_then(|g| g.as_ref())
            .map(|g| Tensor::from_parts(self.shapes[v.id].clone(), g.clone()))
    }

    /// Adds the gradient of `v` into `target.grad`. A variable the loss does
    /// not depend on contributes zeros.
    pub fn accumulate_into(&self, v: Var<'_>, target: &mut Tensor) -> Result<()> {
        let g = self
            .get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.id]));
        target.accumulate_grad(&g)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes()[self.id].requires_grad
    }

    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes();
        let n = &nodes[self.id];
        Tensor::from_parts(n.shape.clone(), n.value.clone())
    }

    pub fn item(&self) -> Result<f64> {
        let nodes = self.tape.nodes();
        let n = &nodes[self.id];
        if n.value.len() != 1 {
            return Err(Error::Contract(format!("item() on shape {:?}", n.shape)));
        }
        Ok(n.value[0])
    }

    /// Runs `f` over the stored values without copying.
    pub fn with_values<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.tape.nodes()[self.id].value)
    }

    fn binary(self, other: Var<'t>, kind: BinaryKind) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let f = |x: f64, y: f64| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            };
            if matches!(kind, BinaryKind::Div) && b.value.iter().any(|&v| v == 0.0) {
                return Err(Error::Domain("division by zero".into()));
            }
            if a.shape == b.shape {
                let v = a
                    .value
                    .iter()
                    .zip(&b.value)
                    .map(|(&x, &y)| f(x, y))
                    .collect();
                (a.shape.clone(), v)
            } else {
                let out = broadcast_shapes(&a.shape, &b.shape)?;
                let sa = broadcast_strides(&a.shape, &out);
                let sb = broadcast_strides(&b.shape, &out);
                let mut v = vec![0.0; out.iter().product()];
                zip_indices(&out, &sa, &sb, |o, ia, ib| {
                    v[o] = f(a.value[ia], b.value[ib])
                });
                (out, v)
            }
        };
        self.tape.push(
            shape,
            value,
            Op::Binary(kind, self.id, other.id),
            &[self.id, other.id],
        )
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Div)
    }

    pub fn unary(self, f: Unary) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            for &x in &a.value {
                f.check(x)?;
            }
            (
                a.shape.clone(),
                a.value.iter().map(|&x| f.apply(x)).collect(),
            )
        };
        self.tape
            .push(shape, value, Op::Unary(f, self.id), &[self.id])
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary(Unary::Square)
    }
    pub fn softplus(self) -> Result<Var<'t>> {
        self.unary(Unary::Softplus)
    }
    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(Unary::Sigmoid)
    }
    pub fn ln(self) -> Result<Var<'t>> {
        self.unary(Unary::Log)
    }
    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(Unary::Exp)
    }
    pub fn neg(self) -> Result<Var<'t>> {
        self.unary(Unary::Neg)
    }
    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary(Unary::AddScalar(c))
    }
    pub fn mul_scalar(self, c: f64) -> Result<Var<'t>> {
        self.unary(Unary::MulScalar(c))
    }
    pub fn reciprocal(self) -> Result<Var<'t>> {
        self.unary(Unary::Reciprocal)
    }
    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(Unary::Sqrt)
    }
    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary(Unary::Tanh)
    }
    pub fn gelu(self) -> Result<Var<'t>> {
        self.unary(Unary::Gelu)
    }
    pub fn digamma(self) -> Result<Var<'t>> {
        self.unary(Unary::Digamma)
    }
    pub fn lgamma(self) -> Result<Var<'t>> {
        self.unary(Unary::Lgamma)
    }

    /// `self[..., m, k] · other[k, n]`, or a batched product when `other`
    /// carries the same leading dimensions as `self`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (ra, rb) = (a.shape.len(), b.shape.len());
            if ra < 2 || rb < 2 {
                return Err(Error::shapes("matmul needs rank >= 2", &a.shape, &b.shape));
            }
            let (m, k) = (a.shape[ra - 2], a.shape[ra - 1]);
            let (k2, n) = (b.shape[rb - 2], b.shape[rb - 1]);
            if k != k2 || (rb > 2 && (ra != rb || a.shape[..ra - 2] != b.shape[..rb - 2])) {
                return Err(Error::shapes("matmul", &a.shape, &b.shape));
            }
            let mut out_shape = a.shape[..ra - 2].to_vec();
            out_shape.extend([m, n]);
            let rows = a.value.len() / k;
            let mut out = vec![0.0; rows * n];
            if rb == 2 {
                gemm(
                    Mat::new(&a.value, rows, k),
                    Mat::new(&b.value, k, n),
                    &mut out,
                    false,
                );
            } else {
                for i in 0..rows / m {
                    gemm(
                        Mat::new(&a.value[i * m * k..(i + 1) * m * k], m, k),
                        Mat::new(&b.value[i * k * n..(i + 1) * k * n], k, n),
                        &mut out[i * m * n..(i + 1) * m * n],
                        false,
                    );
                }
            }
            (out_shape, out)
        };
        self.tape.push(
            shape,
            value,
            Op::MatMul(self.id, other.id),
            &[self.id, other.id],
        )
    }

    fn reduce(self, axes: &[usize], keepdim: bool, mean: bool) -> Result<Var<'t>> {
        let (shape, value, keep, scale) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            let mut keep = a.shape.clone();
            for &ax in axes {
                if ax >= keep.len() {
                    return Err(Error::Dimension(format!(
                        "axis {ax} invalid for shape {:?}",
                        a.shape
                    )));
                }
                keep[ax] = 1;
            }
            let count = a.value.len() / keep.iter().product::<usize>();
            let scale = if mean { 1.0 / count as f64 } else { 1.0 };
            let mut out = vec![0.0; keep.iter().product()];
            let sk = broadcast_strides(&keep, &a.shape);
            let zero = vec![0; a.shape.len()];
            zip_indices(&a.shape, &sk, &zero, |i, k, _| out[k] += a.value[i]);
            if mean {
                out.iter_mut().for_each(|v| *v *= scale);
            }
            let shape = if keepdim {
                keep.clone()
            } else {
                let s: Vec<usize> = a
                    .shape
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !axes.contains(i))
                    .map(|(_, &d)| d)
                    .collect();
                if s.is_empty() {
                    vec![1]
                } else {
                    s
                }
            };
            (shape, out, keep, scale)
        };
        self.tape.push(
            shape,
            value,
            Op::Sum {
                input: self.id,
                keep,
                scale,
            },
            &[self.id],
        )
    }

    pub fn sum_axes(self, axes: &[usize], keepdim: bool) -> Result<Var<'t>> {
        self.reduce(axes, keepdim, false)
    }

    pub fn mean_axes(self, axes: &[usize], keepdim: bool) -> Result<Var<'t>> {
        self.reduce(axes, keepdim, true)
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(&axes, false, false)
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(&axes, false, true)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if shape.iter().product::<usize>() != a.value.len() || shape.contains(&0) {
                return Err(Error::shapes("reshape", &a.shape, shape));
            }
            a.value.clone()
        };
        self.tape
            .push(shape.to_vec(), value, Op::Reshape(self.id), &[self.id])
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            let mut seen = vec![false; a.shape.len()];
            if perm.len() != a.shape.len()
                || perm
                    .iter()
                    .any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true))
            {
                return Err(Error::Dimension(format!(
                    "permutation {perm:?} invalid for shape {:?}",
                    a.shape
                )));
            }
            let out: Vec<usize> = perm.iter().map(|&p| a.shape[p]).collect();
            let strides = permuted_strides(&a.shape, perm);
            let zero = vec![0; perm.len()];
            let mut v = vec![0.0; a.value.len()];
            zip_indices(&out, &strides, &zero, |o, ia, _| v[o] = a.value[ia]);
            (out, v)
        };
        self.tape.push(
            shape,
            value,
            Op::Permute(self.id, perm.to_vec()),
            &[self.id],
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Result<Var<'t>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::Dimension("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if axis >= a.shape.len() || len == 0 || start + len > a.shape[axis] {
                return Err(Error::Dimension(format!(
                    "narrow(axis {axis}, {start}..{}) out of range for {:?}",
                    start + len,
                    a.shape
                )));
            }
            let (outer, full, inner) = split_axis(&a.shape, axis);
            let mut v = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let src = (o * full + start) * inner;
                v.extend_from_slice(&a.value[src..src + len * inner]);
            }
            let mut shape = a.shape.clone();
            shape[axis] = len;
            (shape, v)
        };
        self.tape.push(
            shape,
            value,
            Op::Narrow {
                input: self.id,
                axis,
                start,
            },
            &[self.id],
        )
    }

    /// For a `[C, P, R]` tensor, picks token `indices[c]` of each leading
    /// entry, giving `[C, 1, R]`.
    pub fn gather_tokens(self, indices: &[usize]) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            if a.shape.len() != 3 || indices.len() != a.shape[0] {
                return Err(Error::Dimension(format!(
                    "gather_tokens: {} indices for shape {:?}",
                    indices.len(),
                    a.shape
                )));
            }
            let (p, r) = (a.shape[1], a.shape[2]);
            if let Some(&bad) = indices.iter().find(|&&i| i >= p) {
                return Err(Error::Dimension(format!(
                    "token index {bad} out of range for {p} tokens"
                )));
            }
            let mut v = Vec::with_capacity(indices.len() * r);
            for (c, &idx) in indices.iter().enumerate() {
                let src = (c * p + idx) * r;
                v.extend_from_slice(&a.value[src..src + r]);
            }
            (vec![indices.len(), 1, r], v)
        };
        self.tape.push(
            shape,
            value,
            Op::GatherTokens {
                input: self.id,
                indices: indices.to_vec(),
            },
            &[self.id],
        )
    }

    fn rowwise(
        self,
        f: impl Fn(&[f64], &mut [f64]),
        op: impl FnOnce(usize) -> Op,
    ) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            let width = *a.shape.last().unwrap();
            let mut v = vec![0.0; a.value.len()];
            for (src, dst) in a.value.chunks(width).zip(v.chunks_mut(width)) {
                f(src, dst);
            }
            (a.shape.clone(), v)
        };
        self.tape.push(shape, value, op(self.id), &[self.id])
    }

    /// Softmax along the last axis.
    pub fn softmax(self) -> Result<Var<'t>> {
        self.rowwise(
            |x, y| {
                let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for (o, &v) in y.iter_mut().zip(x) {
                    *o = (v - max).exp();
                    total += *o;
                }
                y.iter_mut().for_each(|o| *o /= total);
            },
            Op::Softmax,
        )
    }

    /// Log-softmax along the last axis, via log-sum-exp.
    pub fn log_softmax(self) -> Result<Var<'t>> {
        self.rowwise(
            |x, y| {
                let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                for (o, &v) in y.iter_mut().zip(x) {
                    *o = v - lse;
                }
            },
            Op::LogSoftmax,
        )
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(self, eps: f64) -> Result<Var<'t>> {
        let (shape, value, inv_std) = {
            let nodes = self.tape.nodes();
            let a = &nodes[self.id];
            let width = *a.shape.last().unwrap();
            let w = width as f64;
            let mut v = vec![0.0; a.value.len()];
            let mut inv_std = Vec::with_capacity(a.value.len() / width);
            for (x, y) in a.value.chunks(width).zip(v.chunks_mut(width)) {
                let mean = x.iter().sum::<f64>() / w;
                let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w;
                let is = 1.0 / (var + eps).sqrt();
                for (o, &xv) in y.iter_mut().zip(x) {
                    *o = (xv - mean) * is;
                }
                inv_std.push(is);
            }
            (a.shape.clone(), v, inv_std)
        };
        self.tape.push(
            shape,
            value,
            Op::LayerNorm {
                input: self.id,
                inv_std,
            },
            &[self.id],
        )
    }
}
