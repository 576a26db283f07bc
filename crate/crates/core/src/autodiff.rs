//! Reverse-mode automatic differentiation over a static computation tape.
//!
//! A [`Tape`] records primitive operations symbolically; nothing is computed
//! while building it. A [`Session`] binds named input tensors, runs the
//! forward pass (retaining every intermediate value) and then propagates
//! gradients from a scalar output back to every trainable input.
//!
//! ```
//! use mmsurv::autodiff::{Session, Tape, TensorMap};
//! use mmsurv::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.param("x");
//! let y = tape.square(x);
//! tape.output("y", y);
//!
//! let mut inputs = TensorMap::new();
//! inputs.insert("x".into(), Tensor::scalar(3.0).unwrap());
//! let mut session = Session::new(&tape);
//! session.forward(&inputs).unwrap();
//! let grads = session.backward("y").unwrap();
//! assert_eq!(grads["x"].data(), &[6.0]);
//! ```

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::survival::CoxLoss;
use crate::tensor::{gemm, gemm_into, Tensor};

pub type TensorMap = BTreeMap<String, Tensor>;

/// Finite-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;

/// Lookup of named tensors for a forward pass.
pub trait Bindings {
    fn tensor(&self, name: &str) -> Option<&Tensor>;
}

impl Bindings for TensorMap {
    fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl<A: Bindings, B: Bindings> Bindings for (&A, &B) {
    fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.0.tensor(name).or_else(|| self.1.tensor(name))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

/// Elementwise maps with their derivatives.
#[derive(Clone, Copy, Debug)]
pub enum Unary {
    Exp,
    Log,
    Square,
    Neg,
    Tanh,
    Sigmoid,
    Scale(f64),
    /// User-supplied map; `df` receives the input value.
    Custom {
        name: &'static str,
        f: fn(f64) -> f64,
        df: fn(f64) -> f64,
    },
}

impl Unary {
    fn apply(&self, x: f64) -> f64 {
        match *self {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Square => x * x,
            Unary::Neg => -x,
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Unary::Scale(s) => s * x,
            Unary::Custom { f, .. } => f(x),
        }
    }

    fn derivative(&self, x: f64, y: f64) -> f64 {
        match *self {
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Square => 2.0 * x,
            Unary::Neg => -1.0,
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Scale(s) => s,
            Unary::Custom { df, .. } => df(x),
        }
    }

    fn name(&self) -> &'static str {
        match *self {
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Square => "square",
            Unary::Neg => "neg",
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Scale(_) => "scale",
            Unary::Custom { name, .. } => name,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input { name: String, trainable: bool },
    Constant(Tensor),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Map(NodeId, Unary),
    Relu(NodeId),
    Softmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    LogSumExp(NodeId),
    Average(Vec<NodeId>),
    Concat(Vec<NodeId>),
    Reshape(NodeId, Vec<usize>),
    Conv1dMeanPool {
        tokens: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    CoxNll {
        risks: NodeId,
        times: NodeId,
        events: NodeId,
    },
}

impl Op {
    fn name(&self) -> String {
        match self {
            Op::Input { name, .. } => format!("input '{name}'"),
            Op::Constant(_) => "constant".into(),
            Op::MatMul(..) => "matmul".into(),
            Op::Add(..) => "add".into(),
            Op::Sub(..) => "sub".into(),
            Op::Mul(..) => "mul".into(),
            Op::Map(_, u) => u.name().into(),
            Op::Relu(_) => "relu".into(),
            Op::Softmax(_) => "softmax".into(),
            Op::Sum(_) => "sum".into(),
            Op::Mean(_) => "mean".into(),
            Op::LogSumExp(_) => "logsumexp".into(),
            Op::Average(_) => "average".into(),
            Op::Concat(_) => "concat".into(),
            Op::Reshape(..) => "reshape".into(),
            Op::Conv1dMeanPool { .. } => "conv1d_mean_pool".into(),
            Op::CoxNll { .. } => "cox_nll".into(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive operations. Nodes only reference earlier
/// nodes, so the tape is acyclic by construction.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    outputs: BTreeMap<String, NodeId>,
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

    fn push(&mut self, op: Op, parents: &[NodeId]) -> NodeId {
        for p in parents {
            assert!(p.0 < self.nodes.len(), "node {p:?} does not exist on this tape");
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn declare(&mut self, name: &str, trainable: bool) -> NodeId {
        assert!(
            !self.inputs.contains_key(name),
            "input '{name}' declared twice"
        );
        self.nodes.push(Node {
            op: Op::Input {
                name: name.to_string(),
                trainable,
            },
            requires_grad: trainable,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.inputs.insert(name.to_string(), id);
        id
    }

    /// Non-trainable named input (data, masks, survival times).
    pub fn input(&mut self, name: &str) -> NodeId {
        self.declare(name, false)
    }

    /// Trainable named input; `backward` returns its gradient.
    pub fn param(&mut self, name: &str) -> NodeId {
        self.declare(name, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant(value), &[])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b), &[a, b])
    }

    /// Elementwise sum. `b` may also be a scalar or a row vector broadcast
    /// over the rows of a matrix `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b), &[a, b])
    }

    pub fn map(&mut self, a: NodeId, f: Unary) -> NodeId {
        self.push(Op::Map(a, f), &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.map(a, Unary::Exp)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.map(a, Unary::Log)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.map(a, Unary::Square)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a), &[a])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a), &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a), &[a])
    }

    /// `log Σ exp(a)` over all elements, computed with max subtraction.
    pub fn logsumexp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSumExp(a), &[a])
    }

    /// Elementwise mean of equally shaped nodes.
    pub fn average(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "average of nothing");
        self.push(Op::Average(parts.to_vec()), parts)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of nothing");
        self.push(Op::Concat(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        self.push(Op::Reshape(a, shape), &[a])
    }

    /// Valid 1-D convolution of an `m×d` token matrix along the token axis
    /// with an `N×k` kernel bank (shared across embedding dimensions), plus a
    /// per-channel bias, followed by mean pooling over positions. Output is
    /// `N×d`.
    pub fn conv1d_mean_pool(&mut self, tokens: NodeId, kernel: NodeId, bias: NodeId) -> NodeId {
        self.push(
            Op::Conv1dMeanPool {
                tokens,
                kernel,
                bias,
            },
            &[tokens, kernel, bias],
        )
    }

    /// Event-averaged Cox negative log partial likelihood of `risks` given
    /// survival `times` and 0/1 `events`.
    pub fn cox_nll(&mut self, risks: NodeId, times: NodeId, events: NodeId) -> NodeId {
        self.push(
            Op::CoxNll {
                risks,
                times,
                events,
            },
            &[risks, times, events],
        )
    }

    pub fn output(&mut self, name: &str, id: NodeId) {
        assert!(id.0 < self.nodes.len());
        self.outputs.insert(name.to_string(), id);
    }

    pub fn output_names(&self) -> impl Iterator<Item = &str> {
        self.outputs.keys().map(String::as_str)
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.inputs
            .iter()
            .filter(|(_, id)| matches!(self.nodes[id.0].op, Op::Input { trainable: true, .. }))
            .map(|(n, _)| n.clone())
            .collect()
    }
}

/// Forward/backward state for one tape.
pub struct Session<'t> {
    tape: &'t Tape,
    values: Option<Vec<Tensor>>,
}

impl<'t> Session<'t> {
    pub fn new(tape: &'t Tape) -> Self {
        Session { tape, values: None }
    }

    /// Evaluates every node and returns the named outputs.
    pub fn forward<B: Bindings + ?Sized>(&mut self, inputs: &B) -> Result<TensorMap> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.tape.nodes.len());
        for node in &self.tape.nodes {
            let v = eval_node(&node.op, &values, inputs)?;
            if !v.all_finite() {
                return Err(Error::Overflow { op: node.op.name() });
            }
            values.push(v);
        }
        let out = self
            .tape
            .outputs
            .iter()
            .map(|(name, id)| (name.clone(), values[id.0].clone()))
            .collect();
        self.values = Some(values);
        Ok(out)
    }

    pub fn value(&self, name: &str) -> Option<&Tensor> {
        let id = self.tape.outputs.get(name).or_else(|| self.tape.inputs.get(name))?;
        self.values.as_ref().map(|v| &v[id.0])
    }

    /// Gradients of the scalar output `seed` with respect to every trainable
    /// input. Inputs the seed does not depend on get zero gradients.
    pub fn backward(&self, seed: &str) -> Result<TensorMap> {
        let values = self
            .values
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        let seed_id = *self
            .tape
            .outputs
            .get(seed)
            .ok_or_else(|| Error::Contract(format!("no output named '{seed}'")))?;
        if !values[seed_id.0].is_scalar() {
            return Err(Error::Contract(format!(
                "seed output '{seed}' has shape {:?}, expected a scalar",
                values[seed_id.0].shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; seed_id.0 + 1];
        grads[seed_id.0] = Some(vec![1.0]);
        for idx in (0..=seed_id.0).rev() {
            let node = &self.tape.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Input { .. } = node.op {
                grads[idx] = Some(g);
                continue;
            }
            backprop(&self.tape.nodes, &node.op, &g, &values[idx], values, &mut grads);
        }
        let mut out = TensorMap::new();
        for (name, id) in &self.tape.inputs {
            if let Op::Input { trainable: true, .. } = self.tape.nodes[id.0].op {
                let shape = values[id.0].shape().to_vec();
                let data = grads
                    .get_mut(id.0)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; values[id.0].len()]);
                out.insert(name.clone(), Tensor::from_parts(shape, data));
            }
        }
        Ok(out)
    }
}

fn bcast_kind(op: &str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if b.len() == 1 && b.ndim() <= 1 {
        Ok(Broadcast::Scalar)
    } else if a.ndim() == 2 && b.len() == a.cols() && (b.ndim() == 1 || b.rows() == 1) {
        Ok(Broadcast::Row)
    } else {
        Err(Error::dim(
            op,
            format!("cannot combine shapes {:?} and {:?}", a.shape(), b.shape()),
        ))
    }
}

enum Broadcast {
    Same,
    Scalar,
    Row,
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// `(m, k)` view of a matmul left operand.
fn lhs_dims(a: &Tensor) -> Option<(usize, usize)> {
    match a.ndim() {
        1 => Some((1, a.shape()[0])),
        2 => Some((a.shape()[0], a.shape()[1])),
        _ => None,
    }
}

fn eval_node<B: Bindings + ?Sized>(op: &Op, values: &[Tensor], inputs: &B) -> Result<Tensor> {
    let v = |id: &NodeId| &values[id.0];
    Ok(match op {
        Op::Input { name, .. } => inputs
            .tensor(name)
            .cloned()
            .ok_or_else(|| Error::Input(format!("input '{name}' is not bound")))?,
        Op::Constant(t) => t.clone(),
        Op::MatMul(a, b) => {
            let (a, b) = (v(a), v(b));
            let (m, k) = lhs_dims(a).ok_or_else(|| Error::dim("matmul", "left operand must be rank 1 or 2"))?;
            if b.ndim() != 2 || b.shape()[0] != k {
                return Err(Error::dim(
                    "matmul",
                    format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
                ));
            }
            let n = b.shape()[1];
            let data = gemm(m, k, n, a.data(), b.data());
            let shape = if a.ndim() == 1 { vec![n] } else { vec![m, n] };
            Tensor::from_parts(shape, data)
        }
        Op::Add(a, b) => {
            let (a, b) = (v(a), v(b));
            let mut out = a.clone();
            match bcast_kind("add", a, b)? {
                Broadcast::Same => out
                    .data_mut()
                    .iter_mut()
                    .zip(b.data())
                    .for_each(|(o, &x)| *o += x),
                Broadcast::Scalar => {
                    let s = b.data()[0];
                    out.data_mut().iter_mut().for_each(|o| *o += s);
                }
                Broadcast::Row => {
                    let c = a.cols();
                    for row in out.data_mut().chunks_mut(c) {
                        row.iter_mut().zip(b.data()).for_each(|(o, &x)| *o += x);
                    }
                }
            }
            out
        }
        Op::Sub(a, b) => {
            let (a, b) = (v(a), v(b));
            same_shape("sub", a, b)?;
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        }
        Op::Mul(a, b) => {
            let (a, b) = (v(a), v(b));
            same_shape("mul", a, b)?;
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            Tensor::from_parts(a.shape().to_vec(), data)
        }
        Op::Map(a, f) => v(a).map(|x| f.apply(x)),
        Op::Relu(a) => v(a).map(|x| if x > 0.0 { x } else { 0.0 }),
        Op::Softmax(a) => {
            let a = v(a);
            let mut out = a.clone();
            for row in out.data_mut().chunks_mut(a.cols()) {
                softmax_in_place(row);
            }
            out
        }
        Op::Sum(a) => Tensor::from_parts(vec![], vec![v(a).data().iter().sum()]),
        Op::Mean(a) => {
            let a = v(a);
            Tensor::from_parts(vec![], vec![a.data().iter().sum::<f64>() / a.len() as f64])
        }
        Op::LogSumExp(a) => Tensor::from_parts(vec![], vec![logsumexp(v(a).data())]),
        Op::Average(parts) => {
            let first = v(&parts[0]);
            let mut acc = first.data().to_vec();
            for p in &parts[1..] {
                let t = v(p);
                same_shape("average", first, t)?;
                acc.iter_mut().zip(t.data()).for_each(|(o, &x)| *o += x);
            }
            let k = parts.len() as f64;
            acc.iter_mut().for_each(|o| *o /= k);
            Tensor::from_parts(first.shape().to_vec(), acc)
        }
        Op::Concat(parts) => {
            let first = v(&parts[0]);
            let rows = first.rows();
            let lead = &first.shape()[..first.ndim().saturating_sub(1)];
            let mut width = 0;
            for p in parts {
                let t = v(p);
                if t.ndim() != first.ndim() || &t.shape()[..t.ndim().saturating_sub(1)] != lead || t.ndim() == 0 {
                    return Err(Error::dim(
                        "concat",
                        format!("cannot concatenate {:?} with {:?}", first.shape(), t.shape()),
                    ));
                }
                width += t.cols();
            }
            let mut data = Vec::with_capacity(rows * width);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(v(p).row(r));
                }
            }
            let mut shape = lead.to_vec();
            shape.push(width);
            Tensor::from_parts(shape, data)
        }
        Op::Reshape(a, shape) => v(a).reshape(shape.clone())?,
        Op::Conv1dMeanPool {
            tokens,
            kernel,
            bias,
        } => {
            let (tokens, kernel, bias) = (v(tokens), v(kernel), v(bias));
            let (m, d, n_out, k) = conv_dims(tokens, kernel, bias)?;
            let windows = window_means(tokens.data(), m, d, k);
            let mut out = gemm(n_out, k, d, kernel.data(), &windows);
            for (row, &b) in out.chunks_mut(d).zip(bias.data()) {
                row.iter_mut().for_each(|o| *o += b);
            }
            Tensor::from_parts(vec![n_out, d], out)
        }
        Op::CoxNll {
            risks,
            times,
            events,
        } => {
            let loss = cox_kernel(v(risks), v(times), v(events))?;
            Tensor::from_parts(vec![], vec![loss.loss(v(risks).data())?])
        }
    })
}

fn cox_kernel(risks: &Tensor, times: &Tensor, events: &Tensor) -> Result<CoxLoss> {
    let n = times.len();
    if events.len() != n || risks.len() != n || (risks.ndim() == 2 && risks.cols() != 1) {
        return Err(Error::dim(
            "cox_nll",
            format!(
                "risks {:?}, times {:?}, events {:?}",
                risks.shape(),
                times.shape(),
                events.shape()
            ),
        ));
    }
    let flags: Vec<bool> = events.data().iter().map(|&e| e != 0.0).collect();
    CoxLoss::new(times.data(), &flags)
}

fn conv_dims(tokens: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if tokens.ndim() != 2 || kernel.ndim() != 2 || bias.len() != kernel.rows() {
        return Err(Error::dim(
            "conv1d_mean_pool",
            format!(
                "tokens {:?}, kernel {:?}, bias {:?}",
                tokens.shape(),
                kernel.shape(),
                bias.shape()
            ),
        ));
    }
    let (m, d) = (tokens.rows(), tokens.cols());
    let (n_out, k) = (kernel.rows(), kernel.cols());
    if m < k {
        return Err(Error::Input(format!(
            "{m} tokens is fewer than the kernel size {k}"
        )));
    }
    Ok((m, d, n_out, k))
}

/// `W[q, e] = mean_p tokens[p + q, e]` over the `m − k + 1` valid positions.
fn window_means(tokens: &[f64], m: usize, d: usize, k: usize) -> Vec<f64> {
    let positions = m - k + 1;
    // Prefix sums over rows make each window an O(d) difference.
    let mut prefix = vec![0.0; (m + 1) * d];
    for r in 0..m {
        for e in 0..d {
            prefix[(r + 1) * d + e] = prefix[r * d + e] + tokens[r * d + e];
        }
    }
    let mut out = vec![0.0; k * d];
    for q in 0..k {
        for e in 0..d {
            out[q * d + e] = (prefix[(q + positions) * d + e] - prefix[q * d + e]) / positions as f64;
        }
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: NodeId, contribution: Vec<f64>) {
    if !nodes[id.0].requires_grad {
        return;
    }
    match &mut grads[id.0] {
        Some(g) => g.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
        slot => *slot = Some(contribution),
    }
}

fn needs(nodes: &[Node], id: NodeId) -> bool {
    nodes[id.0].requires_grad
}

fn backprop(
    nodes: &[Node],
    op: &Op,
    g: &[f64],
    out: &Tensor,
    values: &[Tensor],
    grads: &mut [Option<Vec<f64>>],
) {
    let v = |id: &NodeId| &values[id.0];
    match op {
        Op::Input { .. } | Op::Constant(_) => {}
        Op::MatMul(a, b) => {
            let (at, bt) = (v(a), v(b));
            let (m, k) = lhs_dims(at).expect("checked in forward");
            let n = bt.shape()[1];
            if needs(nodes, *a) {
                let mut da = vec![0.0; m * k];
                gemm_into(m, n, k, g, false, bt.data(), true, &mut da);
                accumulate(nodes, grads, *a, da);
            }
            if needs(nodes, *b) {
                let mut db = vec![0.0; k * n];
                gemm_into(k, m, n, at.data(), true, g, false, &mut db);
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            if needs(nodes, *b) {
                let (at, bt) = (v(a), v(b));
                let db = match bcast_kind("add", at, bt).expect("checked in forward") {
                    Broadcast::Same => g.to_vec(),
                    Broadcast::Scalar => vec![g.iter().sum()],
                    Broadcast::Row => {
                        let c = at.cols();
                        let mut acc = vec![0.0; c];
                        for row in g.chunks(c) {
                            acc.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
                        }
                        acc
                    }
                };
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.to_vec());
            accumulate(nodes, grads, *b, g.iter().map(|x| -x).collect());
        }
        Op::Mul(a, b) => {
            if needs(nodes, *a) {
                let da = g.iter().zip(v(b).data()).map(|(x, y)| x * y).collect();
                accumulate(nodes, grads, *a, da);
            }
            if needs(nodes, *b) {
                let db = g.iter().zip(v(a).data()).map(|(x, y)| x * y).collect();
                accumulate(nodes, grads, *b, db);
            }
        }
        Op::Map(a, f) => {
            let x = v(a).data();
            let da = g
                .iter()
                .zip(x)
                .zip(out.data())
                .map(|((gi, &xi), &yi)| gi * f.derivative(xi, yi))
                .collect();
            accumulate(nodes, grads, *a, da);
        }
        Op::Relu(a) => {
            let da = g
                .iter()
                .zip(v(a).data())
                .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                .collect();
            accumulate(nodes, grads, *a, da);
        }
        Op::Softmax(a) => {
            let c = out.cols();
            let mut da = vec![0.0; g.len()];
            for ((dr, gr), yr) in da.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                    *d = yi * (gi - dot);
                }
            }
            accumulate(nodes, grads, *a, da);
        }
        Op::Sum(a) => accumulate(nodes, grads, *a, vec![g[0]; v(a).len()]),
        Op::Mean(a) => {
            let n = v(a).len();
            accumulate(nodes, grads, *a, vec![g[0] / n as f64; n]);
        }
        Op::LogSumExp(a) => {
            let lse = out.data()[0];
            let da = v(a).data().iter().map(|x| g[0] * (x - lse).exp()).collect();
            accumulate(nodes, grads, *a, da);
        }
        Op::Average(parts) => {
            let k = parts.len() as f64;
            for p in parts {
                accumulate(nodes, grads, *p, g.iter().map(|x| x / k).collect());
            }
        }
        Op::Concat(parts) => {
            let rows = out.rows();
            let width = out.cols();
            let mut offset = 0;
            for p in parts {
                let c = v(p).cols();
                if needs(nodes, *p) {
                    let mut dp = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        dp.extend_from_slice(&g[r * width + offset..r * width + offset + c]);
                    }
                    accumulate(nodes, grads, *p, dp);
                }
                offset += c;
            }
        }
        Op::Reshape(a, _) => accumulate(nodes, grads, *a, g.to_vec()),
        Op::Conv1dMeanPool {
            tokens,
            kernel,
            bias,
        } => {
            let (tt, kt) = (v(tokens), v(kernel));
            let (m, d) = (tt.rows(), tt.cols());
            let (n_out, k) = (kt.rows(), kt.cols());
            if needs(nodes, *kernel) {
                let windows = window_means(tt.data(), m, d, k);
                let mut dk = vec![0.0; n_out * k];
                gemm_into(n_out, d, k, g, false, &windows, true, &mut dk);
                accumulate(nodes, grads, *kernel, dk);
            }
            if needs(nodes, *bias) {
                let db = g.chunks(d).map(|row| row.iter().sum()).collect();
                accumulate(nodes, grads, *bias, db);
            }
            if needs(nodes, *tokens) {
                // dW[q, e] = Σ_n K[n, q] g[n, e]; each window row spreads
                // evenly over its positions.
                let mut dw = vec![0.0; k * d];
                gemm_into(k, n_out, d, kt.data(), true, g, false, &mut dw);
                let positions = m - k + 1;
                let mut dt = vec![0.0; m * d];
                for q in 0..k {
                    for p in 0..positions {
                        let r = p + q;
                        for e in 0..d {
                            dt[r * d + e] += dw[q * d + e] / positions as f64;
                        }
                    }
                }
                accumulate(nodes, grads, *tokens, dt);
            }
        }
        Op::CoxNll {
            risks,
            times,
            events,
        } => {
            if needs(nodes, *risks) {
                let kernel = cox_kernel(v(risks), v(times), v(events)).expect("checked in forward");
                let (_, dr) = kernel.loss_and_grad(v(risks).data()).expect("checked in forward");
                accumulate(nodes, grads, *risks, dr.into_iter().map(|x| x * g[0]).collect());
            }
        }
    }
}

/// One checked element of a trainable input.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| !e.passed)
    }

    pub fn max_relative_error(&self) -> f64 {
        self.entries.iter().map(|e| e.relative_error).fold(0.0, f64::max)
    }
}

/// Smallest denominator used in the relative error, so that gradients that
/// are zero on both sides compare as equal.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares backward gradients of scalar output `seed` against central
/// finite differences with step [`FD_STEP`], element by element, for every
/// trainable input.
pub fn grad_check(tape: &Tape, inputs: &TensorMap, seed: &str, tolerance: f64) -> Result<GradCheckReport> {
    if !(tolerance > 0.0) {
        return Err(Error::Parameter(format!("tolerance must be positive, got {tolerance}")));
    }
    let mut session = Session::new(tape);
    session.forward(inputs)?;
    let analytic = session.backward(seed)?;
    let eval = |bound: &TensorMap| -> Result<f64> {
        let mut s = Session::new(tape);
        let out = s.forward(bound)?;
        Ok(out[seed].data()[0])
    };
    let mut report = GradCheckReport::default();
    let mut work = inputs.clone();
    for name in tape.trainable_names() {
        let base = inputs
            .get(&name)
            .ok_or_else(|| Error::Input(format!("input '{name}' is not bound")))?;
        for index in 0..base.len() {
            let x = base.data()[index];
            work.get_mut(&name).expect("bound").data_mut()[index] = x + FD_STEP;
            let up = eval(&work)?;
            work.get_mut(&name).expect("bound").data_mut()[index] = x - FD_STEP;
            let down = eval(&work)?;
            work.get_mut(&name).expect("bound").data_mut()[index] = x;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[&name].data()[index];
            let relative_error = relative_error(a, numeric);
            report.entries.push(GradCheckEntry {
                param: name.clone(),
                index,
                analytic: a,
                numeric,
                relative_error,
                passed: relative_error <= tolerance,
            });
        }
    }
    Ok(report)
}
