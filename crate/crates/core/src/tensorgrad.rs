//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is an append-only tape: every primitive call evaluates
//! eagerly, records the operation, and returns a [`NodeId`]. Calling
//! [`Graph::backward`] on a scalar root sweeps the tape in reverse and
//! accumulates gradients for every node, in particular for the nodes
//! registered as parameters.
//!
//! The primitive set is deliberately small: exactly what feed-forward
//! autoencoders, per-block softmax heads, and fuzzy-logic aggregators need.
//! Everything runs in double precision; single precision cannot survive the
//! 1e-4 finite-difference tolerance the test-suite imposes on deep
//! compositions.

use crate::{Error, Result};
use std::collections::BTreeMap;

/// Default step for [`finite_diff_check`].
pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Dense row-major array of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                expected: format!("{expected} values for shape {shape:?}"),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Rank-1 tensor from a plain vector.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Shape `[1]` tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Rank-2 tensor from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    /// Constant-filled tensor of the given shape.
    pub fn fill(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True when the tensor holds exactly one value.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Row-major element of a rank-2 tensor.
    pub fn get2(&self, row: usize, col: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    /// True when every entry is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn rank(&self) -> usize {
        self.shape.len()
    }

    fn rows(&self) -> usize {
        self.shape[0]
    }

    fn cols(&self) -> usize {
        self.shape[1]
    }
}

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Parameter,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Power(NodeId, f64),
    Exp(NodeId),
    Log(NodeId),
    Sigmoid(NodeId),
    Relu(NodeId),
    Softmax(NodeId, usize),
    Sum(NodeId, Option<usize>),
    Mean(NodeId, Option<usize>),
    Concat(Vec<NodeId>, usize),
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    },
    Clamp(NodeId, f64, f64),
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of a scalar root with respect to the graph's parameters.
///
/// Parameters that do not influence the root have all-zero gradients.
pub struct Gradients {
    by_param: BTreeMap<NodeId, Tensor>,
}

impl Gradients {
    /// Gradient tensor for a parameter node.
    pub fn get(&self, param: NodeId) -> Option<&Tensor> {
        self.by_param.get(&param)
    }

    /// Iterates over `(parameter, gradient)` pairs in node order.
    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.by_param.iter().map(|(id, t)| (*id, t))
    }
}

/// Append-only computation tape with eager evaluation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    fn tensor(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Current value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        self.tensor(id)
    }

    /// Number of nodes on the tape.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value)
    }

    /// Shape-`[1]` constant.
    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    /// Records a trainable-parameter leaf; gradients are collected for it.
    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        let id = self.push(Op::Parameter, value);
        self.params.push(id);
        id
    }

    /// Parameter nodes in registration order.
    pub fn parameters(&self) -> &[NodeId] {
        &self.params
    }

    fn binary_shapes(&self, a: NodeId, b: NodeId) -> (Vec<usize>, Vec<usize>) {
        (
            self.tensor(a).shape.clone(),
            self.tensor(b).shape.clone(),
        )
    }

    /// Elementwise addition. The right operand may also be a rank-1 row
    /// vector broadcast over the rows of a rank-2 left operand (bias add).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.add_sub_eval(a, b, 1.0)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    /// Elementwise subtraction, with the same broadcast rule as [`Graph::add`].
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.add_sub_eval(a, b, -1.0)?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    fn add_sub_eval(&self, a: NodeId, b: NodeId, sign: f64) -> Result<Tensor> {
        let (sa, sb) = self.binary_shapes(a, b);
        let ta = self.tensor(a);
        let tb = self.tensor(b);
        if sa == sb {
            let data = ta
                .data
                .iter()
                .zip(&tb.data)
                .map(|(x, y)| x + sign * y)
                .collect();
            return Tensor::new(sa, data);
        }
        if ta.rank() == 2 && tb.rank() == 1 && ta.cols() == tb.len() {
            let cols = ta.cols();
            let data = ta
                .data
                .iter()
                .enumerate()
                .map(|(i, x)| x + sign * tb.data[i % cols])
                .collect();
            return Tensor::new(sa, data);
        }
        Err(Error::Shape {
            expected: format!("{sa:?}"),
            got: format!("{sb:?}"),
        })
    }

    /// Elementwise product. The right operand may be a scalar.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = self.binary_shapes(a, b);
        let ta = self.tensor(a);
        let tb = self.tensor(b);
        let value = if sa == sb {
            let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
            Tensor::new(sa, data)?
        } else if tb.is_scalar() {
            let s = tb.item();
            Tensor::new(sa, ta.data.iter().map(|x| x * s).collect())?
        } else {
            return Err(Error::Shape {
                expected: format!("{sa:?}"),
                got: format!("{sb:?}"),
            });
        };
        Ok(self.push(Op::Mul(a, b), value))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let ta = self.tensor(a);
        let tb = self.tensor(b);
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(Error::Shape {
                expected: "(m,k) x (k,n) matrices".into(),
                got: format!("{:?} x {:?}", ta.shape, tb.shape),
            });
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let data = matmul_raw(&ta.data, &tb.data, m, k, n);
        let value = Tensor::new(vec![m, n], data)?;
        if !value.all_finite() {
            return Err(Error::Domain("matmul produced non-finite values".into()));
        }
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// Elementwise `x^p` for `x >= 0`. The derivative at `x = 0` is taken
    /// as 0, which keeps p-mean aggregators finite at saturated inputs.
    pub fn power(&mut self, x: NodeId, p: f64) -> Result<NodeId> {
        let tx = self.tensor(x);
        if tx.data.iter().any(|v| *v < 0.0) {
            return Err(Error::Domain(format!(
                "power({p}) requires non-negative input"
            )));
        }
        let data: Vec<f64> = tx.data.iter().map(|v| v.powf(p)).collect();
        let value = Tensor::new(tx.shape.clone(), data)?;
        if !value.all_finite() {
            return Err(Error::Domain(format!("power({p}) overflowed")));
        }
        Ok(self.push(Op::Power(x, p), value))
    }

    /// Elementwise exponential.
    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.tensor(x);
        let data: Vec<f64> = tx.data.iter().map(|v| v.exp()).collect();
        let value = Tensor::new(tx.shape.clone(), data)?;
        if !value.all_finite() {
            return Err(Error::Domain("exp overflowed".into()));
        }
        Ok(self.push(Op::Exp(x), value))
    }

    /// Elementwise natural logarithm; input must be strictly positive.
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.tensor(x);
        if tx.data.iter().any(|v| *v <= 0.0) {
            return Err(Error::Domain("log requires strictly positive input".into()));
        }
        let data = tx.data.iter().map(|v| v.ln()).collect();
        let value = Tensor::new(tx.shape.clone(), data)?;
        Ok(self.push(Op::Log(x), value))
    }

    /// Elementwise logistic sigmoid.
    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.tensor(x);
        let data = tx.data.iter().map(|v| stable_sigmoid(*v)).collect();
        let value = Tensor::new(tx.shape.clone(), data)?;
        Ok(self.push(Op::Sigmoid(x), value))
    }

    /// Elementwise rectifier `max(0, x)`.
    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.tensor(x);
        let data = tx.data.iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(tx.shape.clone(), data)?;
        Ok(self.push(Op::Relu(x), value))
    }

    /// Numerically stable softmax along `axis` of a rank-2 tensor.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        let tx = self.tensor(x);
        if tx.rank() != 2 || axis > 1 {
            return Err(Error::Shape {
                expected: "rank-2 tensor, axis 0 or 1".into(),
                got: format!("shape {:?}, axis {axis}", tx.shape),
            });
        }
        let (rows, cols) = (tx.rows(), tx.cols());
        let mut data = vec![0.0; rows * cols];
        for lane in lanes(rows, cols, axis) {
            let max = lane
                .clone()
                .map(|i| tx.data[i])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for i in lane.clone() {
                let e = (tx.data[i] - max).exp();
                data[i] = e;
                denom += e;
            }
            for i in lane {
                data[i] /= denom;
            }
        }
        let value = Tensor::new(tx.shape.clone(), data)?;
        Ok(self.push(Op::Softmax(x, axis), value))
    }

    /// Sum over the whole tensor (`axis = None`) or along one axis of a
    /// rank-2 tensor.
    pub fn sum(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let value = self.reduce_eval(x, axis, false)?;
        Ok(self.push(Op::Sum(x, axis), value))
    }

    /// Arithmetic mean over the whole tensor or along one axis.
    pub fn mean(&mut self, x: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let value = self.reduce_eval(x, axis, true)?;
        Ok(self.push(Op::Mean(x, axis), value))
    }

    fn reduce_eval(&self, x: NodeId, axis: Option<usize>, mean: bool) -> Result<Tensor> {
        let tx = self.tensor(x);
        match axis {
            None => {
                let mut s: f64 = tx.data.iter().sum();
                if mean {
                    s /= tx.len() as f64;
                }
                Ok(Tensor::scalar(s))
            }
            Some(axis) => {
                if tx.rank() != 2 || axis > 1 {
                    return Err(Error::Shape {
                        expected: "rank-2 tensor, axis 0 or 1".into(),
                        got: format!("shape {:?}, axis {axis}", tx.shape),
                    });
                }
                let (rows, cols) = (tx.rows(), tx.cols());
                let out_len = if axis == 0 { cols } else { rows };
                let n = if axis == 0 { rows } else { cols };
                let mut data = vec![0.0; out_len];
                // the reduced axis is the one traversed inside each lane
                for (o, lane) in lanes(rows, cols, axis).enumerate() {
                    let mut s = 0.0;
                    for i in lane {
                        s += tx.data[i];
                    }
                    data[o] = if mean { s / n as f64 } else { s };
                }
                Tensor::new(vec![out_len], data)
            }
        }
    }

    /// Concatenates tensors along `axis`. Rank-1 tensors concatenate along
    /// axis 0; rank-2 tensors along axis 0 or 1.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId> {
        if inputs.is_empty() {
            return Err(Error::Argument("concat of zero tensors".into()));
        }
        let rank = self.tensor(inputs[0]).rank();
        for &id in inputs {
            let t = self.tensor(id);
            if t.rank() != rank || axis >= rank {
                return Err(Error::Shape {
                    expected: format!("rank-{rank} tensors, axis {axis} < rank"),
                    got: format!("{:?}", t.shape),
                });
            }
        }
        let value = if rank == 1 {
            let mut data = Vec::new();
            for &id in inputs {
                data.extend_from_slice(&self.tensor(id).data);
            }
            Tensor::from_vec(data)
        } else if axis == 0 {
            let cols = self.tensor(inputs[0]).cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for &id in inputs {
                let t = self.tensor(id);
                if t.cols() != cols {
                    return Err(Error::Shape {
                        expected: format!("{cols} columns"),
                        got: format!("{:?}", t.shape),
                    });
                }
                rows += t.rows();
                data.extend_from_slice(&t.data);
            }
            Tensor::new(vec![rows, cols], data)?
        } else {
            let rows = self.tensor(inputs[0]).rows();
            let total_cols: usize = inputs.iter().map(|&id| self.tensor(id).cols()).sum();
            for &id in inputs {
                if self.tensor(id).rows() != rows {
                    return Err(Error::Shape {
                        expected: format!("{rows} rows"),
                        got: format!("{:?}", self.tensor(id).shape),
                    });
                }
            }
            let mut data = vec![0.0; rows * total_cols];
            let mut off = 0;
            for &id in inputs {
                let t = self.tensor(id);
                let c = t.cols();
                for r in 0..rows {
                    data[r * total_cols + off..r * total_cols + off + c]
                        .copy_from_slice(&t.data[r * c..(r + 1) * c]);
                }
                off += c;
            }
            Tensor::new(vec![rows, total_cols], data)?
        };
        Ok(self.push(Op::Concat(inputs.to_vec(), axis), value))
    }

    /// Takes `[start, end)` along `axis`.
    pub fn slice(&mut self, input: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        let t = self.tensor(input);
        let rank = t.rank();
        if axis >= rank {
            return Err(Error::Argument(format!(
                "slice axis {axis} out of range for rank {rank}"
            )));
        }
        let dim = t.shape[axis];
        if start >= end || end > dim {
            return Err(Error::Argument(format!(
                "slice [{start}, {end}) invalid for axis of size {dim}"
            )));
        }
        let value = if rank == 1 {
            Tensor::from_vec(t.data[start..end].to_vec())
        } else if axis == 0 {
            let cols = t.cols();
            Tensor::new(
                vec![end - start, cols],
                t.data[start * cols..end * cols].to_vec(),
            )?
        } else {
            let (rows, cols) = (t.rows(), t.cols());
            let width = end - start;
            let mut data = Vec::with_capacity(rows * width);
            for r in 0..rows {
                data.extend_from_slice(&t.data[r * cols + start..r * cols + end]);
            }
            Tensor::new(vec![rows, width], data)?
        };
        Ok(self.push(
            Op::Slice {
                input,
                axis,
                start,
                end,
            },
            value,
        ))
    }

    /// Clamps every entry into `[lo, hi]`.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo <= hi) {
            return Err(Error::Argument(format!("clamp bounds inverted: [{lo}, {hi}]")));
        }
        let tx = self.tensor(x);
        let data = tx.data.iter().map(|v| v.clamp(lo, hi)).collect();
        let value = Tensor::new(tx.shape.clone(), data)?;
        Ok(self.push(Op::Clamp(x, lo, hi), value))
    }

    /// Reverse sweep from a scalar `root`, producing gradients for every
    /// registered parameter. Parameters the root does not depend on get
    /// zero gradients.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients> {
        if !self.tensor(root).is_scalar() {
            return Err(Error::Argument(format!(
                "backward root must be scalar, got shape {:?}",
                self.tensor(root).shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::fill(&self.tensor(root).shape.clone(), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &grad, &mut grads);
            grads[idx] = Some(grad);
        }

        let mut by_param = BTreeMap::new();
        for &p in &self.params {
            let g = grads[p.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(&self.tensor(p).shape.clone()));
            by_param.insert(p, g);
        }
        Ok(Gradients { by_param })
    }

    fn propagate(&self, idx: usize, grad: &Tensor, grads: &mut [Option<Tensor>]) {
        let accumulate = |grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor| {
            match &mut grads[id.0] {
                Some(existing) => {
                    for (e, d) in existing.data.iter_mut().zip(&delta.data) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };

        match &self.nodes[idx].op {
            Op::Constant | Op::Parameter => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, grad.clone());
                accumulate(grads, *b, self.reduce_to_shape(grad, *b, 1.0));
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, grad.clone());
                accumulate(grads, *b, self.reduce_to_shape(grad, *b, -1.0));
            }
            Op::Mul(a, b) => {
                let ta = self.tensor(*a);
                let tb = self.tensor(*b);
                if ta.shape == tb.shape {
                    let da = Tensor {
                        shape: ta.shape.clone(),
                        data: grad.data.iter().zip(&tb.data).map(|(g, y)| g * y).collect(),
                    };
                    let db = Tensor {
                        shape: tb.shape.clone(),
                        data: grad.data.iter().zip(&ta.data).map(|(g, x)| g * x).collect(),
                    };
                    accumulate(grads, *a, da);
                    accumulate(grads, *b, db);
                } else {
                    // rhs scalar broadcast
                    let s = tb.item();
                    let da = Tensor {
                        shape: ta.shape.clone(),
                        data: grad.data.iter().map(|g| g * s).collect(),
                    };
                    let db = Tensor::scalar(
                        grad.data.iter().zip(&ta.data).map(|(g, x)| g * x).sum(),
                    );
                    accumulate(grads, *a, da);
                    accumulate(grads, *b, db);
                }
            }
            Op::MatMul(a, b) => {
                let ta = self.tensor(*a);
                let tb = self.tensor(*b);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA = dC . B^T, dB = A^T . dC
                let bt = transpose(&tb.data, k, n);
                let da = matmul_raw(&grad.data, &bt, m, n, k);
                let at = transpose(&ta.data, m, k);
                let db = matmul_raw(&at, &grad.data, k, m, n);
                accumulate(
                    grads,
                    *a,
                    Tensor {
                        shape: vec![m, k],
                        data: da,
                    },
                );
                accumulate(
                    grads,
                    *b,
                    Tensor {
                        shape: vec![k, n],
                        data: db,
                    },
                );
            }
            Op::Power(x, p) => {
                let tx = self.tensor(*x);
                let data = grad
                    .data
                    .iter()
                    .zip(&tx.data)
                    .map(|(g, v)| {
                        if *v > 0.0 {
                            g * p * v.powf(p - 1.0)
                        } else {
                            0.0
                        }
                    })
                    .collect();
                accumulate(
                    grads,
                    *x,
                    Tensor {
                        shape: tx.shape.clone(),
                        data,
                    },
                );
            }
            Op::Exp(x) => {
                let y = &self.nodes[idx].value;
                let data = grad.data.iter().zip(&y.data).map(|(g, y)| g * y).collect();
                accumulate(
                    grads,
                    *x,
                    Tensor {
                        shape: y.shape.clone(),
                        data,
                    },
                );
            }
            Op::Log(x) => {
                let tx = self.tensor(*x);
                let data = grad.data.iter().zip(&tx.data).map(|(g, v)| g / v).collect();
                accumulate(
                    grads,
                    *x,
                    Tensor {
                        shape: tx.shape.clone(),
                        data,
                    },
                );
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[idx].value;
                let data = grad
                    .data
                    .iter()
                    .zip(&y.data)
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect();
                accumulate(
                    grads,
                    *x,
                    Tensor {
                        shape: y.shape.clone(),
                        data,
                    },
                );
            }
            Op::Relu(x) => {
                let tx = self.tensor(*x);
                let data = grad
                    .data
                    .iter()
                    .zip(&tx.data)
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(
                    grads,
                    *x,
                    Tensor {
                        shape: tx.shape.clone(),
                        data,
                    },
                );
            }
            Op::Softmax(x, axis) => {
                let y = &self.nodes[idx].value;
                let (rows, cols) = (y.rows(), y.cols());
                let mut data = vec![0.0; rows * cols];
                for lane in lanes(rows, cols, *axis) {
                    let dot: f64 = lane.clone().map(|i| grad.data[i] * y.data[i]).sum();
                    for i in lane {
                        data[i] = y.data[i] * (grad.data[i] - dot);
                    }
                }
                accumulate(
                    grads,
                    *x,
                    Tensor {
                        shape: y.shape.clone(),
                        data,
                    },
                );
            }
            Op::Sum(x, axis) | Op::Mean(x, axis) => {
                let is_mean = matches!(self.nodes[idx].op, Op::Mean(..));
                let tx = self.tensor(*x);
                let delta = match axis {
                    None => {
                        let scale = if is_mean {
                            grad.item() / tx.len() as f64
                        } else {
                            grad.item()
                        };
                        Tensor::fill(&tx.shape.clone(), scale)
                    }
                    Some(axis) => {
                        let (rows, cols) = (tx.rows(), tx.cols());
                        let n = if *axis == 0 { rows } else { cols };
                        let mut data = vec![0.0; rows * cols];
                        for (o, lane) in lanes(rows, cols, *axis).enumerate() {
                            let mut g = grad.data[o];
                            if is_mean {
                                g /= n as f64;
                            }
                            for i in lane {
                                data[i] = g;
                            }
                        }
                        Tensor {
                            shape: tx.shape.clone(),
                            data,
                        }
                    }
                };
                accumulate(grads, *x, delta);
            }
            Op::Concat(inputs, axis) => {
                let rank = self.tensor(inputs[0]).rank();
                if rank == 1 || *axis == 0 {
                    let mut off = 0;
                    for &id in inputs {
                        let len = self.tensor(id).len();
                        let delta = Tensor {
                            shape: self.tensor(id).shape.clone(),
                            data: grad.data[off..off + len].to_vec(),
                        };
                        accumulate(grads, id, delta);
                        off += len;
                    }
                } else {
                    let rows = self.tensor(inputs[0]).rows();
                    let total_cols: usize =
                        inputs.iter().map(|&id| self.tensor(id).cols()).sum();
                    let mut off = 0;
                    for &id in inputs {
                        let c = self.tensor(id).cols();
                        let mut data = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            data.extend_from_slice(
                                &grad.data[r * total_cols + off..r * total_cols + off + c],
                            );
                        }
                        accumulate(
                            grads,
                            id,
                            Tensor {
                                shape: vec![rows, c],
                                data,
                            },
                        );
                        off += c;
                    }
                }
            }
            Op::Slice {
                input,
                axis,
                start,
                end,
            } => {
                let tx = self.tensor(*input);
                let mut data = vec![0.0; tx.len()];
                if tx.rank() == 1 {
                    data[*start..*end].copy_from_slice(&grad.data);
                } else if *axis == 0 {
                    let cols = tx.cols();
                    data[start * cols..end * cols].copy_from_slice(&grad.data);
                } else {
                    let (cols, width) = (tx.cols(), end - start);
                    for r in 0..grad.rows() {
                        data[r * cols + start..r * cols + end]
                            .copy_from_slice(&grad.data[r * width..(r + 1) * width]);
                    }
                }
                accumulate(
                    grads,
                    *input,
                    Tensor {
                        shape: tx.shape.clone(),
                        data,
                    },
                );
            }
            Op::Clamp(x, lo, hi) => {
                let tx = self.tensor(*x);
                let data = grad
                    .data
                    .iter()
                    .zip(&tx.data)
                    .map(|(g, v)| if *v >= *lo && *v <= *hi { *g } else { 0.0 })
                    .collect();
                accumulate(
                    grads,
                    *x,
                    Tensor {
                        shape: tx.shape.clone(),
                        data,
                    },
                );
            }
        }
    }

    /// Folds a full-shape gradient back into the (possibly broadcast)
    /// operand's shape.
    fn reduce_to_shape(&self, grad: &Tensor, operand: NodeId, sign: f64) -> Tensor {
        let t = self.tensor(operand);
        if t.shape == grad.shape {
            return Tensor {
                shape: t.shape.clone(),
                data: grad.data.iter().map(|g| sign * g).collect(),
            };
        }
        // row-vector broadcast: sum gradient over rows
        let cols = t.len();
        let mut data = vec![0.0; cols];
        for (i, g) in grad.data.iter().enumerate() {
            data[i % cols] += sign * g;
        }
        Tensor {
            shape: t.shape.clone(),
            data,
        }
    }
}

/// Iterator over index lanes of a `rows x cols` matrix. `axis = 1` yields
/// one lane per row (indices within the row); `axis = 0` yields one lane
/// per column.
fn lanes(
    rows: usize,
    cols: usize,
    axis: usize,
) -> impl Iterator<Item = StrideIter> + Clone {
    let (count, len, stride, step) = if axis == 1 {
        (rows, cols, cols, 1)
    } else {
        (cols, rows, 1, cols)
    };
    (0..count).map(move |lane| StrideIter {
        next: lane * stride,
        remaining: len,
        step,
    })
}

#[derive(Clone)]
struct StrideIter {
    next: usize,
    remaining: usize,
    step: usize,
}

impl Iterator for StrideIter {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        if self.remaining == 0 {
            return None;
        }
        let i = self.next;
        self.next += self.step;
        self.remaining -= 1;
        Some(i)
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Compares backward gradients against central finite differences.
///
/// `build` constructs a scalar root from parameter nodes; it is called once
/// for the analytic gradients and twice per parameter coordinate for the
/// `(f(x+h) - f(x-h)) / 2h` estimates. Returns the maximum over coordinates
/// of `|fd - grad| / max(1, |fd|, |grad|)`.
pub fn finite_diff_check<F>(build: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.parameter(t.clone())).collect();
        let root = build(&mut g, &ids)?;
        if !g.value(root).is_scalar() {
            return Err(Error::Argument("finite_diff_check root must be scalar".into()));
        }
        Ok(g.value(root).item())
    };

    // analytic gradients
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|t| g.parameter(t.clone())).collect();
    let root = build(&mut g, &ids)?;
    if !g.value(root).is_scalar() {
        return Err(Error::Argument("finite_diff_check root must be scalar".into()));
    }
    let grads = g.backward(root)?;

    let mut worst: f64 = 0.0;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, id) in ids.iter().enumerate() {
        let grad = grads.get(*id).expect("registered parameter");
        for ci in 0..params[pi].len() {
            let orig = work[pi].data[ci];
            work[pi].data[ci] = orig + h;
            let up = eval(&work)?;
            work[pi].data[ci] = orig - h;
            let down = eval(&work)?;
            work[pi].data[ci] = orig;
            let fd = (up - down) / (2.0 * h);
            let an = grad.data()[ci];
            let err = (fd - an).abs() / 1.0_f64.max(fd.abs()).max(an.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
