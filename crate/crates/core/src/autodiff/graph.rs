//! Tape-based reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every operation whose inputs include an attached
//! tensor. Tensors built from plain values (or produced by [`Tensor::detach`])
//! carry no node and never receive gradient; operations over detached inputs
//! only compute values.
//!
//! Graphs are single-use: [`Graph::backward`] marks the tape consumed, and a
//! second call fails with [`Error::GraphConsumed`]. Re-run the forward pass
//! on a fresh graph for every gradient.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use ndarray::{ArrayD, Axis, Ix1, Ix2, IxDyn};

use super::counters;
use super::params::{GradVector, ParamTensors, Segment};
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Clone)]
struct Operand {
    id: Option<NodeId>,
    value: Rc<ArrayD<f64>>,
}

enum Op {
    Leaf,
    MatMul(Operand, Operand),
    AddBias(Operand, Operand),
    Add(Operand, Operand),
    Sub(Operand, Operand),
    Mul(Operand, Operand),
    Scale(Operand, f64),
    Relu(Operand),
    Tanh(Operand),
    Softmax { input: Operand, temperature: f64 },
    Log { input: Operand, floor: f64 },
    SumRows(Operand),
    MeanRows(Operand),
    Gather { input: Operand, index: Vec<usize> },
    Mean(Operand),
    Sum(Operand),
}

struct Node {
    value: Rc<ArrayD<f64>>,
    op: Op,
}

/// Recording tape for one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// A dense array, optionally attached to a node of a [`Graph`].
#[derive(Clone)]
pub struct Tensor<'g> {
    value: Rc<ArrayD<f64>>,
    node: Option<(&'g Graph, NodeId)>,
}

impl std::fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("attached", &self.is_attached())
            .field("values", &self.value)
            .finish()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }

    /// Registers `value` as a differentiable leaf.
    pub fn leaf(&self, value: ArrayD<f64>) -> Tensor<'_> {
        let value = Rc::new(value);
        let id = self.push(Node {
            value: Rc::clone(&value),
            op: Op::Leaf,
        });
        Tensor {
            value,
            node: Some((self, id)),
        }
    }

    fn push(&self, node: Node) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Reverse sweep from the scalar `loss` to every segment of `wrt`.
    ///
    /// Fails if `loss` holds more than one value, if the tape was already
    /// consumed, or if any segment of `wrt` has no path to `loss`.
    pub fn backward(&self, loss: &Tensor<'_>, wrt: &ParamTensors<'_>) -> Result<GradVector> {
        if self.consumed.get() {
            return Err(Error::GraphConsumed);
        }
        if loss.value.len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let first_name = || {
            wrt.names()
                .first()
                .cloned()
                .unwrap_or_else(|| "<empty>".to_string())
        };
        let loss_id = match loss.node {
            Some((g, id)) if std::ptr::eq(g, self) => id,
            _ => return Err(Error::Disconnected(first_name())),
        };
        self.consumed.set(true);
        counters::record_backward(wrt.tag());

        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; nodes.len()];
        grads[loss_id] = Some(ArrayD::from_elem(nodes[loss_id].value.raw_dim(), 1.0));

        for id in (0..=loss_id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&node.op, &node.value, g, &mut grads);
        }

        let mut segments = Vec::with_capacity(wrt.len());
        for (name, tensor) in wrt.names().iter().zip(wrt.tensors()) {
            let id = match tensor.node {
                Some((g, id)) if std::ptr::eq(g, self) => id,
                _ => return Err(Error::Disconnected(name.clone())),
            };
            match grads[id].take() {
                Some(value) => segments.push(Segment {
                    name: name.clone(),
                    value,
                }),
                None => return Err(Error::Disconnected(name.clone())),
            }
        }
        Ok(GradVector::from_segments(segments))
    }
}

fn accumulate(grads: &mut [Option<ArrayD<f64>>], operand: &Operand, g: ArrayD<f64>) {
    let Some(id) = operand.id else { return };
    match &mut grads[id] {
        Some(acc) => zip_inplace(acc, &g, |a, b| *a += b),
        slot @ None => *slot = Some(g),
    }
}

// Element-wise helpers. Iterating an `IxDyn` array element by element is
// slow, so contiguous inputs go through flat slices.

fn map(a: &ArrayD<f64>, f: impl Fn(f64) -> f64) -> ArrayD<f64> {
    match a.as_slice() {
        Some(s) => ArrayD::from_shape_vec(a.raw_dim(), s.iter().map(|&v| f(v)).collect()).expect("same shape"),
        None => a.mapv(f),
    }
}

fn map_inplace(a: &mut ArrayD<f64>, f: impl Fn(f64) -> f64) {
    match a.as_slice_mut() {
        Some(s) => s.iter_mut().for_each(|v| *v = f(*v)),
        None => a.mapv_inplace(f),
    }
}

/// `None` unless both arrays are contiguous with equal shapes.
fn zip_map(a: &ArrayD<f64>, b: &ArrayD<f64>, f: impl Fn(f64, f64) -> f64) -> Option<ArrayD<f64>> {
    if a.shape() != b.shape() {
        return None;
    }
    let (x, y) = (a.as_slice()?, b.as_slice()?);
    let v = x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect();
    Some(ArrayD::from_shape_vec(a.raw_dim(), v).expect("same shape"))
}

fn zip_inplace(a: &mut ArrayD<f64>, b: &ArrayD<f64>, f: impl Fn(&mut f64, f64)) {
    if a.shape() == b.shape() {
        if let (Some(x), Some(y)) = (a.as_slice_mut(), b.as_slice()) {
            x.iter_mut().zip(y).for_each(|(p, &q)| f(p, q));
            return;
        }
    }
    a.zip_mut_with(b, |p, &q| f(p, q));
}

fn as2(a: &ArrayD<f64>) -> ndarray::ArrayView2<'_, f64> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("operand must be rank 2")
}

fn propagate(op: &Op, out: &ArrayD<f64>, g: ArrayD<f64>, grads: &mut [Option<ArrayD<f64>>]) {
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let g2 = as2(&g);
            if a.id.is_some() {
                accumulate(grads, a, g2.dot(&as2(&b.value).t()).into_dyn());
            }
            if b.id.is_some() {
                accumulate(grads, b, as2(&a.value).t().dot(&g2).into_dyn());
            }
        }
        Op::AddBias(x, b) => {
            if b.id.is_some() {
                accumulate(grads, b, as2(&g).sum_axis(Axis(0)).into_dyn());
            }
            accumulate(grads, x, g);
        }
        Op::Add(a, b) => {
            if b.id.is_some() {
                accumulate(grads, b, g.clone());
            }
            accumulate(grads, a, g);
        }
        Op::Sub(a, b) => {
            if b.id.is_some() {
                accumulate(grads, b, map(&g, |v| -v));
            }
            accumulate(grads, a, g);
        }
        Op::Mul(a, b) => {
            if a.id.is_some() {
                let ga = zip_map(&g, &b.value, |p, q| p * q).unwrap_or_else(|| &g * &*b.value);
                accumulate(grads, a, ga);
            }
            if b.id.is_some() {
                let gb = zip_map(&g, &a.value, |p, q| p * q).unwrap_or_else(|| &g * &*a.value);
                accumulate(grads, b, gb);
            }
        }
        Op::Scale(a, c) => {
            let mut ga = g;
            map_inplace(&mut ga, |v| v * c);
            accumulate(grads, a, ga);
        }
        Op::Relu(x) => {
            let mut gx = g;
            zip_inplace(&mut gx, &x.value, |gi, xi| {
                if xi <= 0.0 {
                    *gi = 0.0
                }
            });
            accumulate(grads, x, gx);
        }
        Op::Tanh(x) => {
            let mut gx = g;
            zip_inplace(&mut gx, out, |gi, yi| *gi *= 1.0 - yi * yi);
            accumulate(grads, x, gx);
        }
        Op::Softmax { input, temperature } => {
            let y = as2(out);
            let g2 = as2(&g);
            let mut gx = ndarray::Array2::<f64>::zeros(y.raw_dim());
            for ((gx_row, y_row), g_row) in gx
                .rows_mut()
                .into_iter()
                .zip(y.rows())
                .zip(g2.rows())
            {
                let s: f64 = y_row.iter().zip(g_row.iter()).map(|(a, b)| a * b).sum();
                for ((o, &yi), &gi) in gx_row.into_iter().zip(y_row.iter()).zip(g_row.iter()) {
                    *o = yi * (gi - s) / temperature;
                }
            }
            accumulate(grads, input, gx.into_dyn());
        }
        Op::Log { input, floor } => {
            let mut gx = g;
            zip_inplace(&mut gx, &input.value, |gi, xi| {
                *gi = if xi > *floor { *gi / xi } else { 0.0 };
            });
            accumulate(grads, input, gx);
        }
        Op::SumRows(x) | Op::MeanRows(x) => {
            let cols = x.value.shape()[1];
            let scale = if matches!(op, Op::MeanRows(_)) {
                1.0 / cols as f64
            } else {
                1.0
            };
            let g1 = g.into_dimensionality::<Ix1>().expect("row reduction grad is rank 1");
            let gx = g1
                .insert_axis(Axis(1))
                .broadcast((x.value.shape()[0], cols))
                .expect("broadcast row grad")
                .mapv(|v| v * scale);
            accumulate(grads, x, gx.into_dyn());
        }
        Op::Gather { input, index } => {
            let mut gx = ArrayD::<f64>::zeros(input.value.raw_dim());
            for (row, (&col, &gi)) in index.iter().zip(g.iter()).enumerate() {
                gx[[row, col]] += gi;
            }
            accumulate(grads, input, gx);
        }
        Op::Mean(x) => {
            let n = x.value.len().max(1) as f64;
            let gi = g.iter().next().copied().unwrap_or(0.0) / n;
            accumulate(grads, x, ArrayD::from_elem(x.value.raw_dim(), gi));
        }
        Op::Sum(x) => {
            let gi = g.iter().next().copied().unwrap_or(0.0);
            accumulate(grads, x, ArrayD::from_elem(x.value.raw_dim(), gi));
        }
    }
}

impl<'g> Tensor<'g> {
    /// A detached tensor; never receives gradient.
    pub fn constant(value: ArrayD<f64>) -> Self {
        Tensor {
            value: Rc::new(value),
            node: None,
        }
    }

    pub fn from_shape_vec(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        ArrayD::from_shape_vec(IxDyn(shape), values)
            .map(Self::constant)
            .map_err(|e| Error::Shape(e.to_string()))
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn values(&self) -> &ArrayD<f64> {
        &self.value
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.value.iter().copied().collect()
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.value.len(), 1, "item() on non-scalar tensor");
        self.value.iter().next().copied().unwrap()
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Tensor<'g> {
        Tensor {
            value: Rc::clone(&self.value),
            node: None,
        }
    }

    fn operand(&self) -> Operand {
        Operand {
            id: self.node.map(|(_, id)| id),
            value: Rc::clone(&self.value),
        }
    }

    fn graph_of(&self, other: Option<&Tensor<'g>>) -> Option<&'g Graph> {
        let a = self.node.map(|(g, _)| g);
        let b = other.and_then(|t| t.node.map(|(g, _)| g));
        match (a, b) {
            (Some(x), Some(y)) => {
                assert!(std::ptr::eq(x, y), "tensors belong to different graphs");
                Some(x)
            }
            (x, y) => x.or(y),
        }
    }

    fn record(graph: Option<&'g Graph>, value: ArrayD<f64>, op: impl FnOnce() -> Op) -> Tensor<'g> {
        let value = Rc::new(value);
        match graph {
            None => Tensor { value, node: None },
            Some(g) => {
                let id = g.push(Node {
                    value: Rc::clone(&value),
                    op: op(),
                });
                Tensor {
                    value,
                    node: Some((g, id)),
                }
            }
        }
    }

    /// `[B, n] x [n, m] -> [B, m]`.
    pub fn matmul(&self, rhs: &Tensor<'g>) -> Tensor<'g> {
        let value = as2(&self.value).dot(&as2(&rhs.value)).into_dyn();
        Self::record(self.graph_of(Some(rhs)), value, || {
            Op::MatMul(self.operand(), rhs.operand())
        })
    }

    /// Adds a `[m]` bias to every row of a `[B, m]` tensor.
    pub fn add_bias(&self, bias: &Tensor<'g>) -> Tensor<'g> {
        let b = bias
            .value
            .view()
            .into_dimensionality::<Ix1>()
            .expect("bias must be rank 1");
        let value = (&as2(&self.value) + &b).into_dyn();
        Self::record(self.graph_of(Some(bias)), value, || {
            Op::AddBias(self.operand(), bias.operand())
        })
    }

    pub fn add(&self, rhs: &Tensor<'g>) -> Tensor<'g> {
        let value = zip_map(&self.value, &rhs.value, |a, b| a + b).unwrap_or_else(|| &*self.value + &*rhs.value);
        Self::record(self.graph_of(Some(rhs)), value, || {
            Op::Add(self.operand(), rhs.operand())
        })
    }

    pub fn sub(&self, rhs: &Tensor<'g>) -> Tensor<'g> {
        let value = zip_map(&self.value, &rhs.value, |a, b| a - b).unwrap_or_else(|| &*self.value - &*rhs.value);
        Self::record(self.graph_of(Some(rhs)), value, || {
            Op::Sub(self.operand(), rhs.operand())
        })
    }

    /// Element-wise product of equally shaped tensors.
    pub fn mul(&self, rhs: &Tensor<'g>) -> Tensor<'g> {
        assert_eq!(self.shape(), rhs.shape(), "mul needs equal shapes");
        let value = zip_map(&self.value, &rhs.value, |a, b| a * b).unwrap_or_else(|| &*self.value * &*rhs.value);
        Self::record(self.graph_of(Some(rhs)), value, || {
            Op::Mul(self.operand(), rhs.operand())
        })
    }

    pub fn scale(&self, c: f64) -> Tensor<'g> {
        let value = map(&self.value, |v| v * c);
        Self::record(self.graph_of(None), value, || Op::Scale(self.operand(), c))
    }

    pub fn relu(&self) -> Tensor<'g> {
        let value = map(&self.value, |x| x.max(0.0));
        Self::record(self.graph_of(None), value, || Op::Relu(self.operand()))
    }

    pub fn tanh(&self) -> Tensor<'g> {
        let value = map(&self.value, f64::tanh);
        Self::record(self.graph_of(None), value, || Op::Tanh(self.operand()))
    }

    /// Row-wise `softmax(x / temperature)` over a `[B, C]` tensor.
    pub fn softmax_rows(&self, temperature: f64) -> Tensor<'g> {
        let x = as2(&self.value);
        let mut y = x.mapv(|v| v / temperature);
        for mut row in y.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let z: f64 = row.sum();
            row.mapv_inplace(|v| v / z);
        }
        Self::record(self.graph_of(None), y.into_dyn(), || Op::Softmax {
            input: self.operand(),
            temperature,
        })
    }

    /// `ln(max(x, floor))`; gradient is zero where the floor is active.
    pub fn log_floor(&self, floor: f64) -> Tensor<'g> {
        let value = map(&self.value, |x| x.max(floor).ln());
        Self::record(self.graph_of(None), value, || Op::Log {
            input: self.operand(),
            floor,
        })
    }

    /// `[B, C] -> [B]` sum over each row.
    pub fn sum_rows(&self) -> Tensor<'g> {
        let value = as2(&self.value).sum_axis(Axis(1)).into_dyn();
        Self::record(self.graph_of(None), value, || Op::SumRows(self.operand()))
    }

    /// `[B, C] -> [B]` mean over each row.
    pub fn mean_rows(&self) -> Tensor<'g> {
        let cols = self.shape()[1].max(1) as f64;
        let value = (as2(&self.value).sum_axis(Axis(1)) / cols).into_dyn();
        Self::record(self.graph_of(None), value, || Op::MeanRows(self.operand()))
    }

    /// `[B, C] -> [B]` picking column `index[i]` from row `i`.
    pub fn gather_rows(&self, index: &[usize]) -> Tensor<'g> {
        let x = as2(&self.value);
        assert_eq!(x.nrows(), index.len(), "gather index length");
        let value = ndarray::Array1::from_iter(index.iter().enumerate().map(|(r, &c)| x[[r, c]]))
            .into_dyn();
        Self::record(self.graph_of(None), value, || Op::Gather {
            input: self.operand(),
            index: index.to_vec(),
        })
    }

    /// Mean of all elements as a rank-0 tensor. An empty tensor has mean 0.
    pub fn mean(&self) -> Tensor<'g> {
        let n = self.value.len();
        let m = if n == 0 { 0.0 } else { self.value.sum() / n as f64 };
        Self::record(self.graph_of(None), ArrayD::from_elem(IxDyn(&[]), m), || {
            Op::Mean(self.operand())
        })
    }

    pub fn sum(&self) -> Tensor<'g> {
        let s = self.value.sum();
        Self::record(self.graph_of(None), ArrayD::from_elem(IxDyn(&[]), s), || {
            Op::Sum(self.operand())
        })
    }
}
