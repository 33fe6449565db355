//! Dense f64 tensors and a define-by-run reverse-mode tape.
//!
//! A [`Tape`] owns every tensor produced during one forward pass. Callers hold
//! [`Var`] handles (indices into the tape); ops append a node whose inputs
//! were all recorded earlier, so the node list is already in topological
//! order and [`Tape::backward`] is a single reverse sweep.

mod gradcheck;
pub(crate) mod kernels;
mod ops;

pub use gradcheck::{grad_check, GradCheckOptions};

use crate::error::{Error, Result};
use ops::Op;

/// Row-major f64 array.
///
/// `grad` is populated by [`Tape::backward`] for tensors recorded with
/// `requires_grad`; repeated backward passes accumulate into it.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    node_id: Option<usize>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
            node_id: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; numel]).expect("numel matches")
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![], vec![v]).expect("scalar")
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor::new(vec![data.len()], data).expect("vector")
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn node_id(&self) -> Option<usize> {
        self.node_id
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar value; panics when the tensor has more than one element.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// (rows, cols) treating every leading dimension as rows.
    pub(crate) fn rows_cols(&self) -> (usize, usize) {
        match self.shape.last() {
            None => (1, 1),
            Some(&0) => (0, 0),
            Some(&c) => (self.data.len() / c, c),
        }
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, tensor: Tensor, requires_grad: bool) -> Var {
        self.push(tensor, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor, false)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.values[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.values[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.values[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.values[v.0].grad.take()
    }

    pub(crate) fn needs_grad(&self, v: Var) -> bool {
        self.values[v.0].requires_grad
    }

    fn push(&mut self, mut tensor: Tensor, op: Op, requires_grad: bool) -> Var {
        let id = self.values.len();
        tensor.requires_grad = requires_grad;
        tensor.node_id = Some(id);
        tensor.grad = None;
        self.values.push(tensor);
        self.ops.push(op);
        Var(id)
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Var {
        let requires_grad = op.inputs().iter().any(|&v| self.needs_grad(v));
        let tensor = Tensor::new(shape, data).expect("op output shape consistent");
        self.push(tensor, op, requires_grad)
    }

    /// Accumulates d(loss)/d(node) into the `grad` buffer of every
    /// `requires_grad` node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.values.len() {
            return Err(Error::State(format!("var {} is not on this tape", loss.0)));
        }
        let out = &self.values[loss.0];
        if !out.is_scalar() {
            return Err(Error::shape("backward", &out.shape, &[]));
        }
        if !out.requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            self.ops[id].backward(id, &g, &self.values, &mut adj);
            let t = &mut self.values[id];
            if t.requires_grad {
                match &mut t.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => t.grad = Some(g),
                }
            }
        }
        Ok(())
    }
}
