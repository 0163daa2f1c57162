//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its nodes. Nodes are
//! appended in creation order, so the node index is already a topological
//! order: [`Graph::backward`] walks the indices from the root downwards and
//! visits every node that received gradient exactly once.
//!
//! # Broadcasting
//!
//! Binary elementwise operations align shapes on their trailing dimensions.
//! A missing leading dimension or a dimension of size 1 is stretched to the
//! other operand's size; any other mismatch is a contract violation. Nothing
//! else is implicit: reductions, reshapes and concatenations all take
//! explicit shapes.
//!
//! Graphs are meant to live for a single forward/backward pass and are dropped
//! afterwards; parameters live outside the graph (see [`crate::params`]).

mod conv;
mod elementwise;
pub mod gradcheck;
mod linalg;
mod norm;
mod sample;
mod shape;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

pub use gradcheck::{gradient_check, GradCheckReport, InputReport};

/// Floating point precision of a graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Scalar type a graph computes in.
pub trait Real:
    Float + FromPrimitive + NumAssign + Default + Debug + Display + Send + Sync + Sum + 'static
{
    const PRECISION: Precision;

    /// `c = alpha * a * b + beta * c` for an `m x k` by `k x n` product with
    /// arbitrary non-negative row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    fn cast(x: f64) -> Self {
        Self::from_f64(x).expect("f64 is representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("finite float converts")
    }
}

fn span(rows: usize, cols: usize, (rs, cs): (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_real {
    ($t:ty, $prec:expr, $kernel:path) => {
        impl Real for $t {
            const PRECISION: Precision = $prec;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                sa: (usize, usize),
                b: &[Self],
                sb: (usize, usize),
                beta: Self,
                c: &mut [Self],
                sc: (usize, usize),
            ) {
                assert!(span(m, k, sa) <= a.len(), "gemm: lhs out of bounds");
                assert!(span(k, n, sb) <= b.len(), "gemm: rhs out of bounds");
                assert!(span(m, n, sc) <= c.len(), "gemm: output out of bounds");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above bound every index the kernel touches,
                // and `c` is uniquely borrowed.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        sa.0 as isize,
                        sa.1 as isize,
                        b.as_ptr(),
                        sb.0 as isize,
                        sb.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        sc.0 as isize,
                        sc.1 as isize,
                    )
                }
            }
        }
    };
}

impl_real!(f32, Precision::F32, matrixmultiply::sgemm);
impl_real!(f64, Precision::F64, matrixmultiply::dgemm);

/// Dense row-major n-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        ensure!(
            numel == data.len(),
            "tensor",
            "shape {shape:?} holds {numel} values but {} were given",
            data.len()
        );
        ensure!(
            shape.iter().all(|&d| d > 0),
            "tensor",
            "dimensions must be positive, got {shape:?}"
        );
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a tensor whose shape has already been validated by the caller.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: T) -> Self {
        Self::from_parts(vec![1], vec![value])
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::cast(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        ensure!(
            numel == self.data.len(),
            "reshape",
            "cannot view {:?} as {shape:?}",
            self.shape
        );
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&x| U::cast(x.to_f64_lossy())).collect(),
        )
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64_lossy()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

type BackwardFn<T> = Box<dyn Fn(&mut BackwardCtx<'_, T>, &[T])>;

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// View of the graph handed to backward closures.
pub(crate) struct BackwardCtx<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    current: usize,
}

impl<'a, T: Real> BackwardCtx<'a, T> {
    pub(crate) fn value(&self, v: Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Forward value of the node whose gradient is being propagated.
    pub(crate) fn output(&self) -> &'a Tensor<T> {
        &self.nodes[self.current].value
    }

    pub(crate) fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Mutable gradient accumulator of `v`, allocated on first use.
    pub(crate) fn grad(&mut self, v: Var) -> &mut [T] {
        let len = self.nodes[v.0].value.numel();
        self.grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }

    pub(crate) fn accumulate(&mut self, v: Var, g: &[T]) {
        if !self.needs(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    /// Like [`Self::accumulate`] but takes ownership to avoid a copy when
    /// the node has no gradient yet.
    pub(crate) fn accumulate_owned(&mut self, v: Var, g: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }
}

/// A single-use computation graph.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
    training: bool,
    buffer_updates: Vec<(Var, Tensor<T>)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            training: false,
            buffer_updates: Vec::new(),
        }
    }

    /// Graph whose layers run in training mode (batch statistics, dropout).
    pub fn training() -> Self {
        Self {
            training: true,
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives gradients.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    pub fn scalar(&mut self, value: T) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            backward: None,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor<T>,
        inputs: &[Var],
        backward: impl Fn(&mut BackwardCtx<'_, T>, &[T]) + 'static,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            backward: requires_grad.then(|| Box::new(backward) as BackwardFn<T>),
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Records new values for a non-trainable buffer leaf (running statistics).
    pub(crate) fn record_buffer_update(&mut self, leaf: Var, value: Tensor<T>) {
        self.buffer_updates.push((leaf, value));
    }

    pub fn buffer_updates(&self) -> &[(Var, Tensor<T>)] {
        &self.buffer_updates
    }

    /// Accumulates `d root / d leaf` into every gradient-requiring leaf.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        ensure!(
            self.nodes[root.0].value.numel() == 1,
            "backward",
            "root must be a scalar, got shape {:?}",
            self.shape(root)
        );
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![T::one()]);
        {
            let mut ctx = BackwardCtx {
                nodes: &self.nodes[..=root.0],
                grads: &mut grads,
                current: 0,
            };
            for id in (0..=root.0).rev() {
                let node = &ctx.nodes[id];
                let Some(backward) = &node.backward else {
                    continue;
                };
                let Some(g) = ctx.grads[id].take() else {
                    continue;
                };
                ctx.current = id;
                backward(&mut ctx, &g);
            }
        }
        for (id, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            if self.nodes[id].backward.is_some() || !self.nodes[id].requires_grad {
                continue;
            }
            match &mut self.leaf_grads[id] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}
