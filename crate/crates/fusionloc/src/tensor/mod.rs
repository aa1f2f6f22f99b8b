//! A small tape-based reverse-mode autodiff engine over `ndarray`.
//!
//! Forward passes build a graph of [`Var`] nodes inside a [`Graph`]; calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! accumulates gradients for every node. The engine is generic over the
//! scalar type so the training pipeline can run in `f32` while gradient
//! checks run the identical code in `f64`.

use std::cell::RefCell;
use std::fmt;

use ndarray::{ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

mod conv;
mod norm;
mod ops;

pub use conv::{conv2d_output_hw, Conv2dSpec};
pub use norm::batch_moments;

/// Scalar type the engine operates on. Implemented for `f32` and `f64`.
pub trait Scalar:
    LinalgScalar
    + Float
    + FromPrimitive
    + ScalarOperand
    + std::ops::AddAssign
    + std::ops::SubAssign
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
{
    fn of_f64(x: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    fn of_f64(x: f64) -> Self {
        x as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn of_f64(x: f64) -> Self {
        x
    }
    fn into_f64(self) -> f64 {
        self
    }
}

/// Handle to a node in a [`Graph`]. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Numeric failures surfaced by graph operations.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Shapes incompatible for the requested operation.
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    /// A forward value became NaN or infinite.
    NonFinite { op: &'static str },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::ShapeMismatch { op, lhs, rhs } => {
                write!(f, "{op}: incompatible shapes {lhs:?} and {rhs:?}")
            }
            TensorError::NonFinite { op } => write!(f, "{op}: non-finite value"),
        }
    }
}

impl std::error::Error for TensorError {}

/// Backward rule of one node: given the output gradient, the parent values
/// and the node's own value, produce one gradient per parent.
type BackwardFn<T> = Box<dyn Fn(&ArrayD<T>, &[&ArrayD<T>], &ArrayD<T>) -> Vec<ArrayD<T>>>;

struct NodeMeta<T> {
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
}

/// The autodiff tape. Nodes are appended during the forward pass and never
/// mutated afterwards, so `Var` handles stay valid for the graph's lifetime.
pub struct Graph<T: Scalar> {
    values: RefCell<Vec<ArrayD<T>>>,
    metas: RefCell<Vec<NodeMeta<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { values: RefCell::new(Vec::new()), metas: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.values.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Insert a leaf node (input data or parameter).
    pub fn leaf(&self, value: ArrayD<T>) -> Var {
        self.push(value, Vec::new(), None)
    }

    /// Leaf from any dimensionality array.
    pub fn leaf_from<D: ndarray::Dimension>(&self, value: ndarray::Array<T, D>) -> Var {
        self.leaf(value.into_dyn())
    }

    /// Leaf holding a single scalar.
    pub fn scalar(&self, value: T) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub(crate) fn push(
        &self,
        value: ArrayD<T>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
    ) -> Var {
        let mut values = self.values.borrow_mut();
        let mut metas = self.metas.borrow_mut();
        values.push(value);
        metas.push(NodeMeta { parents, backward });
        Var(values.len() - 1)
    }

    /// Clone of a node's current value.
    pub fn value(&self, v: Var) -> ArrayD<T> {
        self.values.borrow()[v.0].clone()
    }

    /// Shape of a node's value.
    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.values.borrow()[v.0].shape().to_vec()
    }

    /// Scalar value of a 0-d (or single-element) node.
    pub fn scalar_value(&self, v: Var) -> T {
        let values = self.values.borrow();
        let arr = &values[v.0];
        debug_assert_eq!(arr.len(), 1, "scalar_value on non-scalar node");
        *arr.iter().next().expect("non-empty")
    }

    pub(crate) fn with_value<R>(&self, v: Var, f: impl FnOnce(&ArrayD<T>) -> R) -> R {
        f(&self.values.borrow()[v.0])
    }

    /// Reverse-mode sweep from a scalar output. Returns per-node gradients.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        let values = self.values.borrow();
        let metas = self.metas.borrow();
        assert_eq!(values[output.0].len(), 1, "backward requires a scalar output node");

        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; values.len()];
        grads[output.0] = Some(ArrayD::from_elem(values[output.0].raw_dim(), T::one()));

        for i in (0..=output.0).rev() {
            let Some(grad_out) = grads[i].clone() else { continue };
            let meta = &metas[i];
            let Some(backward) = &meta.backward else { continue };
            let parent_vals: Vec<&ArrayD<T>> = meta.parents.iter().map(|&p| &values[p]).collect();
            let parent_grads = backward(&grad_out, &parent_vals, &values[i]);
            debug_assert_eq!(parent_grads.len(), meta.parents.len());
            for (&p, g) in meta.parents.iter().zip(parent_grads) {
                match &mut grads[p] {
                    Some(acc) => *acc += &g,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Gradients { grads }
    }
}

/// Result of a backward sweep: gradient of the output w.r.t. every node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` if the output does not depend on it.
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for `v`, defaulting to zeros of the given shape.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> ArrayD<T> {
        match self.grads[v.0].as_ref() {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}


#[cfg(test)]
mod tests {
    use super::testutil::{finite_difference, max_rel_err};
    use super::*;
    use ndarray::{arr1, arr2};

    #[test]
    fn add_mul_backward() {
        let g: Graph<f64> = Graph::new();
        let a = g.leaf_from(arr1(&[1.0, 2.0, 3.0]));
        let b = g.leaf_from(arr1(&[4.0, 5.0, 6.0]));
        let c = g.mul(a, b);
        let s = g.sum_all(c);
        assert_eq!(g.scalar_value(s), 32.0);
        let grads = g.backward(s);
        assert_eq!(grads.get(a).unwrap().as_slice().unwrap(), &[4.0, 5.0, 6.0]);
        assert_eq!(grads.get(b).unwrap().as_slice().unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn matmul_matches_finite_differences() {
        let a0 = arr2(&[[0.3, -0.7], [1.1, 0.4], [-0.2, 0.9]]).into_dyn();
        let b0 = arr2(&[[0.5, -0.1, 0.8], [0.2, 0.6, -0.4]]).into_dyn();

        let eval = |a: &ArrayD<f64>, b: &ArrayD<f64>| -> f64 {
            let g: Graph<f64> = Graph::new();
            let va = g.leaf(a.clone());
            let vb = g.leaf(b.clone());
            let m = g.matmul(va, vb);
            let sq = g.mul(m, m);
            g.scalar_value(g.sum_all(sq))
        };

        let g: Graph<f64> = Graph::new();
        let va = g.leaf(a0.clone());
        let vb = g.leaf(b0.clone());
        let m = g.matmul(va, vb);
        let sq = g.mul(m, m);
        let loss = g.sum_all(sq);
        let grads = g.backward(loss);

        let fd_a = finite_difference(&a0, 1e-6, |a| eval(a, &b0));
        let fd_b = finite_difference(&b0, 1e-6, |b| eval(&a0, b));
        assert!(max_rel_err(grads.get(va).unwrap(), &fd_a) < 1e-7);
        assert!(max_rel_err(grads.get(vb).unwrap(), &fd_b) < 1e-7);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_backward_checks() {
        let x0 = arr2(&[[0.1, -2.0, 3.0], [0.0, 0.0, 0.0]]).into_dyn();
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(x0.clone());
        let y = g.softmax_last(x);
        let yv = g.value(y);
        for row in yv.rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-12);
        }

        // weighted sum so the gradient is non-trivial
        let w0 = arr2(&[[0.3, -0.5, 0.9], [1.0, 0.2, -0.7]]).into_dyn();
        let eval = |x: &ArrayD<f64>| -> f64 {
            let g: Graph<f64> = Graph::new();
            let vx = g.leaf(x.clone());
            let y = g.softmax_last(vx);
            let w = g.leaf(w0.clone());
            let p = g.mul(y, w);
            g.scalar_value(g.sum_all(p))
        };
        let g2: Graph<f64> = Graph::new();
        let vx = g2.leaf(x0.clone());
        let y2 = g2.softmax_last(vx);
        let w = g2.leaf(w0.clone());
        let p = g2.mul(y2, w);
        let loss = g2.sum_all(p);
        let grads = g2.backward(loss);
        let fd = finite_difference(&x0, 1e-6, eval);
        assert!(max_rel_err(grads.get(vx).unwrap(), &fd) < 1e-6);
    }

    #[test]
    fn gather_and_max_axis_route_gradients() {
        let x0 = arr2(&[[1.0, 5.0], [2.0, 2.0], [9.0, -1.0]]).into_dyn();
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(x0.clone());
        let picked = g.gather_rows(x, vec![2, 0, 2]);
        assert_eq!(g.shape(picked), vec![3, 2]);
        let m = g.max_axis(picked, 0);
        assert_eq!(g.value(m).as_slice().unwrap(), &[9.0, 5.0]);
        let s = g.sum_all(m);
        let grads = g.backward(s);
        // row 2 contributes twice via gather but max picks it once per column;
        // first-index tie-breaking sends col 0 grad to the first occurrence.
        let gx = grads.get(x).unwrap();
        assert_eq!(gx[[2, 0]], 1.0);
        assert_eq!(gx[[0, 1]], 1.0);
        assert_eq!(gx[[1, 0]], 0.0);
    }

    #[test]
    fn max_axis_breaks_ties_by_first_index() {
        let x0 = arr2(&[[3.0, 1.0], [3.0, 2.0]]).into_dyn();
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(x0);
        let m = g.max_axis(x, 0);
        let s = g.sum_all(m);
        let grads = g.backward(s);
        let gx = grads.get(x).unwrap();
        assert_eq!(gx[[0, 0]], 1.0, "tie must route to the first row");
        assert_eq!(gx[[1, 0]], 0.0);
    }
}
