//! Reverse-mode automatic differentiation over dense N-D tensors.
//!
//! A [`Tensor`] is an immutable value buffer plus an optional node in a
//! differentiation graph. Operations on tensors that require gradients
//! record a node holding their parents and a backward closure; calling
//! [`Tensor::backward`] on a scalar result walks the graph in reverse
//! topological order and accumulates gradients into every reachable leaf
//! that requires them.
//!
//! The engine only carries the operations the segmentation network uses:
//! 3D convolution and transposed convolution, instance normalization,
//! ReLU/sigmoid, residual addition, channel concatenation, and the
//! segmentation losses.

mod checkpoint;
mod conv;
pub(crate) mod gemm;
mod ops;
mod optim;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use conv::{conv3d, conv_output_dim, conv_transpose3d, conv_transpose_output_dim};
pub use ops::{
    add, bce_loss, concat_channels, instance_norm, mean, mul_scalar, relu, sigmoid, soft_dice_loss,
    sum,
};
pub use optim::{Adam, AdamConfig};

/// Scalar type stored in tensors.
#[cfg(not(feature = "single-precision"))]
pub type Real = f64;
#[cfg(feature = "single-precision")]
pub type Real = f32;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) type BackwardFn =
    Box<dyn Fn(&BackwardCtx<'_>) -> Vec<Option<Vec<Real>>> + Send + Sync + 'static>;

pub(crate) struct BackwardCtx<'a> {
    pub grad: &'a [Real],
    pub output: &'a [Real],
    pub parents: &'a [Tensor],
}

impl BackwardCtx<'_> {
    pub fn needs(&self, i: usize) -> bool {
        self.parents[i].requires_grad()
    }
}

struct Node {
    op: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<Real>,
    grad: Mutex<Option<Vec<Real>>>,
    requires_grad: bool,
    node: Option<Node>,
}

/// Dense row-major tensor. Cloning is cheap (shared buffer).
#[derive(Clone)]
pub struct Tensor(Arc<TensorInner>);

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::shape(format!(
            "extents must be positive, got {shape:?}"
        )));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::shape(format!(
            "shape {shape:?} holds {n} values but {len} were supplied"
        )));
    }
    Ok(())
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<Real>, requires_grad: bool, node: Option<Node>) -> Self {
        Tensor(Arc::new(TensorInner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            grad: Mutex::new(None),
            requires_grad,
            node,
        }))
    }

    /// Untracked constant tensor.
    pub fn from_vec(shape: &[usize], data: Vec<Real>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::build(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor that accumulates gradients during [`Tensor::backward`].
    pub fn parameter(shape: &[usize], data: Vec<Real>) -> Result<Self> {
        check_shape(shape, data.len())?;
        Ok(Self::build(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], value: Real) -> Result<Self> {
        Self::from_vec(shape, vec![value; shape.iter().product()])
    }

    pub fn scalar(value: Real) -> Self {
        Self::build(vec![1], vec![value], false, None)
    }

    /// Result of a differentiable operation. A node is recorded only when at
    /// least one parent requires gradients.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<Real>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if parents.iter().any(Tensor::requires_grad) {
            let node = Node {
                op,
                parents,
                backward,
            };
            Self::build(shape, data, true, Some(node))
        } else {
            Self::build(shape, data, false, None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn values(&self) -> &[Real] {
        &self.0.data
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Whether this tensor was produced by a tracked operation.
    pub fn has_node(&self) -> bool {
        self.0.node.is_some()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op)
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<Real>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Untracked copy sharing no graph history.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// A leaf with the same shape and new values, carrying over the current
    /// gradient buffer. Used by optimizers to publish updated parameters.
    pub(crate) fn with_values(&self, data: Vec<Real>) -> Tensor {
        debug_assert_eq!(data.len(), self.numel());
        let t = Self::build(self.0.shape.clone(), data, self.0.requires_grad, None);
        *t.0.grad.lock().expect("grad lock poisoned") = self.grad();
        t
    }

    /// Same values viewed under a different shape (untracked when `self` is).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        check_shape(shape, self.numel())?;
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.0.data.clone(),
            vec![self.clone()],
            Box::new(|ctx| vec![Some(ctx.grad.to_vec())]),
        ))
    }

    fn accumulate_leaf_grad(&self, g: &[Real]) {
        let mut slot = self.0.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += *b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Back-propagates from this scalar through the recorded graph.
    ///
    /// Gradients accumulate into leaf tensors across calls until
    /// [`Tensor::zero_grad`] is called on them.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        self.backward_with(vec![1.0])
    }

    /// Vector-Jacobian product: back-propagates `seed` as the gradient of
    /// this tensor's values.
    pub fn backward_with(&self, seed: Vec<Real>) -> Result<()> {
        if seed.len() != self.numel() {
            return Err(Error::Graph(format!(
                "seed gradient has {} entries for a tensor of {}",
                seed.len(),
                self.numel()
            )));
        }
        if !self.requires_grad() {
            return Err(Error::Graph(
                "backward called on an untracked tensor".into(),
            ));
        }
        if self.0.node.is_none() {
            self.accumulate_leaf_grad(&seed);
            return Ok(());
        }

        let order = self.topological_order();
        let mut pending: HashMap<u64, Vec<Real>> = HashMap::new();
        pending.insert(self.0.id, seed);

        for t in order.iter().rev() {
            let Some(grad) = pending.remove(&t.0.id) else {
                continue;
            };
            let node =
                t.0.node
                    .as_ref()
                    .expect("topological order holds nodes only");
            let ctx = BackwardCtx {
                grad: &grad,
                output: &t.0.data,
                parents: &node.parents,
            };
            let parent_grads = (node.backward)(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !parent.requires_grad() {
                    continue;
                }
                debug_assert_eq!(g.len(), parent.numel(), "op {}", node.op);
                if parent.0.node.is_some() {
                    match pending.get_mut(&parent.0.id) {
                        Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
                        None => {
                            pending.insert(parent.0.id, g);
                        }
                    }
                } else {
                    parent.accumulate_leaf_grad(&g);
                }
            }
        }
        Ok(())
    }

    /// Post-order over tracked (non-leaf) tensors reachable from `self`.
    fn topological_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.0.id);
        while let Some((t, next)) = stack.pop() {
            let node = t.0.node.as_ref().expect("only tracked tensors are pushed");
            if next < node.parents.len() {
                let parent = node.parents[next].clone();
                stack.push((t, next + 1));
                if parent.0.node.is_some() && visited.insert(parent.0.id) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(t);
            }
        }
        order
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.op_name())
            .finish()
    }
}

/// Named trainable tensor owned by a network.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, shape: &[usize], data: Vec<Real>) -> Result<Self> {
        Ok(Parameter {
            name: name.into(),
            tensor: Tensor::parameter(shape, data)?,
            trainable: true,
        })
    }

    pub fn zero_grad(&self) {
        self.tensor.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_value_count() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::from_vec(&[2, 3], vec![0.0; 5]),
            Err(Error::Shape(_))
        ));
        assert!(Tensor::from_vec(&[0], vec![]).is_err());
    }

    #[test]
    fn constants_have_no_node() {
        let t = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(!t.has_node());
        let u = relu(&t);
        assert!(!u.has_node());
        assert!(!u.requires_grad());
    }

    #[test]
    fn backward_on_sum_gives_ones() {
        let x = Tensor::parameter(&[2, 2, 2], (0..8).map(|i| i as Real).collect()).unwrap();
        sum(&x).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 8]);
    }

    #[test]
    fn backward_through_relu() {
        let x = Tensor::parameter(&[2], vec![-1.0, 2.0]).unwrap();
        sum(&relu(&x)).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let x = Tensor::parameter(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        sum(&x).backward().unwrap();
        sum(&x).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0; 3]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_and_untracked() {
        let x = Tensor::parameter(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(relu(&x).backward(), Err(Error::Graph(_))));
        let c = Tensor::scalar(1.0);
        assert!(matches!(c.backward(), Err(Error::Graph(_))));
    }

    #[test]
    fn shared_subexpression_gets_summed_gradient() {
        // loss = sum(x + x) -> d/dx = 2
        let x = Tensor::parameter(&[4], vec![0.5; 4]).unwrap();
        let y = add(&x, &x).unwrap();
        sum(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0; 4]);
    }
}
