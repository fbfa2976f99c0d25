//! Dense row-major tensors with tape-free reverse-mode automatic differentiation.
//!
//! Every op that sees at least one input with `requires_grad` records a graph
//! node holding its inputs and a backward closure. Leaves that require grad
//! accumulate into their gradient slot; intermediate gradients live only for
//! the duration of a `backward` call.
//!
//! Values are always stored as `f64`. The precision used by the matrix
//! multiplication kernels is selected per thread (see [`gemm`]).

pub mod conv;
pub mod gemm;
mod ops;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, RwLockReadGuard};

use crate::error::{shape_err, Error, Result};

pub use conv::{conv2d, depthwise_conv2d, per_pixel_filter};
pub use ops::concat;
pub use gemm::{precision, with_precision, Precision};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Computes the gradient of each input from the gradient of the output.
///
/// Receives the op inputs, the output tensor and the upstream gradient.
/// Returns one entry per input; `None` for inputs that need no gradient.
pub(crate) type BackwardFn =
    Box<dyn Fn(&[Tensor], &Tensor, &[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct Node {
    op: &'static str,
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<f64>>,
    grad: Mutex<Option<Vec<f64>>>,
    requires_grad: bool,
    node: Option<Node>,
}

/// A dense N-dimensional array of `f64` values, optionally tracked by autodiff.
///
/// Cloning is cheap and shares storage; ops never mutate their inputs.
#[derive(Clone)]
pub struct Tensor(Arc<Inner>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.node.as_ref().map(|n| n.op))
            .finish()
    }
}

impl Tensor {
    fn make(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool, node: Option<Node>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Arc::new(Inner {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RwLock::new(data),
            grad: Mutex::new(None),
            requires_grad,
            node,
        }))
    }

    /// Constant tensor (no gradient tracking).
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor::make(shape.to_vec(), data, false, None))
    }

    /// Leaf tensor that accumulates gradients.
    pub fn parameter(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        check_shape(shape, data.len())?;
        Ok(Tensor::make(shape.to_vec(), data, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::make(shape.to_vec(), vec![value; n], false, None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::make(vec![1], vec![value], false, None)
    }

    /// Builds the output of an op. A graph node is only recorded when some
    /// input requires a gradient.
    pub(crate) fn from_op(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        inputs: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        if inputs.iter().any(Tensor::requires_grad) {
            Tensor::make(
                shape,
                data,
                true,
                Some(Node {
                    op,
                    inputs,
                    backward,
                }),
            )
        } else {
            Tensor::make(shape, data, false, None)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.node.is_none()
    }

    /// Name of the op that produced this tensor, if it is a graph node.
    pub fn op_name(&self) -> Option<&'static str> {
        self.0.node.as_ref().map(|n| n.op)
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<f64>> {
        self.0.data.read().expect("tensor data lock poisoned")
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.data();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.shape());
        d[0]
    }

    /// Copy of the values with no graph linkage.
    pub fn detach(&self) -> Tensor {
        Tensor::make(self.0.shape.clone(), self.to_vec(), false, None)
    }

    /// The `[N, C, H, W]` dimensions of a rank-4 tensor.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.shape() {
            [n, c, h, w] => Ok((n, c, h, w)),
            ref s => shape_err(op, format!("expected rank-4 [N,C,H,W] tensor, got {s:?}")),
        }
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.lock().expect("grad lock poisoned").clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.lock().expect("grad lock poisoned") = None;
    }

    /// Largest absolute gradient entry, 0 when no gradient is stored.
    pub fn grad_max_abs(&self) -> f64 {
        self.0
            .grad
            .lock()
            .expect("grad lock poisoned")
            .as_ref()
            .map(|g| g.iter().fold(0.0f64, |m, v| m.max(v.abs())))
            .unwrap_or(0.0)
    }

    /// Overwrites the values of a leaf tensor in place.
    pub fn assign(&self, values: &[f64]) -> Result<()> {
        if !self.is_leaf() {
            return Err(Error::InvalidArgument {
                op: "assign",
                detail: "cannot overwrite the values of a graph node".into(),
            });
        }
        let mut d = self.0.data.write().expect("tensor data lock poisoned");
        if d.len() != values.len() {
            return shape_err(
                "assign",
                format!("expected {} values, got {}", d.len(), values.len()),
            );
        }
        d.copy_from_slice(values);
        Ok(())
    }

    /// Applies `f` to the values of a leaf tensor in place.
    pub fn update(&self, f: impl FnOnce(&mut [f64])) {
        assert!(self.is_leaf(), "update() on a graph node");
        let mut d = self.0.data.write().expect("tensor data lock poisoned");
        f(&mut d);
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut slot = self.0.grad.lock().expect("grad lock poisoned");
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Leaf gradients accumulate across calls; use [`Tensor::zero_grad`] to
    /// reset them. Calling `backward` twice on the same graph therefore
    /// doubles every leaf gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Err(Error::NoGraph);
        }
        let order = self.topo_order();
        let mut pending: HashMap<u64, Vec<f64>> = HashMap::new();
        pending.insert(self.id(), vec![1.0]);
        for t in order.iter().rev() {
            let Some(g) = pending.remove(&t.id()) else {
                continue;
            };
            match &t.0.node {
                None => t.accumulate_grad(&g),
                Some(node) => {
                    let grads = (node.backward)(&node.inputs, t, &g);
                    debug_assert_eq!(grads.len(), node.inputs.len(), "op {}", node.op);
                    for (input, gi) in node.inputs.iter().zip(grads) {
                        let Some(gi) = gi else { continue };
                        if !input.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(gi.len(), input.numel(), "op {}", node.op);
                        match pending.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                            None => {
                                pending.insert(input.id(), gi);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Post-order over the tracked part of the graph: inputs before outputs.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for input in &node.inputs {
                    if input.requires_grad() && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&d| d == 0) {
        return shape_err("tensor", format!("dimensions must be positive, got {shape:?}"));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return shape_err(
            "tensor",
            format!("shape {shape:?} holds {n} values but {len} were given"),
        );
    }
    Ok(())
}
