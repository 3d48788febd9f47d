use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use crate::error::{Result, TensorError};

/// Maps the output gradient of a node to one optional gradient per parent.
///
/// A `None` entry means the parent receives no contribution from this node.
pub(crate) type BackwardFn =
    Box<dyn Fn(&[f64], &[f64], &[Tensor]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with graph recording disabled on the current thread.
///
/// Values are computed as usual but no backward closures or parent links are kept,
/// so inference does not pay for the graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let _restore = Restore(prev);
    f()
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

struct Node {
    id: usize,
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    grad: Mutex<Option<Vec<f64>>>,
}

impl Drop for Node {
    // Long recurrent graphs would otherwise drop recursively, one stack frame per node.
    fn drop(&mut self) {
        let mut stack: Vec<Tensor> = std::mem::take(&mut self.parents);
        while let Some(t) = stack.pop() {
            if let Ok(mut node) = Arc::try_unwrap(t.node) {
                stack.append(&mut node.parents);
            }
        }
    }
}

/// A dense row-major array of `f64` with optional gradient tracking.
///
/// Cloning is cheap: clones share the same node. Values never change after
/// construction; only the gradient accumulator of a leaf is mutable.
#[derive(Clone)]
pub struct Tensor {
    node: Arc<Node>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackwardFn>,
    ) -> Tensor {
        debug_assert_eq!(data.len(), numel(&shape));
        Tensor {
            node: Arc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                parents,
                backward,
                grad: Mutex::new(None),
            }),
        }
    }

    /// Constant tensor (never receives gradient).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != numel(shape) {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor::build(data, shape.to_vec(), false, Vec::new(), None))
    }

    /// Trainable leaf.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != numel(shape) {
            return Err(TensorError::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Tensor::build(data, shape.to_vec(), true, Vec::new(), None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::build(vec![0.0; numel(shape)], shape.to_vec(), false, Vec::new(), None)
    }

    pub fn full(shape: &[usize], value: f64) -> Tensor {
        Tensor::build(vec![value; numel(shape)], shape.to_vec(), false, Vec::new(), None)
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::build(vec![value], Vec::new(), false, Vec::new(), None)
    }

    /// Result of an operation. Parents and the backward closure are only kept
    /// when recording is enabled and some parent requires a gradient.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Tensor {
        let track = is_grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if track {
            Tensor::build(data, shape, true, parents, Some(backward))
        } else {
            Tensor::build(data, shape, false, Vec::new(), None)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.node.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.node.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.backward.is_none()
    }

    /// Stable identity of the underlying node.
    pub fn id(&self) -> usize {
        self.node.id
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape());
        self.node.data[0]
    }

    /// Accumulated gradient of a leaf, if any has been received.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.lock().expect("grad lock").clone()
    }

    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.grad().unwrap_or_else(|| vec![0.0; self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.node.grad.lock().expect("grad lock") = None;
    }

    /// Value-identical copy that is detached from the graph.
    pub fn stop_gradient(&self) -> Tensor {
        Tensor::build(
            self.node.data.clone(),
            self.node.shape.clone(),
            false,
            Vec::new(),
            None,
        )
    }

    /// Same values as a fresh trainable leaf.
    pub fn to_param(&self) -> Tensor {
        Tensor::build(
            self.node.data.clone(),
            self.node.shape.clone(),
            true,
            Vec::new(),
            None,
        )
    }

    /// Reverse-mode pass from a scalar. Gradients accumulate into every reachable
    /// trainable leaf; call [`Tensor::zero_grad`] between passes to reset.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::Rank {
                op: "backward",
                expected: 0,
                shape: self.shape().to_vec(),
            });
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topo_order();
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);

        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            match &t.node.backward {
                None => {
                    let mut slot = t.node.grad.lock().expect("grad lock");
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                }
                Some(f) => {
                    let parent_grads = f(&g, &t.node.data, &t.node.parents);
                    for (p, pg) in t.node.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel());
                        match grads.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes requiring grad in topological order (parents before children).
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
            for p in &t.node.parents {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        order
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructors_check_length() {
        assert!(Tensor::new(vec![1.0, 2.0], &[3]).is_err());
        let t = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert!(!t.requires_grad());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let err = x.backward().unwrap_err();
        assert!(matches!(err, TensorError::Rank { .. }));
    }

    #[test]
    fn no_grad_skips_recording() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = no_grad(|| x.mul(&x).unwrap());
        assert!(!y.requires_grad());
        assert!(is_grad_enabled());
    }

    #[test]
    fn deep_chain_drops_without_overflow() {
        let mut x = Tensor::param(vec![1.0], &[1]).unwrap();
        for _ in 0..200_000 {
            x = x.scale(1.0);
        }
        drop(x);
    }
}
