//! The recording tape.
//!
//! Every operation appends one node holding its forward value, the ids of its
//! parents and a closure mapping the upstream gradient to parent gradients.
//! Parents always have smaller ids than their children, so walking ids in
//! decreasing order is a reverse topological order and each node is visited
//! exactly once.

use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use ndarray::Array2;

use crate::error::{DiffError, Result};

/// Dense row-major matrix. Vectors are `1 x n` or `n x 1`.
pub type Tensor = Array2<f64>;

/// Maps `(upstream grad, parent values, own value)` to one gradient per parent.
/// `None` means "no contribution".
pub type BackwardFn = Box<dyn Fn(&Tensor, &[&Tensor], &Tensor) -> Vec<Option<Tensor>>>;

struct Node {
    op: &'static str,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

/// A define-by-run computation tape. Build a fresh one per forward pass.
#[derive(Default)]
pub struct Tape {
    values: RefCell<Vec<Arc<Tensor>>>,
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shape = self.shape();
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("op", &self.tape.nodes.borrow()[self.id].op)
            .field("shape", &shape)
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.insert("leaf", Arc::new(value), Vec::new(), None, true)
    }

    /// A differentiable input sharing storage with the caller.
    pub fn leaf_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        self.insert("leaf", value, Vec::new(), None, true)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.insert("constant", Arc::new(value), Vec::new(), None, false)
    }

    pub fn constant_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        self.insert("constant", value, Vec::new(), None, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Array2::from_elem((1, 1), value))
    }

    fn insert(
        &self,
        op: &'static str,
        value: Arc<Tensor>,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut values = self.values.borrow_mut();
        let id = values.len();
        values.push(value);
        self.nodes.borrow_mut().push(Node {
            op,
            parents,
            backward,
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// Appends an operation node. Fails if the forward value is not finite.
    /// The backward closure is dropped when no parent requires a gradient.
    pub fn push(
        &self,
        op: &'static str,
        parents: &[Var<'_>],
        value: Tensor,
        backward: BackwardFn,
    ) -> Result<Var<'_>> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite { op });
        }
        let ids: Vec<usize> = parents.iter().map(|p| p.id).collect();
        let requires_grad = {
            let nodes = self.nodes.borrow();
            ids.iter().any(|&i| nodes[i].requires_grad)
        };
        let (ids, backward) = if requires_grad {
            (ids, Some(backward))
        } else {
            (Vec::new(), None)
        };
        Ok(self.insert(op, Arc::new(value), ids, backward, requires_grad))
    }

    pub(crate) fn value_of(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.values.borrow()[id])
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a `1 x 1` root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let shape = root.shape();
        if shape != (1, 1) {
            return Err(DiffError::Shape {
                op: "backward",
                lhs: shape,
                rhs: (1, 1),
            });
        }
        self.backward_with(root, Array2::ones((1, 1)))
    }

    /// Reverse pass seeded with an explicit upstream gradient for `root`.
    pub fn backward_with(&self, root: Var<'_>, seed: Tensor) -> Result<Gradients> {
        let shape = root.shape();
        if seed.dim() != shape {
            return Err(DiffError::Shape {
                op: "backward",
                lhs: seed.dim(),
                rhs: shape,
            });
        }
        let nodes = self.nodes.borrow();
        let values = self.values.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        grads[root.id] = Some(seed);
        let mut leaves: Vec<Option<Tensor>> = vec![None; root.id + 1];

        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(backward) = node.backward.as_ref() else {
                // Leaf.
                leaves[id] = Some(g);
                continue;
            };
            let parent_values: Vec<&Tensor> =
                node.parents.iter().map(|&p| values[p].as_ref()).collect();
            let parent_grads = backward(&g, &parent_values, &values[id]);
            debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {}", node.op);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(pg.dim(), values[p].dim(), "grad shape from op {}", node.op);
                match &mut grads[p] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { leaves })
    }
}

/// Gradients of the root with respect to every differentiable leaf.
pub struct Gradients {
    leaves: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the leaf is unreachable from the root.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.leaves.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, zeros when unreachable.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(var.shape()))
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.values.borrow()[self.id].dim()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    /// Value of a `1 x 1` node.
    pub fn item(&self) -> f64 {
        let v = self.value();
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }
}
