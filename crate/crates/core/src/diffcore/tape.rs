//! Reverse-mode tape.
//!
//! Every op computes its forward value eagerly and records a closure that maps the
//! output gradient to input gradients. [`Tape::backward`] replays the closures in
//! reverse recording order.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward closure may look at.
pub struct BackwardCtx<'a, T: Real> {
    pub grad: &'a Tensor<T>,
    pub output: &'a Tensor<T>,
    pub inputs: Vec<&'a Tensor<T>>,
    /// `needs[i]` is false when input `i` does not require a gradient; closures
    /// should skip that work and return `None` in slot `i`.
    pub needs: Vec<bool>,
}

pub type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T: Real> {
    parents: Vec<Var>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

pub struct Tape<T: Real> {
    values: Vec<Tensor<T>>,
    nodes: Vec<Node<T>>,
    branches: u64,
}

const BRANCH_SEED: u64 = 0xcbf2_9ce4_8422_2325;
const BRANCH_PRIME: u64 = 0x0000_0100_0000_01b3;

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            nodes: Vec::new(),
            branches: BRANCH_SEED,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Folds the branch taken by a piecewise op (ReLU side, max-pool winner, ...) into
    /// [`Tape::branch_signature`].
    pub fn note_branches(&mut self, branches: impl IntoIterator<Item = u64>) {
        for b in branches {
            self.branches = (self.branches ^ b).wrapping_mul(BRANCH_PRIME);
        }
    }

    /// Hash of every branch noted so far. Two forward passes of the same program with
    /// equal signatures ran through the same linear pieces.
    pub fn branch_signature(&self) -> u64 {
        self.branches
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.values.push(value);
        self.nodes.push(Node {
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an op result. The closure is dropped when no parent needs a gradient.
    pub fn record(&mut self, value: Tensor<T>, parents: &[Var], backward: BackwardFn<T>) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.values.push(value);
        self.nodes.push(Node {
            parents: parents.to_vec(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var(self.values.len() - 1)
    }

    /// Backpropagates from a single-element `root` seeded with 1.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.values[root.0].numel() != 1 {
            return Err(Error::shape(format!(
                "backward root must be a scalar, got {:?}",
                self.values[root.0].shape()
            )));
        }
        let seed = Tensor::ones(self.values[root.0].shape());
        self.backward_with(root, seed)
    }

    pub fn backward_with(&self, root: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        seed.expect_shape(self.values[root.0].shape(), "backward seed")?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.values.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let ctx = BackwardCtx {
                grad: &grad,
                output: &self.values[i],
                inputs: node.parents.iter().map(|p| &self.values[p.0]).collect(),
                needs: node
                    .parents
                    .iter()
                    .map(|p| self.nodes[p.0].requires_grad)
                    .collect(),
            };
            let parent_grads = backward(&ctx)?;
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), self.values[p.0].shape(), "grad shape for node {}", p.0);
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Leaf gradients produced by [`Tape::backward`]. Intermediate gradients are released
/// during the sweep.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
