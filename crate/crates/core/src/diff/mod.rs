//! Reverse-mode automatic differentiation on dense f64 tensors.
//!
//! A [`Tape`] is a Wengert list: every operation appends a node holding the
//! result value plus a backward closure that maps the node's output gradient
//! to gradients for its parents. Nodes are appended in evaluation order, so
//! [`Tape::backward`] is a single reverse sweep.
//!
//! Tapes are cheap to create and not thread-shared; data-parallel code builds
//! one tape per chunk and sums the resulting [`Gradients`].

mod conv;
mod ops;

pub mod fd;
pub mod sample;

pub use sample::CompositeLayout;

use ndarray::IxDyn;

pub type Arr = ndarray::ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

pub(crate) struct BackCtx<'a> {
    tape: &'a Tape,
    node: usize,
    grad: &'a Arr,
}

impl<'a> BackCtx<'a> {
    /// Value of the i-th parent of the node being differentiated.
    pub fn parent(&self, i: usize) -> &Arr {
        let p = self.tape.nodes[self.node].parents[i];
        &self.tape.nodes[p.0].value
    }

    /// Value of the node itself (the op output).
    pub fn output(&self) -> &Arr {
        &self.tape.nodes[self.node].value
    }

    /// Incoming gradient with the node's shape.
    pub fn grad(&self) -> &Arr {
        self.grad
    }
}

type BackwardFn = Box<dyn Fn(&BackCtx) -> Vec<Arr> + Send + Sync>;

struct Node {
    value: Arr,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Arr> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input (parameters, trainable state).
    pub fn leaf(&mut self, value: Arr) -> Var {
        self.push_node(value, Vec::new(), None, true)
    }

    /// Non-differentiated input; backward never propagates into it.
    pub fn constant(&mut self, value: Arr) -> Var {
        self.push_node(value, Vec::new(), None, false)
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub(crate) fn push_op(
        &mut self,
        value: Arr,
        parents: Vec<Var>,
        backward: BackwardFn,
    ) -> Var {
        let needs = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let backward = if needs { Some(backward) } else { None };
        self.push_node(value, parents, backward, needs)
    }

    fn push_node(
        &mut self,
        value: Arr,
        parents: Vec<Var>,
        backward: Option<BackwardFn>,
        needs_grad: bool,
    ) -> Var {
        self.nodes.push(Node {
            value,
            parents,
            backward,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from `root`, seeding with a gradient of ones.
    pub fn backward(&self, root: Var) -> Gradients {
        let seed = Arr::ones(IxDyn(self.nodes[root.0].value.shape()));
        self.backward_seeded(root, seed)
    }

    pub fn backward_seeded(&self, root: Var, seed: Arr) -> Gradients {
        assert_eq!(
            seed.shape(),
            self.nodes[root.0].value.shape(),
            "seed gradient shape mismatch"
        );
        let mut grads: Vec<Option<Arr>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(seed);

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            // Nodes above may not have contributed any gradient to this one.
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let ctx = BackCtx {
                tape: self,
                node: id,
                grad: &grad,
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                debug_assert_eq!(pg.shape(), self.nodes[parent.0].value.shape());
                match &mut grads[parent.0] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}
