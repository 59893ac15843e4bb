//! Reverse-mode automatic differentiation over dynamic `ndarray` tensors.
//!
//! A [`Tape`] records every operation of one forward pass. [`Tape::backward`]
//! replays the recorded closures in reverse and accumulates gradients for
//! every node that can reach a parameter leaf. Nodes that cannot influence
//! any parameter are skipped, which is what keeps "frozen discriminator"
//! style passes cheap and side-effect free.

use std::cell::RefCell;
use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};

use super::params::{ParamId, ParamStore};
use super::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Backward closure: (grad wrt output, parent values, output value) ->
/// gradient per parent (`None` for parents that do not need one).
pub(crate) type BackwardFn<S> =
    Box<dyn Fn(&ArrayD<S>, &[&ArrayD<S>], &ArrayD<S>) -> Vec<Option<ArrayD<S>>>>;

pub(crate) struct Node<S: Scalar> {
    pub(crate) value: ArrayD<S>,
    pub(crate) parents: Vec<Var>,
    pub(crate) backward: Option<BackwardFn<S>>,
    pub(crate) needs_grad: bool,
}

pub(crate) struct TapeInner<S: Scalar> {
    pub(crate) nodes: Vec<Node<S>>,
    pub(crate) param_vars: HashMap<ParamId, Var>,
    /// Frozen pulls live in their own map: one step may read the same
    /// parameter trainably (discriminator update) and frozen (generator
    /// update through the discriminator) on a single tape.
    pub(crate) frozen_vars: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

pub struct Tape<S: Scalar> {
    pub(crate) inner: RefCell<TapeInner<S>>,
}

impl<S: Scalar> Tape<S> {
    /// Tape that tracks gradients for parameter leaves.
    pub fn new() -> Self {
        Self::with_grad(true)
    }

    /// Evaluation tape: records values only, `backward` would be a no-op.
    pub fn no_grad() -> Self {
        Self::with_grad(false)
    }

    fn with_grad(grad_enabled: bool) -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                nodes: Vec::new(),
                param_vars: HashMap::new(),
                frozen_vars: HashMap::new(),
                grad_enabled,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf holding data that never receives a gradient.
    pub fn constant(&self, value: ArrayD<S>) -> Var {
        self.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            needs_grad: false,
        })
    }

    pub fn scalar(&self, v: S) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), v))
    }

    /// Parameter leaf. Repeated calls for the same id return the same node so
    /// gradient contributions from different branches accumulate. The set of
    /// parameters pulled onto a tape doubles as a call trace: an inference
    /// pass must never touch auxiliary-task parameters, and tests assert that
    /// through [`Tape::touched_params`].
    pub fn param(&self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(v) = self.inner.borrow().param_vars.get(&id) {
            return *v;
        }
        let grad = self.inner.borrow().grad_enabled;
        let var = self.push(Node {
            value: store.value(id).clone(),
            parents: Vec::new(),
            backward: None,
            needs_grad: grad,
        });
        self.inner.borrow_mut().param_vars.insert(id, var);
        var
    }

    /// Like [`Tape::param`] but explicitly frozen: the value participates in
    /// the forward pass and gradients flow *through* ops consuming it, yet no
    /// gradient is accumulated for the parameter itself.
    pub fn param_frozen(&self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(v) = self.inner.borrow().frozen_vars.get(&id) {
            return *v;
        }
        let var = self.constant(store.value(id).clone());
        self.inner.borrow_mut().frozen_vars.insert(id, var);
        var
    }

    /// Every parameter read on this tape, trainably or frozen.
    pub fn touched_params(&self) -> Vec<ParamId> {
        let inner = self.inner.borrow();
        let mut ids: Vec<ParamId> = inner
            .param_vars
            .keys()
            .chain(inner.frozen_vars.keys())
            .copied()
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn value(&self, var: Var) -> ArrayD<S> {
        self.inner.borrow().nodes[var.0].value.clone()
    }

    /// Value of a node that holds a single scalar.
    pub fn value_scalar(&self, var: Var) -> S {
        let inner = self.inner.borrow();
        let v = &inner.nodes[var.0].value;
        debug_assert_eq!(v.len(), 1, "value_scalar on non-scalar node");
        *v.iter().next().expect("non-empty")
    }

    pub fn shape(&self, var: Var) -> Vec<usize> {
        self.inner.borrow().nodes[var.0].value.shape().to_vec()
    }

    pub(crate) fn push(&self, node: Node<S>) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(node);
        Var(inner.nodes.len() - 1)
    }

    /// Record an op. `backward` is dropped when no parent needs a gradient,
    /// so evaluation tapes carry no closures at all.
    pub(crate) fn op(&self, value: ArrayD<S>, parents: Vec<Var>, backward: BackwardFn<S>) -> Var {
        let needs = {
            let inner = self.inner.borrow();
            inner.grad_enabled && parents.iter().any(|p| inner.nodes[p.0].needs_grad)
        };
        self.push(Node {
            value,
            parents,
            backward: if needs { Some(backward) } else { None },
            needs_grad: needs,
        })
    }

    /// Reverse sweep from `loss` (a scalar node). Returns gradients for every
    /// reachable grad-requiring node; everything else stays `None`.
    pub fn backward(&self, loss: Var) -> Gradients<S> {
        let inner = self.inner.borrow();
        let n = inner.nodes.len();
        let mut grads: Vec<Option<ArrayD<S>>> = (0..n).map(|_| None).collect();
        debug_assert_eq!(inner.nodes[loss.0].value.len(), 1, "loss must be scalar");
        if !inner.nodes[loss.0].needs_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(ArrayD::ones(inner.nodes[loss.0].value.raw_dim()));

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() || !inner.nodes[id].needs_grad {
                continue;
            }
            let node = &inner.nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let g_out = grads[id].take().expect("checked above");
            let parent_vals: Vec<&ArrayD<S>> =
                node.parents.iter().map(|p| &inner.nodes[p.0].value).collect();
            let parent_grads = backward(&g_out, &parent_vals, &node.value);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !inner.nodes[parent.0].needs_grad {
                    continue;
                }
                debug_assert_eq!(
                    pg.shape(),
                    inner.nodes[parent.0].value.shape(),
                    "gradient shape mismatch"
                );
                match &mut grads[parent.0] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
            grads[id] = Some(g_out);
        }
        Gradients { grads }
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

pub struct Gradients<S: Scalar> {
    grads: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn wrt(&self, var: Var) -> Option<&ArrayD<S>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a parameter pulled onto `tape`, if it received one.
    pub fn wrt_param(&self, tape: &Tape<S>, id: ParamId) -> Option<&ArrayD<S>> {
        let var = *tape.inner.borrow().param_vars.get(&id)?;
        self.wrt(var)
    }

    pub fn all_finite(&self) -> bool {
        self.grads
            .iter()
            .flatten()
            .all(|g| g.iter().all(|v| v.is_finite()))
    }
}
