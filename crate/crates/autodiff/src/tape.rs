//! Recording of operations and reverse-mode differentiation.
//!
//! Every backward rule is itself expressed with recorded operations, so a
//! gradient obtained with [`GradGraph::Retain`] is an ordinary [`Var`] that
//! can be differentiated again (reverse-over-reverse).

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{AutodiffError, Result};
use crate::ops::{self, Op};
use crate::tensor::Tensor;

/// Floor applied to `log` and `sqrt` arguments.
pub const DOMAIN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum LeafKind {
    Param,
    Constant,
    /// Gradient value whose computation graph was discarded.
    DetachedGrad,
}

pub(crate) struct Node {
    pub(crate) op: Op,
    pub(crate) leaf: Option<LeafKind>,
    pub(crate) value: Rc<Tensor>,
    pub(crate) requires_grad: bool,
}

#[derive(Default)]
pub(crate) struct TapeInner {
    pub(crate) nodes: Vec<Node>,
}

/// Whether gradients returned by [`Tape::grad`] keep their own history.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradGraph {
    /// Gradients are recorded on the tape and can be differentiated again.
    Retain,
    /// Only gradient values are kept; the backward nodes are discarded.
    Detach,
}

/// Append-only record of a computation. Cheap to clone (shared handle).
#[derive(Clone, Default)]
pub struct Tape(pub(crate) Rc<RefCell<TapeInner>>);

/// Handle to one recorded value.
#[derive(Clone)]
pub struct Var {
    pub(crate) tape: Tape,
    pub(crate) id: usize,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A leaf that gradients may be taken with respect to.
    pub fn param(&self, value: Tensor) -> Var {
        self.leaf(value, LeafKind::Param)
    }

    /// A leaf treated as a fixed input.
    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, LeafKind::Constant)
    }

    fn leaf(&self, value: Tensor, kind: LeafKind) -> Var {
        let mut inner = self.0.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op: Op::Leaf,
            leaf: Some(kind),
            value: Rc::new(value),
            requires_grad: kind == LeafKind::Param,
        });
        Var {
            tape: self.clone(),
            id,
        }
    }

    pub fn len(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_as(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor> {
        self.0.borrow().nodes[id].value.clone()
    }

    pub(crate) fn push(&self, op: Op) -> Result<Var> {
        let (inputs, requires_grad) = {
            let inner = self.0.borrow();
            let ids = op.inputs();
            let values: Vec<Rc<Tensor>> =
                ids.iter().map(|&i| inner.nodes[i].value.clone()).collect();
            let rg = ids.iter().any(|&i| inner.nodes[i].requires_grad);
            (values, rg)
        };
        let refs: Vec<&Tensor> = inputs.iter().map(|v| v.as_ref()).collect();
        let value = ops::eval(&op, &refs)?;
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: op.name() });
        }
        let mut inner = self.0.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            leaf: None,
            value: Rc::new(value),
            requires_grad,
        });
        Ok(Var {
            tape: self.clone(),
            id,
        })
    }

    fn check_owned(&self, var: &Var) -> Result<()> {
        if self.same_as(&var.tape) {
            Ok(())
        } else {
            Err(AutodiffError::ForeignVar)
        }
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// A `wrt` entry that is not an ancestor of `output` gets a zero gradient.
    pub fn grad(&self, output: &Var, wrt: &[Var], graph: GradGraph) -> Result<Vec<Var>> {
        self.check_owned(output)?;
        for w in wrt {
            self.check_owned(w)?;
        }
        let out_shape = output.shape();
        if output.value().numel() != 1 {
            return Err(AutodiffError::NonScalarOutput(out_shape));
        }
        let start_len = self.len();
        let n = output.id + 1;

        // Nodes downstream of some requested variable; only those carry adjoints.
        let mut relevant = vec![false; n];
        for w in wrt {
            if w.id < n {
                relevant[w.id] = true;
            }
        }
        {
            let inner = self.0.borrow();
            for id in 0..n {
                if !relevant[id] {
                    relevant[id] = inner.nodes[id].op.inputs().iter().any(|&i| relevant[i]);
                }
            }
        }

        let mut adjoint: Vec<Option<Var>> = vec![None; n];
        adjoint[output.id] = Some(self.constant(Tensor::ones(&out_shape)));
        for id in (0..n).rev() {
            if !relevant[id] {
                continue;
            }
            let Some(g) = adjoint[id].clone() else {
                continue;
            };
            let op = self.0.borrow().nodes[id].op.clone();
            let inputs = op.inputs();
            if inputs.is_empty() {
                continue;
            }
            let wanted: Vec<bool> = inputs.iter().map(|&i| relevant[i]).collect();
            let out = Var {
                tape: self.clone(),
                id,
            };
            let contribs = ops::vjp(&op, &out, &g, &wanted)?;
            for (input, contrib) in inputs.into_iter().zip(contribs) {
                let Some(c) = contrib else { continue };
                adjoint[input] = Some(match adjoint[input].take() {
                    Some(acc) => acc.add(&c)?,
                    None => c,
                });
            }
        }

        let grads: Vec<Var> = wrt
            .iter()
            .map(|w| match adjoint.get(w.id).and_then(|a| a.clone()) {
                Some(g) => g,
                None => self.constant(Tensor::zeros(&w.shape())),
            })
            .collect();

        match graph {
            GradGraph::Retain => Ok(grads),
            GradGraph::Detach => {
                let values: Vec<Tensor> = grads.iter().map(|g| (*g.value()).clone()).collect();
                drop(grads);
                drop(adjoint);
                self.0.borrow_mut().nodes.truncate(start_len);
                Ok(values
                    .into_iter()
                    .map(|v| self.leaf(v, LeafKind::DetachedGrad))
                    .collect())
            }
        }
    }

    /// Gradient values of the scalar `output` with respect to `wrt`.
    pub fn backward(&self, output: &Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let grads = self.grad(output, wrt, GradGraph::Detach)?;
        let values = grads.iter().map(|g| (*g.value()).clone()).collect();
        // the detached leaves are not needed by anyone
        let keep = self.len() - grads.len();
        drop(grads);
        self.0.borrow_mut().nodes.truncate(keep);
        Ok(values)
    }

    /// Total derivative of `meta_output` with respect to `wrt`, following
    /// every path including those through retained inner gradients.
    ///
    /// Fails with [`AutodiffError::NotRetained`] when an ancestor of
    /// `meta_output` is a gradient whose graph was detached.
    pub fn grad_through_grad(&self, meta_output: &Var, wrt: &Var) -> Result<Tensor> {
        self.check_owned(meta_output)?;
        {
            let inner = self.0.borrow();
            let mut reach = vec![false; meta_output.id + 1];
            reach[meta_output.id] = true;
            for id in (0..=meta_output.id).rev() {
                if !reach[id] {
                    continue;
                }
                let node = &inner.nodes[id];
                if node.leaf == Some(LeafKind::DetachedGrad) {
                    return Err(AutodiffError::NotRetained);
                }
                for i in node.op.inputs() {
                    reach[i] = true;
                }
            }
        }
        Ok(self
            .backward(meta_output, std::slice::from_ref(wrt))?
            .remove(0))
    }

    /// Recomputes every node from the stored leaf values.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let inner = self.0.borrow();
        let mut values: Vec<Tensor> = Vec::with_capacity(inner.nodes.len());
        for node in &inner.nodes {
            let v = if node.leaf.is_some() {
                (*node.value).clone()
            } else {
                let refs: Vec<&Tensor> = node.op.inputs().iter().map(|&i| &values[i]).collect();
                ops::eval(&node.op, &refs)?
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Stored node values in recording order.
    pub fn values(&self) -> Vec<Tensor> {
        self.0
            .borrow()
            .nodes
            .iter()
            .map(|n| (*n.value).clone())
            .collect()
    }

    /// Names of recorded operations in order (leaves are reported as `"leaf"`).
    pub fn op_names(&self) -> Vec<&'static str> {
        self.0.borrow().nodes.iter().map(|n| n.op.name()).collect()
    }
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> Result<f64> {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.0.borrow().nodes[self.id].requires_grad
    }
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}
