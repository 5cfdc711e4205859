//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation whose inputs carry a node handle.
//! Values that never touch a leaf stay unrecorded constants, so running a
//! model with frozen parameters costs no tape memory beyond the leaves.
//! Nodes are appended in execution order, which is a topological order by
//! construction; [`Tape::backward`] walks them in reverse.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Maps the upstream gradient of a node to one gradient per input
/// (`None` for inputs that need none).
pub type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    tape: u64,
    index: usize,
}

struct Node<T: Scalar> {
    op: &'static str,
    shape: Shape,
    /// One slot per op input; `None` when that input is a constant.
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

/// A tensor value, optionally tracked on a tape.
#[derive(Clone, Debug)]
pub struct Var<T: Scalar> {
    value: Tensor<T>,
    node: Option<NodeId>,
}

impl<T: Scalar> Var<T> {
    /// Untracked value; gradients never flow into it.
    pub fn constant(value: Tensor<T>) -> Self {
        Var { value, node: None }
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> Shape {
        self.value.shape()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same value with the graph connection cut.
    pub fn detach(&self) -> Self {
        Var::constant(self.value.clone())
    }
}

pub struct Tape<T: Scalar> {
    id: u64,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a trainable leaf.
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node { op: "leaf", shape: value.shape(), inputs: Vec::new(), backward: None });
        Var { value, node: Some(NodeId { tape: self.id, index }) }
    }

    fn local_index(&self, v: &Var<T>) -> Result<Option<usize>> {
        match v.node {
            None => Ok(None),
            Some(id) if id.tape == self.id => Ok(Some(id.index)),
            Some(_) => Err(Error::Autodiff("variable belongs to a different tape".into())),
        }
    }

    /// Records `value = op(inputs)`. When no input is tracked the result is a
    /// constant and `backward` is dropped unevaluated.
    pub fn record(
        &self,
        op: &'static str,
        inputs: &[&Var<T>],
        value: Tensor<T>,
        backward: BackwardFn<T>,
    ) -> Result<Var<T>> {
        value.validate(op)?;
        let mut slots = Vec::with_capacity(inputs.len());
        for v in inputs {
            slots.push(self.local_index(v)?);
        }
        if slots.iter().all(Option::is_none) {
            return Ok(Var::constant(value));
        }
        let mut nodes = self.nodes.borrow_mut();
        let index = nodes.len();
        nodes.push(Node { op, shape: value.shape(), inputs: slots, backward: Some(backward) });
        Ok(Var { value, node: Some(NodeId { tape: self.id, index }) })
    }

    /// Back-propagates from a one-element `root`.
    pub fn backward(&self, root: &Var<T>) -> Result<Gradients<T>> {
        if root.value.numel() != 1 {
            return Err(Error::Autodiff(format!("backward root must be scalar, got shape {}", root.shape())));
        }
        let root_idx = match self.local_index(root)? {
            Some(i) => i,
            None => return Err(Error::Autodiff("backward root is not recorded on this tape".into())),
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root_idx + 1];
        grads[root_idx] = Some(Tensor::ones(root.shape()));
        for i in (0..=root_idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Some(bw) = &node.backward {
                let input_grads = bw(&g)?;
                debug_assert_eq!(input_grads.len(), node.inputs.len(), "op {}", node.op);
                for (slot, ig) in node.inputs.iter().zip(input_grads) {
                    let (Some(j), Some(ig)) = (slot, ig) else { continue };
                    if ig.shape() != nodes[*j].shape {
                        return Err(Error::Autodiff(format!(
                            "{} produced gradient {} for input of shape {}",
                            node.op,
                            ig.shape(),
                            nodes[*j].shape
                        )));
                    }
                    ig.validate(node.op)?;
                    grads[*j] = Some(match grads[*j].take() {
                        Some(acc) => acc.add(&ig)?,
                        None => ig,
                    });
                }
                // Intermediate gradients are not retained.
            } else {
                grads[i] = Some(g);
            }
        }
        let mut map = HashMap::new();
        for (i, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                map.insert(i, g);
            }
        }
        let shapes = nodes.iter().map(|n| n.shape).collect();
        Ok(Gradients { tape: self.id, grads: map, shapes })
    }
}

/// Leaf gradients from one backward pass.
pub struct Gradients<T: Scalar> {
    tape: u64,
    grads: HashMap<usize, Tensor<T>>,
    shapes: Vec<Shape>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the root with respect to `leaf`; zeros when unreachable.
    pub fn get(&self, leaf: &Var<T>) -> Result<Tensor<T>> {
        let id = leaf.node.ok_or_else(|| Error::Autodiff("gradient requested for an untracked value".into()))?;
        if id.tape != self.tape {
            return Err(Error::Autodiff("variable belongs to a different tape".into()));
        }
        Ok(match self.grads.get(&id.index) {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[id.index]),
        })
    }
}
