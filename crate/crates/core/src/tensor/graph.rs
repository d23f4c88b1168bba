use super::ops::Op;
use super::{Precision, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Tape of operations in execution order.
///
/// Nodes are appended as operations run, so every node's inputs precede it
/// and the tape is acyclic by construction. A graph supports exactly one
/// [`Graph::backward`] call.
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    precision: Precision,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Graph {
            nodes: Vec::new(),
            precision,
            grads: None,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value. Gradients are produced only for leaves with
    /// `requires_grad` set.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let value = value.rounded(self.precision);
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        mut data: Vec<f64>,
        op: Op,
    ) -> Result<Var, TensorError> {
        if data.iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.precision.round_slice(&mut data);
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Tensor::from_parts(shape, data),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Reverse-mode sweep from a scalar root.
    ///
    /// Afterwards [`Graph::grad`] returns `∂root/∂leaf` for every leaf that
    /// requires a gradient, summed over all paths.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        if self.grads.is_some() {
            return Err(TensorError::BackwardReentry);
        }
        let root_shape = self.nodes[root.0].value.shape().to_vec();
        if self.nodes[root.0].value.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root_shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g, &mut grads)?;
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the backward root with respect to a leaf.
    ///
    /// `None` before backward has run or if the leaf does not require a
    /// gradient; zeros when the root does not depend on the leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.grads.as_ref()?;
        let node = &self.nodes[v.0];
        if !node.requires_grad || !matches!(node.op, Op::Leaf) {
            return None;
        }
        let shape = node.value.shape().to_vec();
        let data = match &grads[v.0] {
            Some(g) => {
                let mut g = g.clone();
                self.precision.round_slice(&mut g);
                g
            }
            None => vec![0.0; node.value.numel()],
        };
        Some(Tensor::from_parts(shape, data))
    }
}
