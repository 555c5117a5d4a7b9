//! Reverse-mode differentiation over a per-execution op record.
//!
//! A `Graph` owns every intermediate value of one forward pass in execution
//! order (a topological order by construction). `backward` replays the record
//! once in reverse, accumulating adjoints into nodes that require gradients.
//! A graph is confined to one logical execution; concurrent forwards each use
//! their own graph.

use crate::tensor::Tensor;

/// Handle to a value in a `Graph`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ValId(pub(crate) usize);

/// Per-op adjoint rule. `grads` returns one gradient per parent (None when a
/// parent does not require grad).
pub(crate) trait BackwardOp {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

pub(crate) struct Node {
    pub value: Tensor,
    pub parents: Vec<ValId>,
    pub backward: Option<Box<dyn BackwardOp>>,
    pub requires_grad: bool,
    pub grad: Option<Tensor>,
}

pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Graph that records values only; backward is unavailable.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    /// Differentiable leaf (a parameter or an input under test).
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> ValId {
        value.assert_finite("leaf");
        self.push(Node {
            value,
            parents: vec![],
            backward: None,
            requires_grad: requires_grad && self.grad_enabled,
            grad: None,
        })
    }

    /// Non-differentiable constant.
    pub fn constant(&mut self, value: Tensor) -> ValId {
        self.leaf(value, false)
    }

    /// Value copy with gradient flow blocked.
    pub fn detach(&mut self, x: ValId) -> ValId {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn value(&self, id: ValId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: ValId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn grad(&self, id: ValId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn requires_grad(&self, id: ValId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node) -> ValId {
        self.nodes.push(node);
        ValId(self.nodes.len() - 1)
    }

    /// Record an op result. The backward rule is dropped when no parent
    /// requires grad, so inference graphs stay cheap.
    pub(crate) fn record(
        &mut self,
        value: Tensor,
        parents: Vec<ValId>,
        backward: Box<dyn BackwardOp>,
    ) -> ValId {
        value.assert_finite("op output");
        let requires = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(Node {
            value,
            parents,
            backward: if requires { Some(backward) } else { None },
            requires_grad: requires,
            grad: None,
        })
    }

    /// Accumulate adjoints of `loss` into every requires-grad node.
    /// Deterministic: replay order is the reverse of the record order.
    pub fn backward(&mut self, loss: ValId) {
        assert!(self.grad_enabled, "backward on an inference graph");
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward requires a scalar loss, got shape {:?}",
            self.nodes[loss.0].value.shape()
        );
        let seed = Tensor::new(self.nodes[loss.0].value.shape(), vec![1.0]);
        self.accumulate(loss, seed);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || self.nodes[i].backward.is_none() {
                continue;
            }
            let grad_out = self.nodes[i].grad.clone().unwrap();
            let parents = self.nodes[i].parents.clone();
            let needs: Vec<bool> = parents
                .iter()
                .map(|p| self.nodes[p.0].requires_grad)
                .collect();
            let inputs: Vec<&Tensor> = parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let op = self.nodes[i].backward.as_ref().unwrap();
            let parent_grads = op.backward(&inputs, &self.nodes[i].value, &grad_out, &needs);
            assert_eq!(parent_grads.len(), parents.len());
            for (p, g) in parents.into_iter().zip(parent_grads) {
                if let Some(g) = g {
                    g.assert_finite("adjoint");
                    self.accumulate(p, g);
                }
            }
        }
    }

    fn accumulate(&mut self, id: ValId, g: Tensor) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        assert_eq!(
            g.shape(),
            node.value.shape(),
            "adjoint shape {:?} != value shape {:?}",
            g.shape(),
            node.value.shape()
        );
        match &mut node.grad {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            None => node.grad = Some(g),
        }
    }
}
