//! Reverse-mode tape over dynamically shaped f64 arrays.
//!
//! A [`Graph`] records one forward computation (define-by-run); calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients
//! into leaves. Scalars are rank-0 arrays. All accumulation happens in tape
//! order, so gradients are bitwise reproducible run to run.

use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};

pub type VarId = usize;

/// Context handed to a backward function.
pub struct BackwardCtx<'a> {
    /// Forward values of the node's parents, in parent order.
    pub parents: Vec<&'a ArrayD<f64>>,
    /// Forward value of the node itself.
    pub output: &'a ArrayD<f64>,
    /// Which parents need a gradient; entries for `false` may be `None`.
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn =
    Box<dyn Fn(&ArrayD<f64>, &BackwardCtx<'_>) -> Vec<Option<ArrayD<f64>>>>;

struct Node {
    value: Arc<ArrayD<f64>>,
    parents: Vec<VarId>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf holding `value`. Only leaves with `requires_grad` (and
    /// nodes that depend on them) participate in backprop.
    pub fn leaf(&mut self, value: ArrayD<f64>, requires_grad: bool) -> VarId {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Insert a leaf sharing an existing allocation (no copy).
    pub fn leaf_shared(&mut self, value: Arc<ArrayD<f64>>, requires_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    /// Insert a constant (never differentiated).
    pub fn constant(&mut self, value: ArrayD<f64>) -> VarId {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> VarId {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    /// Record an op node. The backward function is dropped when no parent
    /// requires a gradient, so inference-only graphs carry no closures.
    pub(crate) fn push_op(
        &mut self,
        value: ArrayD<f64>,
        parents: Vec<VarId>,
        backward: BackwardFn,
    ) -> VarId {
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            parents,
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        self.nodes.len() - 1
    }

    pub fn value(&self, id: VarId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    pub fn value_shared(&self, id: VarId) -> Arc<ArrayD<f64>> {
        Arc::clone(&self.nodes[id].value)
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        self.nodes[id].value.shape()
    }

    pub fn requires_grad(&self, id: VarId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Extract a rank-0 or single-element value as a scalar.
    pub fn scalar_value(&self, id: VarId) -> f64 {
        let v = self.value(id);
        debug_assert!(v.len() == 1, "scalar_value on array of len {}", v.len());
        *v.iter().next().expect("non-empty")
    }

    /// Run backprop from `root`, seeding with a gradient of ones. Gradients
    /// of interior nodes are consumed as the walk passes them; leaf gradients
    /// remain readable through [`Graph::grad`].
    pub fn backward(&mut self, root: VarId) {
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        let seed = ArrayD::ones(self.nodes[root].value.raw_dim());
        self.grads[root] = Some(seed);

        for i in (0..=root).rev() {
            if self.nodes[i].backward.is_none() {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            let parents = self.nodes[i].parents.clone();
            let pgrads = {
                let node = &self.nodes[i];
                let parent_vals: Vec<&ArrayD<f64>> =
                    parents.iter().map(|&p| &*self.nodes[p].value).collect();
                let needs: Vec<bool> = parents
                    .iter()
                    .map(|&p| self.nodes[p].requires_grad)
                    .collect();
                let ctx = BackwardCtx {
                    parents: parent_vals,
                    output: &node.value,
                    needs: &needs,
                };
                (node.backward.as_ref().expect("backward present"))(&gout, &ctx)
            };
            debug_assert_eq!(pgrads.len(), parents.len(), "backward arity mismatch");
            for (&p, pg) in parents.iter().zip(pgrads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(
                    pg.shape(),
                    self.nodes[p].value.shape(),
                    "gradient shape mismatch at node {p}"
                );
                match &mut self.grads[p] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
    }

    /// Gradient accumulated at a leaf by the last [`Graph::backward`] call.
    pub fn grad(&self, id: VarId) -> Option<&ArrayD<f64>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}
