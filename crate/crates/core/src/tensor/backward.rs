//! Reverse pass: tape construction and gradient accumulation.

use super::{ops, NodeId, Tensor};
use std::collections::hash_map::Entry;
use std::collections::{HashMap, HashSet};

/// The differentiable subgraph reachable from a scalar output, in creation
/// (= topological) order: every node's parents precede it.
pub struct Tape {
    nodes: Vec<Tensor>,
}

impl Tape {
    /// Records the subgraph reachable from `root` through differentiable
    /// edges.
    pub fn trace(root: &Tensor) -> Tape {
        Tape::trace_with_cuts(root, &HashSet::new())
    }

    fn trace_with_cuts(root: &Tensor, cuts: &HashSet<NodeId>) -> Tape {
        let mut nodes = Vec::new();
        if !root.requires_grad() {
            return Tape { nodes };
        }
        let mut visited: HashSet<NodeId> = HashSet::new();
        let mut stack = vec![root.clone()];
        while let Some(n) = stack.pop() {
            if !visited.insert(n.id()) {
                continue;
            }
            let expand = n.id() == root.id() || !cuts.contains(&n.id());
            if expand {
                for p in n.parents() {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push(p.clone());
                    }
                }
            }
            nodes.push(n);
        }
        nodes.sort_by_key(|n| n.id());
        Tape { nodes }
    }

    pub fn nodes(&self) -> &[Tensor] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Gradients keyed by node id. Both leaves and interior nodes of the traced
/// subgraph are present (interior entries are the accumulated cotangents at
/// that node).
pub struct Gradients {
    map: HashMap<NodeId, Tensor>,
}

impl Gradients {
    /// The gradient of the traced loss with respect to `t`, if `t` received
    /// one. Gradients are ordinary tensors and can be differentiated again.
    pub fn get(&self, t: &Tensor) -> Option<&Tensor> {
        self.map.get(&t.id())
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Reverse-mode gradients of a scalar `loss` with respect to everything in
/// its differentiable subgraph.
pub fn backward(loss: &Tensor) -> Gradients {
    backward_with_cuts(loss, &[])
}

/// Like [`backward`], but treats each tensor in `cuts` as an independent
/// variable: the cotangent accumulates *at* the cut node and does not
/// propagate into its parents.
///
/// This is exactly the gradient-adaptation semantics for heads initialized
/// from prototypes: the inner step needs `∂loss/∂W` at the initialization
/// value while `W`'s dependence on the encoder stays intact for the outer
/// gradient. The returned gradient tensors still reference the original
/// forward nodes, so differentiating through them later sees the full
/// dependency structure.
pub fn backward_with_cuts(loss: &Tensor, cuts: &[&Tensor]) -> Gradients {
    assert_eq!(
        loss.numel(),
        1,
        "backward: loss must be a scalar, got shape {:?}",
        loss.shape()
    );
    let mut map: HashMap<NodeId, Tensor> = HashMap::new();
    if !loss.requires_grad() {
        return Gradients { map };
    }
    let cutset: HashSet<NodeId> = cuts.iter().map(|t| t.id()).collect();
    let tape = Tape::trace_with_cuts(loss, &cutset);
    map.insert(loss.id(), Tensor::ones(loss.shape()));
    for node in tape.nodes.iter().rev() {
        let Some(g) = map.get(&node.id()).cloned() else {
            // Reachable only through cut nodes: no cotangent arrives.
            continue;
        };
        if cutset.contains(&node.id()) && node.id() != loss.id() {
            continue;
        }
        for (slot, contrib) in ops::vjp(node, &g) {
            let parent = &node.parents()[slot];
            if !parent.requires_grad() {
                continue;
            }
            debug_assert_eq!(
                contrib.shape(),
                parent.shape(),
                "vjp shape mismatch flowing into parent"
            );
            match map.entry(parent.id()) {
                Entry::Occupied(mut e) => {
                    let sum = e.get().add(&contrib);
                    e.insert(sum);
                }
                Entry::Vacant(e) => {
                    e.insert(contrib);
                }
            }
        }
    }
    Gradients { map }
}

#[cfg(test)]
mod tests {
    use super::super::softmax_cross_entropy;
    use super::*;

    #[test]
    fn tape_orders_parents_before_children() {
        let x = Tensor::leaf(vec![1.0, 2.0], &[2]);
        let y = x.exp().mul(&x.sin()).sum_all();
        let tape = Tape::trace(&y);
        let pos: HashMap<NodeId, usize> = tape
            .nodes()
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id(), i))
            .collect();
        for n in tape.nodes() {
            for p in n.parents() {
                if let Some(&pp) = pos.get(&p.id()) {
                    assert!(pp < pos[&n.id()], "parent after child in tape");
                }
            }
        }
    }

    #[test]
    fn chain_rule_through_shared_subexpression() {
        // f(x) = x^3 as (x*x)*x: grad 3x^2 with accumulation across slots
        let x = Tensor::leaf(vec![2.0], &[1]);
        let f = x.mul(&x).mul(&x).sum_all();
        let g = backward(&f);
        assert!((g.get(&x).unwrap().data()[0] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn second_order_through_gradient_tensors() {
        // f = x^3 -> f' = 3x^2 -> f'' = 6x
        let x = Tensor::leaf(vec![2.0], &[1]);
        let f = x.mul(&x).mul(&x).sum_all();
        let g = backward(&f);
        let gx = g.get(&x).unwrap().clone();
        let h = backward(&gx.sum_all());
        assert!((h.get(&x).unwrap().data()[0] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn cuts_block_propagation_but_record_gradient() {
        // c = (2a)^2: dc/db at b=2a is 2b=12; with a cut at b, a gets nothing.
        let a = Tensor::leaf(vec![3.0], &[1]);
        let b = a.scale(2.0);
        let c = b.mul(&b).sum_all();

        let free = backward(&c);
        assert!((free.get(&a).unwrap().data()[0] - 24.0).abs() < 1e-12);
        assert!((free.get(&b).unwrap().data()[0] - 12.0).abs() < 1e-12);

        let cut = backward_with_cuts(&c, &[&b]);
        assert!((cut.get(&b).unwrap().data()[0] - 12.0).abs() < 1e-12);
        assert!(cut.get(&a).is_none(), "cut must block flow into parents");
    }

    #[test]
    fn cut_gradients_remain_differentiable() {
        // Gradient extracted at a cut still references the forward graph, so
        // a second backward through it reaches the original leaf.
        let a = Tensor::leaf(vec![3.0], &[1]);
        let b = a.scale(2.0);
        let c = b.mul(&b).sum_all();
        let gb = backward_with_cuts(&c, &[&b]).get(&b).unwrap().clone();
        // gb = 2b = 4a: d(gb)/da = 4
        let g2 = backward(&gb.sum_all());
        assert!((g2.get(&a).unwrap().data()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn detached_loss_yields_no_gradients() {
        let x = Tensor::leaf(vec![1.0], &[1]);
        let loss = x.exp().detach().sum_all();
        let g = backward(&loss);
        assert!(g.is_empty());
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_onehot_over_batch() {
        let logits = Tensor::leaf(vec![0.0, 0.0, 1.0, -1.0], &[2, 2]);
        let loss = softmax_cross_entropy(&logits, &[0, 1]);
        let g = backward(&loss);
        let gl = g.get(&logits).unwrap();
        let p0 = 0.5; // softmax of [0,0]
        let p1 = 1.0 / (1.0 + (-2.0f64).exp()); // softmax of [1,-1], class 0
        let expect = [(p0 - 1.0) / 2.0, p0 / 2.0, p1 / 2.0, (1.0 - p1 - 1.0) / 2.0];
        for (got, want) in gl.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }
}
