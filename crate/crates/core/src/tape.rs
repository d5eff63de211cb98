//! Reverse-mode differentiation over recorded ops.
//!
//! Tensor ids are allocated in creation order, so every op's inputs carry
//! smaller ids than its output. Sorting the nodes reachable from a loss by id
//! therefore yields a topological order; the backward pass walks it once in
//! reverse, accumulating vector-Jacobian products per node id.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BwdCtx, Tensor};

/// The ordered list of recorded operations reachable from one loss tensor.
pub struct Tape<E: Scalar> {
    nodes: Vec<Tensor<E>>,
}

impl<E: Scalar> Tape<E> {
    /// Collect every tracked ancestor of `root` in topological order.
    pub fn trace(root: &Tensor<E>) -> Self {
        let mut seen: HashMap<u64, Tensor<E>> = HashMap::new();
        let mut stack = vec![root.clone()];
        while let Some(t) = stack.pop() {
            if seen.contains_key(&t.id()) {
                continue;
            }
            if let Some(rec) = t.recording() {
                for input in &rec.inputs {
                    if input.recording().is_some() || input.requests_grad() {
                        stack.push(input.clone());
                    }
                }
            }
            seen.insert(t.id(), t);
        }
        let mut nodes: Vec<Tensor<E>> = seen.into_values().collect();
        nodes.sort_by_key(|t| t.id());
        Tape { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Node ids in tape order (ascending, hence topological).
    pub fn node_ids(&self) -> Vec<u64> {
        self.nodes.iter().map(|t| t.id()).collect()
    }

    /// Reverse sweep. Fills the `grad` buffer of every tensor on the tape
    /// that requests one and returns the number of op rules invoked.
    pub fn run(&self, root: &Tensor<E>) -> Result<usize> {
        let mut grads: HashMap<u64, Vec<E>> = HashMap::new();
        grads.insert(root.id(), vec![E::one()]);

        let mut visited_ops = 0usize;
        for node in self.nodes.iter().rev() {
            // Nodes that never feed the root carry no gradient; the only such
            // node in practice is an untracked leaf, which has no recording.
            let Some(g) = grads.remove(&node.id()) else {
                continue;
            };
            if node.requests_grad() {
                node.set_grad(g.clone());
            }
            let Some(rec) = node.recording() else {
                continue;
            };
            visited_ops += 1;
            let needs: Vec<bool> = rec.inputs.iter().map(|t| t.tracked()).collect();
            let ctx = BwdCtx {
                out_grad: &g,
                out_data: node.data(),
                needs: &needs,
            };
            let input_grads = (rec.backward)(&ctx);
            debug_assert_eq!(input_grads.len(), rec.inputs.len());
            for (input, ig) in rec.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                debug_assert_eq!(ig.len(), input.numel());
                match grads.entry(input.id()) {
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        for (acc, v) in e.get_mut().iter_mut().zip(&ig) {
                            *acc = *acc + *v;
                        }
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(ig);
                    }
                }
            }
        }
        Ok(visited_ops)
    }
}

/// Backpropagate from a scalar-like loss, filling the `grad` field of every
/// tensor with `requires_grad` reachable from it. Gradients are replaced,
/// not accumulated, across calls.
pub fn backward<E: Scalar>(loss: &Tensor<E>) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::contract(format!(
            "backward needs a single-element loss, shape is {}",
            loss.shape()
        )));
    }
    let tape = Tape::trace(loss);
    tape.run(loss)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{add, mul, scale, sum_all, Tensor};

    #[test]
    fn linear_map_gradient() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![1.0, -2.0, 3.0, 0.5])
            .unwrap()
            .requires_grad();
        let loss = sum_all(&scale(&x, 2.0));
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0; 4]);
    }

    #[test]
    fn quadratic_gradient() {
        let x = Tensor::from_vec([1, 1, 1, 1], vec![3.0]).unwrap().requires_grad();
        let loss = sum_all(&mul(&x, &x).unwrap());
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn diamond_graph_accumulates_once() {
        // loss = sum(x + x) => grad 2, and the shared node is replayed once.
        let x = Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]).unwrap().requires_grad();
        let y = add(&x, &x).unwrap();
        let loss = sum_all(&y);
        let tape = Tape::trace(&loss);
        let ids = tape.node_ids();
        assert!(ids.windows(2).all(|w| w[0] < w[1]), "tape must be topological");
        let ops = tape.run(&loss).unwrap();
        assert_eq!(ops, 2); // add, sum
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn inputs_precede_outputs_on_tape() {
        let x = Tensor::from_vec([1, 1, 1, 2], vec![0.5, 1.5]).unwrap().requires_grad();
        let y = scale(&x, 3.0);
        let z = mul(&y, &y).unwrap();
        let loss = sum_all(&z);
        let tape = Tape::trace(&loss);
        for node in [&y, &z, &loss] {
            for pid in node.parent_ids() {
                assert!(pid < node.id());
            }
        }
        assert_eq!(tape.len(), 4); // x, y, z, loss
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let x = Tensor::<f64>::ones([1, 1, 1, 2]).unwrap().requires_grad();
        let y = scale(&x, 1.0);
        assert!(backward(&y).is_err());
    }

    #[test]
    fn backward_replaces_grads_between_calls() {
        let x = Tensor::from_vec([1, 1, 1, 1], vec![2.0]).unwrap().requires_grad();
        let loss1 = sum_all(&scale(&x, 5.0));
        backward(&loss1).unwrap();
        assert_eq!(x.grad().unwrap(), vec![5.0]);
        let loss2 = sum_all(&scale(&x, 7.0));
        backward(&loss2).unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }
}
