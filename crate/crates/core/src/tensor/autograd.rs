use std::collections::{HashMap, HashSet};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

impl<S: Scalar> Tensor<S> {
    /// Backpropagates from a single-element tensor.
    ///
    /// Gradients are accumulated into the `grad` slot of every reachable leaf
    /// that requires one; calling this twice without zeroing doubles them.
    /// Intermediate gradients are released as soon as they are consumed.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = topo_order(self);
        let mut pending: HashMap<u64, Vec<S>> = HashMap::new();
        pending.insert(self.id(), vec![S::one()]);

        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            match node.grad_fn() {
                None => node.accumulate_grad(&grad),
                Some(f) => {
                    let needs: Vec<bool> = f.inputs.iter().map(Tensor::requires_grad).collect();
                    let input_grads = (f.backward)(&grad, &needs);
                    debug_assert_eq!(input_grads.len(), f.inputs.len(), "{}", f.name);
                    for ((input, g), need) in f.inputs.iter().zip(input_grads).zip(needs) {
                        let (Some(g), true) = (g, need) else { continue };
                        debug_assert_eq!(g.len(), input.numel(), "{} grad size", f.name);
                        match pending.get_mut(&input.id()) {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                            None => {
                                pending.insert(input.id(), g);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Post-order of the gradient-requiring subgraph rooted at `root`.
fn topo_order<S: Scalar>(root: &Tensor<S>) -> Vec<Tensor<S>> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    // (node, children already pushed)
    let mut stack = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        if let Some(f) = node.grad_fn() {
            for input in f.inputs.iter().rev() {
                if input.requires_grad() && !visited.contains(&input.id()) {
                    stack.push((input.clone(), false));
                }
            }
        }
    }
    order
}
