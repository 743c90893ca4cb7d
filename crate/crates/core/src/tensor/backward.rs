use std::collections::{HashMap, HashSet};

use super::{shape_err, Result, Scalar, Tensor, TensorError};

/// Leaf gradients produced by one backward pass, keyed by tensor id.
#[derive(Debug, Default)]
pub struct Gradients<T> {
    by_id: HashMap<u64, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.by_id.get(&t.id()).map(Vec::as_slice)
    }

    /// Gradient as a tensor shaped like `t`; zeros if the leaf was unreachable.
    pub fn tensor_for(&self, t: &Tensor<T>) -> Tensor<T> {
        match self.by_id.get(&t.id()) {
            Some(g) => Tensor::from_parts(t.shape().to_vec(), g.clone(), false, None, 0),
            None => Tensor::zeros(t.shape().to_vec()),
        }
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }

    pub fn bytes(&self) -> usize {
        self.by_id.values().map(|g| g.len() * T::BYTES).sum()
    }
}

/// Backpropagates from a scalar loss.
pub fn backward<T: Scalar>(loss: &Tensor<T>) -> Result<Gradients<T>> {
    if loss.numel() != 1 {
        return Err(TensorError::NotScalar(loss.shape().to_vec()));
    }
    backward_with(loss, &[T::one()])
}

/// Backpropagates an upstream gradient `seed` (same shape as `root`).
///
/// Leaves reached by the pass have their stored gradient overwritten; the same
/// values are returned. A graph can be consumed only once.
pub fn backward_with<T: Scalar>(root: &Tensor<T>, seed: &[T]) -> Result<Gradients<T>> {
    if seed.len() != root.numel() {
        return Err(shape_err(
            "backward",
            format!("seed has {} elements, root {:?}", seed.len(), root.shape()),
        ));
    }
    if root.mark_consumed() {
        return Err(TensorError::GraphAlreadyConsumed);
    }
    let mut result = Gradients {
        by_id: HashMap::new(),
    };
    if !root.requires_grad() {
        return Ok(result);
    }

    let order = topo_order(root);
    let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
    pending.insert(root.id(), seed.to_vec());

    for node in order.iter().rev() {
        let Some(g) = pending.remove(&node.id()) else {
            continue;
        };
        match node.grad_fn() {
            Some(gf) => {
                let parent_grads = (gf.backward)(&g, &gf.parents);
                for (parent, pg) in gf.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !parent.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(pg.len(), parent.numel());
                    match pending.get_mut(&parent.id()) {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(pg) {
                                *a = *a + v;
                            }
                        }
                        None => {
                            pending.insert(parent.id(), pg);
                        }
                    }
                }
            }
            None => {
                node.set_grad(g.clone());
                result.by_id.insert(node.id(), g);
            }
        }
    }
    Ok(result)
}

/// Post-order over gradient-carrying nodes reachable from `root`.
fn topo_order<T: Scalar>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack: Vec<(Tensor<T>, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        stack.push((node.clone(), true));
        if let Some(gf) = node.grad_fn() {
            for p in gf.parents.iter().rev() {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{add, matmul, mul, scale, sum};

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::<f64>::param(vec![2, 3], vec![0.5; 6]).unwrap();
        let g = backward(&sum(&x).unwrap()).unwrap();
        assert_eq!(g.get(&x).unwrap(), &[1.0; 6]);
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn half_square_gives_identity() {
        let vals = vec![1.5, -2.0, 0.25, 3.0];
        let x = Tensor::<f64>::param(vec![4], vals.clone()).unwrap();
        let loss = scale(&sum(&mul(&x, &x).unwrap()).unwrap(), 0.5).unwrap();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vals);
    }

    #[test]
    fn non_scalar_and_reuse_are_errors() {
        let x = Tensor::<f64>::param(vec![2], vec![1.0, 2.0]).unwrap();
        let y = add(&x, &x).unwrap();
        assert_eq!(backward(&y).unwrap_err(), TensorError::NotScalar(vec![2]));
        let loss = sum(&y).unwrap();
        backward(&loss).unwrap();
        assert_eq!(backward(&loss).unwrap_err(), TensorError::GraphAlreadyConsumed);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        let a = Tensor::<f64>::param(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::<f64>::new(vec![2, 1], vec![3.0, 4.0]).unwrap();
        let h = matmul(&a, &w).unwrap();
        let loss = sum(&add(&h, &h).unwrap()).unwrap();
        let g = backward(&loss).unwrap();
        assert_eq!(g.get(&a).unwrap(), &[6.0, 8.0]);
        assert!(g.get(&w).is_none());
    }
}
