//! Minimal define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Leaves are added
//! with [`Graph::param`] (gradient wanted) or [`Graph::constant`]; each
//! operation stores its output value and a [`Backward`] rule. Calling
//! [`Graph::backward`] on a scalar sweeps the tape once in reverse and returns
//! the gradient of every node that requires one.
//!
//! Operations in other modules (butterfly experts, routing, attention) plug in
//! through [`Graph::record`] with their own [`Backward`] implementation.

mod attention;
mod ops;
mod tensor;

pub use attention::CausalAttention;
pub(crate) use ops::softmax_in_place as softmax_row;
pub use tensor::{matmul_plain, Tensor};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule of a recorded operation.
pub trait Backward<T: Real> {
    /// Gradients with respect to each input, given the upstream gradient of
    /// the output. Entries for inputs with `needs[i] == false` may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

struct Node<T: Real> {
    value: Tensor<T>,
    requires_grad: bool,
    inputs: Vec<usize>,
    op: Option<Box<dyn Backward<T>>>,
}

/// Tape of recorded operations, in topological order by construction.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(Node {
            value,
            requires_grad: true,
            inputs: Vec::new(),
            op: None,
        })
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Node {
            value,
            requires_grad: false,
            inputs: Vec::new(),
            op: None,
        })
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an operation whose output `value` was computed from `inputs`.
    /// The rule is dropped when no input needs a gradient.
    pub fn record(
        &mut self,
        inputs: &[Var],
        value: Tensor<T>,
        op: impl Backward<T> + 'static,
    ) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Node {
            value,
            requires_grad,
            inputs: inputs.iter().map(|v| v.0).collect(),
            op: requires_grad.then(|| Box::new(op) as Box<dyn Backward<T>>),
        })
    }

    /// One reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::shape("backward", root.value.shape(), &[]));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(root.value.shape().to_vec(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = node.op.as_ref() else { continue };
            let Some(grad) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
            let input_grads = op.backward(&inputs, &node.value, &grad, &needs);
            for ((&input, g), need) in node.inputs.iter().zip(input_grads).zip(needs) {
                let (Some(g), true) = (g, need) else { continue };
                debug_assert_eq!(g.shape(), self.nodes[input].value.shape());
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            // keep the gradient for leaves and queried intermediates
            grads[idx] = Some(grad);
        }
        Ok(Gradients { grads })
    }
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central finite-difference checks shared by the module tests.

    use super::*;

    /// Compares the analytic gradient of `f` at `inputs` with central
    /// differences. `f` must build a scalar from the given leaves.
    pub fn check<F>(inputs: &[Tensor<f64>], f: F, step: f64, tol: f64)
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        let grads = g.backward(out).unwrap();

        let eval = |ins: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
            let out = f(&mut g, &vars);
            g.value(out).item()
        };

        for (which, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[which]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
            for e in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[e] += step;
                let mut minus = inputs.to_vec();
                minus[which].data_mut()[e] -= step;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
                let an = analytic.data()[e];
                let rel = (an - fd).abs() / (fd.abs() + 1e-8);
                assert!(
                    rel < tol || (an - fd).abs() < 1e-9,
                    "input {which} elem {e}: analytic {an} vs fd {fd} (rel {rel})"
                );
            }
        }
    }
}
