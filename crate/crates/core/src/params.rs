//! Named parameter traversal shared by models, optimizers and checkpoints.

use crate::tensor::{Scalar, Tensor};

/// A structure owning trainable tensors.
///
/// Both visitors must yield the same names in the same order; optimizers
/// and checkpoints rely on that order being stable. Gradients are
/// represented as another instance of the same type.
pub trait Parameters<T: Scalar> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<T>));
    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Tensor<T>));

    fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }

    fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.push(t));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        self.visit_mut(&mut |_, t| out.push(t));
        out
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// A copy with every tensor zeroed, used as a gradient accumulator.
    fn zeroed(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.visit_mut(&mut |_, t| t.fill(T::zero()));
        z
    }
}
