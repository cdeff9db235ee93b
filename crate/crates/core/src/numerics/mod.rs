//! Dense tensors, reverse-mode differentiation, and gradient checking.

mod gradcheck;
mod init;
mod tape;
mod tensor;
pub mod tnsr;

pub use gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
pub use init::Initializer;
pub use tape::{softmax_raw, Gradients, Tape, Var};
pub use tensor::Tensor;

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        Param { name: name.into(), value }
    }
}

/// Anything that owns named parameters.
pub trait Parameterized {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    /// Total number of trainable scalars.
    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.numel());
        n
    }
}

impl Parameterized for Vec<Param> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.iter().for_each(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.iter_mut().for_each(f);
    }
}
