//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] owns every value computed during a forward pass. Inputs are
//! registered with [`Tape::leaf`] (differentiable) or [`Tape::constant`],
//! primitives are applied through [`Tape::apply`] or the typed wrappers, and
//! [`Tape::backward`] walks the records in reverse to produce [`Gradients`].
//!
//! ```
//! use stnas_autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x).data(), &[6.0]);
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod error;
mod gradcheck;
mod kernels;
mod primitive;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, grad_check_many};
pub use primitive::{Attrs, Primitive};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
