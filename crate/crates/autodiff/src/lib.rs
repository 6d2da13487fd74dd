//! Dense `f64` tensors and a taped reverse-mode differentiation engine.
//!
//! Gradients are built from the same recorded operations as the forward
//! pass, so they can be differentiated again. This is what the meta-learning
//! step needs: a loss evaluated at weights that were themselves produced by a
//! gradient step.
//!
//! ```
//! use drgcl_autodiff::{GradGraph, Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let y = x.mul(&x).unwrap().sum().unwrap();
//! let g = tape.backward(&y, &[x]).unwrap();
//! assert_eq!(g[0].data(), &[2.0, 4.0, 6.0]);
//! # let _ = GradGraph::Retain;
//! ```

mod error;
mod ops;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use tape::{GradGraph, Tape, Var, DOMAIN_FLOOR};
pub use tensor::Tensor;
