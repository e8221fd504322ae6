//! Dense tensors with define-by-run reverse-mode differentiation.
//!
//! Every op is a method on [`Graph`]: it computes its output eagerly and
//! records what its backward rule needs. Calling [`Graph::backward`] on a
//! scalar sweeps the tape once in reverse.

mod element;
mod error;
mod gradcheck;
mod graph;
mod ops;
mod tensor;

pub use element::Element;
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_with, GradCheckOptions, GradCheckReport, Mismatch};
pub use graph::{Graph, Var};
pub use ops::elementwise::{BinaryKind, UnaryKind};
pub use ops::shape::{symmetric_split, Pad2d, PadMode};
pub use ops::spatial::PoolKind;
pub use tensor::Tensor;
