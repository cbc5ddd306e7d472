//! Dense tensors with a reverse-mode gradient tape and an Adam optimizer.
//!
//! Only the operations the detector needs are provided: matrix products
//! (dense and constant-sparse), elementwise nonlinearities, column slicing,
//! per-row cosine, and the scalar reductions used by the losses.

mod adam;
mod sparse;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use sparse::CsrMatrix;
pub use tape::{bce_value, cosine, sigmoid, Tape, Var, BCE_EPS, COSINE_EPS};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    Length { shape: Vec<usize>, len: usize },
    #[error("column slice {start}..{end} out of range for {cols} columns")]
    Slice { start: usize, end: usize, cols: usize },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),
}
