//! Dense arrays, reverse-mode differentiation, and the AdamW optimizer.

mod array;
mod graph;
mod optim;

pub use array::{softmax_rows, Array, Scalar};
pub use graph::{Gradients, Graph, NodeId, SeqLayout};
pub use optim::{AdamW, AdamWConfig};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("backward needs a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },
    #[error("{0}")]
    Layout(String),
}
