//! Minimal reverse-mode differentiation kernel: tensors, a recording tape,
//! multilayer perceptrons, frequency encoding, Adam and gradient checking.

mod adam;
mod encoding;
pub mod gradcheck;
mod graph;
mod mlp;
mod params;
mod tensor;

pub use adam::{Adam, Moments};
pub use encoding::{encode_vec, encoded_dim, positional_encode};
pub use graph::{CustomOp, Gradients, Graph, SparseMap, Unary, Var};
pub use mlp::{Activation, Layer, Mlp, OutputInit};
pub use params::{ParamId, ParamStore};
pub use tensor::{Real, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("non-finite value in {op}")]
    NonFinite { op: String },
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{mlp} layer {layer}: expected input width {expected}, got {got}")]
    LayerDim {
        mlp: String,
        layer: usize,
        expected: usize,
        got: usize,
    },
    #[error("backward seed must be a scalar, got shape {shape:?}")]
    NonScalarSeed { shape: Vec<usize> },
    #[error("duplicate parameter name {name}")]
    DuplicateParam { name: String },
    #[error("unknown parameter group {name:?}; valid groups: {valid:?}")]
    UnknownGroup { name: String, valid: Vec<String> },
}
