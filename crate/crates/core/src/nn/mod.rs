//! Small neural-network engine: fully-connected and convolution layers, ReLU,
//! and a softmax cross-entropy head, with exact backpropagation into a flat
//! gradient vector.

mod layer;
mod network;
mod tensor;

pub use layer::{ConvGeometry, Layer, LayerKind};
pub use network::{FlatGradient, Network};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("invalid tensor shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("shape mismatch at layer {layer}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        layer: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("layer {layer}: {msg}")]
    Geometry { layer: usize, msg: String },
    #[error("backward called before forward")]
    BackwardBeforeForward,
    #[error("label shape {found:?} does not match predictions {expected:?}")]
    LabelShape {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("parameter layout mismatch: expected {expected} values, found {found}")]
    LayoutLength { expected: usize, found: usize },
    #[error("network has no softmax cross-entropy output layer")]
    NoLossLayer,
    #[error("empty batch")]
    EmptyBatch,
}
