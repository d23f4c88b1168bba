//! Teacher and student encoders: a strided CNN front-end over raw samples,
//! a convolutional positional embedding and a stack of post-norm
//! transformer blocks.

mod config;
mod encoder;

use thiserror::Error;

use crate::tensor::TensorError;

pub use config::{is_front_end, layer_prefix, ConvLayer, ModelConfig};
pub use encoder::{linear, EncoderModel, Mode};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input of {len} samples is shorter than the receptive field of {min}")]
    InputTooShort { len: usize, min: usize },
    #[error("requested layer {requested} but the model has {depth} transformer layers")]
    LayerOutOfRange { requested: usize, depth: usize },
    #[error("missing parameter {0}")]
    MissingParameter(String),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error("parameter {name} has shape {got:?}, expected {expected:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
