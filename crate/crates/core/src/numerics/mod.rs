//! Tensor substrate, reverse-mode differentiation, layer primitives and the
//! gradient-check harness.

mod checkpoint;
mod gradcheck;
mod layers;
mod params;
mod tape;
mod tensor;

pub use checkpoint::{Container, FORMAT_VERSION};
pub use gradcheck::{grad_check, grad_check_values, relative_error, GradCheckReport};
pub use layers::{
    affine, batchnorm1d, blstm_layer, conv1d, lstm_cell_step, softmax, BatchNormMode,
    BlstmLayerParams, LstmCellState, LstmParams,
};
pub use params::{Gradients, ParamId, Parameter, ParameterStore};
pub use tape::{BatchStats, Tape, Var, BN_EPS};
pub use tensor::Tensor;

