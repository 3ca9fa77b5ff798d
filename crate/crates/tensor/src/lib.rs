//! Dense f64 tensors, convolution kernels and a reverse-mode autodiff tape.

mod adam;
pub mod conv;
mod error;
mod gemm;
mod graph;
mod init;
pub mod nn;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use conv::{conv_forward, conv_transpose_forward, conv_transpose_to, ConvGeometry, Padding};
pub use error::{Result, TensorError};
pub use graph::{CustomBackward, Gradients, Graph, Var};
pub use init::{fans, xavier_uniform, xavier_uniform_with_fans};
pub use nn::{Activation, DropoutMode, NormMode, RunningStats};
pub use tensor::{strides_of, Tensor};
