//! Precipitation nowcasting with a ConvLSTM U-Net: network and training,
//! class-based and regression losses, gridded data handling, a synthetic
//! storm simulator and forecast verification.

pub mod checkpoint;
pub mod convlstm;
pub mod datapipe;
mod error;
pub mod losses;
pub mod network;
pub mod seeds;
pub mod stormsim;
pub mod train;
pub mod verify;

pub use error::{CoreError, Result};
pub use nowcast_tensor as tensor;
