//! Communication-efficient federated semantic segmentation.
//!
//! Each client distills a frozen local UNet teacher into a compact student;
//! only the student travels to the server, which averages it with FedAvg.
//! The crate also provides label- and quantity-skew partitioners, legend
//! based mask decoding, a synthetic corpus generator, and the metrics and
//! byte ledger used to report accuracy and compression.

pub mod container;
pub mod data;
pub mod error;
pub mod federation;
pub mod loss;
pub mod metrics;
pub mod model;
mod ops;
pub mod partition;
pub mod report;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{build_student, build_teacher, count_parameters, LogitMap, ModelSpec, Unet, WeightSet};
pub use tensor::{Real, Tensor};
