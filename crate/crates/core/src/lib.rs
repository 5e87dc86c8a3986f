//! Post-training quantization with power-of-two (bit-shift) fixed-point
//! formats, dataflow-based layer fusion and reconstruction-error calibration,
//! plus a bit-exact integer-only inference engine.
//!
//! The pipeline is:
//!
//! 1. [`modelio::load_model`] reads a float model (JSON manifest + blob).
//! 2. [`graph::fold_bn`] absorbs batch norms into adjacent convolutions.
//! 3. [`graph::fuse`] groups layers into unified modules, each quantized once.
//! 4. [`calibrate::calibrate_graph`] grid-searches fractional bits per module.
//! 5. [`engine::QuantizedModel`] runs the result with integer arithmetic only.

pub mod calibrate;
pub mod engine;
pub mod error;
pub mod fixedpoint;
pub mod graph;
pub mod modelio;
pub mod nnops;
pub mod report;
pub mod tensor;

pub use error::{Error, Result};
pub use fixedpoint::{QuantParams, QuantizedTensor};
pub use tensor::Tensor;
