//! Functional simulator for crossbar-aware dendritic convolution (CADC).
//!
//! Convolution kernels are unrolled and split across size-limited crossbars.
//! Each crossbar segment produces a partial sum (psum); CADC applies a
//! dendritic nonlinearity to every psum before accumulation, which zeroes
//! negative psums and makes the psum stream sparse. The crate models the
//! float reference path, the quantized hardware path (ternary weights, an
//! in-memory ADC and its noise), the sparse psum codec with zero-skipping
//! accumulation, and an accounting cost model.

pub mod dendrite;
pub mod error;
pub mod par;
pub mod partition;
pub mod tensor;
pub mod quant;
pub mod codec;
pub mod tensor_io;
pub mod cost;
pub mod net;
pub mod data;
pub mod train;
pub mod harness;

pub use error::{Error, Result};
