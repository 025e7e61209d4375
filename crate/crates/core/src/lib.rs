//! Nested multi-precision post-training quantization.
//!
//! One quantization pass produces a parent model at a master bit-width `c`
//! whose lower-precision children are obtained by rounding away the least
//! significant bits of every code. The crate covers the whole path from a
//! calibration pass to packed inference and mixed-precision search:
//!
//! - [`grid`]: symmetric group-wise grids and multi-bit scale search
//! - [`slice`]: MSB slicing of codes, layers and models
//! - [`gptq`]: Hessian-based multi-precision quantization of one layer
//! - [`pack`] / [`checkpoint`]: bit-plane storage and the on-disk format
//! - [`kernel`] / [`bench`]: matmul over packed weights and its benchmark
//! - [`evo`]: budget-exact evolutionary search over per-layer bit-widths
//! - [`harness`]: toy model, calibration data, pipeline and evaluation

pub mod bench;
pub mod checkpoint;
pub mod error;
pub mod evo;
pub mod grid;
pub mod gptq;
pub mod harness;
pub mod kernel;
pub mod linalg;
pub mod pack;
pub mod slice;

pub use error::{Error, Result};
