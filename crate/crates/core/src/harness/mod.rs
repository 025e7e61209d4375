//! Toy model, calibration data, the quantization pipeline and evaluation.

pub mod calib;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod routing;

pub use calib::CalibSet;
pub use eval::{eval_kl, eval_recon, Selection};
pub use model::{ModelShape, ToyModel};
pub use pipeline::{run_pipeline, ActivationSource, Method, PipelineOptions, PipelineOutput};
pub use routing::{analyze_routing, RoutingReport};
