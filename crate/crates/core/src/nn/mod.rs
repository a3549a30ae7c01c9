//! Minimal convolutional inference engine for the frozen backbones.

mod backbone;
mod graph;
pub mod ops;
pub mod spec;

pub use backbone::{pattern_input, pattern_params, random_params, Backbone, BackboneId, BackboneSource, BACKBONE_DIR_ENV};
pub use graph::{params_digest, params_to_bytes, split_params, Graph};
pub use ops::Tensor;
pub use spec::{Activation, GraphSpec, NodeSpec, Op, Padding};
