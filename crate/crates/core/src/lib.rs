pub mod augment;
pub mod cli;
pub mod config;
pub mod data;
pub mod deploy;
pub mod error;
pub mod eval;
pub mod hpo;
pub mod labels;
pub mod model;
pub mod nn;
pub mod rng;
pub mod service;
pub mod stats;
pub mod tensor;
pub mod xai;
