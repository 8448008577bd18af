#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod corruption;
pub mod dataset;
pub mod encoder;
pub mod episode;
pub mod error;
pub mod eval;
pub mod gaussian;
pub mod manifest;
pub mod prototype;
pub mod rng;
pub mod sampler;
pub mod synthetic;
pub mod trainer;
