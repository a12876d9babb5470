//! TwinFlow training laboratory: self-adversarial any-step flow matching
//! on low-dimensional synthetic distributions.

pub mod autodiff;
pub mod cli;
pub mod data;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod sampler;
pub mod trainer;
pub mod transport;
