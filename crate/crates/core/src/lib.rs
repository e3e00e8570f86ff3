pub mod annotation;
pub mod dnm;
pub mod metrics;
pub mod scalar;
pub mod synth;
pub mod tensor;

pub use scalar::Real;
