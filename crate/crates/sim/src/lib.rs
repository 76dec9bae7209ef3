//! Vehicle mobility, V2X radio simulation and evaluation metrics.

pub mod metrics;
pub mod mobility;
pub mod radio;
