//! Federated Domain Shift Eraser: a desk-scale federated learning simulator
//! built around decomposed neural layers. Each layer splits into a shared
//! domain-feature extractor and a small personalized domain-shift eraser, a
//! consistency regularizer pulls client feature statistics toward the global
//! ones, and the server aggregates shared updates with a conflict-free
//! consensus direction and personalized parameters with similarity-aware
//! attention.

pub mod aggregation;
pub mod bundle;
pub mod data;
pub mod error;
pub mod federation;
pub mod model;
pub mod regularizer;
pub mod tape;
pub mod tensor;

pub use error::{ErrorCategory, FdseError, Result};
pub use tensor::{Real, Tensor};
