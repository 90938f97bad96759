//! Sequence acceleration for fixed-point and first-order optimization
//! iterates: regularized extrapolation from a sliding window, baseline
//! methods to compare against, and the matching theoretical rate bounds.

pub mod adaptive;
pub mod bounds;
pub mod extrapolation;
pub mod harness;
pub mod objectives;
pub mod optimizers;
