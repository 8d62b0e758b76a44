//! Reverse-mode automatic differentiation over f64 arrays.
//!
//! Everything runs in double precision on the CPU, sequentially, so results
//! (including gradients and trained parameters) are bitwise reproducible.

mod conv;
pub mod fftutil;
mod graph;
mod linalg;
mod norm;
mod ops;
mod spectral;

pub use graph::{BackwardCtx, Graph, VarId};
