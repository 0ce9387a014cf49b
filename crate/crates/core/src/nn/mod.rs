//! Numerical substrate: matrices, the differentiation tape, parameter
//! trees, optimizer and schedule.

pub mod checkpoint;
mod dropout;
mod float;
pub mod gradcheck;
mod graph;
mod losses;
mod matrix;
pub mod optim;
mod params;
pub mod scan;
mod schedule;
mod seq;

pub use dropout::Dropout;
pub use float::Float;
#[allow(unused_imports)]
pub(crate) use graph::{sigmoid, softplus};
pub use graph::{Gradients, Graph, Segments, Unary, Var};
pub use losses::{duplicate_pairs, KOLEO_FLOOR};
pub use matrix::{axpy, dot, matmul, Matrix};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use params::{value_and_grad, Bound, GradientTree, ParameterTree};
pub use schedule::{DecayGranularity, LrSchedule};
