//! Tensor substrate: dense `f64` arrays, a recorded op graph with backward
//! rules, and a finite-difference gradient checker.

mod conv;
mod gradcheck;
mod graph;
mod ops;
mod params;
mod rng;
mod tensor;

pub use conv::Conv2dSpec;
pub use gradcheck::{grad_check, grad_check_at, GradCheckReport};
pub use graph::{BackwardCtx, BackwardFn, Gradients, Graph, Var};
pub use ops::sigmoid;
pub(crate) use ops::gemm;
pub use params::{Bound, ParamId, ParamStore, Parameter};
pub use rng::{seeded, stream, Rng};
pub use tensor::{broadcast_shapes, strides, Tensor};
