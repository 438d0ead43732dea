//! Dense tensors, a reverse-mode tape and the optimizer the trainers share.

mod graph;
pub mod kernels;
mod optim;
mod real;
mod tensor;

pub use graph::{Gradients, Graph, NodeId};
pub use optim::{Adam, LinearDecay};
pub use real::{Precision, Real};
pub use tensor::{ParamId, ParamKey, ParamStore, Tensor};

/// Relative error used by gradient checks: `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}
