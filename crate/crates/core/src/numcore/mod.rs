//! Dense tensors and reverse-mode automatic differentiation.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{five_point, grad_check, grad_check_params, rel_err, ParamCheck, REL_ERR_FLOOR};
#[doc(hidden)]
pub use graph::inject_sign_flip;
pub use graph::{Graph, OpKind, Var};
pub use params::{ParamEntry, ParamId, ParamStore};
pub use tensor::{DType, Float, Tensor};

/// Denominator floor for [`Graph::l2_normalize`].
pub const EPS_NORM: f64 = 1e-12;
/// Variance floor for [`Graph::layer_norm`].
pub const EPS_LAYER_NORM: f64 = 1e-6;
