//! Minimal reverse-mode differentiation over dense `f64` matrices.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{check_all, check_params, rel_err, GradCheckReport, FD_STEP, REL_ERR_FLOOR};
pub use optim::{Adam, AdamConfig};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var, LN_EPS};
pub use tensor::Tensor;
