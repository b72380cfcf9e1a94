//! Dense `f64` tensors with a reverse-mode gradient tape.

mod gradcheck;
pub(crate) mod kernels;
mod ops;
mod optim;
mod tape;
mod value;

pub use gradcheck::{check_gradients, relative_error, GradCheckOptions, GradCheckReport, FD_STEP, REL_ERR_FLOOR};
pub use ops::LAYER_NORM_EPS;
pub use optim::AdamW;
pub use tape::{Gradients, Tape, Var};
pub use value::Tensor;
