//! Dense-tensor reverse-mode differentiation, batch normalization, Adam and
//! gradient checking. Every trainable component of the crate runs on this.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{
    grad_check, grad_check_many, relative_error, GradCheckReport, GRAD_NOISE_FLOOR,
};
pub use optim::{adam_update, MilestoneSchedule, OptimState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use params::{Bindings, Param, ParamId, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use tape::{Axis, BatchNormMode, BatchStats, ElementwiseOp, Tape, Var};
pub use tensor::{softmax, Tensor};

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;
