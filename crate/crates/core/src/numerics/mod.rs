//! Dense tensors, tape-based reverse-mode autodiff, and the SGD/Adam optimizers.

mod checkpoint;
mod elem;
mod gradcheck;
mod optim;
mod params;
mod tape;
mod suite;
mod tensor;

pub use checkpoint::{
    load_checkpoint, param_file_name, read_raw_f32, save_checkpoint, write_raw_f32,
    LoadedCheckpoint, OptimizerMeta, FORMAT_VERSION, META_FILE,
};
pub use elem::Elem;
pub use gradcheck::{
    analytic_gradients, check_against, finite_diff_check, rel_error, GradCheckConfig,
    GradCheckReport, ParamCheck,
};
pub use optim::{adam_step, sgd_step, AdamConfig, AdamState};
pub use params::ParamStore;
pub use tape::{Bound, Gradients, Tape, Var};
pub use suite::{check_primitive, primitive_suite, PRIMITIVES};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("non-finite numeric input: {0}")]
    NonFinite(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("structural error: {0}")]
    Structure(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("format error: {0}")]
    Format(String),
}
