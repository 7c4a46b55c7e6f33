pub mod attack;
pub mod autodiff;
pub mod colorspace;
pub mod error;
pub mod eval;
pub mod frequency;
pub mod losses;
pub mod model;
pub mod optim;

pub use autodiff::{GradMap, Tape, Tensor, Var};
pub use error::{Error, Result};
pub use model::{ModelConfig, VictimModel};
