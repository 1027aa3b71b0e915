//! Temporal shift sequence classifiers on a small reverse-mode autodiff core.


pub mod accounting;
pub mod autograd;
pub mod blocks;
pub mod data;


pub mod error;
pub mod gradcheck;

pub mod rng;
pub mod shift;
pub mod tensor;
pub mod train;


pub use autograd::{Graph, Var};
pub use error::{Error, FormatError, Result};
pub use shift::{temporal_shift, Direction, Placement, ShiftAugment, ShiftConfig, ShiftPlan};
pub use tensor::{DType, Real, Tensor};
