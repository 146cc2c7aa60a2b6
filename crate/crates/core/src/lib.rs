//! Weakly supervised object localization with a local-continuity
//! transformer, at desk scale.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`autograd`]), a
//! miniature vision transformer ([`vit`]), the parameter-free patch relation
//! map ([`rpam`]), the cue digging head ([`cdm`]), CAM-style localization and
//! metrics ([`localization`]) and the synthetic-data training harness
//! ([`harness`], [`data`]).

pub mod autograd;
pub mod cdm;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod init;
pub mod kernels;
pub mod localization;
pub mod model;
pub mod optim;
pub mod rpam;
pub mod tensor;
pub mod vit;

pub use autograd::{Tape, Var};
pub use config::RunConfig;
pub use error::{LctrError, Result};
pub use model::{LctrModel, ModelConfig};
pub use tensor::{ParamStore, Parameter, Tensor};
