//! Meta-curvature for gradient-based meta-learning.
//!
//! The crate provides dense tensor algebra ([`tensor`]), factored learnable
//! gradient preconditioners ([`curvature`]), a small ReLU regression network
//! with exact gradients ([`model`]), MAML-family inner-update rules and
//! their meta-gradients ([`inner`]), and an ADAM-driven meta-training loop
//! on few-shot sinusoid regression ([`trainer`]). [`harness`] wires these
//! into the command-line workflows.

pub mod adam;
pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod curvature;
pub mod diag;
pub mod error;
pub mod format;
pub mod harness;
pub mod inner;
pub mod model;
pub mod rng;
pub mod task;
pub mod tensor;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{Method, TrainConfig};
pub use curvature::{CurvatureBlock, LayerShape, Variant};
pub use error::{Error, Result};
pub use inner::{InnerRule, MetaGradMode};
pub use model::{Mlp, ParamVector};
pub use task::{Episode, SineTask};
pub use tensor::{Matrix, Tensor};
pub use trainer::{evaluate, meta_train, EvalResult, MetricsRow, Trainer};
