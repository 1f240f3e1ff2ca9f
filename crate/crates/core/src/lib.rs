//! Convolutional networks with trainable alpha-integration pooling.
//!
//! The pooling layer in [`alpha`] aggregates each window with a power mean
//! whose type is set by a scalar `alpha` learned by back-propagation:
//! `alpha = -1` averages, `alpha = 1` takes the geometric mean, and large
//! negative `alpha` approaches max pooling. [`pool`] holds the max, average
//! and lp baselines, [`layers`] and [`model`] the rest of the network, and
//! [`experiment`] the training harness behind the `alphapool` binary.

pub mod alpha;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
mod fastmath;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod pool;
pub mod tensor;

pub use alpha::{
    alpha_integrate, alpha_pool_backward, alpha_pool_forward, f_alpha, f_alpha_inv, relu_plus,
    relu_plus_backward, AlphaPool, PoolGeometry, ReluPlus, EPS_POS,
};
pub use error::{Error, Result};
pub use layers::{Conv2d, Dense, Layer, Param, ParamRole, Relu};
pub use model::{build_model, ActivationKind, Model, ModelConfig, PoolKind};
pub use optim::{LrSchedule, Sgd};
pub use tensor::{Scalar, Shape, Tensor};
