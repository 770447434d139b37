//! Two-layer cerebellum model and its adversarial-robustness machinery.
//!
//! The granule layer is a fixed sparse random projection followed by ReLU;
//! the Purkinje layer is a dense linear readout over LTD-centered granule
//! responses, trained with RMSprop on the squared error. Attacks (FGSM, PGD,
//! unbounded PGD) use closed-form input gradients of the same loss.
//!
//! The crate is `no_std` with `alloc`. Enable `std` for `std::error::Error`
//! impls, `parallel` to spread attack batches over a rayon pool, and `serde`
//! for (de)serializable configuration and report types.
//!
//! Orientation note: the projection matrix is stored per granule cell, each
//! cell owning exactly `k` (index, weight) pairs. Read as a `d x m` matrix
//! this is `k` nonzeros per *column*, which is the anatomical reading (one
//! granule cell receives `k` mossy-fiber inputs).

#![cfg_attr(not(feature = "std"), no_std)]
// `!(a <= b)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod attacks;
pub mod budget;
pub mod dataset;
pub mod error;
pub mod learning;
pub mod model;
pub mod rng;

mod kernel;
mod par;

pub use attacks::{AttackFamily, AttackSpec, RobustnessReport};
pub use budget::SynapseBudget;
pub use dataset::{one_hot, LabeledDataset};
pub use error::{Error, Result};
pub use learning::{train, Hyperparams, OptimizerState, TrainReport};
pub use model::{
    mse_loss, predict, ForwardTrace, GranuleLayer, Network, NetworkConfig, PurkinjeLayer,
};
