//! Koopman forward models for offline control data, action-conditioned
//! symmetry generators derived from them, and the augmentation machinery that
//! feeds symmetry-shifted transitions into a conservative Q-learning loop.
//!
//! The crate is organised bottom-up:
//!
//! * [`linalg`]: eigendecomposition, commutant nullspaces, matrix exponential, least squares.
//! * [`nnet`]: a small MLP engine with manual backprop, Huber loss and Adam.
//! * [`koopman`]: the bilinear Koopman forward model, its training and a closed-form fit.
//! * [`symmetry`]: generator extraction, state shifts, augmentation modes, sidecar files.
//! * [`envs`]: cartpole and synthetic bilinear environments plus the fidelity evaluator.
//! * [`offline_rl`]: discrete-action CQL consuming augmented batches.
//! * [`dataset`] and [`container`]: the on-disk formats.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod container;
pub mod dataset;
pub mod envs;
pub mod error;
pub mod koopman;
pub mod linalg;
pub mod nnet;
pub mod offline_rl;
pub mod rng;
pub mod symmetry;

pub use dataset::{Dataset, TransitionTuple};
pub use error::{Error, Result};
pub use koopman::{Codec, KoopmanForwardModel, KoopmanTrainConfig, TrainReport};
pub use linalg::{CommutantBasis, Eigendecomposition};
pub use nnet::{Activation, AdamState, Mlp};
pub use symmetry::{AugmentConfig, AugmentMode, AugmentedPair, SymmetryGenerator};

pub use nalgebra::{DMatrix, DVector};
pub use num_complex::Complex64;
