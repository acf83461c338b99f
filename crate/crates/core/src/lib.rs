//! Learnable generalized Gaussian band-pass filterbanks over multichannel
//! recordings, with band magnitude, correlation and phase-locking features
//! feeding a sparse linear classifier.
// `!(x > 0.0)` style checks are meant to reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod eval;
pub mod features;
pub mod filterbank;
pub mod gradient;
pub mod head;
pub mod signal;
pub mod trainer;

pub use error::{Error, Result};
pub use features::{count_parameters, feature_dim, FeatureKind};
pub use filterbank::{FilterBank, FilterParams, Layout};
pub use gradient::Model;
pub use signal::TrialTensor;
pub use trainer::{train, TrainConfig};
