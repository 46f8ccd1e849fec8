//! Unsupervised compound domain adaptation for binary live/spoof
//! classification.
//!
//! Training runs in four stages over a labelled source domain and an
//! unlabelled compound target domain:
//!
//! 1. supervised source training ([`adapt::train_source`]);
//! 2. adversarial alignment of a memory-augmented target network
//!    ([`adapt::adapt_target`], [`memory`]);
//! 3. a domain specifier network trained with class confusion and
//!    reconstruction ([`dsn::train_dsn`]);
//! 4. curriculum re-adaptation over targets ranked by domain distance
//!    ([`dsn::curriculum_adapt`]).
//!
//! [`metrics`] scores bundles with HTER, EER threshold, ROC and AUC.

pub mod adapt;
pub mod config;
pub mod data;
pub mod dsn;
pub mod error;
pub mod memory;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod par;
pub mod seed;

pub use error::{CdaError, Result};
