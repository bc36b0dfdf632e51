//! Steering networked excitatory point processes by edge intervention.
//!
//! The crate is layered bottom-up:
//!
//! * [`diffcore`]: tensors, reverse-mode gradients, ODE integration.
//! * [`pointproc`]: multivariate Hawkes ground truth, binning, count families.
//! * [`njode`]: the learned jump-ODE environment and its likelihood.
//! * [`meanfield`]: Monte-Carlo and mean-field cost estimators, error bound.
//! * [`planner`]: relaxed k-subset edge interventions under H-step lookahead.
//! * [`amortize`]: equivariant policies and contrastive embeddings across tasks.
//! * [`harness`]: configuration, ingestion, task construction and the CLI runner.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod par;
pub mod rng;

pub mod diffcore;
pub mod pointproc;
pub mod njode;
pub mod meanfield;
pub mod planner;
pub mod amortize;
pub mod harness;

pub use error::{Error, Result};
pub use par::ExecMode;
