//! Collaborative dreaming: federated optimization of synthetic inputs
//! ("dreams") across clients, followed by distillation into client and
//! server models.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod acquisition;
pub mod aggregation;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod extraction;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod orchestrator;
pub mod selftest;
pub mod tensor;

pub use error::{Error, Result};
