//! Battery equivalent-circuit simulator and moving horizon estimators for
//! state of charge and model parameters.

// `!(x >= y)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ecm;
pub mod harness;
pub mod mhe;
pub mod optim;
pub mod parallel;
pub mod plant;
pub mod profiles;
pub mod window;
