//! Planning, learning and evaluation of multi-battery switching over the kinetic battery model.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod battery_model;
pub mod load_profiles;
pub mod planner;
pub mod validator;
pub mod policies;
pub mod learner;
pub mod soc_estimator;
pub mod pipeline;
