// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backup;
pub mod certificate;
pub mod class_k;
pub mod cli;
pub mod ecbf;
pub mod error;
pub mod filters;
pub mod qp;
pub mod scenarios;
pub mod sim;
pub mod system;
