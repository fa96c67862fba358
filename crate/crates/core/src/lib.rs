// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod degrade;
pub mod error;
pub mod eval;
pub mod frequency;
pub mod fundus;
pub mod inference;
pub mod network;
pub mod nn;
pub mod phantom;
pub mod seed;
pub mod train;

pub use error::{Error, Result};
