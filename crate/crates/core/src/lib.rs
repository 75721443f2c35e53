//! Cost modeling and cost-optimal configuration search for grouped-query
//! attention Transformers.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod cost;
pub mod error;
pub mod family;
pub mod fit;
pub mod io;
pub mod optimize;
pub mod synthetic;

pub use error::{Error, Result};
