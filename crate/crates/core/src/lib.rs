#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod audio;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod factorization;
pub mod models;
pub mod neural;
pub mod pipeline;
pub mod seed;
pub mod text;

pub use error::{Error, Result};
