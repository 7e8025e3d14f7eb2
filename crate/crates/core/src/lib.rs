//! Penalized EM test for the number of subgroups in finite mixtures of
//! generalized linear models.

pub mod cli;
pub mod error;
pub mod family;
pub mod io;
pub mod mixture;
pub mod nnqp;
pub mod null_dist;
pub mod predict;
pub mod procedure;
pub mod seed;
pub mod simgen;

pub use error::{Error, ErrorKind, Result};
