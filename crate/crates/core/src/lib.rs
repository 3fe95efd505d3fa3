//! Statistical-CSI design of RIS phase shifts and bilinear precoders for
//! multi-user MISO downlinks.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod cli;
pub mod config;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod optimizer;
pub mod precoding;
pub mod selftest;
pub mod stats;

pub use error::{Error, Result};
