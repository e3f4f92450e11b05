//! Multi-head attention with inter-head disagreement regularization.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`autodiff`], [`optim`], [`param`]: dense `f64` tensors, a
//!   tape-style reverse-mode autodiff graph, Adam, and named parameters.
//! * [`attention`]: multi-head scaled dot-product attention exposing the
//!   per-head attention matrices, projected values and head outputs.
//! * [`disagreement`]: the subspace, attended-position and output
//!   disagreement terms (plus a squared-difference position variant).
//! * [`model`], [`train`]: a small encoder–decoder transformer trained on
//!   likelihood plus λ·disagreement.
//! * [`data`]: synthetic copy / reverse / sort transduction tasks.
//! * [`diagnostics`]: exp(D) disagreement reports and gradient checking.
//! * [`config`], [`checkpoint`], [`cli`]: experiment configuration, the
//!   checkpoint file format and the command-line front end.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod disagreement;
pub mod error;
pub mod model;
pub mod optim;
pub mod param;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
