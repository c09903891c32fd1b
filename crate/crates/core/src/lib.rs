//! Federated learning simulation with learned, regularized aggregation weights.
//!
//! The crate is organized around the life of an experiment:
//!
//! - [`nn`]: a small rectifier MLP with exact gradients and SGD.
//! - [`data`]: MNIST IDX ingestion and heterogeneous client populations.
//! - [`federation`]: local client training and weighted server aggregation.
//! - [`unfolding`]: learning per-round aggregation weights over an unrolled horizon.
//! - [`report`]: CSV, JSON and SVG artifacts.
//! - [`config`], [`experiment`] and [`cli`]: configuration, end-to-end runs and the
//!   command-line driver.

pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod nn;
pub mod report;
pub mod seed;
pub mod unfolding;

pub use error::{Error, Result};
