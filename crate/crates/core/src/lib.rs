//! Dirichlet-based uncertainty (DBU) workbench.
//!
//! Trains small DBU classifiers, attacks their class predictions and their
//! uncertainty estimates, certifies smoothed uncertainty scores and evaluates
//! the resulting binary tasks with AUC-PR.

pub mod error;
pub mod autodiff;
pub mod numerics;
pub mod dirichlet;
pub mod container;
pub mod data;
pub mod models;
pub mod attacks;
pub mod smoothing;
pub mod eval;
pub mod config;
pub mod run;
pub mod report;

pub use error::{Error, Result};
