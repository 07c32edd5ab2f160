//! Multi-stage compression of convolutional networks.
//!
//! Conv and fully connected layers are replaced by sequences of smaller
//! layers built from low-rank factorizations of their weights (Tucker-2,
//! CPD-3 on the reshaped kernel, or SVD). The [`driver`] repeats
//! compression and fine-tuning, lowering ranks at every step, with ranks
//! picked automatically by [`rank_select`] (EVBMF with a weakening factor,
//! or a constant per-step parameter reduction).
//!
//! The lower layers ([`tensor`], [`linalg`], [`decomp`]) are plain numerical
//! routines over `f64`. [`modelgraph`] and [`trainer`] hold a small
//! sequential network engine so the whole loop runs on toy models.

pub mod cli;
pub mod decomp;
pub mod driver;
pub mod error;
pub mod io;
pub mod linalg;
pub mod modelgraph;
pub mod rank_select;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::Matrix2;
pub use tensor::{DenseTensor, Kernel3, Kernel4};
