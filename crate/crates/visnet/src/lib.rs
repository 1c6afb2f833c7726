//! Desk-scale mechanics of a multi-scale fusion re-identification model:
//! a reverse-mode tensor tape, the fusion head and its parameter ledger,
//! body-region pseudo-labels, the training losses and loss-weight schedule,
//! identity-balanced batch sampling, retrieval evaluation, and the
//! background-vs-person augmentation pipeline.

pub mod arch;
pub mod augment;
pub mod demo;
pub mod evalkit;
pub mod fusion;
pub mod gradcheck;
pub mod losses;
pub mod nn;
pub mod sampling;
pub mod schedule;
pub mod semantics;
pub mod tape;
pub mod tensor;

pub use tape::{BnStats, Mode, Tape, Value};
pub use tensor::{Tensor, TensorError};
