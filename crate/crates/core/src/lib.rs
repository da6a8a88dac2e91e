//! Grid-world order dispatching with distribution-matching Q-learning.
//!
//! Modules, bottom up: `grid` (topology, orders, encodings), `env` (the
//! simulator), `qnet` (the Q network, optimizers, checkpoints), `kl` (order
//! and vehicle distributions), `policy` and `matching` (order selection),
//! `trainer` (replay and updates) and `harness` (experiments and reports).

pub mod env;
pub mod error;
pub mod grid;
pub mod harness;
pub mod kl;
pub mod matching;
pub mod policy;
pub mod qnet;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
