//! gradlab: a desk-scale laboratory for gradient inversion attacks in
//! federated learning.
//!
//! The crate simulates an honest client computing one local update, an
//! honest-but-curious server observing that update, and the optimization
//! that tries to reconstruct the client's batch from it. Everything runs on
//! a small self-contained f64 stack: a reverse-mode autodiff graph whose
//! gradients are themselves differentiable ([`graph`]), hand-built layers
//! including BatchNorm with mode-dependent backward behavior ([`nn`]), the
//! client simulation ([`client`]), the attack engine and its regularizers
//! ([`attack`]), reconstruction scoring ([`metrics`]), a deterministic
//! hyperparameter search ([`search`]), and experiment drivers ([`lab`]).
//!
//! See the `examples/` directory for one runnable program per capability,
//! and the `gradlab` binary for the batch experiment surface.

pub mod error;
pub mod graph;
pub mod ops;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
