//! Draft-ensemble estimation of epistemic uncertainty for small
//! autoregressive models.
//!
//! The crate covers exact simplex math ([`simplex`]), toy next-token models
//! with low-rank posterior simulation ([`models`]), a synthetic lookup task
//! ([`datagen`]), KL-based trainers ([`distill`]), the JSD + KL estimator
//! ([`estimators`]), fidelity and detection metrics ([`evaluation`]) and the
//! experiment driver behind the `drafteu` binary ([`pipeline`]).

pub mod datagen;
pub mod distill;
pub mod error;
pub mod estimators;
pub mod evaluation;
pub mod exec;
pub mod io;
pub mod models;
pub mod pipeline;
pub mod rng;
pub mod simplex;

pub use error::{Error, Result};
