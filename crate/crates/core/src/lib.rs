//! Dynamic token selective transformer for aerial-ground person
//! re-identification, at desk scale.
//!
//! Layers, bottom up: [`tensor`]/[`tape`]/[`optim`] (dense tensors with
//! reverse-mode differentiation and SGD), [`backbone`] (view-decoupled
//! encoder), [`selector`] (differentiable top-k token selection),
//! [`objectives`], [`data`]/[`train`] (synthetic cross-view data and the
//! training loop), [`eval`] (retrieval metrics and protocols) and
//! [`config`]/[`cli`] for the `dtst` binary.

pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod records;
pub mod sampler;
pub mod schedule;
pub mod selector;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod view;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use view::View;
