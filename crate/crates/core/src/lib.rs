//! Joint optical/SAR masked-autoencoder pretraining.
//!
//! The crate is organised bottom-up: [`numcore`] provides tensors and
//! reverse-mode differentiation, [`nn`] the transformer layers, [`model`] the
//! assembled network, [`objectives`] the four training losses, [`data`]
//! synthetic and on-disk pairs, [`trainer`] the optimization loop and
//! [`diagnostics`] the representation analyses.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod gradsuite;
pub mod io;
pub mod model;
pub mod nn;
pub mod numcore;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};
pub use numcore::{DType, Float, Graph, ParamId, ParamStore, Tensor, Var};
