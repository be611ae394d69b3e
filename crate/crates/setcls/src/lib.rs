//! Set classifier for tracklets.
//!
//! A tracklet is an ordered collection of RoI features that belong to one
//! tracked object. Instead of classifying each view independently and
//! averaging, the set classifier runs all views (plus a trainable
//! classification token) through a small transformer encoder and predicts a
//! single class distribution for the whole tracklet.
//!
//! The crate is self-contained: `diffcore` provides the dense-tensor
//! reverse-mode gradient kernel, `model` the transformer set classifier,
//! `augment` the long-tail-aware tracklet generator, `losses` the training
//! objectives, `synthdata` a desk-scale synthetic benchmark, and `pipeline`
//! the training loop, score fusion and evaluation that the `setcls` binary
//! exposes.

pub mod augment;
pub mod diffcore;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod synthdata;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
