//! Open-attribute person retrieval.
//!
//! The crate covers the whole pipeline: attribute catalogs with base/novel
//! splits ([`catalog`]), frozen dual encoders with learnable body and context
//! prompts ([`encoders`]), text-guided pseudo body features ([`pseudo_body`]),
//! attribute-conditioned cross-attention ([`attr_select`]), the training
//! objective ([`losses`]), gallery indexing and evaluation ([`retrieval`]), and
//! the training/evaluation harness ([`harness`]).

pub mod attr_select;
pub mod catalog;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod losses;
pub(crate) mod matrix_serde;
pub mod model;
pub mod pseudo_body;
pub mod retrieval;
pub mod tape;

pub use error::{OaprError, Result};
