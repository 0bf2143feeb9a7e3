//! Multimodal molecular property transformer.
//!
//! Three encoders (a character-level SMILES transformer, a GINE bond-graph
//! network and a SchNet conformer network) produce token sets that are
//! projected, concatenated with `[CLS]`/`[SEP]` markers and read by a shared
//! transformer. Everything runs on a small reverse-mode autodiff tape.

pub mod attention;
pub mod conf3d;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod graph2d;
pub mod nn;
pub mod smiles;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
