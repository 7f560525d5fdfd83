//! bridgelab: cross-domain representation learning on synthetic identity
//! data, built around intermediate-domain feature mixing and
//! channel-statistics retargeting, with retrieval-style evaluation.
//!
//! The crate is organized around a small reverse-mode tape ([`numerics`]),
//! a staged feedforward network with per-domain normalization ([`backbone`]),
//! the mixing module ([`idm`]) and the mirror module ([`mgm`]), supervision
//! losses ([`losses`]), density-based pseudo-labeling ([`pseudo`]), a
//! deterministic dataset generator ([`synthdata`]), the training loop
//! ([`trainer`]), and retrieval/alignment metrics ([`eval`]).

pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod idm;
pub mod losses;
pub mod mgm;
pub mod numerics;
pub mod params;
pub mod pseudo;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::Tensor;
