//! Depth completion of sparse LiDAR with a learned per-pixel error map.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`tensor`]), the
//! twin-head completion network and its losses ([`net`]), training
//! ([`train`]), geometry and file formats ([`depth`], [`projection`]),
//! foreground/background preprocessing ([`preproc`]), a synthetic scene
//! generator ([`synth`]) and keep-ratio evaluation ([`eval`]).
#![allow(clippy::neg_cmp_op_on_partial_ord)]


pub mod config;
pub mod depth;
pub mod error;
pub mod eval;
pub mod net;
pub mod preproc;
pub mod projection;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
