//! Belief-propagation and neural belief-propagation decoders for quantum
//! LDPC codes.
//!
//! The crate is organized bottom-up:
//!
//! * [`gf2`]: bit-packed GF(2) matrices and the symplectic form.
//! * [`codes`]: toric, bicycle and hypergraph-product CSS codes.
//! * [`sector`]: per-sector (X or Z) decoding data of a CSS code.
//! * [`bp`]: Tanner graphs and flooding sum-product decoding.
//! * [`nbp`]: the unrolled, trainable network with weight tying.
//! * [`train`]: losses, reverse-mode gradients, optimizers, training loop.
//! * [`eval`]: Monte-Carlo failure-rate estimation and sweeps.

pub mod bp;
pub mod codes;
pub mod eval;
pub mod gf2;
pub mod nbp;
pub mod sector;
pub mod seed;
pub mod train;

mod error;

pub use error::{Error, Result};
