//! Word-image recognition with vision-language adaptive decoding, an
//! auxiliary transformer head, bidirectional mutual training, and mutual
//! co-beam decoding.
//!
//! The pieces, bottom-up:
//!
//! * [`backbone`] encodes a `3 x H x W` image into `F` (`C x H/4 x W/4`);
//! * [`vlad`] and [`transd`] are the two decoding branches, each built once
//!   per reading direction by [`model::Vlamd`];
//! * [`trainer`] wires the four heads into the cross-entropy plus mutual-KL
//!   objective and runs AdamW;
//! * [`decode`] runs the joint co-beam search per direction and rescores the
//!   union of both N-best lists across directions;
//! * [`synth`] renders the desk-scale IV/OOV dataset; [`checkpoint`],
//!   [`eval`] and [`selfcheck`] back the command-line tool.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod decode;
mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod params;
pub mod selfcheck;
pub mod synth;
pub mod trainer;
pub mod transd;
pub mod vlad;
pub mod vocab;

pub use config::Config;
pub use error::{Error, Result};
pub use model::{Direction, Vlamd};
pub use vocab::Vocab;
