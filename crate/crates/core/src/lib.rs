//! Desk-scale laboratory for multimodal intersectional effect analysis.
//!
//! The crate trains a small text+image transformer on synthetic memes-like
//! data whose hatefulness label emerges only from the interaction of a text
//! signal and an image signal, then measures that interaction three ways:
//!
//! * treatment-effect estimation over crafted confounder triples (miATE),
//! * interaction-disentangled attention attribution on the last layer
//!   (MIDAS, with attention-only and gradient-only variants),
//! * the dual form of in-context learning with linear attention, including
//!   meta-gradient feature extraction and a boosted-tree importance readout.
//!
//! All computation is 64-bit, seeded, and deterministic.

pub mod attribution;
pub mod data;
pub mod effects;
pub mod error;
pub mod icl;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
