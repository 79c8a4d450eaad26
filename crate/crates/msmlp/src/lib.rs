//! Mix-shift token-mixing MLP vision backbones.
//!
//! A self-contained f64 implementation of the mix-shift regional
//! token-mixing operator and the MS-MLP model family built on it, together
//! with everything needed to verify and exercise it at desk scale:
//!
//! - [`tensor`], [`ops`] — a minimal dense `(n,h,w,c)` tensor engine with
//!   pure forward ops and their vector-Jacobian products;
//! - [`tape`] — reverse-mode autodiff over a recorded tape;
//! - [`gradcheck`] — central-difference oracles for every primitive and for
//!   whole models;
//! - [`mixshift`] — the regional mixing operator in an operational form and
//!   a naive reference form that cross-validate each other;
//! - [`model`], [`presets`], [`checkpoint`] — the staged pyramid models,
//!   published configurations, and a binary checkpoint format;
//! - [`flops`] — closed-form complexity expressions and exact MAC/parameter
//!   counting;
//! - [`bench`] — wall-time scaling sweeps with log-log slope fits;
//! - [`train`] — AdamW, cross-entropy, a synthetic two-cue classification
//!   task, and the training loop that overfits it.

pub mod bench;
pub mod checkpoint;
pub mod error;
pub mod flops;
pub mod gradcheck;
pub mod mixshift;
pub mod model;
pub mod ops;
pub mod params;
pub mod presets;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Axis, Tensor4};
