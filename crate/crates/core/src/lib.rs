//! Evidential cross-modal low-dimensional steering for a frozen toy dual
//! encoder.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors, a reverse-mode tape, special functions
//!   and a finite-difference gradient checker.
//! - [`steering`]: latent projections, evidential uncertainty, belief masses,
//!   Dempster–Shafer fusion, confidence gates and the Gamma KL regularizer.
//! - [`model`]: a small CLIP-style dual encoder with steering adapters in its
//!   first `d` layers, plus the named-tensor checkpoint format.
//! - [`data`]: deterministic synthetic few-shot and domain-shift tasks.
//! - [`train`]: cross-entropy + KL objective and Adam.
//! - [`harness`]: few-shot, domain-generalization, ablation and sweep
//!   protocols with CSV/JSON output.

pub mod archive;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod steering;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
