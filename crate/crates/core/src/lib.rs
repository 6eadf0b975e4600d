//! Black-box adversarial attacks restricted to a low-frequency DCT subspace.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensorimg`]: square image tensors, perturbation metrics, PPM/PGM I/O.
//! * [`frequency`]: orthonormal 2-D DCT, low-frequency masks and noise.
//! * [`oracle`]: query-counted model access, toy classifiers, defenses and
//!   the HTTP oracle protocol.
//! * [`boundary`], [`nes`], [`hyperband`], [`whitebox`]: the attacks.
//! * [`harness`]: experiment configs, orchestration and result files.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod boundary;
pub mod error;
pub mod frequency;
pub mod harness;
pub mod hyperband;
pub mod nes;
pub mod oracle;
pub mod tensorimg;
pub mod trace;
pub mod whitebox;

pub use error::{Error, Result};
pub use frequency::{FreqCoeffs, FreqRatio};
pub use tensorimg::{ImageTensor, PerturbationMetrics, Shape};
