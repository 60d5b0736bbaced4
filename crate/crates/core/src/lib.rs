//! Temporal operator attention.
//!
//! Softmax attention mixes value tokens with row-stochastic kernels. The
//! variants here insert learnable dense sequence operators `S = I + M` around
//! the attention activation so that a head can apply signed temporal filters
//! (differencing, harmonic continuation, projections), regularized by
//! stochastic inverted dropout on the offsets `M`.
//!
//! Modules:
//! - [`tensor`]: dense matrices, least squares, DFT, gradient checking
//! - [`attention`]: forward/backward for the four variants
//! - [`sor`]: stochastic operator regularization
//! - [`optim`]: Adam and gradient clipping
//! - [`operators`]: canonical non-simplex operators and realization probes
//! - [`synthetic`]: multi-regime harmonic demixing benchmark
//! - [`theory`]: named probes with measured values and verdicts
//! - [`report`]: CSV and SVG exports

pub mod attention;
pub mod error;
pub mod operators;
pub mod optim;
pub mod report;
pub mod serial;
pub mod sor;
pub mod synthetic;
pub mod tensor;
pub mod theory;

pub use attention::{HeadParams, MultiHeadParams, ToaVariant};
pub use error::{Error, Result};
pub use sor::{SorConfig, SorState};
pub use tensor::Matrix;
