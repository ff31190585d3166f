//! Multiplication-free convolutional networks.
//!
//! The convolutions in this crate can run in two modes: the ordinary
//! multiply-accumulate form, and an approximate form in which every product
//! inside the accumulation is replaced by a signed minimum (`smin`) of
//! magnitude-normalized operands. The crate bundles:
//!
//! - [`tensor`]: a minimal dense NCHW tensor with the unfold/matmul algebra
//!   convolutions are built on;
//! - [`simlab`]: a Monte Carlo laboratory measuring how strongly candidate
//!   operators (min-selector, addition, max-selector) correlate with
//!   multiplication, and the relative-error functional that justifies the
//!   substitution;
//! - [`approx`]: the `smin` kernel, clipping with a straight-through-style
//!   gradient, absolute-mean statistics, and the approximate convolution
//!   forward;
//! - [`nn`]: layers and the two reference architectures (`lenet`,
//!   `mini_cifar`), every convolution switchable between exact and
//!   min-approximate mode;
//! - [`train`]: approximate-forward / exact-backward training, evaluation,
//!   and transfer from exact checkpoints;
//! - [`data`]: MNIST IDX and CIFAR-10 binary loaders with train-statistics
//!   standardization;
//! - [`checkpoint`]: a versioned binary container shared by exact and
//!   approximate networks;
//! - [`cli`]: the `minconv` command-line front end.
//!
//! All results are deterministic for a fixed seed: random streams are
//! ChaCha8-based and every parallel reduction runs in a fixed order.

pub mod approx;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod nn;
pub mod simlab;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape2D, Tensor};
