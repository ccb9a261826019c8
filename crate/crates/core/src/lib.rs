//! End-to-end adversarial FCN + dense CRF segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`ops`], [`autodiff`]: dense `f64` tensors and a
//!   reverse-mode tape covering convolution, transpose convolution, max
//!   pooling, tanh, per-pixel softmax and the CRF message-passing ops.
//! - [`fcn`]: the four multi-scale sub-nets and the position-prior softmax.
//! - [`crf`]: Gaussian pairwise kernels, mean-field inference unrolled on
//!   the tape, and an exact enumeration oracle for tiny grids.
//! - [`model`], [`adversarial`], [`train`]: variant assembly, L2-ball
//!   input perturbations, the combined objective and the Adam loop.
//! - [`synth`], [`pgm`], [`dataset`]: seeded synthetic ROIs, augmentation,
//!   normalisation, prior estimation and on-disk datasets.
//! - [`eval`]: Dice, trimap accuracy and McNemar's test.
//! - [`config`], [`checkpoint`], [`selftest`], [`bench`]: run configuration,
//!   binary checkpoints, the gradient self-test and the benchmark harness.

pub mod adversarial;
pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod crf;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fcn;
pub mod model;
pub mod ops;
pub mod pgm;
pub mod rng;
pub mod selftest;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
