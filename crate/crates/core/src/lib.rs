//! Multistage gated average fusion (MGAF) for multimodal classification.
//!
//! The crate is `no_std` with `alloc`. It carries every numeric piece of the
//! pipeline:
//!
//! * [`tensor`]: dense matrices and rank-4 activation blocks, same/valid
//!   convolution, pooling and flattening.
//! * [`imaging`]: signal images from inertial windows, sequential front-view
//!   images from depth frames, Prewitt filtering and bilinear resizing.
//! * [`cnn`]: the three-convolution feature extractor with its training loop.
//! * [`gaf`]: the gated average fusion operator and its ablation variants.
//! * [`fusion`]: cross-modal sample pairing and the multimodal layer.
//! * [`svm`]: one-vs-rest linear SVM over the multimodal layer.
//! * [`diagnostics`]: normalized cross-correlation and classification metrics.
//! * [`data`]: recording types, the synthetic dataset generator and
//!   inertial augmentation.
//!
//! File formats, the experiment runner and the command line live in the
//! companion `mgaf` crate.

#![no_std]

extern crate alloc;

#[cfg(feature = "std")]
extern crate std;

pub mod cnn;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod fusion;
pub mod gaf;
pub mod imaging;
pub mod svm;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Kernel2, Matrix2, Tensor4};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
