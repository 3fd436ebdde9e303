//! Unsupervised adversarial detection via contrastive auxiliary networks.
//!
//! A frozen classifier is wrapped with small ArcFace-trained projection heads
//! at selected intermediate layers; feature-space detectors (deep k-NN with
//! conformal p-values, layer-wise RBF-SVMs with a reject combiner, and a
//! max-softmax baseline) then score inputs in the refined embedding space.
//! The crate also ships the white-box attacks (PGD, L-inf budgeted C&W, and
//! an adaptive k-NN-aware attack) and a PR/F1 evaluation harness used to
//! compare raw-feature and refined-feature detection.
//!
//! See the `examples/` directory for one runnable example per capability and
//! the `ucan` binary for the staged pipeline.

pub mod error;
pub mod tensor;
pub mod graph;
pub mod data;
pub mod weights;
pub mod backbone;
pub mod arcface;
pub mod attacks;
pub mod svm;
pub mod detectors;
pub mod eval;
pub mod config;
pub mod pipeline;

pub use error::{Result, UcanError};
pub use tensor::Tensor;
