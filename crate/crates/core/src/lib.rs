//! Bi-level optimization for few-shot segmentation.
//!
//! The library trains an embedding network episodically (outer loop) while,
//! inside every episode, class prototypes for the unlabeled query image are
//! estimated by gradient descent against a pseudo target mask (inner loop).
//! Everything runs on a small hand-rolled f64 tensor layer with exact
//! analytic backward passes, so the whole pipeline is gradient-checkable
//! and bit-reproducible from a single seed.
//!
//! Module map:
//! - [`tensor`] / [`mask`]: dense arrays, conv/relu/resize/softmax kernels
//!   with analytic backward passes, label and soft masks.
//! - [`embed`]: the trainable convolutional embedding network.
//! - [`proto`]: masked average pooling and cosine-similarity classification.
//! - [`initmod`]: prototype initialization (temporary masks/prototypes,
//!   weight generator, target-mask construction).
//! - [`inner`]: the per-episode prototype optimization loop.
//! - [`outer`]: combined segmentation loss, episode forward/backward with
//!   first-order gradient routing, SGD training across episodes.
//! - [`episodes`]: deterministic synthetic shape-segmentation episodes and
//!   their on-disk format.
//! - [`eval`]: IoU protocols and (multi-scale) episode prediction.
//! - [`checkpoint`]: binary model serialization.

pub mod checkpoint;
pub mod embed;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod initmod;
pub mod inner;
pub mod mask;
pub mod netpbm;
pub mod outer;
pub mod proto;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
