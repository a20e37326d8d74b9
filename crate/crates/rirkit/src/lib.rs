//! Dual-stream residual networks for CIFAR-scale image classification.
//!
//! The central object is a generalized residual layer that carries two
//! parallel activation streams: a residual stream with identity shortcuts
//! and a transient stream without them. The four cross/same-stream kernels
//! of such a layer can be fused into one ordinary convolution kernel plus a
//! partial identity, so the whole architecture family (plain CNN, ResNet,
//! the fused single-layer form, and ResNet-in-ResNet) is expressible with
//! standard layers and a modified initialization.
//!
//! The crate ships the numeric kernels, the fuse/split algebra, network
//! assembly, optimizers with identity-centered weight decay, CIFAR
//! ingestion, a training harness, and a runtime verification suite that
//! checks the fused/unfused equivalences.

pub mod error;
pub mod scalar;
pub mod tensor;

pub mod ops;

pub mod init;
pub mod streams;

pub mod model;
pub mod optim;

pub mod data;

pub mod checkpoint;
pub mod harness;
pub mod verify;

pub use error::{Result, RirError};
pub use ops::Mode;
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;
