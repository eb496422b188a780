//! Gram-matrix style transfer and texture synthesis.
//!
//! A small VGG-style network with hand-written forward and backward passes
//! ([`network`]) feeds three kinds of style statistics ([`style`]): the
//! global Gram matrix, per-filter spatial autocorrelations, and
//! per-position (pixelwise or decay-weighted localized) Gram fields. An
//! [`objective::Objective`] combines content and style terms over any layer
//! partition, and [`optim::minimize`] optimizes the image pixels directly.

pub mod error;
pub mod format;
pub mod image;
pub mod network;
pub mod objective;
pub mod optim;
pub mod style;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use network::{FeatureCache, FeatureMode, LayerKind, LayerSpec, Network, NetworkConfig, WeightStore};
pub use objective::{ContentEntry, LayerPartition, Objective, StyleEntry, TargetProvider};
pub use optim::{grad_check, init_image, minimize, InitMode, Method, OptConfig, OptRun, PixelRange, Problem};
pub use style::{GramField, StyleKind, StyleTarget};
pub use tensor::{Kernel, Matrix, Padding, PoolMode, Shape3, Tensor3};
