//! Training and evaluation toolkit for class-imbalanced painting classification.
//!
//! The pipeline has two phases. Phase one trains an AdaIN style-transfer
//! decoder and materializes class-preserving stylized copies of the training
//! set, with separate augmentation proportions for representative and rare
//! classes. Phase two trains a spatial-attention classifier over a pretrained
//! (or desk-scale) backbone on the merged data, optimized by a coarse grid
//! search, TPE refinement, and two-stage gradual-unfreezing fine-tuning.
//!
//! Module map:
//! - [`corpus`]: dataset manifests, class statistics, splits, pair sampling
//! - [`stylegen`]: encoder/decoder style transfer engine and its losses
//! - [`augment`]: augmentation plans and stylized-sample materialization
//! - [`attnclf`]: spatial-attention classifier and focal loss
//! - [`optim`]: grid + TPE hyperparameter search, fine-tuning schedules
//! - [`metrics`], [`viz`], [`sweep`], [`runner`]: evaluation and the CLI-facing
//!   experiment harness
//!
//! Heavy inner loops (convolutions, batch stylization, sweep cells) fan out
//! over a rayon pool when the default `parallel` feature is enabled and fall
//! back to sequential execution otherwise. Results are bit-identical in both
//! modes: parallel regions write disjoint output slices and every floating
//! point reduction runs in fixed index order.

pub mod attnclf;
pub mod augment;
pub mod config;
pub mod corpus;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod graph;
pub mod imageio;
pub mod loader;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod runner;
pub mod stylegen;
pub mod sweep;
pub mod synth;
pub mod tensor;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::Tensor;
