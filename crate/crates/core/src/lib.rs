//! Prototypical part networks, built from scratch.
//!
//! An image is classified by comparing every patch of its latent feature map
//! with a bank of learned prototypes. Each prototype scores
//! `ln((d² + 1) / (d² + ε))` at its closest patch, and a bias-free linear layer
//! turns those scores into class logits. Because prototypes are projected onto
//! real training patches, every prediction decomposes into "this part of the
//! image looks like that part of a training image" terms.
//!
//! Module map:
//!
//! - [`tensor`], [`kernels`], [`autograd`]: dense `f64` arrays, numeric kernels
//!   and a reverse-mode gradient tape.
//! - [`model`]: backbone, prototype layer and last layer.
//! - [`training`]: joint SGD, last-layer convex fit, full cycles.
//! - [`projection`], [`theorem`]: prototype projection and the check of its
//!   logit-stability bound.
//! - [`explain`]: heat maps, patch boxes, nearest neighbours, pruning,
//!   ensembling.
//! - [`gradcheck`]: tape gradients against finite differences.
//! - [`data`], [`checkpoint`], [`config`], [`synth`]: file formats and datasets.
//! - [`cli`]: the `protopart` command line.

pub mod autograd;
pub mod baseline;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod explain;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod projection;
pub mod synth;
pub mod tensor;
pub mod theorem;
pub mod training;

pub use autograd::{finite_diff_grad, Tape, Var};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use data::{load_dataset, Dataset, DatasetFormat};
pub use error::{Error, Result};
pub use model::{init_last_layer, prototype_activation, ModelConfig, ModelOutput, ProtoPNet};
pub use projection::{project_prototypes, ProjectionRecord};
pub use tensor::Tensor;
pub use theorem::{theorem_constants, verify_projection_theorem, TheoremReport};
pub use training::{train_full, StageReport, TrainConfig};
