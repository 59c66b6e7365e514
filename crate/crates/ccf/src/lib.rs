//! Cross-correction co-training for pedestrian trajectory forecasting.
//!
//! Two identical transformer subnets are trained in parallel: one sees the
//! original observed trajectory, the other a learned diverse variant, and a
//! mutual correction loss lets each refine the other. Anchor trajectories
//! from k-means over training futures give every prediction a classification
//! head alongside the per-class regression heads; evaluation reports ADE/FDE
//! of the most probable candidate and best-of-20 minima.
//!
//! The crate is organized as:
//!
//! - [`tensor`] / [`nn`] — f64 reverse-mode autodiff and the network blocks
//! - [`rng`] — seeded, checkpointable randomness
//! - [`data`] — scene text format, windowing, synthetic scene generation
//! - [`clustering`] — trajectory anchors and class probabilities
//! - [`dnet`] — noise injection and the trajectory diversifier
//! - [`subnet`] — the transformer encoder-decoder predictor
//! - [`training`] — the co-training loop, losses, optimizer
//! - [`checkpoint`] — bit-exact training-state serialization
//! - [`evaluation`] — displacement metrics and best-of-N reports
//! - [`plot`] — SVG rendering of predictions
//! - [`manifest`] — reproducibility manifests for CLI runs
//! - [`cli`] — the `ccf` command-line front end
//!
//! See the crate `examples/` directory for one runnable program per major
//! capability.

pub mod checkpoint;
pub mod cli;
pub mod clustering;
pub mod config;
pub mod data;
pub mod dnet;
pub mod error;
pub mod evaluation;
pub mod manifest;
pub mod nn;
pub mod plot;
pub mod rng;
pub mod subnet;
pub mod tensor;
pub mod training;

pub use clustering::TrajectoryClassSet;
pub use config::{CcfConfig, DiversityMode, PrimaryLoss};
pub use data::{Scene, TrajectoryWindow};
pub use error::{Error, Result};
pub use evaluation::EvalReport;
pub use rng::Rng;
pub use tensor::Tensor;
pub use training::{LossBreakdown, Trainer};
