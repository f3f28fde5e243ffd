//! slimdiff: compress latent-diffusion U-Nets by deleting transformer and
//! ResNet blocks under explicit pruning plans, then retrain the compact
//! student with layer-level knowledge distillation from one or more teachers.
//!
//! The crate is organized around the workflow:
//!
//! - [`backbone`] — a configurable conditional U-Net denoiser with named,
//!   tappable layers, instantiable at full scale (for parameter accounting)
//!   and toy scale (for training on a procedural corpus).
//! - [`pruning`] — removal plans addressing blocks by canonical path,
//!   weight inheritance, parameter counting and FLOP estimates.
//! - [`diffusion`] — discrete-time DDPM schedule, noising, ancestral
//!   sampling with classifier-free guidance.
//! - [`distill`] — the task / output-KD / feature-KD objective.
//! - [`corpus`] — procedural captioned-shape dataset plus frozen encoder
//!   stand-ins so the pipeline is self-contained.
//! - [`trainer`] — teacher training, distillation with teacher swapping,
//!   progressive compression levels.
//! - [`bench`] — wall-clock latency harness and report comparison.
//! - [`cli`] — the `slimdiff` command-line entry point.

pub mod archive;
pub mod backbone;
pub mod bench;
pub mod cli;
pub mod corpus;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod manifest;
pub mod pruning;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result, Violation};

/// Version string reported in manifests and by the C API.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
