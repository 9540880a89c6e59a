//! Fuses low-rank adapters trained on different transformer families into a
//! single target adapter.
//!
//! The pipeline aligns modules by functional role and rank ([`topology`]),
//! turns adapter factors into block-token contexts with spectral descriptors
//! ([`context`]), denoises them ([`denoise`]), and predicts B-only corrections
//! with a cross-attention transfer network ([`hypernet`]) trained under dynamic
//! patching ([`trainer`]). [`pipeline`] drives the whole run and [`harness`]
//! provides synthetic heterogeneous families for end-to-end checks.

pub mod config;
pub mod context;
pub mod denoise;
pub mod error;
pub mod harness;
pub mod hypernet;
pub mod nn;
pub mod pipeline;
pub mod store;
pub mod surrogate;
pub mod svd;
pub mod topology;
pub mod trainer;

pub use config::FusionConfig;
pub use context::{BlockToken, GroupContext, Segment, SvdDescriptor};
pub use error::{FuseError, Result};
pub use hypernet::{DeltaPrediction, HyperNetConfig, HyperNetParams, StabilityBound};
pub use pipeline::{FusionOutcome, FusionReport};
pub use store::{AdapterSet, LoraPair, ModuleKey, TensorRecord};
pub use topology::{TransferGroup, TransferUnit, Vocabulary};
pub use surrogate::{Batch, SurrogateObjective};
pub use trainer::{GradReport, TrainConfig};
