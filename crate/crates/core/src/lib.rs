//! Federated shape/appearance-disentangled autoencoders for unsupervised
//! anomaly segmentation on synthetic brain phantoms.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom fix the usual `f32` instantiation.

pub mod error;
pub mod federation;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod phantom;
pub mod runner;
pub mod scalar;
pub mod seeds;
pub mod segment;
pub mod tensor;

pub use error::{Error, Result};
pub use federation::{FederationConfig, FederationState, RoundRecord, Strategy};
pub use grid::BinaryMask;
pub use losses::{LossMode, LossTerms, LossWeights};
pub use model::params::{Gradients, Leaf, LeafKind, ModelParams, PathTag};
pub use model::{ArchConfig, Autoencoder, LatentTriple};
pub use nn::norm::NormKind;
pub use nn::Mode;
pub use phantom::{AppearanceProfile, ClientDataset, LesionSpec, ScanSlice, SplitCounts};
pub use runner::{compare_strategies, run_experiment, ExperimentConfig, MetricsReport, RunManifest, Runner};
pub use scalar::Scalar;
pub use seeds::derive_seed;
pub use segment::{PostprocessConfig, ResidualMap, SegmentationMask};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type ModelParams32 = ModelParams<f32>;
pub type ModelParams64 = ModelParams<f64>;
pub type ScanSlice32 = ScanSlice<f32>;
pub type ClientDataset32 = ClientDataset<f32>;
pub type FederationState32 = FederationState<f32>;
