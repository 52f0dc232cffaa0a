//! Federated-learning simulator with similarity-weighted train-time calibration.
//!
//! The crate is organized bottom-up:
//!
//! - [`model`]: a small ReLU MLP with explicit backprop and SGD with momentum.
//! - [`losses`]: task losses and the DCA / MDCA auxiliary calibration losses.
//! - [`similarity`]: cosine, linear CKA and RBF CKA between parameter deltas.
//! - [`partition`]: synthetic data, IDX ingestion, IID and Dirichlet splits.
//! - [`engine`]: FedAvg, FedProx, Scaffold, FedDyn and FedNova, with
//!   per-client penalty weights recomputed every local epoch.
//! - [`metrics`]: accuracy, ECE, SCE, reliability bins, temperature scaling.
//! - [`harness`]: JSON configs, result files and the sweep driver used by the CLI.

pub mod engine;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod partition;
pub mod similarity;

pub use engine::{
    BetaRule, CalibrationPolicy, ClientState, ClientUpdate, ExperimentOutcome, FlAlgorithm, LocalTraining,
    RoundRecord, RoundState, SimulationConfig, Simulator,
};
pub use error::{FedCalError, Result};
pub use losses::{AuxKind, LossKind, LossValue};
pub use metrics::{BinStats, CalibrationReport};
pub use model::{Batch, ModelSpec, OptimizerState, ParameterDelta, ParameterSet, SgdConfig};
pub use partition::{Dataset, PartitionPlan, PartitionScheme};
pub use similarity::{DeltaSimilarity, SimKind, SimilarityScore};
