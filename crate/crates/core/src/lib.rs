//! Privacy-preserving decentralized aggregation for federated learning.
//!
//! * [`params`]: flat parameter tensors.
//! * [`schedule`]: gap-constrained group schedules from randomized
//!   resolvable block design search.
//! * [`aggregate`]: ADMM consensus averaging, all-to-all or grouped.
//! * [`simnet`]: in-memory message passing that records a transcript.
//! * [`adversary`]: honest-but-curious reconstruction from a transcript.
//! * [`fedtrain`]: desk-scale federated training: grouped ADMM, FedAvg and
//!   local-only baselines.
//! * [`experiments`]: iteration and schedule sweeps.
//!
//! Numeric code is generic over [`Real`]; the `*F64` / `*F32` aliases below
//! fix the scalar.

pub mod adversary;
pub mod aggregate;
pub mod error;
pub mod experiments;
pub mod fedtrain;
pub mod params;
pub mod scalar;
pub mod schedule;
pub mod seeds;
pub mod simnet;

pub use error::{Error, Result};
pub use params::{axpy_combine, mse, ParamVector, PeerId};
pub use scalar::Real;
pub use schedule::{generate_schedule, validate_schedule, GroupSchedule, SearchBudget};

pub type ParamVectorF64 = params::ParamVector<f64>;
pub type ParamVectorF32 = params::ParamVector<f32>;
pub type AdmmConfigF64 = aggregate::AdmmConfig<f64>;
pub type AdmmConfigF32 = aggregate::AdmmConfig<f32>;
pub type AggregationRunF64 = aggregate::AggregationRun<f64>;
pub type TranscriptF64 = simnet::Transcript<f64>;
pub type ObserverViewF64 = adversary::ObserverView<f64>;
pub type FlConfigF64 = fedtrain::FlConfig<f64>;
pub type FlConfigF32 = fedtrain::FlConfig<f32>;
pub type LocalDatasetF64 = fedtrain::LocalDataset<f64>;
pub type LocalDatasetF32 = fedtrain::LocalDataset<f32>;
