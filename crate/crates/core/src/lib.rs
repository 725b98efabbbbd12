//! Partial-layer federated learning simulation.
//!
//! Dense MLP models, balanced layer-wise allocation of a training ratio,
//! rotational sub-layer assignment, masked local training and aggregation,
//! variance-optimal client sampling, and analytic cost and convergence models.

pub mod allocation;
pub mod assignment;
pub mod config;
pub mod costmodel;
pub mod data;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sampling;

pub use allocation::{AllocationPlan, LayerCounts};
pub use assignment::{BaselineStrategy, SublayerAssignment, SublayerPartition};
pub use config::{ExperimentConfig, Strategy};
pub use costmodel::{ConvergenceConstants, DeviceProfile, Schedule, Workload};
pub use data::{Batch, Dataset, PartitionSpec};
pub use error::{Error, Result};
pub use federation::{ClientState, GlobalState, RoundRecord};
pub use metrics::{DynamicsTracker, UpdateWindow};
pub use model::{Gradient, ParamMask, ParamSet, Topology};
pub use sampling::{Probabilities, SamplingDecision, SamplingInput};
