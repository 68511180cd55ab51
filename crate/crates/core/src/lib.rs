//! Desk-scale simulator for communication-efficient federated learning with
//! differential parameter dropout.
//!
//! The crate covers the full training procedure: dense layered models with
//! nested prefix sub-models, heterogeneous data partitioning, local SGD,
//! importance-based uploaded-parameter selection, masked sparse aggregation
//! with periodic full broadcasts, an exact LP allocator for per-client
//! dropout rates under a server volume budget, client-selection baselines,
//! and monitors for the convergence quantities.

pub mod aggregation;
pub mod allocation;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod orchestrator;
pub mod rng;
pub mod selection;
pub mod simplex;
pub mod trainer;

pub use aggregation::{aggregate, broadcast, local_update, BroadcastPolicy, Upload};
pub use allocation::{
    comm_time, compute_latency, grid_oracle, link_rate, regularizer, solve_allocation,
    AllocInstance, ClientProfile, DropoutPlan,
};
pub use config::{
    DatasetConfig, ExperimentConfig, ModelSettings, ProfileConfig, SchemeKind, SubmodelConfig,
    TrainSettings, Weighting,
};
pub use data::{
    distribution_score, gen_synthetic, load_idx, partition, LabeledDataset, Partition,
    PartitionMode,
};
pub use error::{Error, Result};
pub use metrics::{
    convergence_bound, convergence_bound_parts, estimate_sigma, estimate_smoothness, evaluate,
    measure_epsilon, measure_epsilon_weighted, t2a, BoundParams, RoundRecord, T2a,
};
pub use model::{
    embed, extract, load_checkpoint, param_count, save_checkpoint, unit_mask_to_param_mask,
    LayerShape, LayeredModel, ModelShape, ParamMask, SubModelSpec, UnitMask,
};
pub use orchestrator::{
    run, scheme_fedcs, scheme_feddd, scheme_oort, RunOutput, RunSummary, SchemeDecision,
};
pub use selection::{
    coverage_table, importance, select_mask, CoverageTable, ImportanceVector, SelectionStrategy,
};
pub use trainer::{forward, grad_check, local_train, TrainConfig, TrainResult};
