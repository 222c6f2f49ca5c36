//! Approximate multi-way equi-joins over partitioned key-value data on a
//! simulated worker cluster.
//!
//! The pipeline has two stages. Stage one builds a multi-way Bloom join
//! filter (per-partition filters OR-merged into dataset filters, dataset
//! filters AND-merged into the join filter) and drops records whose key
//! cannot participate. Stage two converts a latency or error budget into
//! per-stratum sample sizes, samples the per-key cross-product space without
//! materializing it, and reports an aggregate with a confidence-interval
//! error bound. Every inter-worker transfer is charged to a byte-exact
//! shuffle ledger, and closed-form predictors for the three join strategies
//! let the measured volumes be checked against the analytic model.
//!
//! Statistical kernels (quantiles, planners, estimators, volume predictors)
//! are generic over the scalar type via [`scalar::Real`]; the data plane is
//! `u64` keys with [`Value`] payloads, and the default `f64` instantiations
//! are what the engine and CLI use.

// Negated float comparisons (`!(x > 0.0)`) are how parameter guards reject
// NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bloom;
pub mod budget;
pub mod commcost;
pub mod dataset;
pub mod engine;
pub mod estimator;
pub mod filter;
pub mod hashing;
pub mod ledger;
pub mod query;
pub mod sampler;
pub mod scalar;
pub mod stats;

/// Scalar type of record payloads and of every concrete pipeline value.
pub type Value = f64;

/// Seconds, as used by budgets, timers and the latency model.
pub type Seconds = f64;

pub use bloom::{BloomFilter, FilterParams};
pub use budget::{CostModel, QueryBudget, SamplePlan, SigmaStore, StratumStats};
pub use dataset::{Dataset, Partition, Record, SyntheticSpec};
pub use engine::{Cluster, Engine, JoinReport, PlacementPolicy, Strategy};
pub use estimator::{AggFn, AggPartial, ApproxResult, EstimatorKind};
pub use ledger::{Phase, ShuffleLedger};
pub use query::ParsedQuery;
pub use sampler::{SampleMode, SampledRow, StratumInput};
pub use scalar::Real;
