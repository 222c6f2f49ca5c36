//! Simulated multi-worker cluster executing a join query end to end under
//! one of four strategies, with byte-exact shuffle accounting and phase
//! timers.
//!
//! Workers are in-process execution contexts: each phase runs its per-worker
//! tasks in parallel over immutable holdings, the master serializes phase
//! boundaries, and every inter-worker transfer is charged to the ledger.
//! Statistical outputs are independent of the worker count by construction
//! (stratum seeds derive from the join key, and per-key results merge in key
//! order at the master).

use crate::bloom::BloomError;
use crate::budget::{
    plan_error, plan_latency, BudgetError, BudgetMode, CostModel, SamplePlan, SigmaStore,
    StratumStats,
};
use crate::dataset::{Dataset, DatasetError, Record};
use crate::estimator::{
    clt_bound_for, ht_bound, AggFn, AggPartial, ApproxResult, CltStratum, EstimateError,
    EstimatorKind, HtDfMode, HtStratum, StratumDiagnostic,
};
use crate::filter::{build_partition_filter, FilterError, FilterSizing};
use crate::hashing::{partition_owner, splitmix64};
use crate::ledger::{LedgerSummary, Phase, ShuffleLedger};
use crate::query::{fingerprint, ParsedQuery};
use crate::sampler::{
    derive_stratum_seed, sample_stratum, sample_stratum_dedup, SampleError, SampleMode,
    StratumInput,
};
use crate::{Seconds, Value};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Bloom(#[from] BloomError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Budget(#[from] BudgetError),
    #[error("query error: {0}")]
    Query(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
}

/// The simulated cluster: a worker count and the deterministic hash
/// partitioner mapping keys to owners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Cluster {
    pub workers: usize,
}

impl Cluster {
    pub fn new(workers: usize) -> Self {
        Cluster {
            workers: workers.max(1),
        }
    }

    pub fn owner(&self, key: u64) -> usize {
        partition_owner(key, self.workers)
    }
}

/// Initial data residency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementPolicy {
    /// Partitions dealt round-robin across workers.
    Uniform,
    /// Records grouped on their owning worker; repartitioning moves nothing.
    Colocated,
    /// Each partition placed on the worker owning the fewest of its records.
    Adversarial,
    /// The analytic model's ideal spread: within each owner class, records
    /// rotate across workers so exactly ceil(T/k) records sit on their
    /// owner. Holdings are re-dealt at each shuffle boundary to keep the
    /// assumption, which makes the ledger match the closed forms.
    Model,
}

impl std::str::FromStr for PlacementPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(PlacementPolicy::Uniform),
            "colocated" => Ok(PlacementPolicy::Colocated),
            "adversarial" => Ok(PlacementPolicy::Adversarial),
            "model" => Ok(PlacementPolicy::Model),
            other => Err(format!("unknown placement policy `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Repartition,
    Broadcast,
    Bloom,
    Approx,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "repartition" => Ok(Strategy::Repartition),
            "broadcast" => Ok(Strategy::Broadcast),
            "bloom" => Ok(Strategy::Bloom),
            "approx" => Ok(Strategy::Approx),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

/// Datasets resident on workers: `holdings[worker][dataset]`.
#[derive(Debug, Clone)]
pub struct PlacedData {
    pub cluster: Cluster,
    pub policy: PlacementPolicy,
    pub names: Vec<String>,
    holdings: Vec<Vec<Vec<Record>>>,
}

/// Deal one dataset's records the way the analytic model assumes: sort by
/// owner (stable), then send record t to worker (owner + t) mod k, so the
/// residents-at-owner count is exactly ceil(T/k).
fn model_deal(records: Vec<Record>, k: usize) -> Vec<Vec<Record>> {
    let mut sorted = records;
    sorted.sort_by_key(|r| partition_owner(r.key, k));
    let mut out = vec![Vec::new(); k];
    for (t, r) in sorted.into_iter().enumerate() {
        let owner = partition_owner(r.key, k);
        out[(owner + t) % k].push(r);
    }
    out
}

/// Assign datasets to workers under a placement policy. Deterministic for a
/// fixed seed.
pub fn place(
    datasets: &[Dataset],
    cluster: Cluster,
    policy: PlacementPolicy,
    seed: u64,
) -> PlacedData {
    let k = cluster.workers;
    let n = datasets.len();
    let mut holdings = vec![vec![Vec::new(); n]; k];
    match policy {
        PlacementPolicy::Uniform => {
            let mut slot = (seed % k as u64) as usize;
            for (i, d) in datasets.iter().enumerate() {
                for p in &d.partitions {
                    holdings[slot % k][i].extend(p.records.iter().copied());
                    slot += 1;
                }
            }
        }
        PlacementPolicy::Colocated => {
            for (i, d) in datasets.iter().enumerate() {
                for r in d.records() {
                    holdings[partition_owner(r.key, k)][i].push(*r);
                }
            }
        }
        PlacementPolicy::Adversarial => {
            for (i, d) in datasets.iter().enumerate() {
                for p in &d.partitions {
                    let mut owned = vec![0u64; k];
                    for r in &p.records {
                        owned[partition_owner(r.key, k)] += 1;
                    }
                    let w = (0..k).min_by_key(|&w| (owned[w], w)).unwrap_or(0);
                    holdings[w][i].extend(p.records.iter().copied());
                }
            }
        }
        PlacementPolicy::Model => {
            for (i, d) in datasets.iter().enumerate() {
                let dealt = model_deal(d.records().copied().collect(), k);
                for (w, records) in dealt.into_iter().enumerate() {
                    holdings[w][i] = records;
                }
            }
        }
    }
    PlacedData {
        cluster,
        policy,
        names: datasets.iter().map(|d| d.name.clone()).collect(),
        holdings,
    }
}

impl PlacedData {
    pub fn dataset_count(&self) -> usize {
        self.names.len()
    }

    pub fn dataset_records(&self, dataset: usize) -> u64 {
        self.holdings.iter().map(|w| w[dataset].len() as u64).sum()
    }

    pub fn total_records(&self) -> u64 {
        (0..self.dataset_count())
            .map(|i| self.dataset_records(i))
            .sum()
    }
}

/// Which datasets' values the aggregate expression sums.
#[derive(Debug, Clone, PartialEq)]
pub struct AggSpec {
    pub agg: AggFn,
    pub include: Vec<bool>,
}

impl AggSpec {
    pub fn resolve(query: &ParsedQuery, names: &[String]) -> Result<AggSpec, EngineError> {
        let mut include = vec![false; names.len()];
        for r in &query.expr {
            match names.iter().position(|n| n == &r.dataset) {
                Some(i) => include[i] = true,
                None => {
                    return Err(EngineError::Query(format!(
                        "expression references `{}` which is not among the loaded datasets",
                        r.dataset
                    )))
                }
            }
        }
        Ok(AggSpec {
            agg: query.aggregate,
            include,
        })
    }

    pub fn all(agg: AggFn, n: usize) -> AggSpec {
        AggSpec {
            agg,
            include: vec![true; n],
        }
    }

    fn row_value(&self, values: &[Value]) -> Value {
        values
            .iter()
            .zip(&self.include)
            .filter(|(_, &inc)| inc)
            .map(|(v, _)| *v)
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Timings {
    pub d_dt_seconds: Seconds,
    pub d_cp_seconds: Seconds,
    pub total_seconds: Seconds,
}

/// Everything one run produces: the result (absent when the budget is
/// infeasible), the plan (approximate runs), shuffle accounting, and phase
/// timings.
#[derive(Debug, Clone, Serialize)]
pub struct JoinReport {
    pub strategy: Strategy,
    pub result: Option<ApproxResult>,
    pub output_rows: Option<u64>,
    pub plan: Option<SamplePlan>,
    pub advice: Option<String>,
    pub ledger: LedgerSummary,
    pub timings: Timings,
    #[serde(skip)]
    pub detail: ShuffleLedger,
}

/// Engine knobs. The default cost model is a commodity-cluster per-row cost;
/// calibrate for anything latency-sensitive.
#[derive(Debug, Clone, Copy)]
pub struct EngineConfig {
    pub target_fp: f64,
    pub seed: u64,
    /// With-replacement sampling reports CLT bounds; without-replacement
    /// draws the same budget, deduplicates, and reports Horvitz-Thompson
    /// bounds.
    pub sample_mode: SampleMode,
    pub ht_df_mode: HtDfMode,
    pub cost_model: CostModel<f64>,
    /// Pilot draw cap per stratum when no stored sigma exists.
    pub pilot_cap: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            target_fp: 0.01,
            seed: 0,
            sample_mode: SampleMode::WithReplacement,
            ht_df_mode: HtDfMode::StrataMinusOne,
            cost_model: CostModel::new(4.16e-9, 0.0),
            pilot_cap: 100,
        }
    }
}

const FILTER_SALT_MIX: u64 = 0x1b87_3593_cf1f_eb11;
const PILOT_SEED_MIX: u64 = 0x6a09_e667_f3bc_c909;

pub struct Engine {
    placed: PlacedData,
    config: EngineConfig,
}

/// Per-key join sides at one worker, values in canonical order.
type KeyGroups = BTreeMap<u64, Vec<Vec<Value>>>;

/// Enumerate one stratum's full cross product with an odometer, streaming
/// row values into a moment sketch. Memory stays O(n) regardless of the
/// stratum size.
fn enumerate_stratum(sides: &[Vec<Value>], agg: &AggSpec) -> (u64, AggPartial) {
    let rows: u64 = sides.iter().map(|s| s.len() as u64).product();
    let mut partial = AggPartial::default();
    if rows == 0 {
        return (0, partial);
    }
    let mut idx = vec![0usize; sides.len()];
    let mut scratch = vec![0.0f64; sides.len()];
    loop {
        for (slot, (i, side)) in scratch.iter_mut().zip(sides.iter().enumerate()) {
            *slot = side[idx[i]];
        }
        partial.push(agg.row_value(&scratch));
        let mut pos = sides.len();
        loop {
            if pos == 0 {
                return (rows, partial);
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < sides[pos].len() {
                break;
            }
            idx[pos] = 0;
        }
    }
}

/// Group one worker's received records by key; only keys with records from
/// every dataset join. Sides are sorted canonically so downstream arithmetic
/// does not depend on arrival order.
fn group_by_key(per_dataset: &[Vec<Record>]) -> KeyGroups {
    let n = per_dataset.len();
    let mut by_key: BTreeMap<u64, Vec<Vec<Value>>> = BTreeMap::new();
    for (i, records) in per_dataset.iter().enumerate() {
        for r in records {
            by_key.entry(r.key).or_insert_with(|| vec![Vec::new(); n])[i].push(r.value);
        }
    }
    by_key.retain(|_, sides| sides.iter().all(|s| !s.is_empty()));
    for sides in by_key.values_mut() {
        for side in sides.iter_mut() {
            side.sort_by(|a, b| a.total_cmp(b));
        }
    }
    by_key
}

struct ExactJoin {
    rows: u64,
    merged: AggPartial,
    per_key: BTreeMap<u64, (u64, AggPartial)>,
}

/// Exact cross products over per-key groups scattered across workers;
/// per-key partials merge at the master in (key, worker) order.
fn exact_join(groups_by_worker: Vec<KeyGroups>, agg: &AggSpec) -> ExactJoin {
    let worker_results: Vec<BTreeMap<u64, (u64, AggPartial)>> = groups_by_worker
        .into_par_iter()
        .map(|groups| {
            groups
                .into_iter()
                .map(|(key, sides)| {
                    let (rows, partial) = enumerate_stratum(&sides, agg);
                    (key, (rows, partial))
                })
                .collect()
        })
        .collect();

    let mut per_key: BTreeMap<u64, (u64, AggPartial)> = BTreeMap::new();
    for worker in worker_results {
        for (key, (rows, partial)) in worker {
            let slot = per_key.entry(key).or_insert((0, AggPartial::default()));
            slot.0 += rows;
            slot.1.merge(&partial);
        }
    }
    let mut merged = AggPartial::default();
    let mut rows = 0;
    for (r, p) in per_key.values() {
        rows += r;
        merged.merge(p);
    }
    ExactJoin {
        rows,
        merged,
        per_key,
    }
}

fn exact_result(
    join: &ExactJoin,
    agg: &AggSpec,
    confidence: f64,
) -> Result<ApproxResult, EngineError> {
    let estimate = join.merged.finalize(agg.agg).ok_or_else(|| {
        EngineError::Query(format!(
            "{} is undefined over an empty join output",
            agg.agg
        ))
    })?;
    let strata = join
        .per_key
        .iter()
        .map(|(&key, (rows, partial))| StratumDiagnostic {
            key,
            b_pop: *rows,
            b: *rows,
            variance: partial.sample_variance().unwrap_or(0.0),
        })
        .collect();
    Ok(ApproxResult {
        estimate,
        error_bound: 0.0,
        confidence,
        estimator: EstimatorKind::Exact,
        strata,
    })
}

struct FilterStage {
    /// Surviving records per worker per dataset.
    survivors: Vec<Vec<Vec<Record>>>,
}

impl Engine {
    pub fn new(placed: PlacedData, config: EngineConfig) -> Self {
        Engine { placed, config }
    }

    pub fn placed(&self) -> &PlacedData {
        &self.placed
    }

    fn k(&self) -> usize {
        self.placed.cluster.workers
    }

    /// The sizing every filter of this engine's join shares: capacity of the
    /// largest input at the configured false-positive target, salted from
    /// the run seed.
    pub fn filter_sizing(&self) -> Result<FilterSizing, EngineError> {
        let capacity = (0..self.placed.dataset_count())
            .map(|i| self.placed.dataset_records(i))
            .max()
            .unwrap_or(1)
            .max(1);
        let params = crate::bloom::FilterParams::new(capacity, self.config.target_fp)?;
        Ok(FilterSizing {
            params,
            salt: splitmix64(self.config.seed ^ FILTER_SALT_MIX),
        })
    }

    /// Move every record to its owner. Under the model placement, holdings
    /// are re-dealt first so the analytic spread assumption holds at this
    /// phase boundary.
    fn shuffle_to_owners(
        &self,
        holdings: Vec<Vec<Vec<Record>>>,
        ledger: &mut ShuffleLedger,
    ) -> Vec<Vec<Vec<Record>>> {
        let k = self.k();
        let n = self.placed.dataset_count();
        let holdings = if self.placed.policy == PlacementPolicy::Model {
            let mut re_dealt = vec![vec![Vec::new(); n]; k];
            for i in 0..n {
                let mut all = Vec::new();
                for per_dataset in &holdings {
                    all.extend(per_dataset[i].iter().copied());
                }
                for (w, records) in model_deal(all, k).into_iter().enumerate() {
                    re_dealt[w][i] = records;
                }
            }
            re_dealt
        } else {
            holdings
        };

        let mut received = vec![vec![Vec::new(); n]; k];
        let mut batches: BTreeMap<(usize, usize), (u64, u64)> = BTreeMap::new();
        for (w, per_dataset) in holdings.into_iter().enumerate() {
            for (i, records) in per_dataset.into_iter().enumerate() {
                for r in records {
                    let dest = partition_owner(r.key, k);
                    if dest != w {
                        let slot = batches.entry((w, dest)).or_insert((0, 0));
                        slot.0 += 1;
                        slot.1 += r.byte_size();
                    }
                    received[dest][i].push(r);
                }
            }
        }
        for ((from, to), (records, bytes)) in batches {
            ledger.charge_records(Phase::Shuffle, from, to, records, bytes);
        }
        received
    }

    /// Stage one: per-worker partition filters, reduced per dataset to the
    /// master, intersected into the join filter, broadcast back, applied
    /// locally. Wire charges reflect the transfers that actually happen;
    /// the model lane charges the flat `|BF| (k-1)(n+1)` accounting.
    fn filter_stage(&self, ledger: &mut ShuffleLedger) -> Result<FilterStage, EngineError> {
        let k = self.k();
        let n = self.placed.dataset_count();
        let sizing = self.filter_sizing()?;
        const MASTER: usize = 0;

        // Map phase: every worker builds one filter per dataset it holds.
        let worker_filters: Vec<Vec<Option<crate::bloom::BloomFilter>>> = self
            .placed
            .holdings
            .par_iter()
            .map(|per_dataset| {
                per_dataset
                    .iter()
                    .map(|records| {
                        if records.is_empty() {
                            return Ok(None);
                        }
                        let part = crate::dataset::Partition {
                            dataset_index: 0,
                            partition_index: 0,
                            records: records.clone(),
                        };
                        build_partition_filter(&part, &sizing).map(Some)
                    })
                    .collect::<Result<_, FilterError>>()
            })
            .collect::<Result<_, FilterError>>()?;

        // Reduce phase: dataset filters accumulate at the master. Each
        // contributing worker's blob crosses the wire once whatever the
        // merge-tree shape, so the charge is one blob per remote holder.
        let mut dataset_filters = Vec::with_capacity(n);
        for i in 0..n {
            let mut acc = sizing.empty_filter()?;
            for (w, filters) in worker_filters.iter().enumerate() {
                if let Some(f) = &filters[i] {
                    ledger.charge_filter(Phase::FilterBuild, w, MASTER, f.wire_bytes());
                    acc = acc.union(f)?;
                }
            }
            ledger.charge_model(Phase::FilterBuild, acc.model_bytes() * (k as f64 - 1.0));
            dataset_filters.push(acc);
        }

        let mut join_filter = dataset_filters[0].clone();
        for f in &dataset_filters[1..] {
            join_filter = join_filter.intersect(f)?;
        }

        // Broadcast the join filter to every other worker.
        for w in 0..k {
            ledger.charge_filter(Phase::FilterBroadcast, MASTER, w, join_filter.wire_bytes());
        }
        ledger.charge_model(
            Phase::FilterBroadcast,
            join_filter.model_bytes() * (k as f64 - 1.0),
        );

        // Apply locally.
        let survivors: Vec<Vec<Vec<Record>>> = self
            .placed
            .holdings
            .par_iter()
            .map(|per_dataset| {
                per_dataset
                    .iter()
                    .map(|records| {
                        records
                            .iter()
                            .filter(|r| join_filter.contains(r.key))
                            .copied()
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(FilterStage { survivors })
    }

    /// Exact repartition join: every record shuffles to its owner, owners
    /// cross-product their keys.
    pub fn run_repartition(
        &self,
        agg: Option<&AggSpec>,
        confidence: f64,
    ) -> Result<JoinReport, EngineError> {
        let total = Instant::now();
        let mut ledger = ShuffleLedger::new();
        let agg_all = AggSpec::all(AggFn::Sum, self.placed.dataset_count());
        let agg = agg.unwrap_or(&agg_all);

        let dt = Instant::now();
        let received = self.shuffle_to_owners(self.placed.holdings.clone(), &mut ledger);
        let d_dt = dt.elapsed().as_secs_f64();

        let cp = Instant::now();
        let groups: Vec<KeyGroups> = received.iter().map(|w| group_by_key(w)).collect();
        let join = exact_join(groups, agg);
        let result = exact_result(&join, agg, confidence)?;
        let d_cp = cp.elapsed().as_secs_f64();

        Ok(JoinReport {
            strategy: Strategy::Repartition,
            result: Some(result),
            output_rows: Some(join.rows),
            plan: None,
            advice: None,
            ledger: ledger.summary(),
            timings: Timings {
                d_dt_seconds: d_dt,
                d_cp_seconds: d_cp,
                total_seconds: total.elapsed().as_secs_f64(),
            },
            detail: ledger,
        })
    }

    /// Exact broadcast join: all but the largest dataset replicate to every
    /// worker holding the largest; the join runs map-side.
    pub fn run_broadcast(
        &self,
        agg: Option<&AggSpec>,
        confidence: f64,
    ) -> Result<JoinReport, EngineError> {
        let total = Instant::now();
        let mut ledger = ShuffleLedger::new();
        let n = self.placed.dataset_count();
        let k = self.k();
        let agg_all = AggSpec::all(AggFn::Sum, n);
        let agg = agg.unwrap_or(&agg_all);

        // Stationary dataset: largest record count, ties to the lowest index.
        let largest = (0..n)
            .max_by_key(|&i| (self.placed.dataset_records(i), std::cmp::Reverse(i)))
            .unwrap_or(0);
        let hosts: Vec<usize> = (0..k)
            .filter(|&w| !self.placed.holdings[w][largest].is_empty())
            .collect();

        let dt = Instant::now();
        for i in 0..n {
            if i == largest {
                continue;
            }
            for w in 0..k {
                let records = &self.placed.holdings[w][i];
                if records.is_empty() {
                    continue;
                }
                let bytes: u64 = records.iter().map(|r| r.byte_size()).sum();
                for &dest in &hosts {
                    ledger.charge_records(Phase::Broadcast, w, dest, records.len() as u64, bytes);
                }
            }
        }
        // Replicas of each non-stationary dataset, grouped once by key.
        let mut replicas: Vec<Vec<Record>> = vec![Vec::new(); n];
        for (i, replica) in replicas.iter_mut().enumerate() {
            if i == largest {
                continue;
            }
            for per_dataset in &self.placed.holdings {
                replica.extend(per_dataset[i].iter().copied());
            }
        }
        let d_dt = dt.elapsed().as_secs_f64();

        let cp = Instant::now();
        let groups: Vec<KeyGroups> = hosts
            .par_iter()
            .map(|&w| {
                let per_dataset: Vec<Vec<Record>> = replicas
                    .iter()
                    .enumerate()
                    .map(|(i, replica)| {
                        if i == largest {
                            self.placed.holdings[w][largest].clone()
                        } else {
                            replica.clone()
                        }
                    })
                    .collect();
                group_by_key(&per_dataset)
            })
            .collect();
        let join = exact_join(groups, agg);
        let result = exact_result(&join, agg, confidence)?;
        let d_cp = cp.elapsed().as_secs_f64();

        Ok(JoinReport {
            strategy: Strategy::Broadcast,
            result: Some(result),
            output_rows: Some(join.rows),
            plan: None,
            advice: None,
            ledger: ledger.summary(),
            timings: Timings {
                d_dt_seconds: d_dt,
                d_cp_seconds: d_cp,
                total_seconds: total.elapsed().as_secs_f64(),
            },
            detail: ledger,
        })
    }

    /// Exact join with pre-filtering: only records the join filter accepts
    /// are repartitioned. False positives shuffle but die at the join.
    pub fn run_bloom_exact(
        &self,
        agg: Option<&AggSpec>,
        confidence: f64,
    ) -> Result<JoinReport, EngineError> {
        let total = Instant::now();
        let mut ledger = ShuffleLedger::new();
        let agg_all = AggSpec::all(AggFn::Sum, self.placed.dataset_count());
        let agg = agg.unwrap_or(&agg_all);

        let dt = Instant::now();
        let stage = self.filter_stage(&mut ledger)?;
        let received = self.shuffle_to_owners(stage.survivors, &mut ledger);
        let d_dt = dt.elapsed().as_secs_f64();

        let cp = Instant::now();
        let groups: Vec<KeyGroups> = received.iter().map(|w| group_by_key(w)).collect();
        let join = exact_join(groups, agg);
        let result = exact_result(&join, agg, confidence)?;
        let d_cp = cp.elapsed().as_secs_f64();

        Ok(JoinReport {
            strategy: Strategy::Bloom,
            result: Some(result),
            output_rows: Some(join.rows),
            plan: None,
            advice: None,
            ledger: ledger.summary(),
            timings: Timings {
                d_dt_seconds: d_dt,
                d_cp_seconds: d_cp,
                total_seconds: total.elapsed().as_secs_f64(),
            },
            detail: ledger,
        })
    }

    /// The two-stage pipeline: filter, shuffle survivors, census, plan under
    /// the query budget, sample each stratum's cross-product space, estimate
    /// with an error bound, and feed measured sigmas back to the store.
    ///
    /// Takes the exact path instead when the plan covers the whole
    /// population (the budget affords the full cross product).
    pub fn run_approx(
        &self,
        query: &ParsedQuery,
        sigma_store: &mut SigmaStore,
    ) -> Result<JoinReport, EngineError> {
        let total = Instant::now();
        let mut ledger = ShuffleLedger::new();
        let agg = AggSpec::resolve(query, &self.placed.names)?;
        let confidence = query.budget.confidence;
        let fp_key = fingerprint(query);

        let dt = Instant::now();
        let stage = self.filter_stage(&mut ledger)?;
        let received = self.shuffle_to_owners(stage.survivors, &mut ledger);
        let groups: Vec<KeyGroups> = received.iter().map(|w| group_by_key(w)).collect();
        let d_dt = dt.elapsed().as_secs_f64();

        let cp = Instant::now();
        // Census from the grouped survivors.
        let mut census: BTreeMap<u64, StratumStats> = BTreeMap::new();
        for worker_groups in &groups {
            for (&key, sides) in worker_groups {
                let per_input_counts: Vec<u64> = sides.iter().map(|s| s.len() as u64).collect();
                let mut b_pop: u64 = 1;
                for &c in &per_input_counts {
                    b_pop = b_pop
                        .checked_mul(c)
                        .ok_or(DatasetError::CensusOverflow(key))?;
                }
                census.insert(
                    key,
                    StratumStats {
                        key,
                        per_input_counts,
                        b_pop,
                        sigma: None,
                    },
                );
            }
        }

        // Strata in key order, remembering the owning worker.
        let strata: BTreeMap<u64, StratumInput> = groups
            .iter()
            .flat_map(|worker_groups| {
                worker_groups.iter().map(|(&key, sides)| {
                    (
                        key,
                        StratumInput {
                            key,
                            sides: sides.clone(),
                        },
                    )
                })
            })
            .collect();

        // Plan under the budget.
        let mut pilot_sigmas: BTreeMap<u64, f64> = BTreeMap::new();
        let plan = match query.budget.mode {
            BudgetMode::Exact => SamplePlan {
                per_stratum: census.iter().map(|(&k, s)| (k, s.b_pop)).collect(),
                sampling_fraction: 1.0,
                predicted_d_cp: None,
                feasible: true,
            },
            BudgetMode::Latency { .. } => {
                let plan = plan_latency(&query.budget, &census, &self.config.cost_model, d_dt)?;
                if !plan.feasible {
                    let minimum = d_dt
                        + self.config.cost_model.epsilon
                        + self.config.cost_model.beta * census.len() as f64;
                    let advice = format!(
                        "latency budget infeasible: filtering and transfer took {d_dt:.3} s and \
                         one row per stratum needs {minimum:.3} s in total; rerun WITH a deadline \
                         of at least {:.3} SECONDS, an ERROR budget, or an exact strategy",
                        minimum * 1.05
                    );
                    return Ok(JoinReport {
                        strategy: Strategy::Approx,
                        result: None,
                        output_rows: None,
                        plan: Some(plan),
                        advice: Some(advice),
                        ledger: ledger.summary(),
                        timings: Timings {
                            d_dt_seconds: d_dt,
                            d_cp_seconds: cp.elapsed().as_secs_f64(),
                            total_seconds: total.elapsed().as_secs_f64(),
                        },
                        detail: ledger,
                    });
                }
                plan
            }
            BudgetMode::ErrorBound { .. } => {
                // Sigma per stratum: stored values, pilots for the rest.
                let stored = sigma_store.sigmas_for(fp_key);
                let pilot_master = splitmix64(self.config.seed ^ PILOT_SEED_MIX);
                let missing: Vec<&StratumInput> = strata
                    .values()
                    .filter(|s| !stored.contains_key(&s.key))
                    .collect();
                let pilots: Vec<(u64, u64, f64)> = missing
                    .par_iter()
                    .map(|input| {
                        let b_pop = census[&input.key].b_pop;
                        let draws = self.config.pilot_cap.min(b_pop).max(1);
                        let rows = sample_stratum(
                            input,
                            draws,
                            derive_stratum_seed(pilot_master, input.key),
                            SampleMode::WithReplacement,
                        )?;
                        let mut partial = AggPartial::default();
                        for row in &rows {
                            partial.push(agg.row_value(&row.values));
                        }
                        let sigma = partial.sample_variance().unwrap_or(0.0).sqrt();
                        Ok((input.key, draws, sigma))
                    })
                    .collect::<Result<_, SampleError>>()?;
                for (key, draws, sigma) in pilots {
                    ledger.pilot_draws += draws;
                    pilot_sigmas.insert(key, sigma);
                }
                for stats in census.values_mut() {
                    stats.sigma = stored
                        .get(&stats.key)
                        .or_else(|| pilot_sigmas.get(&stats.key))
                        .copied();
                }
                let mut plan = plan_error(&query.budget, &census)?;
                if self.config.sample_mode == SampleMode::WithoutReplacement {
                    plan.clamp_to_population(&census);
                }
                plan
            }
        };

        let mut measured_sigmas: BTreeMap<u64, f64> = BTreeMap::new();
        let (result, output_rows) = if plan.is_full_enumeration(&census) {
            // Full-budget runs enumerate exactly.
            let join = exact_join(groups, &agg);
            ledger.cp_draws = join.rows;
            for (&key, (_, partial)) in &join.per_key {
                if let Some(v) = partial.population_variance() {
                    measured_sigmas.insert(key, v.sqrt());
                }
            }
            let result = exact_result(&join, &agg, confidence)?;
            (result, Some(join.rows))
        } else {
            match self.config.sample_mode {
                SampleMode::WithReplacement => {
                    let sampled: Vec<CltStratum> = strata
                        .par_iter()
                        .map(|(&key, input)| {
                            let b = plan.per_stratum.get(&key).copied().unwrap_or(0);
                            let rows = sample_stratum(
                                input,
                                b,
                                derive_stratum_seed(self.config.seed, key),
                                SampleMode::WithReplacement,
                            )?;
                            let mut partial = AggPartial::default();
                            for row in &rows {
                                partial.push(agg.row_value(&row.values));
                            }
                            Ok(CltStratum {
                                key,
                                b_pop: census[&key].b_pop,
                                partial,
                            })
                        })
                        .collect::<Result<_, SampleError>>()?;
                    let sampled: Vec<CltStratum> = sampled
                        .into_iter()
                        .filter(|s| s.partial.count > 0)
                        .collect();
                    ledger.cp_draws = sampled.iter().map(|s| s.partial.count).sum();
                    for s in &sampled {
                        if let Some(v) = s.partial.sample_variance() {
                            measured_sigmas.insert(s.key, v.sqrt());
                        }
                    }
                    let result = clt_bound_for(agg.agg, &sampled, confidence)?;
                    (result, None)
                }
                SampleMode::WithoutReplacement => {
                    // Dedup scheme: draw the budget with replacement, keep
                    // distinct edges, estimate with Horvitz-Thompson.
                    let sampled: Vec<HtStratum> = strata
                        .par_iter()
                        .map(|(&key, input)| {
                            let draws = plan.per_stratum.get(&key).copied().unwrap_or(0);
                            let rows = sample_stratum_dedup(
                                input,
                                draws,
                                derive_stratum_seed(self.config.seed, key),
                            )?;
                            let mut distinct = AggPartial::default();
                            for row in &rows {
                                distinct.push(agg.row_value(&row.values));
                            }
                            Ok(HtStratum {
                                key,
                                b_pop: census[&key].b_pop,
                                draws,
                                distinct,
                            })
                        })
                        .collect::<Result<_, SampleError>>()?;
                    let sampled: Vec<HtStratum> =
                        sampled.into_iter().filter(|s| s.draws > 0).collect();
                    ledger.cp_draws = sampled.iter().map(|s| s.draws).sum();
                    for s in &sampled {
                        if let Some(v) = s.distinct.sample_variance() {
                            measured_sigmas.insert(s.key, v.sqrt());
                        }
                    }
                    let result =
                        match agg.agg {
                            AggFn::Sum => ht_bound(&sampled, confidence, self.config.ht_df_mode)?,
                            AggFn::Count => {
                                let rows: u64 = census.values().map(|s| s.b_pop).sum();
                                ApproxResult {
                                    estimate: rows as f64,
                                    error_bound: 0.0,
                                    confidence,
                                    estimator: EstimatorKind::Ht,
                                    strata: sampled
                                        .iter()
                                        .map(|s| StratumDiagnostic {
                                            key: s.key,
                                            b_pop: s.b_pop,
                                            b: s.distinct.count,
                                            variance: s.distinct.sample_variance().unwrap_or(0.0),
                                        })
                                        .collect(),
                                }
                            }
                            AggFn::Avg => {
                                let rows: u64 = census.values().map(|s| s.b_pop).sum();
                                if rows == 0 {
                                    return Err(EngineError::Query(
                                        "AVG is undefined over an empty join output".into(),
                                    ));
                                }
                                let mut r = ht_bound(&sampled, confidence, self.config.ht_df_mode)?;
                                r.estimate /= rows as f64;
                                r.error_bound /= rows as f64;
                                r
                            }
                            AggFn::Stdev => return Err(EngineError::Unsupported(
                                "STDEV under the deduplicating estimator; use with-replacement \
                                 sampling"
                                    .into(),
                            )),
                        };
                    (result, None)
                }
            }
        };

        // Feedback: measured sigmas win, pilot sigmas fill the gaps.
        for (key, sigma) in &pilot_sigmas {
            if !measured_sigmas.contains_key(key) {
                measured_sigmas.insert(*key, *sigma);
            }
        }
        sigma_store.put_many(fp_key, &measured_sigmas)?;

        let d_cp = cp.elapsed().as_secs_f64();
        Ok(JoinReport {
            strategy: Strategy::Approx,
            result: Some(result),
            output_rows,
            plan: Some(plan),
            advice: None,
            ledger: ledger.summary(),
            timings: Timings {
                d_dt_seconds: d_dt,
                d_cp_seconds: d_cp,
                total_seconds: total.elapsed().as_secs_f64(),
            },
            detail: ledger,
        })
    }

    /// Dispatch by strategy name; exact strategies take the aggregate from
    /// the query and ignore its budget.
    pub fn run(
        &self,
        strategy: Strategy,
        query: &ParsedQuery,
        sigma_store: &mut SigmaStore,
    ) -> Result<JoinReport, EngineError> {
        let agg = AggSpec::resolve(query, &self.placed.names)?;
        let confidence = query.budget.confidence;
        match strategy {
            Strategy::Repartition => self.run_repartition(Some(&agg), confidence),
            Strategy::Broadcast => self.run_broadcast(Some(&agg), confidence),
            Strategy::Bloom => self.run_bloom_exact(Some(&agg), confidence),
            Strategy::Approx => self.run_approx(query, sigma_store),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, SyntheticSpec};
    use crate::query::parse;

    fn flats(datasets: &[Dataset]) -> Vec<Vec<(u64, f64)>> {
        datasets
            .iter()
            .map(|d| d.records().map(|r| (r.key, r.value)).collect())
            .collect()
    }

    fn small_instance(seed: u64) -> Vec<Dataset> {
        generate(
            &SyntheticSpec::new(vec![120, 200], vec![12, 20], 0.3, 6.0, seed).with_partitions(3),
        )
        .unwrap()
    }

    #[test]
    fn colocated_repartition_moves_nothing() {
        let data = small_instance(1);
        let placed = place(&data, Cluster::new(4), PlacementPolicy::Colocated, 0);
        let engine = Engine::new(placed, EngineConfig::default());
        let report = engine.run_repartition(None, 0.95).unwrap();
        assert_eq!(report.detail.total_bytes(), 0);
        assert_eq!(report.ledger.total_records, 0);
    }

    #[test]
    fn uniform_repartition_moves_about_k_minus_1_over_k() {
        let data = generate(
            &SyntheticSpec::new(vec![4000, 4000], vec![100, 100], 0.1, 5.0, 3).with_partitions(40),
        )
        .unwrap();
        let total: u64 = data.iter().map(|d| d.total_records()).sum();
        let placed = place(&data, Cluster::new(4), PlacementPolicy::Uniform, 0);
        let engine = Engine::new(placed, EngineConfig::default());
        let report = engine.run_repartition(None, 0.95).unwrap();
        let moved = report.detail.phase_totals(Phase::Shuffle).records;
        let expected = total as f64 * 3.0 / 4.0;
        assert!(
            (moved as f64 - expected).abs() / expected < 0.05,
            "moved {moved}, expected about {expected}"
        );
    }

    #[test]
    fn model_placement_matches_closed_form_exactly() {
        // Sizes divisible by k: the dealt layout moves exactly (k-1)/k.
        let data = generate(
            &SyntheticSpec::new(vec![500, 1500], vec![20, 30], 0.2, 5.0, 9).with_partitions(7),
        )
        .unwrap();
        let k = 5;
        let placed = place(&data, Cluster::new(k), PlacementPolicy::Model, 0);
        let engine = Engine::new(placed, EngineConfig::default());
        let report = engine.run_repartition(None, 0.95).unwrap();
        let moved = report.detail.phase_totals(Phase::Shuffle).records;
        let predicted = crate::commcost::predict_repartition(&[500.0, 1500.0], k);
        assert_eq!(
            moved as f64, predicted,
            "model placement must reproduce the closed form"
        );
    }

    #[test]
    fn broadcast_reference_count_and_zero_at_k1() {
        // R1: 100 records in one partition (lands on one worker). R2 spans
        // all four workers. Every R1 record goes to the three other hosts.
        let r1 = Dataset::from_records(0, "R1", (0..100).map(|i| Record::new(i, 1.0)).collect(), 1);
        let r2 =
            Dataset::from_records(1, "R2", (0..1000).map(|i| Record::new(i, 2.0)).collect(), 4);
        let placed = place(
            &[r1.clone(), r2.clone()],
            Cluster::new(4),
            PlacementPolicy::Uniform,
            0,
        );
        let engine = Engine::new(placed, EngineConfig::default());
        let report = engine.run_broadcast(None, 0.95).unwrap();
        assert_eq!(report.detail.phase_totals(Phase::Broadcast).records, 300);

        let placed = place(&[r1, r2], Cluster::new(1), PlacementPolicy::Uniform, 0);
        let engine = Engine::new(placed, EngineConfig::default());
        let report = engine.run_broadcast(None, 0.95).unwrap();
        assert_eq!(report.detail.total_bytes(), 0);
    }

    #[test]
    fn exact_strategies_agree_with_brute_force() {
        for seed in [2u64, 7, 23] {
            let data = small_instance(seed);
            let truth = approxjoin_testkit::brute_force_join(&flats(&data), &[true, true]);
            for policy in [
                PlacementPolicy::Uniform,
                PlacementPolicy::Colocated,
                PlacementPolicy::Adversarial,
                PlacementPolicy::Model,
            ] {
                let placed = place(&data, Cluster::new(3), policy, seed);
                let engine = Engine::new(placed, EngineConfig::default());
                for report in [
                    engine.run_repartition(None, 0.95).unwrap(),
                    engine.run_broadcast(None, 0.95).unwrap(),
                    engine.run_bloom_exact(None, 0.95).unwrap(),
                ] {
                    assert_eq!(report.output_rows, Some(truth.rows));
                    let est = report.result.unwrap().estimate;
                    assert!(
                        (est - truth.sum).abs() < 1e-6,
                        "strategy {:?} got {est}, truth {}",
                        report.strategy,
                        truth.sum
                    );
                }
            }
        }
    }

    #[test]
    fn bloom_exact_shuffles_less_on_low_overlap() {
        let data = generate(
            &SyntheticSpec::new(vec![5000, 5000], vec![500, 500], 0.01, 5.0, 5).with_partitions(8),
        )
        .unwrap();
        let placed = place(&data, Cluster::new(4), PlacementPolicy::Uniform, 0);
        let engine = Engine::new(placed, EngineConfig::default());
        let bloom = engine.run_bloom_exact(None, 0.95).unwrap();
        let repart = engine.run_repartition(None, 0.95).unwrap();
        let b = bloom.detail.phase_totals(Phase::Shuffle).bytes;
        let r = repart.detail.phase_totals(Phase::Shuffle).bytes;
        assert!(b * 5 <= r, "filtered shuffle {b} not under a fifth of {r}");
        // Same answer regardless.
        assert_eq!(
            bloom.result.unwrap().estimate,
            repart.result.unwrap().estimate
        );
    }

    #[test]
    fn bloom_exact_at_full_overlap_shuffles_like_repartition() {
        let data = generate(
            &SyntheticSpec::new(vec![400, 400], vec![40, 40], 1.0, 5.0, 8).with_partitions(4),
        )
        .unwrap();
        let placed = place(&data, Cluster::new(4), PlacementPolicy::Uniform, 0);
        let engine = Engine::new(placed, EngineConfig::default());
        let bloom = engine.run_bloom_exact(None, 0.95).unwrap();
        let repart = engine.run_repartition(None, 0.95).unwrap();
        assert_eq!(
            bloom.detail.phase_totals(Phase::Shuffle).records,
            repart.detail.phase_totals(Phase::Shuffle).records
        );
        assert!(bloom.detail.phase_totals(Phase::FilterBuild).bytes > 0);
    }

    #[test]
    fn approx_exact_budget_equals_repartition() {
        let data = small_instance(4);
        let placed = place(&data, Cluster::new(3), PlacementPolicy::Uniform, 0);
        let engine = Engine::new(placed, EngineConfig::default());
        let query = parse("SELECT SUM(R1.V + R2.V) FROM R1, R2 WHERE R1.A = R2.A").unwrap();
        let mut store = SigmaStore::in_memory();
        let approx = engine.run_approx(&query, &mut store).unwrap();
        let repart = engine.run_repartition(None, 0.95).unwrap();
        let a = approx.result.unwrap();
        assert_eq!(a.estimator, EstimatorKind::Exact);
        assert_eq!(a.error_bound, 0.0);
        assert_eq!(a.estimate, repart.result.unwrap().estimate);
        assert_eq!(approx.detail.cp_draws, approx.output_rows.unwrap());
    }

    #[test]
    fn approx_error_budget_reports_a_bound() {
        let data = generate(
            &SyntheticSpec::new(vec![2000, 2000], vec![60, 60], 0.5, 10.0, 11).with_partitions(4),
        )
        .unwrap();
        let placed = place(&data, Cluster::new(4), PlacementPolicy::Uniform, 0);
        let engine = Engine::new(placed, EngineConfig::default());
        let query =
            parse("SELECT SUM(R1.V + R2.V) FROM R1, R2 WHERE R1.A = R2.A ERROR 1 CONFIDENCE 95%")
                .unwrap();
        let mut store = SigmaStore::in_memory();
        let report = engine.run_approx(&query, &mut store).unwrap();
        let result = report.result.unwrap();
        assert_eq!(result.estimator, EstimatorKind::Clt);
        assert!(result.error_bound > 0.0);
        let plan = report.plan.unwrap();
        assert!(plan.feasible);
        assert_eq!(report.detail.cp_draws, plan.total_samples());
        assert!(report.detail.pilot_draws > 0, "first run must pilot sigmas");
        // The feedback store now has a sigma for every stratum sampled.
        let fp = fingerprint(&query);
        assert_eq!(store.sigmas_for(fp).len(), result.strata.len());
    }

    #[test]
    fn approx_infeasible_latency_reports_advice() {
        let data = small_instance(6);
        let placed = place(&data, Cluster::new(2), PlacementPolicy::Uniform, 0);
        // A cost model so slow nothing fits in the deadline.
        let config = EngineConfig {
            cost_model: CostModel::new(1e3, 0.0),
            ..EngineConfig::default()
        };
        let engine = Engine::new(placed, config);
        let query =
            parse("SELECT SUM(R1.V + R2.V) FROM R1, R2 WHERE R1.A = R2.A WITHIN 0.001 SECONDS")
                .unwrap();
        let mut store = SigmaStore::in_memory();
        let report = engine.run_approx(&query, &mut store).unwrap();
        assert!(report.result.is_none());
        assert!(!report.plan.unwrap().feasible);
        assert!(report.advice.unwrap().contains("infeasible"));
    }

    #[test]
    fn approx_is_worker_count_invariant() {
        let data = generate(
            &SyntheticSpec::new(vec![1500, 1500], vec![50, 50], 0.4, 8.0, 21).with_partitions(6),
        )
        .unwrap();
        let query =
            parse("SELECT SUM(R1.V + R2.V) FROM R1, R2 WHERE R1.A = R2.A ERROR 150 CONFIDENCE 95%")
                .unwrap();
        let mut results = Vec::new();
        for k in [1usize, 2, 4] {
            let placed = place(&data, Cluster::new(k), PlacementPolicy::Uniform, 0);
            let engine = Engine::new(
                placed,
                EngineConfig {
                    seed: 99,
                    ..Default::default()
                },
            );
            let mut store = SigmaStore::in_memory();
            let report = engine.run_approx(&query, &mut store).unwrap();
            results.push(serde_json::to_string(&report.result.unwrap()).unwrap());
        }
        assert_eq!(results[0], results[1]);
        assert_eq!(results[1], results[2]);
    }

    #[test]
    fn placement_is_deterministic() {
        let data = small_instance(3);
        for policy in [
            PlacementPolicy::Uniform,
            PlacementPolicy::Colocated,
            PlacementPolicy::Adversarial,
            PlacementPolicy::Model,
        ] {
            let a = place(&data, Cluster::new(5), policy, 11);
            let b = place(&data, Cluster::new(5), policy, 11);
            assert_eq!(a.holdings, b.holdings, "{policy:?}");
        }
        // The uniform seed rotates the round-robin start.
        let a = place(&data, Cluster::new(5), PlacementPolicy::Uniform, 0);
        let b = place(&data, Cluster::new(5), PlacementPolicy::Uniform, 1);
        assert_ne!(a.holdings, b.holdings);
    }

    #[test]
    fn ledger_conservation_per_phase() {
        let data = small_instance(13);
        let placed = place(&data, Cluster::new(4), PlacementPolicy::Uniform, 1);
        let engine = Engine::new(placed, EngineConfig::default());
        let report = engine.run_bloom_exact(None, 0.95).unwrap();
        for phase in Phase::ALL {
            let (sent, received) = report.detail.flows(phase);
            assert_eq!(
                sent.values().sum::<u64>(),
                received.values().sum::<u64>(),
                "conservation broken in {phase:?}"
            );
        }
        let t = report.timings;
        assert!(t.total_seconds >= t.d_dt_seconds + t.d_cp_seconds - 1e-6);
    }
}
