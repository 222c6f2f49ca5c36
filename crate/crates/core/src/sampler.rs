//! Stratified random edge sampling over each join key's complete
//! multipartite cross-product graph, without materializing it.
//!
//! A join output row for key C is one vertex from each side (one
//! participating record per input); picking each endpoint uniformly and
//! independently draws a uniform edge, so a stratum is sampled by repeating
//! that pick. Edge identity for deduplication is the tuple of per-side
//! element indices, not values: equal values on one side are distinct
//! vertices.

use crate::budget::SamplePlan;
pub use crate::hashing::derive_stratum_seed;
use crate::hashing::partition_owner;
use crate::Value;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::HashSet;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SampleError {
    #[error(
        "stratum {key}: cannot draw {requested} distinct rows from a population of {population}"
    )]
    BudgetExceedsPopulation {
        key: u64,
        requested: u64,
        population: u64,
    },
    #[error("stratum {0} has an empty side; filtering guarantees non-empty sides")]
    EmptySide(u64),
    #[error("plan has no entry for stratum {0}")]
    PlanMissing(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    WithReplacement,
    WithoutReplacement,
}

/// One stratum's sampling input: the participating records' values for this
/// key, one list per input dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumInput {
    pub key: u64,
    pub sides: Vec<Vec<Value>>,
}

impl StratumInput {
    /// Cross-product cardinality of this stratum.
    pub fn population(&self) -> u128 {
        self.sides.iter().map(|s| s.len() as u128).product()
    }
}

/// One sampled join-output row: the selected edge's endpoint values.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledRow {
    pub key: u64,
    pub values: Vec<Value>,
}

fn decode_edge(mut id: u128, sides: &[Vec<Value>]) -> Vec<usize> {
    let mut idx = Vec::with_capacity(sides.len());
    for side in sides {
        let len = side.len() as u128;
        idx.push((id % len) as usize);
        id /= len;
    }
    idx
}

fn row_from_indices(input: &StratumInput, idx: &[usize]) -> SampledRow {
    SampledRow {
        key: input.key,
        values: idx
            .iter()
            .zip(&input.sides)
            .map(|(&i, side)| side[i])
            .collect(),
    }
}

/// After this many consecutive duplicate rejections the without-replacement
/// sampler falls back to enumerating the remaining edge space, which bounds
/// the retry loop when b approaches the population size.
const REJECTS_PER_ROW: u64 = 50;

/// Draw `b` rows from one stratum. With replacement: `b` independent uniform
/// edges, duplicates allowed. Without replacement: `b` distinct edges via
/// dedup-and-retry with an enumeration fallback. Deterministic for a fixed
/// seed.
pub fn sample_stratum(
    input: &StratumInput,
    b: u64,
    seed: u64,
    mode: SampleMode,
) -> Result<Vec<SampledRow>, SampleError> {
    if input.sides.iter().any(|s| s.is_empty()) {
        return Err(SampleError::EmptySide(input.key));
    }
    let population = input.population();
    if mode == SampleMode::WithoutReplacement && (b as u128) > population {
        return Err(SampleError::BudgetExceedsPopulation {
            key: input.key,
            requested: b,
            population: population.min(u64::MAX as u128) as u64,
        });
    }
    if b == 0 {
        return Ok(Vec::new());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(b as usize);

    match mode {
        SampleMode::WithReplacement => {
            let mut idx = vec![0usize; input.sides.len()];
            for _ in 0..b {
                for (slot, side) in idx.iter_mut().zip(&input.sides) {
                    *slot = rng.gen_range(0..side.len());
                }
                rows.push(row_from_indices(input, &idx));
            }
        }
        SampleMode::WithoutReplacement => {
            if b as u128 == population {
                // Degenerate full enumeration; the retry loop would thrash.
                for id in 0..population {
                    rows.push(row_from_indices(input, &decode_edge(id, &input.sides)));
                }
                return Ok(rows);
            }
            let mut seen: HashSet<u128> = HashSet::with_capacity(b as usize);
            let max_rejects = REJECTS_PER_ROW.saturating_mul(b);
            let mut consecutive_rejects = 0u64;
            let mut idx = vec![0usize; input.sides.len()];
            while (seen.len() as u64) < b {
                let mut id: u128 = 0;
                let mut radix: u128 = 1;
                for (slot, side) in idx.iter_mut().zip(&input.sides) {
                    *slot = rng.gen_range(0..side.len());
                    id += *slot as u128 * radix;
                    radix *= side.len() as u128;
                }
                if seen.insert(id) {
                    consecutive_rejects = 0;
                    rows.push(row_from_indices(input, &idx));
                } else {
                    consecutive_rejects += 1;
                    if consecutive_rejects >= max_rejects {
                        // Enumerate what is left and shuffle it.
                        let mut remaining: Vec<u128> =
                            (0..population).filter(|id| !seen.contains(id)).collect();
                        let need = b as usize - seen.len();
                        for i in 0..need {
                            let j = rng.gen_range(i..remaining.len());
                            remaining.swap(i, j);
                            rows.push(row_from_indices(
                                input,
                                &decode_edge(remaining[i], &input.sides),
                            ));
                        }
                        return Ok(rows);
                    }
                }
            }
        }
    }
    Ok(rows)
}

/// Fixed-draws dedup scheme: draw `draws` edges with replacement and keep
/// the first occurrence of each distinct edge. The distinct count is random;
/// each edge's inclusion probability is `1 - (1 - 1/B)^draws`, which is what
/// the Horvitz-Thompson estimator weights by.
pub fn sample_stratum_dedup(
    input: &StratumInput,
    draws: u64,
    seed: u64,
) -> Result<Vec<SampledRow>, SampleError> {
    if input.sides.iter().any(|s| s.is_empty()) {
        return Err(SampleError::EmptySide(input.key));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<u128> = HashSet::new();
    let mut rows = Vec::new();
    let mut idx = vec![0usize; input.sides.len()];
    for _ in 0..draws {
        let mut id: u128 = 0;
        let mut radix: u128 = 1;
        for (slot, side) in idx.iter_mut().zip(&input.sides) {
            *slot = rng.gen_range(0..side.len());
            id += *slot as u128 * radix;
            radix *= side.len() as u128;
        }
        if seen.insert(id) {
            rows.push(row_from_indices(input, &idx));
        }
    }
    Ok(rows)
}

/// Distributed sampling: strata are assigned to workers by hashing the join
/// key, every stratum draws from a seed derived from (master seed, key), and
/// the per-worker outputs union to the stratified sample. The result is
/// independent of the worker count.
pub fn sample_join(
    strata: &[StratumInput],
    plan: &SamplePlan,
    worker_count: usize,
    master_seed: u64,
    mode: SampleMode,
) -> Result<Vec<Vec<SampledRow>>, SampleError> {
    let mut sorted: Vec<&StratumInput> = strata.iter().collect();
    sorted.sort_by_key(|s| s.key);

    let sampled: Vec<(usize, Vec<SampledRow>)> = sorted
        .par_iter()
        .map(|input| {
            let b = plan
                .per_stratum
                .get(&input.key)
                .copied()
                .ok_or(SampleError::PlanMissing(input.key))?;
            let seed = derive_stratum_seed(master_seed, input.key);
            let rows = sample_stratum(input, b, seed, mode)?;
            Ok((partition_owner(input.key, worker_count), rows))
        })
        .collect::<Result<_, SampleError>>()?;

    let mut out = vec![Vec::new(); worker_count.max(1)];
    for (worker, rows) in sampled {
        out[worker].extend(rows);
    }
    Ok(out)
}
