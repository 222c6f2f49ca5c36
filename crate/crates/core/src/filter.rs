//! Stage 1 of the pipeline: build the multi-way join filter over all inputs
//! and drop records that cannot participate.
//!
//! Every filter in one join shares (|BF|, h, salt) sized for the largest
//! input, so partition filters OR together into dataset filters and dataset
//! filters AND together into the join filter as pure bit operations.

use crate::bloom::{BloomError, BloomFilter, FilterParams};
use crate::dataset::{Dataset, Partition};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FilterError {
    #[error(transparent)]
    Bloom(#[from] BloomError),
    #[error("tree merge fanout must be at least 2, got {0}")]
    BadFanout(usize),
    #[error("tree merge needs at least one filter")]
    NoFilters,
}

/// Shared sizing of every filter in one join.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterSizing {
    pub params: FilterParams,
    pub salt: u64,
}

impl FilterSizing {
    /// Size for the largest input's record count at the given target rate.
    pub fn for_datasets(
        datasets: &[Dataset],
        target_fp: f64,
        salt: u64,
    ) -> Result<Self, FilterError> {
        let capacity = datasets
            .iter()
            .map(|d| d.total_records())
            .max()
            .unwrap_or(1)
            .max(1);
        Ok(FilterSizing {
            params: FilterParams::new(capacity, target_fp)?,
            salt,
        })
    }

    pub fn empty_filter(&self) -> Result<BloomFilter, FilterError> {
        Ok(BloomFilter::sized(self.params, self.salt)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergeOp {
    Union,
    Intersect,
}

/// Build the filter of one partition.
pub fn build_partition_filter(
    partition: &Partition,
    sizing: &FilterSizing,
) -> Result<BloomFilter, FilterError> {
    let mut f = sizing.empty_filter()?;
    for r in &partition.records {
        f.insert(r.key);
    }
    Ok(f)
}

/// Build a dataset filter: partition filters built in parallel, then merged.
/// Fixed-size filters make this a pure bit-OR, so the result is identical no
/// matter how the records are partitioned.
pub fn build_input_filter(
    dataset: &Dataset,
    sizing: &FilterSizing,
) -> Result<BloomFilter, FilterError> {
    let partials: Vec<BloomFilter> = dataset
        .partitions
        .par_iter()
        .map(|p| build_partition_filter(p, sizing))
        .collect::<Result<_, _>>()?;
    if partials.is_empty() {
        return sizing.empty_filter();
    }
    let (merged, _) = tree_merge(partials, DEFAULT_FANOUT, MergeOp::Union)?;
    Ok(merged)
}

/// Default merge fanout; balances tree depth against per-merge load.
pub const DEFAULT_FANOUT: usize = 4;

/// Merge filters level by level in groups of `fanout`. Bit-identical to a
/// flat left fold (the merges are associative); returns the merged filter
/// and the tree depth.
pub fn tree_merge(
    filters: Vec<BloomFilter>,
    fanout: usize,
    op: MergeOp,
) -> Result<(BloomFilter, usize), FilterError> {
    if fanout < 2 {
        return Err(FilterError::BadFanout(fanout));
    }
    if filters.is_empty() {
        return Err(FilterError::NoFilters);
    }
    let mut level = filters;
    let mut depth = 0usize;
    while level.len() > 1 {
        depth += 1;
        level = level
            .par_chunks(fanout)
            .map(|chunk| {
                let mut acc = chunk[0].clone();
                for f in &chunk[1..] {
                    acc = match op {
                        MergeOp::Union => acc.union(f)?,
                        MergeOp::Intersect => acc.intersect(f)?,
                    };
                }
                Ok(acc)
            })
            .collect::<Result<Vec<_>, FilterError>>()?;
    }
    Ok((level.pop().unwrap(), depth))
}

/// Build the join filter: the intersection of all dataset filters. Contains
/// every key present in all inputs, plus compound false positives.
pub fn build_join_filter(
    datasets: &[Dataset],
    sizing: &FilterSizing,
) -> Result<BloomFilter, FilterError> {
    let inputs: Vec<BloomFilter> = datasets
        .par_iter()
        .map(|d| build_input_filter(d, sizing))
        .collect::<Result<_, _>>()?;
    let (joined, _) = tree_merge(inputs, DEFAULT_FANOUT, MergeOp::Intersect)?;
    Ok(joined)
}

/// Output of filtering one dataset.
#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub filtered: Dataset,
    /// Surviving record count per key, feeding the stratum census.
    pub per_key_counts: BTreeMap<u64, u64>,
    /// Wall time of the filter pass, a component of the measured d_dt.
    pub elapsed: Duration,
}

/// Drop every record whose key the join filter rejects. Never drops a truly
/// participating record; false positives may pass and are discarded later by
/// the join itself.
pub fn apply_filter(dataset: &Dataset, join_filter: &BloomFilter) -> FilterOutcome {
    let start = Instant::now();
    let partitions: Vec<Partition> = dataset
        .partitions
        .par_iter()
        .map(|p| Partition {
            dataset_index: p.dataset_index,
            partition_index: p.partition_index,
            records: p
                .records
                .iter()
                .filter(|r| join_filter.contains(r.key))
                .copied()
                .collect(),
        })
        .collect();
    let mut per_key_counts = BTreeMap::new();
    for p in &partitions {
        for r in &p.records {
            *per_key_counts.entry(r.key).or_insert(0u64) += 1;
        }
    }
    let filtered = Dataset {
        index: dataset.index,
        name: dataset.name.clone(),
        partitions,
    };
    FilterOutcome {
        filtered,
        per_key_counts,
        elapsed: start.elapsed(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, Record, SyntheticSpec};

    fn sizing_for(datasets: &[Dataset], p: f64) -> FilterSizing {
        FilterSizing::for_datasets(datasets, p, 7).unwrap()
    }

    #[test]
    fn single_partition_dataset_filter_equals_partition_filter() {
        let d = Dataset::from_records(0, "A", (0..50).map(|k| Record::new(k, 0.0)).collect(), 1);
        let sizing = sizing_for(std::slice::from_ref(&d), 0.01);
        let dataset_filter = build_input_filter(&d, &sizing).unwrap();
        let partition_filter = build_partition_filter(&d.partitions[0], &sizing).unwrap();
        assert_eq!(dataset_filter, partition_filter);
    }

    #[test]
    fn partitioning_does_not_change_the_filter() {
        let records: Vec<Record> = (0..4000u64).map(|k| Record::new(k * 13 + 1, 0.0)).collect();
        let one = Dataset::from_records(0, "A", records.clone(), 1);
        let four = Dataset::from_records(0, "A", records, 4);
        let sizing = sizing_for(std::slice::from_ref(&one), 0.01);
        let a = build_input_filter(&one, &sizing).unwrap();
        let b = build_input_filter(&four, &sizing).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn every_key_of_a_partitioned_dataset_is_contained() {
        let records: Vec<Record> = (0..100_000u64).map(|k| Record::new(k, 0.0)).collect();
        let d = Dataset::from_records(0, "A", records, 16);
        let sizing = sizing_for(std::slice::from_ref(&d), 0.01);
        let f = build_input_filter(&d, &sizing).unwrap();
        for k in 0..100_000u64 {
            assert!(f.contains(k));
        }
    }

    #[test]
    fn tree_merge_matches_flat_fold() {
        let sizing = FilterSizing {
            params: FilterParams::new(500, 0.01).unwrap(),
            salt: 3,
        };
        let filters: Vec<BloomFilter> = (0..8)
            .map(|i| {
                let mut f = sizing.empty_filter().unwrap();
                for k in 0..50u64 {
                    f.insert(i * 1000 + k);
                }
                f
            })
            .collect();

        let mut flat = filters[0].clone();
        for f in &filters[1..] {
            flat = flat.union(f).unwrap();
        }
        let (two, _) = tree_merge(filters.clone(), 2, MergeOp::Union).unwrap();
        let (eight, _) = tree_merge(filters.clone(), 8, MergeOp::Union).unwrap();
        assert_eq!(two.to_bytes(), eight.to_bytes());
        assert_eq!(two.to_bytes(), flat.to_bytes());

        let single = vec![filters[0].clone()];
        let (alone, depth) = tree_merge(single, 4, MergeOp::Union).unwrap();
        assert_eq!(alone, filters[0]);
        assert_eq!(depth, 0);
    }

    #[test]
    fn tree_merge_depth() {
        let sizing = FilterSizing {
            params: FilterParams::new(10, 0.1).unwrap(),
            salt: 1,
        };
        let filters: Vec<BloomFilter> = (0..64).map(|_| sizing.empty_filter().unwrap()).collect();
        let (_, depth) = tree_merge(filters, 4, MergeOp::Union).unwrap();
        assert_eq!(depth, 3);
        assert!(tree_merge(vec![sizing.empty_filter().unwrap()], 1, MergeOp::Union).is_err());
    }

    #[test]
    fn join_filter_keeps_shared_keys() {
        // Two inputs sharing keys 100 and 101, plus private keys.
        let a = Dataset::from_records(
            0,
            "A",
            vec![
                Record::new(100, 0.0),
                Record::new(101, 0.0),
                Record::new(1, 0.0),
            ],
            1,
        );
        let b = Dataset::from_records(
            1,
            "B",
            vec![
                Record::new(100, 0.0),
                Record::new(101, 0.0),
                Record::new(2, 0.0),
            ],
            1,
        );
        let sizing = sizing_for(&[a.clone(), b.clone()], 0.01);
        let jf = build_join_filter(&[a, b], &sizing).unwrap();
        assert!(jf.contains(100) && jf.contains(101));
    }

    #[test]
    fn four_way_planted_intersection_is_preserved() {
        let shared: Vec<u64> = (0..100).map(|i| 9_000_000 + i).collect();
        let datasets: Vec<Dataset> = (0..4)
            .map(|i| {
                let mut records: Vec<Record> =
                    shared.iter().map(|&k| Record::new(k, 0.0)).collect();
                for j in 0..2000u64 {
                    records.push(Record::new((i as u64 + 1) * 100_000 + j, 0.0));
                }
                Dataset::from_records(i, &format!("D{i}"), records, 3)
            })
            .collect();
        let sizing = sizing_for(&datasets, 0.01);
        let jf = build_join_filter(&datasets, &sizing).unwrap();
        for &k in &shared {
            assert!(jf.contains(k));
        }
    }

    #[test]
    fn apply_filter_is_identity_at_full_overlap() {
        let spec = SyntheticSpec::new(vec![300, 300], vec![30, 30], 1.0, 5.0, 2).with_partitions(2);
        let data = generate(&spec).unwrap();
        let sizing = sizing_for(&data, 0.01);
        let jf = build_join_filter(&data, &sizing).unwrap();
        for d in &data {
            let out = apply_filter(d, &jf);
            assert_eq!(&out.filtered, d);
        }
    }

    #[test]
    fn apply_filter_never_drops_participants() {
        let spec = SyntheticSpec::new(vec![2000, 3000], vec![100, 150], 0.05, 5.0, 9);
        let data = generate(&spec).unwrap();
        let flats: Vec<Vec<(u64, f64)>> = data
            .iter()
            .map(|d| d.records().map(|r| (r.key, r.value)).collect())
            .collect();
        let participating: std::collections::BTreeSet<u64> =
            approxjoin_testkit::key_intersection(&flats)
                .into_iter()
                .collect();

        let sizing = sizing_for(&data, 0.01);
        let jf = build_join_filter(&data, &sizing).unwrap();
        for d in &data {
            let out = apply_filter(d, &jf);
            let surviving: std::collections::BTreeSet<u64> =
                out.filtered.records().map(|r| r.key).collect();
            for k in &participating {
                if d.records().any(|r| r.key == *k) {
                    assert!(surviving.contains(k), "participating key {k} was dropped");
                }
            }
            // Census counts agree with a direct tally.
            let direct: u64 = out.per_key_counts.values().sum();
            assert_eq!(direct, out.filtered.total_records());
        }
    }

    #[test]
    fn surviving_nonparticipant_fraction_is_bounded_by_fp() {
        // Two-way join: a non-participating key needs one false positive to
        // survive, so the surviving fraction stays within twice the target.
        let p = 0.02;
        let spec = SyntheticSpec::new(vec![20_000, 20_000], vec![2_000, 2_000], 0.01, 5.0, 77);
        let data = generate(&spec).unwrap();
        let flats: Vec<Vec<(u64, f64)>> = data
            .iter()
            .map(|d| d.records().map(|r| (r.key, r.value)).collect())
            .collect();
        let shared: std::collections::BTreeSet<u64> = approxjoin_testkit::key_intersection(&flats)
            .into_iter()
            .collect();

        let sizing = sizing_for(&data, p);
        let jf = build_join_filter(&data, &sizing).unwrap();
        let mut non_participating = 0u64;
        let mut leaked = 0u64;
        for d in &data {
            let out = apply_filter(d, &jf);
            let survivors: std::collections::BTreeMap<u64, u64> = out.per_key_counts;
            for r in d.records() {
                if !shared.contains(&r.key) {
                    non_participating += 1;
                }
            }
            for (key, count) in survivors {
                if !shared.contains(&key) {
                    leaked += count;
                }
            }
        }
        let fraction = leaked as f64 / non_participating as f64;
        assert!(
            fraction <= 2.0 * p,
            "leaked fraction {fraction} above 2p = {}",
            2.0 * p
        );
    }

    #[test]
    fn scaled_simulation_instance_filters_tightly() {
        // Sizes 10^2 / 10^4 / 10^5 at one percent overlap and p = 0.01: the
        // compound false-positive rate keeps survivors within ten percent of
        // the true participating count.
        let spec = SyntheticSpec::new(
            vec![100, 10_000, 100_000],
            vec![10, 1_000, 10_000],
            0.01,
            10.0,
            13,
        );
        let data = generate(&spec).unwrap();
        let flats: Vec<Vec<(u64, f64)>> = data
            .iter()
            .map(|d| d.records().map(|r| (r.key, r.value)).collect())
            .collect();
        let shared: std::collections::BTreeSet<u64> = approxjoin_testkit::key_intersection(&flats)
            .into_iter()
            .collect();
        let true_participating: u64 = data
            .iter()
            .flat_map(|d| d.records())
            .filter(|r| shared.contains(&r.key))
            .count() as u64;

        let sizing = sizing_for(&data, 0.01);
        let jf = build_join_filter(&data, &sizing).unwrap();
        let survived: u64 = data
            .iter()
            .map(|d| apply_filter(d, &jf).filtered.total_records())
            .sum();
        assert!(survived >= true_participating);
        let ratio = survived as f64 / true_participating as f64;
        assert!(
            ratio <= 1.10,
            "survivors {survived} vs participants {true_participating}"
        );
    }
}
