//! Closed-form shuffle-volume model: predicted volumes for the three join
//! strategies, the marginal-growth terms for adding a node or a dataset, and
//! the false-positive sweep that measures realized filtering against the
//! optimum.
//!
//! All predictors are homogeneous of degree one in their magnitudes, so one
//! set of formulas serves both record units (counts in, counts out) and byte
//! mode (byte totals in, bytes out). Byte mode is the default for ledger
//! comparison.

use crate::budget::{SamplePlan, StratumStats};
use crate::dataset::{generate, stratum_census, Dataset, DatasetError, SyntheticSpec};
use crate::filter::{apply_filter, build_join_filter, FilterError, FilterSizing};
use crate::scalar::Real;
use rayon::prelude::*;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CommCostError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error("{0}")]
    Mismatch(String),
}

fn sum_units<T: Real>(sizes: &[T]) -> T {
    sizes.iter().copied().sum()
}

/// Broadcast join: everything but the largest input replicated to the k-1
/// other workers.
pub fn predict_broadcast<T: Real>(sizes: &[T], k: usize) -> T {
    if sizes.len() < 2 || k <= 1 {
        return T::zero();
    }
    let largest = sizes.iter().copied().fold(T::zero(), T::max);
    (sum_units(sizes) - largest) * T::of_u64(k as u64 - 1)
}

/// Repartition join: every record moves unless it already sits on its
/// owner, a 1/k fraction.
pub fn predict_repartition<T: Real>(sizes: &[T], k: usize) -> T {
    if k <= 1 {
        return T::zero();
    }
    sum_units(sizes) * T::of_u64(k as u64 - 1) / T::of_u64(k as u64)
}

/// Volume of the filtered strategy, split into its two terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BloomVolume<T: Real = f64> {
    /// Filter traffic: one blob per dataset per remote worker plus the
    /// join-filter broadcast, `|BF| (k-1)(n+1)`.
    pub filter_units: T,
    /// Surviving records repartitioned: `sum |r_i| (k-1)/k`.
    pub record_units: T,
}

impl<T: Real> BloomVolume<T> {
    pub fn total(&self) -> T {
        self.filter_units + self.record_units
    }
}

/// Filtered-join volume from participating magnitudes `|r_i|` and the
/// filter size in the same unit. The optimal variant passes the true
/// participating magnitudes; the realized variant passes measured
/// post-filter survivors.
pub fn predict_bloom<T: Real>(participating: &[T], k: usize, bf_units: T) -> BloomVolume<T> {
    let n = participating.len() as u64;
    if k <= 1 {
        return BloomVolume {
            filter_units: T::zero(),
            record_units: T::zero(),
        };
    }
    let km1 = T::of_u64(k as u64 - 1);
    BloomVolume {
        filter_units: bf_units * km1 * T::of_u64(n + 1),
        record_units: sum_units(participating) * km1 / T::of_u64(k as u64),
    }
}

/// Volume growth per added worker: broadcast replicates one more copy of
/// every smaller input.
pub fn marginal_broadcast_per_node<T: Real>(sizes: &[T]) -> T {
    if sizes.len() < 2 {
        return T::zero();
    }
    let largest = sizes.iter().copied().fold(T::zero(), T::max);
    sum_units(sizes) - largest
}

/// Volume growth per added worker under repartitioning: `sum |R| / (k(k+1))`.
pub fn marginal_repartition_per_node<T: Real>(sizes: &[T], k: usize) -> T {
    sum_units(sizes) / (T::of_u64(k as u64) * T::of_u64(k as u64 + 1))
}

/// Volume growth per added worker for the filtered strategy.
pub fn marginal_bloom_per_node<T: Real>(participating: &[T], k: usize, bf_units: T) -> T {
    let n = participating.len() as u64;
    bf_units * T::of_u64(n + 1)
        + sum_units(participating) / (T::of_u64(k as u64) * T::of_u64(k as u64 + 1))
}

/// Volume growth from joining one more dataset, larger than all current
/// ones: the formerly largest input now gets broadcast too.
pub fn marginal_broadcast_per_dataset<T: Real>(sizes: &[T], k: usize) -> T {
    let largest = sizes.iter().copied().fold(T::zero(), T::max);
    largest * T::of_u64(k as u64 - 1)
}

/// Volume growth from one more dataset under repartitioning.
pub fn marginal_repartition_per_dataset<T: Real>(new_size: T, k: usize) -> T {
    new_size * T::of_u64(k as u64 - 1) / T::of_u64(k as u64)
}

/// Volume growth from one more dataset for the filtered strategy: one more
/// filter reduction plus its participating records.
pub fn marginal_bloom_per_dataset<T: Real>(new_participating: T, k: usize, bf_units: T) -> T {
    bf_units * T::of_u64(k as u64 - 1)
        + new_participating * T::of_u64(k as u64 - 1) / T::of_u64(k as u64)
}

/// The work-reduction factor of a plan: sampled rows over population rows.
pub fn complexity_factor(plan: &SamplePlan, census: &BTreeMap<u64, StratumStats>) -> f64 {
    let population: u64 = census.values().map(|s| s.b_pop).sum();
    if population == 0 {
        return 1.0;
    }
    plan.total_samples() as f64 / population as f64
}

/// As [`complexity_factor`], additionally checking that the measured draw
/// count (the ledger's CP_total) equals the planned total exactly.
pub fn checked_complexity_factor(
    plan: &SamplePlan,
    census: &BTreeMap<u64, StratumStats>,
    measured_draws: u64,
) -> Result<f64, CommCostError> {
    let planned = plan.total_samples();
    if planned != measured_draws {
        return Err(CommCostError::Mismatch(format!(
            "ledger CP_total {measured_draws} differs from planned total {planned}"
        )));
    }
    Ok(complexity_factor(plan, census))
}

/// Inputs of the false-positive sweep: the synthetic instance and the
/// modeled cluster size.
#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub spec: SyntheticSpec,
    pub k: usize,
    pub salt: u64,
}

impl SweepConfig {
    /// The bundled simulation preset: three inputs of 10^2 / 10^4 / 10^5
    /// records at one percent overlap on a 100-worker cluster, with 1 KiB
    /// record payloads so that record traffic, not filter traffic, dominates
    /// the exact strategies.
    pub fn simulation_preset() -> Self {
        SweepConfig {
            spec: SyntheticSpec::new(
                vec![100, 10_000, 100_000],
                vec![10, 1_000, 10_000],
                0.01,
                10.0,
                424_242,
            )
            .with_payload(1024),
            k: 100,
            salt: 77,
        }
    }
}

/// One sweep row; `s_*` columns are byte volumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub p: f64,
    pub s_bf_realized: f64,
    pub s_bf_optimal: f64,
    pub s_re: f64,
    pub s_bc: f64,
    pub filter_bytes: f64,
    pub realized_record_bytes: f64,
    pub optimal_record_bytes: f64,
    pub realized_survivor_records: u64,
    pub true_participating_records: u64,
}

/// For each false-positive target, build the join filter on generated data,
/// measure the surviving volume, and put it next to the closed forms.
pub fn fp_sweep(config: &SweepConfig, ps: &[f64]) -> Result<Vec<SweepRow>, CommCostError> {
    let datasets: Vec<Dataset> = generate(&config.spec)?;
    let census = stratum_census(&datasets)?;

    // True participating byte volume per dataset from the census.
    let n = datasets.len();
    let mut true_part_records = vec![0u64; n];
    for stats in census.values() {
        for (i, &c) in stats.per_input_counts.iter().enumerate() {
            true_part_records[i] += c;
        }
    }
    let record_bytes = 16.0 + config.spec.payload as f64;
    let size_bytes: Vec<f64> = datasets
        .iter()
        .map(|d| d.total_records() as f64 * record_bytes)
        .collect();
    let optimal_bytes: Vec<f64> = true_part_records
        .iter()
        .map(|&r| r as f64 * record_bytes)
        .collect();

    let s_re = predict_repartition(&size_bytes, config.k);
    let s_bc = predict_broadcast(&size_bytes, config.k);

    let mut rows: Vec<SweepRow> = ps
        .par_iter()
        .map(|&p| {
            let sizing = FilterSizing::for_datasets(&datasets, p, config.salt)?;
            let join_filter = build_join_filter(&datasets, &sizing)?;
            let survivors: Vec<u64> = datasets
                .iter()
                .map(|d| apply_filter(d, &join_filter).filtered.total_records())
                .collect();
            let realized_bytes: Vec<f64> =
                survivors.iter().map(|&r| r as f64 * record_bytes).collect();
            let bf_bytes = join_filter.model_bytes();
            let realized = predict_bloom(&realized_bytes, config.k, bf_bytes);
            let optimal = predict_bloom(&optimal_bytes, config.k, bf_bytes);
            Ok(SweepRow {
                p,
                s_bf_realized: realized.total(),
                s_bf_optimal: optimal.total(),
                s_re,
                s_bc,
                filter_bytes: realized.filter_units,
                realized_record_bytes: realized.record_units,
                optimal_record_bytes: optimal.record_units,
                realized_survivor_records: survivors.iter().sum(),
                true_participating_records: true_part_records.iter().sum(),
            })
        })
        .collect::<Result<_, CommCostError>>()?;
    rows.sort_by(|a, b| b.p.total_cmp(&a.p));
    Ok(rows)
}

/// Render sweep rows as the plot-ready five-column TSV.
pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut out = String::from("p\ts_bf_realized\ts_bf_optimal\ts_re\ts_bc\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{:.1}\t{:.1}\t{:.1}\t{:.1}\n",
            r.p, r.s_bf_realized, r.s_bf_optimal, r.s_re, r.s_bc
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn broadcast_reference_values() {
        // n = 2, |R1| = 100, k = 4: 100 * 3 = 300.
        assert_eq!(predict_broadcast(&[100.0, 1000.0], 4), 300.0);
        assert_eq!(predict_broadcast(&[100.0, 1000.0], 1), 0.0);
    }

    #[test]
    fn repartition_reference_values() {
        // Sizes {100, 1000}, k = 4: 1100 * 3/4 = 825.
        assert_eq!(predict_repartition(&[100.0, 1000.0], 4), 825.0);
        assert_eq!(predict_repartition(&[100.0, 1000.0], 1), 0.0);
    }

    #[test]
    fn bloom_reference_values() {
        // |BF| = 50 units, k = 4, n = 2, |r_i| = {10, 10}:
        // 50*3*3 + 20*(3/4) = 465.
        let v = predict_bloom(&[10.0, 10.0], 4, 50.0);
        assert_eq!(v.total(), 465.0);
        assert_eq!(v.filter_units, 450.0);
        // No participants: pure filter overhead.
        let v = predict_bloom(&[0.0, 0.0], 4, 50.0);
        assert_eq!(v.total(), 450.0);
    }

    #[test]
    fn marginals_match_finite_differences() {
        let sizes = [120.0, 3400.0, 56000.0];
        let part = [12.0, 34.0, 560.0];
        let bf = 77.0;
        for k in [2usize, 5, 10, 99] {
            let d_bc = predict_broadcast(&sizes, k + 1) - predict_broadcast(&sizes, k);
            assert_relative_eq!(
                d_bc,
                marginal_broadcast_per_node(&sizes),
                max_relative = 1e-12
            );

            let d_re = predict_repartition(&sizes, k + 1) - predict_repartition(&sizes, k);
            assert_relative_eq!(
                d_re,
                marginal_repartition_per_node(&sizes, k),
                max_relative = 1e-12
            );

            let d_bf =
                predict_bloom(&part, k + 1, bf).total() - predict_bloom(&part, k, bf).total();
            assert_relative_eq!(
                d_bf,
                marginal_bloom_per_node(&part, k, bf),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn dataset_marginals() {
        let k = 8;
        let sizes = [100.0, 2000.0, 30000.0];
        // Add a dataset bigger than all current ones.
        let grown = [100.0, 2000.0, 30000.0, 500000.0];
        let d_bc = predict_broadcast(&grown, k) - predict_broadcast(&sizes, k);
        assert_relative_eq!(
            d_bc,
            marginal_broadcast_per_dataset(&sizes, k),
            max_relative = 1e-12
        );

        let d_re = predict_repartition(&grown, k) - predict_repartition(&sizes, k);
        assert_relative_eq!(
            d_re,
            marginal_repartition_per_dataset(500000.0, k),
            max_relative = 1e-12
        );

        let part = [10.0, 20.0, 300.0];
        let part_grown = [10.0, 20.0, 300.0, 4000.0];
        let bf = 55.0;
        let d_bf = predict_bloom(&part_grown, k, bf).total() - predict_bloom(&part, k, bf).total();
        assert_relative_eq!(
            d_bf,
            marginal_bloom_per_dataset(4000.0, k, bf),
            max_relative = 1e-12
        );
    }

    #[test]
    fn complexity_factor_examples() {
        let census: BTreeMap<u64, StratumStats> = [(1u64, 100u64), (2, 300)]
            .iter()
            .map(|&(key, b)| {
                (
                    key,
                    StratumStats {
                        key,
                        per_input_counts: vec![b],
                        b_pop: b,
                        sigma: None,
                    },
                )
            })
            .collect();
        let full = SamplePlan {
            per_stratum: [(1, 100), (2, 300)].into_iter().collect(),
            sampling_fraction: 1.0,
            predicted_d_cp: None,
            feasible: true,
        };
        assert_eq!(complexity_factor(&full, &census), 1.0);
        let tenth = SamplePlan {
            per_stratum: [(1, 10), (2, 30)].into_iter().collect(),
            sampling_fraction: 0.1,
            predicted_d_cp: None,
            feasible: true,
        };
        assert_eq!(complexity_factor(&tenth, &census), 0.1);
        assert!(checked_complexity_factor(&tenth, &census, 40).is_ok());
        assert!(checked_complexity_factor(&tenth, &census, 41).is_err());
    }

    #[test]
    fn small_sweep_known_shape() {
        // Low key multiplicity so the filters carry a load near their sized
        // capacity and p = 0.5 leaks visibly.
        let config = SweepConfig {
            spec: SyntheticSpec::new(vec![2000, 3000, 4000], vec![500, 750, 1000], 0.01, 10.0, 5)
                .with_payload(1024),
            k: 20,
            salt: 3,
        };
        let rows = fp_sweep(&config, &[0.5, 0.1, 0.01]).unwrap();
        assert_eq!(rows.len(), 3);
        // Rows come back in descending p; surviving record volume shrinks as
        // p tightens, and never undercuts the true participating volume.
        for w in rows.windows(2) {
            assert!(w[0].p > w[1].p);
            assert!(w[0].realized_record_bytes >= w[1].realized_record_bytes);
        }
        for r in &rows {
            assert!(r.realized_record_bytes >= r.optimal_record_bytes);
            assert!(r.s_bf_realized >= r.s_bf_optimal);
        }
        // Strictly more surviving volume at p = 0.5 than at p = 0.01.
        assert!(rows[0].realized_record_bytes > rows.last().unwrap().realized_record_bytes);
        let tsv = sweep_tsv(&rows);
        assert!(tsv.starts_with("p\ts_bf_realized\ts_bf_optimal\ts_re\ts_bc\n"));
        assert_eq!(tsv.lines().count(), 4);
    }

    proptest! {
        #[test]
        fn prop_predictors_are_homogeneous(
            sizes in prop::collection::vec(1.0f64..1e6, 2..6),
            k in 2usize..50,
            scale in 1.5f64..10.0,
            bf in 1.0f64..1e5,
        ) {
            let doubled: Vec<f64> = sizes.iter().map(|s| s * scale).collect();
            prop_assert!((predict_broadcast(&doubled, k) - scale * predict_broadcast(&sizes, k)).abs()
                < 1e-6 * predict_broadcast(&doubled, k).max(1.0));
            prop_assert!((predict_repartition(&doubled, k) - scale * predict_repartition(&sizes, k)).abs()
                < 1e-6 * predict_repartition(&doubled, k).max(1.0));
            let v = predict_bloom(&doubled, k, bf * scale).total();
            let base = predict_bloom(&sizes, k, bf).total();
            prop_assert!((v - scale * base).abs() < 1e-6 * v.max(1.0));
        }
    }
}
