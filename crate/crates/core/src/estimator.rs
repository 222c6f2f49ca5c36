//! Aggregate execution over samples and error-bound computation: the
//! stratified CLT estimator for with-replacement samples, the
//! Horvitz-Thompson estimator for deduplicated samples, and the derived
//! extensions for COUNT, AVG and STDEV.

use crate::scalar::Real;
pub use crate::stats::t_quantile;
use crate::stats::StatsError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EstimateError {
    #[error("no data sampled for stratum {0}")]
    NoData(u64),
    #[error("degrees of freedom {0} <= 0; draw at least two rows in some stratum")]
    DegreesOfFreedom(i64),
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Aggregate functions the query language supports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum AggFn {
    Sum,
    Count,
    Avg,
    Stdev,
}

impl std::fmt::Display for AggFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AggFn::Sum => "SUM",
            AggFn::Count => "COUNT",
            AggFn::Avg => "AVG",
            AggFn::Stdev => "STDEV",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for AggFn {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s.to_ascii_uppercase().as_str() {
            "SUM" => Ok(AggFn::Sum),
            "COUNT" => Ok(AggFn::Count),
            "AVG" => Ok(AggFn::Avg),
            "STDEV" => Ok(AggFn::Stdev),
            _ => Err(()),
        }
    }
}

/// Mergeable moment sketch of a value multiset; enough for every supported
/// aggregate and for the variance bookkeeping of the estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Serialize"))]
pub struct AggPartial<T: Real = f64> {
    pub count: u64,
    pub sum: T,
    pub sumsq: T,
    pub sum3: T,
    pub sum4: T,
}

impl<T: Real> Default for AggPartial<T> {
    fn default() -> Self {
        AggPartial {
            count: 0,
            sum: T::zero(),
            sumsq: T::zero(),
            sum3: T::zero(),
            sum4: T::zero(),
        }
    }
}

impl<T: Real> AggPartial<T> {
    pub fn push(&mut self, v: T) {
        self.count += 1;
        self.sum += v;
        let v2 = v * v;
        self.sumsq += v2;
        self.sum3 += v2 * v;
        self.sum4 += v2 * v2;
    }

    pub fn from_values(values: &[T]) -> Self {
        let mut p = AggPartial::default();
        for &v in values {
            p.push(v);
        }
        p
    }

    /// Associative, commutative merge; the master combines worker partials
    /// with this.
    pub fn merge(&mut self, other: &AggPartial<T>) {
        self.count += other.count;
        self.sum += other.sum;
        self.sumsq += other.sumsq;
        self.sum3 += other.sum3;
        self.sum4 += other.sum4;
    }

    pub fn mean(&self) -> Option<T> {
        (self.count > 0).then(|| self.sum / T::of_u64(self.count))
    }

    /// Unbiased sample variance (n-1 denominator); `None` below two values.
    pub fn sample_variance(&self) -> Option<T> {
        if self.count < 2 {
            return None;
        }
        let n = T::of_u64(self.count);
        let var = (self.sumsq - self.sum * self.sum / n) / (n - T::one());
        Some(var.max(T::zero()))
    }

    /// Population variance (n denominator).
    pub fn population_variance(&self) -> Option<T> {
        if self.count == 0 {
            return None;
        }
        let n = T::of_u64(self.count);
        let mean = self.sum / n;
        Some((self.sumsq / n - mean * mean).max(T::zero()))
    }

    /// Sample covariance of (v, v^2), used by the STDEV delta-method bound.
    fn sample_cov_v_v2(&self) -> Option<T> {
        if self.count < 2 {
            return None;
        }
        let n = T::of_u64(self.count);
        Some((self.sum3 - self.sum * self.sumsq / n) / (n - T::one()))
    }

    /// Sample variance of v^2.
    fn sample_variance_v2(&self) -> Option<T> {
        if self.count < 2 {
            return None;
        }
        let n = T::of_u64(self.count);
        Some(((self.sum4 - self.sumsq * self.sumsq / n) / (n - T::one())).max(T::zero()))
    }

    /// Evaluate one aggregate over exactly this multiset (no extrapolation).
    pub fn finalize(&self, agg: AggFn) -> Option<T> {
        match agg {
            AggFn::Sum => Some(self.sum),
            AggFn::Count => Some(T::of_u64(self.count)),
            AggFn::Avg => self.mean(),
            AggFn::Stdev => self.population_variance().map(|v| v.sqrt()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Clt,
    Ht,
    Exact,
}

/// Per-stratum diagnostics carried in every result.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Serialize"))]
pub struct StratumDiagnostic<T: Real = f64> {
    pub key: u64,
    #[serde(rename = "B")]
    pub b_pop: u64,
    pub b: u64,
    /// Sample variance of the stratum's sampled row values.
    pub variance: T,
}

/// `estimate ± error_bound` at a confidence level, with per-stratum
/// diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Serialize"))]
pub struct ApproxResult<T: Real = f64> {
    pub estimate: T,
    pub error_bound: T,
    pub confidence: T,
    pub estimator: EstimatorKind,
    pub strata: Vec<StratumDiagnostic<T>>,
}

/// One stratum's input to the CLT bound: population size and the moment
/// sketch of its sampled row values.
#[derive(Debug, Clone, PartialEq)]
pub struct CltStratum<T: Real = f64> {
    pub key: u64,
    pub b_pop: u64,
    pub partial: AggPartial<T>,
}

impl<T: Real> CltStratum<T> {
    pub fn from_values(key: u64, b_pop: u64, values: &[T]) -> Self {
        CltStratum {
            key,
            b_pop,
            partial: AggPartial::from_values(values),
        }
    }
}

struct CltMachinery<T: Real> {
    total: T,
    variance: T,
    t_score: T,
    diagnostics: Vec<StratumDiagnostic<T>>,
}

/// Shared core of the CLT bounds: stratified total, its estimated variance
/// `sum B(B - b) r^2 / b`, and the t score for `sum b - m` degrees of
/// freedom.
fn clt_machinery<T: Real>(
    strata: &[CltStratum<T>],
    confidence: T,
    moment: impl Fn(&AggPartial<T>) -> (T, Option<T>),
) -> Result<CltMachinery<T>, EstimateError> {
    if strata.is_empty() {
        return Err(EstimateError::InvalidParam(
            "no strata to estimate over".into(),
        ));
    }
    let conf = confidence.to_f64().unwrap_or(f64::NAN);
    if !(0.0 < conf && conf < 1.0) {
        return Err(EstimateError::InvalidParam(format!(
            "confidence {conf} outside (0, 1)"
        )));
    }

    let mut total = T::zero();
    let mut variance = T::zero();
    let mut sum_b: u64 = 0;
    let mut diagnostics = Vec::with_capacity(strata.len());
    for s in strata {
        let b = s.partial.count;
        if b == 0 {
            return Err(EstimateError::NoData(s.key));
        }
        sum_b += b;
        let bf = T::of_u64(b);
        let bpop = T::of_u64(s.b_pop);
        let (sum, var) = moment(&s.partial);
        total += bpop / bf * sum;
        // Strata with a single draw contribute no variance estimate; the
        // finite-population factor is clamped because with-replacement
        // samples may exceed the population.
        let r2 = var.unwrap_or(T::zero());
        let fpc = (bpop - bf).max(T::zero());
        variance += bpop * fpc * r2 / bf;
        diagnostics.push(StratumDiagnostic {
            key: s.key,
            b_pop: s.b_pop,
            b,
            variance: r2,
        });
    }

    let full_enumeration = strata.iter().all(|s| s.partial.count >= s.b_pop);
    let f = sum_b as i64 - strata.len() as i64;
    let t_score = if full_enumeration {
        T::zero()
    } else if f <= 0 {
        return Err(EstimateError::DegreesOfFreedom(f));
    } else if variance == T::zero() {
        T::zero()
    } else {
        t_quantile(T::of_u64(f as u64), T::of(0.5) * (T::one() + confidence))?
    };
    Ok(CltMachinery {
        total,
        variance,
        t_score,
        diagnostics,
    })
}

/// Stratified CLT bound for SUM: `tau = sum (B_i/b_i) sum_j v_ij` with
/// variance `sum B_i (B_i - b_i) r_i^2 / b_i` and a Student-t half width at
/// `sum b_i - m` degrees of freedom.
pub fn clt_bound<T: Real>(
    strata: &[CltStratum<T>],
    confidence: T,
) -> Result<ApproxResult<T>, EstimateError> {
    let m = clt_machinery(strata, confidence, |p| (p.sum, p.sample_variance()))?;
    Ok(ApproxResult {
        estimate: m.total,
        error_bound: m.t_score * m.variance.sqrt(),
        confidence,
        estimator: EstimatorKind::Clt,
        strata: m.diagnostics,
    })
}

/// CLT-based bounds for the remaining aggregates, derived from the SUM
/// estimator:
/// COUNT is the census total `sum B_i` and therefore exact; AVG is the SUM
/// estimator scaled by that exact row count; STDEV is a plug-in of the
/// stratified totals of v and v^2 with a delta-method half width.
pub fn clt_bound_for<T: Real>(
    agg: AggFn,
    strata: &[CltStratum<T>],
    confidence: T,
) -> Result<ApproxResult<T>, EstimateError> {
    match agg {
        AggFn::Sum => clt_bound(strata, confidence),
        AggFn::Count => {
            // The join cardinality is the census total and therefore exact:
            // every stratum contributes (B/b) * b = B.
            let mut total = T::zero();
            let mut diagnostics = Vec::with_capacity(strata.len());
            for s in strata {
                if s.partial.count == 0 {
                    return Err(EstimateError::NoData(s.key));
                }
                total += T::of_u64(s.b_pop);
                diagnostics.push(StratumDiagnostic {
                    key: s.key,
                    b_pop: s.b_pop,
                    b: s.partial.count,
                    variance: T::zero(),
                });
            }
            Ok(ApproxResult {
                estimate: total,
                error_bound: T::zero(),
                confidence,
                estimator: EstimatorKind::Clt,
                strata: diagnostics,
            })
        }
        AggFn::Avg => {
            let rows: u64 = strata.iter().map(|s| s.b_pop).sum();
            if rows == 0 {
                return Err(EstimateError::InvalidParam("empty join population".into()));
            }
            let mut r = clt_bound(strata, confidence)?;
            let n = T::of_u64(rows);
            r.estimate = r.estimate / n;
            r.error_bound = r.error_bound / n;
            Ok(r)
        }
        AggFn::Stdev => {
            let rows: u64 = strata.iter().map(|s| s.b_pop).sum();
            if rows == 0 {
                return Err(EstimateError::InvalidParam("empty join population".into()));
            }
            let n = T::of_u64(rows);
            let sums = clt_machinery(strata, confidence, |p| (p.sum, p.sample_variance()))?;
            let squares = clt_machinery(strata, confidence, |p| (p.sumsq, p.sample_variance_v2()))?;
            // Covariance of the two stratified totals over the same sample.
            let mut cov_tot = T::zero();
            for s in strata {
                let b = T::of_u64(s.partial.count);
                let bpop = T::of_u64(s.b_pop);
                let fpc = (bpop - b).max(T::zero());
                let c = s.partial.sample_cov_v_v2().unwrap_or(T::zero());
                cov_tot += bpop * fpc * c / b;
            }
            let mean = sums.total / n;
            let var_pop = (squares.total / n - mean * mean).max(T::zero());
            let sd = var_pop.sqrt();
            // Delta method on g(a1, a2) = a2/n - (a1/n)^2.
            let d1 = -(T::of(2.0)) * sums.total / (n * n);
            let d2 = T::one() / n;
            let var_v = (d1 * d1 * sums.variance
                + d2 * d2 * squares.variance
                + T::of(2.0) * d1 * d2 * cov_tot)
                .max(T::zero());
            let eps_v = sums.t_score.max(squares.t_score) * var_v.sqrt();
            let error_bound = if sd > eps_v.sqrt() {
                eps_v / (T::of(2.0) * sd)
            } else {
                eps_v.sqrt()
            };
            Ok(ApproxResult {
                estimate: sd,
                error_bound,
                confidence,
                estimator: EstimatorKind::Clt,
                strata: sums.diagnostics,
            })
        }
    }
}

/// Inclusion probability of one edge after `draws` with-replacement draws
/// from a stratum of `b_pop` edges, followed by deduplication.
pub fn ht_pi(b_pop: u64, draws: u64) -> f64 {
    if b_pop == 0 || draws == 0 {
        return 0.0;
    }
    1.0 - (1.0 - 1.0 / b_pop as f64).powf(draws as f64)
}

/// Probability that two given distinct edges are both included.
pub fn ht_pi_pair(b_pop: u64, draws: u64) -> f64 {
    if b_pop < 2 || draws == 0 {
        return ht_pi(b_pop, draws);
    }
    let b = b_pop as f64;
    let d = draws as f64;
    1.0 - 2.0 * (1.0 - 1.0 / b).powf(d) + (1.0 - 2.0 / b).powf(d)
}

/// A Horvitz-Thompson unit: one distinct sampled item and its inclusion
/// probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HtUnit<T: Real = f64> {
    pub value: T,
    pub pi: T,
}

/// Raw Horvitz-Thompson total and variance estimate over distinct units with
/// arbitrary inclusion probabilities. `pi_pair(i, j)` supplies the joint
/// inclusion probability of units i and j.
pub fn ht_total_and_variance<T: Real>(
    units: &[HtUnit<T>],
    pi_pair: &dyn Fn(usize, usize) -> T,
) -> Result<(T, T), EstimateError> {
    let mut total = T::zero();
    let mut variance = T::zero();
    for (i, u) in units.iter().enumerate() {
        if !(u.pi > T::zero()) {
            return Err(EstimateError::InvalidParam(format!(
                "inclusion probability {} of unit {i} is not positive",
                u.pi
            )));
        }
        total += u.value / u.pi;
        variance += (T::one() - u.pi) / (u.pi * u.pi) * u.value * u.value;
        for (j, w) in units.iter().enumerate() {
            if i == j {
                continue;
            }
            let pij = pi_pair(i, j);
            if !(pij > T::zero()) {
                return Err(EstimateError::InvalidParam(format!(
                    "joint inclusion probability of units {i},{j} is not positive"
                )));
            }
            variance += (pij - u.pi * w.pi) / (u.pi * w.pi) * (u.value * w.value / pij);
        }
    }
    Ok((total, variance.max(T::zero())))
}

/// One stratum's input to the HT bound: population size, the number of
/// with-replacement draws performed, and the moment sketch of the distinct
/// values that survived deduplication.
#[derive(Debug, Clone, PartialEq)]
pub struct HtStratum<T: Real = f64> {
    pub key: u64,
    pub b_pop: u64,
    pub draws: u64,
    pub distinct: AggPartial<T>,
}

/// Which degrees of freedom the HT t-score uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HtDfMode {
    /// Number of strata minus one (the default reading).
    StrataMinusOne,
    /// Number of join inputs minus one (the alternative reading, kept
    /// switchable for diagnostics).
    InputsMinusOne(usize),
}

/// Horvitz-Thompson bound for SUM over deduplicated per-stratum samples.
///
/// Within a stratum every edge shares the same inclusion probability
/// `1 - (1 - 1/B)^d`, which collapses the pairwise variance term to a
/// closed form in the first two moments; strata are sampled independently,
/// so cross-stratum pair terms vanish.
pub fn ht_bound<T: Real>(
    strata: &[HtStratum<T>],
    confidence: T,
    df_mode: HtDfMode,
) -> Result<ApproxResult<T>, EstimateError> {
    if strata.is_empty() {
        return Err(EstimateError::InvalidParam(
            "no strata to estimate over".into(),
        ));
    }
    let conf = confidence.to_f64().unwrap_or(f64::NAN);
    if !(0.0 < conf && conf < 1.0) {
        return Err(EstimateError::InvalidParam(format!(
            "confidence {conf} outside (0, 1)"
        )));
    }

    let mut total = T::zero();
    let mut variance = T::zero();
    let mut diagnostics = Vec::with_capacity(strata.len());
    let mut full = true;
    for s in strata {
        if s.distinct.count == 0 {
            return Err(EstimateError::NoData(s.key));
        }
        let pi = T::of(ht_pi(s.b_pop, s.draws));
        if !(pi > T::zero()) {
            return Err(EstimateError::InvalidParam(format!(
                "stratum {}: zero draws give zero inclusion probability",
                s.key
            )));
        }
        let pi2 = T::of(ht_pi_pair(s.b_pop, s.draws));
        let s1 = s.distinct.sum;
        let s2 = s.distinct.sumsq;
        total += s1 / pi;
        let singles = (T::one() - pi) / (pi * pi) * s2;
        let pairs = if s.b_pop >= 2 && pi2 > T::zero() {
            (pi2 - pi * pi) / (pi * pi * pi2) * (s1 * s1 - s2)
        } else {
            T::zero()
        };
        variance += singles + pairs;
        full &= s.distinct.count >= s.b_pop;
        diagnostics.push(StratumDiagnostic {
            key: s.key,
            b_pop: s.b_pop,
            b: s.distinct.count,
            variance: s.distinct.sample_variance().unwrap_or(T::zero()),
        });
    }
    variance = variance.max(T::zero());

    let df = match df_mode {
        HtDfMode::StrataMinusOne => strata.len().saturating_sub(1),
        HtDfMode::InputsMinusOne(n) => n.saturating_sub(1),
    }
    .max(1) as u64;
    let t_score = if variance == T::zero() && full {
        T::zero()
    } else {
        t_quantile(T::of_u64(df), T::of(0.5) * (T::one() + confidence))?
    };
    Ok(ApproxResult {
        estimate: total,
        error_bound: t_score * variance.sqrt(),
        confidence,
        estimator: EstimatorKind::Ht,
        strata: diagnostics,
    })
}
