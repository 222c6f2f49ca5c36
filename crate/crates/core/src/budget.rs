//! Query budgets and the planners that turn them into per-stratum sample
//! sizes, plus the calibrated latency model and the sigma feedback store.

use crate::scalar::Real;
use crate::stats::normal_quantile;
use serde::Serialize;
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BudgetError {
    #[error("calibration error: {0}")]
    Calibration(String),
    #[error("no stored sigma for stratum {0}; run a pilot or an unbudgeted execution first")]
    MissingSigma(u64),
    #[error("planning error: {0}")]
    Planning(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("store parse error: {0}")]
    Parse(String),
}

/// Per-stratum population statistics: one entry per join key that appears in
/// every input.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StratumStats {
    pub key: u64,
    /// Participating record count per input for this key.
    pub per_input_counts: Vec<u64>,
    /// Cross-product cardinality: the product of the per-input counts.
    pub b_pop: u64,
    /// Stored standard deviation of the stratum's row values, when known.
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum BudgetMode<T: Real> {
    Latency { d_desired: T },
    ErrorBound { err_desired: T },
    Exact,
}

/// What the user asked for: a deadline, an error target, or an exact run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Serialize"))]
pub struct QueryBudget<T: Real = f64> {
    #[serde(flatten)]
    pub mode: BudgetMode<T>,
    pub confidence: T,
}

impl<T: Real> QueryBudget<T> {
    pub fn latency(d_desired: T) -> Self {
        QueryBudget {
            mode: BudgetMode::Latency { d_desired },
            confidence: T::of(0.95),
        }
    }

    pub fn error_bound(err_desired: T) -> Self {
        QueryBudget {
            mode: BudgetMode::ErrorBound { err_desired },
            confidence: T::of(0.95),
        }
    }

    pub fn exact() -> Self {
        QueryBudget {
            mode: BudgetMode::Exact,
            confidence: T::of(0.95),
        }
    }

    pub fn with_confidence(mut self, confidence: T) -> Self {
        self.confidence = confidence;
        self
    }

    /// The z-score planning works with. At the default 95% confidence this
    /// is exactly 1.96 (so the error-bound plan reproduces the 3.8416
    /// factor); other confidences use the normal quantile.
    pub fn planning_z(&self) -> Result<T, BudgetError> {
        let c = self.confidence.to_f64().unwrap_or(f64::NAN);
        if !(0.0 < c && c < 1.0) {
            return Err(BudgetError::Planning(format!(
                "confidence {c} outside (0, 1)"
            )));
        }
        if (c - 0.95).abs() < 1e-6 {
            return Ok(T::of(1.96));
        }
        normal_quantile(T::of(0.5) * (T::one() + self.confidence))
            .map_err(|e| BudgetError::Planning(e.to_string()))
    }
}

/// Fitted latency model: seconds per cross-product row plus a noise
/// intercept.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Serialize"))]
pub struct CostModel<T: Real = f64> {
    pub beta: T,
    pub epsilon: T,
}

impl<T: Real> CostModel<T> {
    pub fn new(beta: T, epsilon: T) -> Self {
        CostModel { beta, epsilon }
    }

    pub fn predict(&self, cp_total: u64) -> T {
        self.beta * T::of_u64(cp_total) + self.epsilon
    }
}

impl CostModel<f64> {
    /// Persist as a single tab-separated `beta epsilon` line.
    pub fn save(&self, path: &Path) -> Result<(), BudgetError> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(path, format!("{}\t{}\n", self.beta, self.epsilon))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BudgetError> {
        let text = fs::read_to_string(path)?;
        let line = text
            .lines()
            .next()
            .ok_or_else(|| BudgetError::Parse("empty cost model file".into()))?;
        let mut fields = line.split('\t');
        let beta: f64 = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| BudgetError::Parse("bad beta".into()))?;
        let epsilon: f64 = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| BudgetError::Parse("bad epsilon".into()))?;
        Ok(CostModel { beta, epsilon })
    }
}

/// Calibration output: the model plus the goodness of fit.
#[derive(Debug, Clone, Copy)]
pub struct CalibrationFit<T: Real = f64> {
    pub model: CostModel<T>,
    pub r_squared: T,
}

/// Least-squares fit of `seconds = beta * cp_total + epsilon` over measured
/// points. Needs at least three distinct cross-product sizes; a negative
/// fitted intercept is refit through the origin so the model never predicts
/// negative time.
pub fn calibrate<T: Real>(samples: &[(u64, T)]) -> Result<CalibrationFit<T>, BudgetError> {
    let mut distinct: Vec<u64> = samples.iter().map(|s| s.0).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(BudgetError::Calibration(format!(
            "need measurements at >= 3 distinct cross-product sizes, got {}",
            distinct.len()
        )));
    }

    let n = T::of_u64(samples.len() as u64);
    let mean_x = samples.iter().map(|s| T::of_u64(s.0)).sum::<T>() / n;
    let mean_y = samples.iter().map(|s| s.1).sum::<T>() / n;
    let mut sxy = T::zero();
    let mut sxx = T::zero();
    for &(x, y) in samples {
        let dx = T::of_u64(x) - mean_x;
        sxy += dx * (y - mean_y);
        sxx += dx * dx;
    }
    let mut beta = sxy / sxx;
    let mut epsilon = mean_y - beta * mean_x;
    if epsilon < T::zero() {
        // Refit through the origin; the intercept models nonnegative noise.
        let sxy0 = samples.iter().map(|&(x, y)| T::of_u64(x) * y).sum::<T>();
        let sxx0 = samples
            .iter()
            .map(|&(x, _)| T::of_u64(x) * T::of_u64(x))
            .sum::<T>();
        beta = sxy0 / sxx0;
        epsilon = T::zero();
    }
    if !(beta > T::zero()) {
        return Err(BudgetError::Calibration(format!(
            "fitted beta {beta} is not positive; the environment is too noisy to calibrate"
        )));
    }

    let mut ss_res = T::zero();
    let mut ss_tot = T::zero();
    for &(x, y) in samples {
        let pred = beta * T::of_u64(x) + epsilon;
        ss_res += (y - pred) * (y - pred);
        ss_tot += (y - mean_y) * (y - mean_y);
    }
    let r_squared = if ss_tot > T::zero() {
        T::one() - ss_res / ss_tot
    } else if ss_res == T::zero() {
        T::one()
    } else {
        T::zero()
    };
    Ok(CalibrationFit {
        model: CostModel { beta, epsilon },
        r_squared,
    })
}

/// Per-stratum sample sizes plus the fraction of the join output they cover.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(bound(serialize = "T: Serialize"))]
pub struct SamplePlan<T: Real = f64> {
    pub per_stratum: BTreeMap<u64, u64>,
    pub sampling_fraction: T,
    /// Model-predicted cross-product time; absent for error-bound plans,
    /// which involve no latency model.
    pub predicted_d_cp: Option<T>,
    pub feasible: bool,
}

impl<T: Real> SamplePlan<T> {
    pub fn total_samples(&self) -> u64 {
        self.per_stratum.values().sum()
    }

    /// Clamp every stratum to its population size; sampling without
    /// replacement cannot draw more distinct rows than exist.
    pub fn clamp_to_population(&mut self, census: &BTreeMap<u64, StratumStats>) {
        for (key, b) in self.per_stratum.iter_mut() {
            if let Some(stats) = census.get(key) {
                *b = (*b).min(stats.b_pop);
            }
        }
    }

    pub fn is_full_enumeration(&self, census: &BTreeMap<u64, StratumStats>) -> bool {
        census
            .iter()
            .all(|(k, s)| self.per_stratum.get(k).copied().unwrap_or(0) >= s.b_pop)
    }
}

/// Convert a latency budget into per-stratum sample sizes.
///
/// The sampling fraction is `(d_desired - d_dt - epsilon) / (beta * sum B)`,
/// clamped to [0, 1]; each stratum gets `floor(s * B_i)`, raised to one row
/// so no join key is overlooked, and the total never exceeds the row count
/// the remaining time can pay for. An unmeetable deadline yields a plan
/// flagged infeasible rather than an error.
pub fn plan_latency<T: Real>(
    budget: &QueryBudget<T>,
    census: &BTreeMap<u64, StratumStats>,
    model: &CostModel<T>,
    d_dt: T,
) -> Result<SamplePlan<T>, BudgetError> {
    let d_desired = match budget.mode {
        BudgetMode::Latency { d_desired } => d_desired,
        _ => return Err(BudgetError::Planning("budget has no latency target".into())),
    };
    if !(model.beta > T::zero()) {
        return Err(BudgetError::Planning(
            "cost model is not calibrated (beta <= 0)".into(),
        ));
    }

    let sum_b: u64 = census.values().map(|s| s.b_pop).sum();
    if sum_b == 0 {
        return Ok(SamplePlan {
            per_stratum: BTreeMap::new(),
            sampling_fraction: T::one(),
            predicted_d_cp: Some(model.epsilon),
            feasible: true,
        });
    }

    let d_rem = d_desired - d_dt;
    let time_for_rows = d_rem - model.epsilon;
    if !(time_for_rows > T::zero()) {
        return Ok(SamplePlan {
            per_stratum: census.keys().map(|&k| (k, 0)).collect(),
            sampling_fraction: T::zero(),
            predicted_d_cp: Some(T::zero()),
            feasible: false,
        });
    }

    let s_raw = time_for_rows / (model.beta * T::of_u64(sum_b));
    let s = s_raw.min(T::one());
    let affordable = (time_for_rows / model.beta).to_f64().unwrap_or(f64::MAX);
    let budget_rows: u64 = if affordable >= sum_b as f64 {
        sum_b
    } else {
        affordable.floor() as u64
    };

    let mut per_stratum: BTreeMap<u64, u64> = BTreeMap::new();
    for (&key, stats) in census {
        let b = (s.to_f64().unwrap() * stats.b_pop as f64).floor() as u64;
        per_stratum.insert(key, b.clamp(1, stats.b_pop));
    }

    // The per-stratum minimum may have pushed the total past what the
    // deadline pays for; shave the largest strata first, and if even one row
    // per stratum does not fit, flag the plan infeasible and keep only the
    // largest strata so the deadline still holds.
    let mut total: u64 = per_stratum.values().sum();
    let mut feasible = true;
    if total > budget_rows {
        let mut order: Vec<u64> = {
            let mut keys: Vec<(u64, u64)> = per_stratum.iter().map(|(&k, &b)| (k, b)).collect();
            keys.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            keys.into_iter().map(|(k, _)| k).collect()
        };
        'outer: loop {
            let mut shaved = false;
            for &k in &order {
                if total <= budget_rows {
                    break 'outer;
                }
                let b = per_stratum.get_mut(&k).unwrap();
                if *b > 1 {
                    *b -= 1;
                    total -= 1;
                    shaved = true;
                }
            }
            if !shaved {
                break;
            }
        }
        if total > budget_rows {
            feasible = false;
            // Zero the smallest-population strata until the total fits.
            order.reverse();
            for &k in &order {
                if total <= budget_rows {
                    break;
                }
                let b = per_stratum.get_mut(&k).unwrap();
                total -= *b;
                *b = 0;
            }
        }
    }

    let predicted = model.predict(total);
    Ok(SamplePlan {
        per_stratum,
        sampling_fraction: s,
        predicted_d_cp: Some(predicted),
        feasible,
    })
}

/// Convert an error-bound budget into per-stratum sample sizes:
/// `b_i = ceil((z * sigma_i / err_desired)^2)`, at least one row, using the
/// stored sigma of every stratum.
pub fn plan_error<T: Real>(
    budget: &QueryBudget<T>,
    census: &BTreeMap<u64, StratumStats>,
) -> Result<SamplePlan<T>, BudgetError> {
    let err_desired = match budget.mode {
        BudgetMode::ErrorBound { err_desired } => err_desired,
        _ => return Err(BudgetError::Planning("budget has no error target".into())),
    };
    let errf = err_desired.to_f64().unwrap_or(0.0);
    if !(errf > 0.0) {
        return Err(BudgetError::Planning(format!(
            "err_desired {errf} must be > 0"
        )));
    }
    let z = budget.planning_z()?.to_f64().unwrap();

    let mut per_stratum = BTreeMap::new();
    let mut total: u64 = 0;
    for (&key, stats) in census {
        let sigma = stats.sigma.ok_or(BudgetError::MissingSigma(key))?;
        let b = if sigma <= 0.0 {
            1
        } else {
            let raw = (z * sigma / errf).powi(2);
            raw.ceil().max(1.0) as u64
        };
        total += b;
        per_stratum.insert(key, b);
    }
    // A plan of single-row strata leaves no degrees of freedom to estimate
    // a bound from; widen the highest-variance stratum (rounding up never
    // violates the error target). Selecting by sigma keeps plans monotone in
    // the error target: whichever stratum gets widened here is the first
    // whose formula size crosses two as the target tightens.
    if per_stratum.values().all(|&b| b <= 1) {
        let candidate = census
            .values()
            .filter(|s| s.sigma.map(|v| v > 0.0).unwrap_or(false))
            .max_by(|a, b| {
                a.sigma
                    .unwrap()
                    .total_cmp(&b.sigma.unwrap())
                    .then(a.b_pop.cmp(&b.b_pop))
                    .then(b.key.cmp(&a.key))
            })
            .map(|s| s.key);
        if let Some(key) = candidate {
            let b = per_stratum.get_mut(&key).unwrap();
            total += 2 - *b;
            *b = 2;
        }
    }
    let sum_b: u64 = census.values().map(|s| s.b_pop).sum();
    let s = if sum_b == 0 {
        T::one()
    } else {
        (T::of_u64(total) / T::of_u64(sum_b)).min(T::one())
    };
    Ok(SamplePlan {
        per_stratum,
        sampling_fraction: s,
        predicted_d_cp: None,
        feasible: true,
    })
}

/// Latency predicted for a given error target, per stratum and as the worst
/// case over strata.
#[derive(Debug, Clone, PartialEq)]
pub struct TradeoffPrediction<T: Real = f64> {
    pub per_stratum: BTreeMap<u64, T>,
    pub max_seconds: T,
}

/// Evaluate the latency/error trade-off
/// `d = z^2 (sigma_i/err)^2 (beta/B_i) sum(B) + d_dt + epsilon` per stratum.
pub fn tradeoff_latency<T: Real>(
    err_desired: T,
    confidence: T,
    census: &BTreeMap<u64, StratumStats>,
    model: &CostModel<T>,
    d_dt: T,
) -> Result<TradeoffPrediction<T>, BudgetError> {
    let budget = QueryBudget::<T>::error_bound(err_desired).with_confidence(confidence);
    let z = budget.planning_z()?;
    let errf = err_desired.to_f64().unwrap_or(0.0);
    if !(errf > 0.0) {
        return Err(BudgetError::Planning(format!(
            "err_desired {errf} must be > 0"
        )));
    }
    let sum_b: u64 = census.values().map(|s| s.b_pop).sum();
    let mut per_stratum = BTreeMap::new();
    let mut max_seconds = d_dt + model.epsilon;
    for (&key, stats) in census {
        let sigma = T::of(stats.sigma.ok_or(BudgetError::MissingSigma(key))?);
        let ratio = z * sigma / err_desired;
        let d = ratio * ratio * (model.beta / T::of_u64(stats.b_pop.max(1))) * T::of_u64(sum_b)
            + d_dt
            + model.epsilon;
        max_seconds = max_seconds.max(d);
        per_stratum.insert(key, d);
    }
    Ok(TradeoffPrediction {
        per_stratum,
        max_seconds,
    })
}

/// Run one cross-product microbenchmark of roughly `cp_total` rows and
/// return the exact row count worked through plus the wall time it took.
/// This is the offline profiling step that feeds [`calibrate`]; callers
/// wanting noise-free slopes keep the fastest of several repeats.
pub fn profile_cross_product(cp_total: u64) -> (u64, f64) {
    let side = (cp_total as f64).sqrt().ceil() as usize;
    let left: Vec<f64> = (0..side).map(|i| i as f64 * 0.5 + 1.0).collect();
    let right: Vec<f64> = (0..side).map(|i| i as f64 * 0.25 + 2.0).collect();
    let rows = (left.len() * right.len()) as u64;
    let start = std::time::Instant::now();
    let mut acc = 0.0f64;
    for &a in &left {
        for &b in &right {
            acc += a + b;
        }
    }
    std::hint::black_box(acc);
    (rows, start.elapsed().as_secs_f64())
}

/// Feedback store for per-stratum standard deviations, keyed by the query
/// fingerprint. Append-only file of `fingerprint<TAB>key<TAB>sigma<TAB>ts`
/// lines with last-writer-wins semantics, or purely in-memory for embedded
/// use.
#[derive(Debug)]
pub struct SigmaStore {
    path: Option<PathBuf>,
    entries: BTreeMap<(u64, u64), f64>,
}

impl SigmaStore {
    pub fn in_memory() -> Self {
        SigmaStore {
            path: None,
            entries: BTreeMap::new(),
        }
    }

    pub fn open(path: &Path) -> Result<Self, BudgetError> {
        let mut entries = BTreeMap::new();
        if path.exists() {
            let reader = BufReader::new(fs::File::open(path)?);
            for (lineno, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let mut fields = line.split('\t');
                let parse_err = || BudgetError::Parse(format!("sigma store line {}", lineno + 1));
                let fp: u64 = fields
                    .next()
                    .and_then(|s| u64::from_str_radix(s.trim_start_matches("0x"), 16).ok())
                    .ok_or_else(parse_err)?;
                let key: u64 = fields
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(parse_err)?;
                let sigma: f64 = fields
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(parse_err)?;
                entries.insert((fp, key), sigma);
            }
        }
        Ok(SigmaStore {
            path: Some(path.to_path_buf()),
            entries,
        })
    }

    pub fn get(&self, fingerprint: u64, key: u64) -> Option<f64> {
        self.entries.get(&(fingerprint, key)).copied()
    }

    /// All stored sigmas for one query fingerprint.
    pub fn sigmas_for(&self, fingerprint: u64) -> BTreeMap<u64, f64> {
        self.entries
            .range((fingerprint, 0)..=(fingerprint, u64::MAX))
            .map(|(&(_, key), &sigma)| (key, sigma))
            .collect()
    }

    pub fn put(&mut self, fingerprint: u64, key: u64, sigma: f64) -> Result<(), BudgetError> {
        self.entries.insert((fingerprint, key), sigma);
        if let Some(path) = &self.path {
            if let Some(parent) = path.parent() {
                if !parent.as_os_str().is_empty() {
                    fs::create_dir_all(parent)?;
                }
            }
            let ts = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)?;
            writeln!(f, "{fingerprint:016x}\t{key}\t{sigma}\t{ts}")?;
        }
        Ok(())
    }

    pub fn put_many(
        &mut self,
        fingerprint: u64,
        sigmas: &BTreeMap<u64, f64>,
    ) -> Result<(), BudgetError> {
        for (&key, &sigma) in sigmas {
            self.put(fingerprint, key, sigma)?;
        }
        Ok(())
    }
}
