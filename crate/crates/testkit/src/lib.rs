//! Reference oracles for the test suites.
//!
//! Everything in here is deliberately written the slow, obvious way and has
//! no dependency on the library under test: brute-force join enumeration,
//! closed-form least squares, a chi-square statistic, and a small structural
//! JSON validator for the checked-in output schemas.

use std::collections::BTreeMap;

/// One join input as plain `(key, value)` pairs.
pub type FlatInput = Vec<(u64, f64)>;

/// Exact aggregates of a multi-way equi-join computed by full enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinTruth {
    /// Number of join output rows (sum of per-key cross-product sizes).
    pub rows: u64,
    /// Total of the row value (sum of the selected per-input values).
    pub sum: f64,
    /// Mean row value; `None` when the join is empty.
    pub avg: Option<f64>,
    /// Population standard deviation of the row value; `None` when empty.
    pub stdev: Option<f64>,
    /// Per-key output cardinality (the cross-product size of each stratum).
    pub rows_per_key: BTreeMap<u64, u64>,
    /// Per-key sum of the row value.
    pub sum_per_key: BTreeMap<u64, f64>,
    /// Per-key population standard deviation of the row value.
    pub stdev_per_key: BTreeMap<u64, f64>,
}

/// Brute-force inner equi-join over `inputs`, aggregating the row value
/// `sum_i include[i] * value_i` across every combination of matching records.
///
/// Enumerates the full per-key cross product with an odometer, so keep the
/// instances it sees small (the acceptance instances stay under 10^4 rows).
pub fn brute_force_join(inputs: &[FlatInput], include: &[bool]) -> JoinTruth {
    assert!(inputs.len() >= 2, "join needs at least two inputs");
    assert_eq!(inputs.len(), include.len());

    let mut grouped: Vec<BTreeMap<u64, Vec<f64>>> = Vec::with_capacity(inputs.len());
    for input in inputs {
        let mut m: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for &(k, v) in input {
            m.entry(k).or_default().push(v);
        }
        grouped.push(m);
    }

    // Keys present in every input participate.
    let mut keys: Vec<u64> = grouped[0].keys().copied().collect();
    keys.retain(|k| grouped.iter().all(|g| g.contains_key(k)));

    let mut rows = 0u64;
    let mut sum = 0.0f64;
    let mut sumsq = 0.0f64;
    let mut rows_per_key = BTreeMap::new();
    let mut sum_per_key = BTreeMap::new();
    let mut stdev_per_key = BTreeMap::new();

    for &key in &keys {
        let sides: Vec<&Vec<f64>> = grouped.iter().map(|g| &g[&key]).collect();
        let count: u64 = sides.iter().map(|s| s.len() as u64).product();
        let mut key_sum = 0.0f64;
        let mut key_sumsq = 0.0f64;

        // Odometer over the cross product.
        let mut idx = vec![0usize; sides.len()];
        loop {
            let mut v = 0.0;
            for (i, side) in sides.iter().enumerate() {
                if include[i] {
                    v += side[idx[i]];
                }
            }
            key_sum += v;
            key_sumsq += v * v;

            let mut pos = sides.len();
            loop {
                if pos == 0 {
                    break;
                }
                pos -= 1;
                idx[pos] += 1;
                if idx[pos] < sides[pos].len() {
                    break;
                }
                idx[pos] = 0;
            }
            if idx.iter().all(|&i| i == 0) {
                break;
            }
        }

        rows += count;
        sum += key_sum;
        sumsq += key_sumsq;
        rows_per_key.insert(key, count);
        sum_per_key.insert(key, key_sum);
        let mean = key_sum / count as f64;
        let var = (key_sumsq / count as f64 - mean * mean).max(0.0);
        stdev_per_key.insert(key, var.sqrt());
    }

    let avg = if rows > 0 {
        Some(sum / rows as f64)
    } else {
        None
    };
    let stdev = if rows > 0 {
        let mean = sum / rows as f64;
        Some((sumsq / rows as f64 - mean * mean).max(0.0).sqrt())
    } else {
        None
    };

    JoinTruth {
        rows,
        sum,
        avg,
        stdev,
        rows_per_key,
        sum_per_key,
        stdev_per_key,
    }
}

/// Keys present in every input (the true participating key set).
pub fn key_intersection(inputs: &[FlatInput]) -> Vec<u64> {
    let sets: Vec<std::collections::BTreeSet<u64>> = inputs
        .iter()
        .map(|input| input.iter().map(|&(k, _)| k).collect())
        .collect();
    let mut keys: Vec<u64> = sets[0].iter().copied().collect();
    keys.retain(|k| sets.iter().all(|s| s.contains(k)));
    keys
}

/// Fraction of records (over all inputs) whose key appears in every input.
pub fn overlap_fraction(inputs: &[FlatInput]) -> f64 {
    let shared: std::collections::BTreeSet<u64> = key_intersection(inputs).into_iter().collect();
    let total: usize = inputs.iter().map(|i| i.len()).sum();
    let participating: usize = inputs
        .iter()
        .map(|input| input.iter().filter(|&&(k, _)| shared.contains(&k)).count())
        .sum();
    participating as f64 / total as f64
}

/// Closed-form simple linear regression `y = slope*x + intercept`.
pub fn ols_line(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.0 - mean_x)).sum();
    let slope = sxy / sxx;
    (slope, mean_y - slope * mean_x)
}

/// Pearson chi-square statistic for observed counts against uniform expected
/// counts. The caller compares against a frozen critical value.
pub fn chi_square_uniform(observed: &[u64], expected_each: f64) -> f64 {
    observed
        .iter()
        .map(|&o| {
            let d = o as f64 - expected_each;
            d * d / expected_each
        })
        .sum()
}

pub mod schema {
    //! Minimal structural validator for the checked-in JSON schemas.
    //!
    //! Supports the subset those schemas use: `type` (including type arrays
    //! for nullability), `properties`, `required`, `items`, and `enum` over
    //! strings. Parsing is delegated to the caller, which hands us
    //! `serde_json`-shaped values re-encoded as this module's `Val`.

    use std::collections::BTreeMap;

    /// A parsed JSON value. The test suites convert from their JSON library
    /// of choice so the validator itself stays dependency-free.
    #[derive(Debug, Clone, PartialEq)]
    pub enum Val {
        Null,
        Bool(bool),
        Num(f64),
        Str(String),
        Arr(Vec<Val>),
        Obj(BTreeMap<String, Val>),
    }

    impl Val {
        fn type_name(&self) -> &'static str {
            match self {
                Val::Null => "null",
                Val::Bool(_) => "boolean",
                Val::Num(n) => {
                    if n.fract() == 0.0 {
                        "integer"
                    } else {
                        "number"
                    }
                }
                Val::Str(_) => "string",
                Val::Arr(_) => "array",
                Val::Obj(_) => "object",
            }
        }
    }

    fn type_matches(declared: &str, value: &Val) -> bool {
        match declared {
            "number" => matches!(value, Val::Num(_)),
            "integer" => matches!(value, Val::Num(n) if n.fract() == 0.0),
            other => other == value.type_name(),
        }
    }

    /// Validate `value` against `schema`, returning the path of the first
    /// violation.
    pub fn validate(schema: &Val, value: &Val) -> Result<(), String> {
        validate_at(schema, value, "$")
    }

    fn validate_at(schema: &Val, value: &Val, path: &str) -> Result<(), String> {
        let obj = match schema {
            Val::Obj(o) => o,
            _ => return Err(format!("{path}: schema node is not an object")),
        };

        if let Some(ty) = obj.get("type") {
            let ok = match ty {
                Val::Str(s) => type_matches(s, value),
                Val::Arr(alts) => alts
                    .iter()
                    .any(|alt| matches!(alt, Val::Str(s) if type_matches(s, value))),
                _ => false,
            };
            if !ok {
                return Err(format!(
                    "{path}: expected type {ty:?}, got {}",
                    value.type_name()
                ));
            }
        }

        if let Some(Val::Arr(allowed)) = obj.get("enum") {
            if !allowed.iter().any(|a| a == value) {
                return Err(format!("{path}: value not in enum"));
            }
        }

        if let Val::Obj(fields) = value {
            if let Some(Val::Arr(required)) = obj.get("required") {
                for r in required {
                    if let Val::Str(name) = r {
                        if !fields.contains_key(name) {
                            return Err(format!("{path}: missing required field `{name}`"));
                        }
                    }
                }
            }
            if let Some(Val::Obj(props)) = obj.get("properties") {
                for (name, sub) in props {
                    if let Some(v) = fields.get(name) {
                        validate_at(sub, v, &format!("{path}.{name}"))?;
                    }
                }
            }
        }

        if let (Val::Arr(items), Some(item_schema)) = (value, obj.get("items")) {
            for (i, item) in items.iter().enumerate() {
                validate_at(item_schema, item, &format!("{path}[{i}]"))?;
            }
        }

        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn brute_force_hand_case() {
        // R1 = {a,a,b}, R2 = {a,c,c,c}: only key `a` joins, 2*1 = 2 rows.
        let r1 = vec![(1, 10.0), (1, 20.0), (2, 5.0)];
        let r2 = vec![(1, 1.0), (3, 7.0), (3, 8.0), (3, 9.0)];
        let t = brute_force_join(&[r1.clone(), r2.clone()], &[true, true]);
        assert_eq!(t.rows, 2);
        assert_eq!(t.sum, (10.0 + 1.0) + (20.0 + 1.0));
        assert_eq!(overlap_fraction(&[r1, r2]), 3.0 / 7.0);
    }

    #[test]
    fn three_way_cross_product_size() {
        let a = vec![(9, 1.0), (9, 1.0)];
        let b = vec![(9, 1.0), (9, 1.0), (9, 1.0)];
        let c = vec![(9, 1.0); 5];
        let t = brute_force_join(&[a, b, c], &[true, true, true]);
        assert_eq!(t.rows, 30);
        assert_eq!(t.rows_per_key[&9], 30);
        assert_eq!(t.sum, 90.0); // every row sums three 1.0 values
    }

    #[test]
    fn ols_exact_line() {
        let pts: Vec<(f64, f64)> = (1..=5).map(|i| (i as f64, 2.0 * i as f64 + 5.0)).collect();
        let (slope, intercept) = ols_line(&pts);
        assert!((slope - 2.0).abs() < 1e-12);
        assert!((intercept - 5.0).abs() < 1e-12);
    }

    #[test]
    fn schema_subset() {
        use schema::Val;
        let mut props = std::collections::BTreeMap::new();
        props.insert(
            "estimate".to_string(),
            Val::Obj(
                [("type".to_string(), Val::Str("number".into()))]
                    .into_iter()
                    .collect(),
            ),
        );
        let schema = Val::Obj(
            [
                ("type".to_string(), Val::Str("object".into())),
                (
                    "required".to_string(),
                    Val::Arr(vec![Val::Str("estimate".into())]),
                ),
                ("properties".to_string(), Val::Obj(props)),
            ]
            .into_iter()
            .collect(),
        );
        let good = Val::Obj(
            [("estimate".to_string(), Val::Num(1.5))]
                .into_iter()
                .collect(),
        );
        assert!(schema::validate(&schema, &good).is_ok());
        let bad = Val::Obj(std::collections::BTreeMap::new());
        assert!(schema::validate(&schema, &bad).is_err());
    }
}
