//! Partitioned keyed datasets: the data model, the synthetic workload
//! generator, ground-truth metrics, and the CSV interchange format.

use crate::budget::StratumStats;
use crate::hashing::{fnv1a64, splitmix64};
use crate::Value;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("cross-product cardinality overflows u64 for key {0}")]
    CensusOverflow(u64),
}

/// One keyed tuple. `payload` is the declared size in bytes of an opaque
/// payload that travels with the record; the bytes themselves are never
/// materialized, only accounted for.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record {
    pub key: u64,
    pub value: Value,
    pub payload: u32,
}

impl Record {
    pub fn new(key: u64, value: Value) -> Self {
        Record {
            key,
            value,
            payload: 0,
        }
    }

    /// Serialized size: 8 bytes of key + 8 bytes of value + declared payload.
    pub fn byte_size(&self) -> u64 {
        16 + self.payload as u64
    }
}

/// A chunk of one dataset, the unit of placement on the simulated cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub dataset_index: usize,
    pub partition_index: usize,
    pub records: Vec<Record>,
}

/// A join input: densely indexed partitions under a name the query language
/// refers to.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub index: usize,
    pub name: String,
    pub partitions: Vec<Partition>,
}

impl Dataset {
    pub fn from_records(index: usize, name: &str, records: Vec<Record>, partitions: usize) -> Self {
        let parts = partitions.max(1);
        let mut chunks: Vec<Vec<Record>> = vec![Vec::new(); parts];
        for (i, r) in records.into_iter().enumerate() {
            chunks[i % parts].push(r);
        }
        Dataset {
            index,
            name: name.to_string(),
            partitions: chunks
                .into_iter()
                .enumerate()
                .map(|(j, records)| Partition {
                    dataset_index: index,
                    partition_index: j,
                    records,
                })
                .collect(),
        }
    }

    pub fn records(&self) -> impl Iterator<Item = &Record> {
        self.partitions.iter().flat_map(|p| p.records.iter())
    }

    pub fn total_records(&self) -> u64 {
        self.partitions.iter().map(|p| p.records.len() as u64).sum()
    }

    pub fn total_bytes(&self) -> u64 {
        self.records().map(|r| r.byte_size()).sum()
    }
}

/// Parameters of the synthetic workload generator.
///
/// Keys are split into one pool shared by every dataset and per-dataset
/// private pools; record counts per key are drawn uniformly and rescaled so
/// each dataset hits its target size exactly, which pins the realized
/// overlap fraction to the requested one up to per-dataset rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n: usize,
    pub sizes: Vec<u64>,
    pub key_counts: Vec<u64>,
    pub overlap_fraction: f64,
    pub lambda: f64,
    pub seed: u64,
    /// Partitions per dataset; defaults to one per dataset.
    pub partitions: Vec<usize>,
    /// Declared opaque payload bytes carried by every record.
    pub payload: u32,
}

impl SyntheticSpec {
    pub fn new(
        sizes: Vec<u64>,
        key_counts: Vec<u64>,
        overlap: f64,
        lambda: f64,
        seed: u64,
    ) -> Self {
        let n = sizes.len();
        SyntheticSpec {
            n,
            sizes,
            key_counts,
            overlap_fraction: overlap,
            lambda,
            seed,
            partitions: vec![1; n],
            payload: 0,
        }
    }

    pub fn with_partitions(mut self, parts: usize) -> Self {
        self.partitions = vec![parts.max(1); self.n];
        self
    }

    pub fn with_payload(mut self, payload: u32) -> Self {
        self.payload = payload;
        self
    }

    fn validate(&self) -> Result<(), DatasetError> {
        if self.n == 0 || self.sizes.len() != self.n || self.key_counts.len() != self.n {
            return Err(DatasetError::Config(format!(
                "n={} must match sizes ({}) and key_counts ({})",
                self.n,
                self.sizes.len(),
                self.key_counts.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.overlap_fraction) {
            return Err(DatasetError::Config(format!(
                "overlap_fraction {} outside [0, 1]",
                self.overlap_fraction
            )));
        }
        if self.lambda <= 0.0 {
            return Err(DatasetError::Config(format!(
                "lambda {} must be > 0",
                self.lambda
            )));
        }
        for i in 0..self.n {
            if self.key_counts[i] == 0 {
                return Err(DatasetError::Config(format!(
                    "dataset {} has zero keys",
                    i + 1
                )));
            }
            if self.sizes[i] < self.key_counts[i] {
                return Err(DatasetError::Config(format!(
                    "dataset {}: size {} below key count {}",
                    i + 1,
                    self.sizes[i],
                    self.key_counts[i]
                )));
            }
        }
        if self.overlap_fraction > 0.0 && self.n < 2 {
            return Err(DatasetError::Config(
                "overlap_fraction > 0 needs at least two datasets".into(),
            ));
        }
        Ok(())
    }

    /// Parse a flat `key=value` config file. Documented keys: `n`, `sizes`,
    /// `key_counts`, `overlap`, `lambda`, `seed`; optional: `partitions`,
    /// `payload`.
    pub fn parse(text: &str) -> Result<Self, DatasetError> {
        let mut map: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| DatasetError::Parse {
                path: "<spec>".into(),
                line: lineno + 1,
                msg: format!("expected key=value, got `{line}`"),
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |key: &str| {
            map.get(key)
                .ok_or_else(|| DatasetError::Config(format!("missing spec key `{key}`")))
        };
        let parse_list = |s: &str| -> Result<Vec<u64>, DatasetError> {
            s.split(',')
                .map(|p| {
                    p.trim()
                        .parse::<u64>()
                        .map_err(|e| DatasetError::Config(format!("bad number `{p}`: {e}")))
                })
                .collect()
        };
        let n: usize = get("n")?
            .parse()
            .map_err(|e| DatasetError::Config(format!("bad n: {e}")))?;
        let sizes = parse_list(get("sizes")?)?;
        let key_counts = parse_list(get("key_counts")?)?;
        let overlap: f64 = get("overlap")?
            .parse()
            .map_err(|e| DatasetError::Config(format!("bad overlap: {e}")))?;
        let lambda: f64 = get("lambda")?
            .parse()
            .map_err(|e| DatasetError::Config(format!("bad lambda: {e}")))?;
        let seed: u64 = get("seed")?
            .parse()
            .map_err(|e| DatasetError::Config(format!("bad seed: {e}")))?;
        let partitions = match map.get("partitions") {
            None => vec![1; n],
            Some(s) => {
                let list = parse_list(s)?;
                if list.len() == 1 {
                    vec![list[0] as usize; n]
                } else {
                    list.into_iter().map(|x| x as usize).collect()
                }
            }
        };
        let payload: u32 = match map.get("payload") {
            None => 0,
            Some(s) => s
                .parse()
                .map_err(|e| DatasetError::Config(format!("bad payload: {e}")))?,
        };
        let spec = SyntheticSpec {
            n,
            sizes,
            key_counts,
            overlap_fraction: overlap,
            lambda,
            seed,
            partitions,
            payload,
        };
        spec.validate()?;
        if spec.partitions.len() != n {
            return Err(DatasetError::Config(format!(
                "partitions list has {} entries for n={n}",
                spec.partitions.len()
            )));
        }
        Ok(spec)
    }
}

/// Base offset of dataset `i`'s private key range; shared keys start at 1.
fn private_key_base(dataset: usize) -> u64 {
    (dataset as u64 + 1) << 32
}

/// Spread `total` records over `keys` keys: uniform weights, rescaled so the
/// counts sum to `total` with every key getting at least one record.
fn spread_counts(rng: &mut ChaCha8Rng, keys: u64, total: u64) -> Vec<u64> {
    debug_assert!(total >= keys && keys > 0);
    let mut counts: Vec<u64> = Vec::with_capacity(keys as usize);
    let mut weights: Vec<f64> = Vec::with_capacity(keys as usize);
    let mut wsum = 0.0;
    for _ in 0..keys {
        let w: f64 = rng.gen_range(0.5..1.5);
        weights.push(w);
        wsum += w;
    }
    let mut assigned = 0u64;
    for w in &weights {
        let c = ((total as f64) * w / wsum).floor().max(1.0) as u64;
        counts.push(c);
        assigned += c;
    }
    // Deterministic fix-up to hit the exact total.
    let mut i = 0usize;
    while assigned < total {
        counts[i] += 1;
        assigned += 1;
        i = (i + 1) % counts.len();
    }
    while assigned > total {
        if counts[i] > 1 {
            counts[i] -= 1;
            assigned -= 1;
        }
        i = (i + 1) % counts.len();
    }
    counts
}

/// Generate the synthetic datasets described by `spec`. Deterministic for a
/// fixed seed.
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<Dataset>, DatasetError> {
    spec.validate()?;
    let n = spec.n;

    // Target participating records per dataset.
    let shared_records: Vec<u64> = spec
        .sizes
        .iter()
        .map(|&t| (spec.overlap_fraction * t as f64).round() as u64)
        .collect();

    let shared_keys = if spec.overlap_fraction == 0.0 {
        0
    } else {
        let mut lo = 1u64;
        let mut hi = u64::MAX;
        for (i, &shared) in shared_records.iter().enumerate() {
            if shared == 0 {
                return Err(DatasetError::Config(format!(
                    "overlap fraction {} unreachable: dataset {} would contribute zero shared records",
                    spec.overlap_fraction,
                    i + 1
                )));
            }
            let private_records = spec.sizes[i] - shared;
            // Private keys each need one record.
            let lo_i = (spec.key_counts[i] + shared).saturating_sub(spec.sizes[i]);
            lo = lo.max(lo_i);
            let mut hi_i = spec.key_counts[i].min(shared);
            if private_records > 0 {
                // Leftover records need at least one private key to live on.
                hi_i = hi_i.min(spec.key_counts[i] - 1);
            }
            hi = hi.min(hi_i);
        }
        if lo > hi {
            return Err(DatasetError::Config(format!(
                "overlap fraction {} unreachable with the given sizes and key counts \
                 (no feasible shared-pool size in [{lo}, {hi}])",
                spec.overlap_fraction
            )));
        }
        let min_keys = *spec.key_counts.iter().min().unwrap();
        ((spec.overlap_fraction * min_keys as f64).round() as u64).clamp(lo, hi)
    };

    let mut out = Vec::with_capacity(n);
    for (i, &shared) in shared_records.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed ^ (i as u64 + 1)));
        let poisson = Poisson::new(spec.lambda)
            .map_err(|e| DatasetError::Config(format!("bad lambda: {e}")))?;

        let private_keys = spec.key_counts[i] - shared_keys;
        let private_records = spec.sizes[i] - shared;
        let mut records = Vec::with_capacity(spec.sizes[i] as usize);

        if shared_keys > 0 {
            let counts = spread_counts(&mut rng, shared_keys, shared);
            for (j, &c) in counts.iter().enumerate() {
                let key = 1 + j as u64;
                for _ in 0..c {
                    let value = poisson.sample(&mut rng);
                    records.push(Record {
                        key,
                        value,
                        payload: spec.payload,
                    });
                }
            }
        }
        if private_keys > 0 {
            let counts = spread_counts(&mut rng, private_keys, private_records);
            let base = private_key_base(i);
            for (j, &c) in counts.iter().enumerate() {
                let key = base + j as u64;
                for _ in 0..c {
                    let value = poisson.sample(&mut rng);
                    records.push(Record {
                        key,
                        value,
                        payload: spec.payload,
                    });
                }
            }
        }

        out.push(Dataset::from_records(
            i,
            &format!("R{}", i + 1),
            records,
            spec.partitions[i],
        ));
    }
    Ok(out)
}

/// Participating records divided by total records across all inputs: the
/// count of records whose key appears in every dataset over the grand total.
pub fn overlap_fraction(datasets: &[Dataset]) -> Result<f64, DatasetError> {
    if datasets.len() < 2 {
        return Err(DatasetError::Usage(
            "overlap fraction needs at least two datasets".into(),
        ));
    }
    let key_sets: Vec<std::collections::BTreeSet<u64>> = datasets
        .iter()
        .map(|d| d.records().map(|r| r.key).collect())
        .collect();
    let total: u64 = datasets.iter().map(|d| d.total_records()).sum();
    let mut participating = 0u64;
    for (i, d) in datasets.iter().enumerate() {
        for r in d.records() {
            if key_sets
                .iter()
                .enumerate()
                .all(|(j, s)| j == i || s.contains(&r.key))
            {
                participating += 1;
            }
        }
    }
    Ok(participating as f64 / total as f64)
}

/// Per-key population statistics over keys present in every dataset:
/// per-input record counts and the cross-product cardinality they span.
pub fn stratum_census(datasets: &[Dataset]) -> Result<BTreeMap<u64, StratumStats>, DatasetError> {
    if datasets.is_empty() {
        return Err(DatasetError::Usage(
            "census needs at least one dataset".into(),
        ));
    }
    let counts: Vec<BTreeMap<u64, u64>> = datasets
        .iter()
        .map(|d| {
            let mut m = BTreeMap::new();
            for r in d.records() {
                *m.entry(r.key).or_insert(0u64) += 1;
            }
            m
        })
        .collect();

    let mut census = BTreeMap::new();
    for (&key, &first) in &counts[0] {
        let mut per_input = Vec::with_capacity(datasets.len());
        per_input.push(first);
        let mut present_everywhere = true;
        for c in &counts[1..] {
            match c.get(&key) {
                Some(&v) => per_input.push(v),
                None => {
                    present_everywhere = false;
                    break;
                }
            }
        }
        if !present_everywhere {
            continue;
        }
        let mut b_pop: u64 = 1;
        for &c in &per_input {
            b_pop = b_pop
                .checked_mul(c)
                .ok_or(DatasetError::CensusOverflow(key))?;
        }
        census.insert(
            key,
            StratumStats {
                key,
                per_input_counts: per_input,
                b_pop,
                sigma: None,
            },
        );
    }
    Ok(census)
}

// --- CSV interchange -------------------------------------------------------

/// Write one directory per dataset: `<out>/<name>/part-<j>.csv` with header
/// `key,value` (plus `payload_bytes` when any record declares a payload).
pub fn write_dataset(dataset: &Dataset, out_dir: &Path) -> Result<(), DatasetError> {
    let dir = out_dir.join(&dataset.name);
    fs::create_dir_all(&dir)?;
    let has_payload = dataset.records().any(|r| r.payload > 0);
    for part in &dataset.partitions {
        let path = dir.join(format!("part-{}.csv", part.partition_index));
        let mut w = BufWriter::new(fs::File::create(&path)?);
        if has_payload {
            writeln!(w, "key,value,payload_bytes")?;
            for r in &part.records {
                writeln!(w, "{},{},{}", r.key, r.value, r.payload)?;
            }
        } else {
            writeln!(w, "key,value")?;
            for r in &part.records {
                writeln!(w, "{},{}", r.key, r.value)?;
            }
        }
    }
    Ok(())
}

/// Read `<dir>/<name>/part-<j>.csv` back into a dataset. Numeric keys parse
/// as u64; anything else is hashed into the key space.
pub fn read_dataset(dir: &Path, name: &str, index: usize) -> Result<Dataset, DatasetError> {
    let dataset_dir = dir.join(name);
    let mut part_files: Vec<(usize, std::path::PathBuf)> = Vec::new();
    for entry in fs::read_dir(&dataset_dir).map_err(|e| {
        DatasetError::Usage(format!(
            "cannot open dataset directory {}: {e}",
            dataset_dir.display()
        ))
    })? {
        let entry = entry?;
        let fname = entry.file_name().to_string_lossy().to_string();
        if let Some(idx) = fname
            .strip_prefix("part-")
            .and_then(|s| s.strip_suffix(".csv"))
        {
            let j: usize = idx.parse().map_err(|_| DatasetError::Parse {
                path: fname.clone(),
                line: 0,
                msg: "partition index is not a number".into(),
            })?;
            part_files.push((j, entry.path()));
        }
    }
    if part_files.is_empty() {
        return Err(DatasetError::Usage(format!(
            "no part-*.csv files under {}",
            dataset_dir.display()
        )));
    }
    part_files.sort_by_key(|(j, _)| *j);

    let mut partitions = Vec::with_capacity(part_files.len());
    for (slot, (j, path)) in part_files.iter().enumerate() {
        if *j != slot {
            return Err(DatasetError::Usage(format!(
                "partition indices of {name} are not dense: expected part-{slot}, found part-{j}"
            )));
        }
        let display = path.display().to_string();
        let reader = BufReader::new(fs::File::open(path)?);
        let mut records = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if lineno == 0 {
                let h = line.trim();
                if h != "key,value" && h != "key,value,payload_bytes" {
                    return Err(DatasetError::Parse {
                        path: display,
                        line: 1,
                        msg: format!("unexpected header `{h}`"),
                    });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let key_text = fields.next().unwrap_or("");
            let key = match key_text.parse::<u64>() {
                Ok(k) => k,
                Err(_) => fnv1a64(key_text.as_bytes()),
            };
            let value: Value = fields
                .next()
                .ok_or_else(|| DatasetError::Parse {
                    path: display.clone(),
                    line: lineno + 1,
                    msg: "missing value column".into(),
                })?
                .trim()
                .parse()
                .map_err(|e| DatasetError::Parse {
                    path: display.clone(),
                    line: lineno + 1,
                    msg: format!("bad value: {e}"),
                })?;
            let payload: u32 = match fields.next() {
                None => 0,
                Some(p) => p.trim().parse().map_err(|e| DatasetError::Parse {
                    path: display.clone(),
                    line: lineno + 1,
                    msg: format!("bad payload_bytes: {e}"),
                })?,
            };
            records.push(Record {
                key,
                value,
                payload,
            });
        }
        partitions.push(Partition {
            dataset_index: index,
            partition_index: *j,
            records,
        });
    }
    Ok(Dataset {
        index,
        name: name.to_string(),
        partitions,
    })
}
