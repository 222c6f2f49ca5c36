//! Command implementations behind the `approxjoin` binary.
//!
//! Exit-code contract: 0 success, 1 usage or parse errors, 2 infeasible
//! budget (the report is still printed), 3 calibration failure.

use anyhow::{anyhow, Context, Result};
use approxjoin_core::budget::{calibrate, profile_cross_product, CostModel, SigmaStore};
use approxjoin_core::commcost::{predict_bloom, predict_broadcast, predict_repartition};
use approxjoin_core::dataset::{
    generate, overlap_fraction, read_dataset, write_dataset, SyntheticSpec,
};
use approxjoin_core::engine::{place, Cluster, Engine, EngineConfig, PlacementPolicy, Strategy};
use approxjoin_core::ledger::Phase;
use approxjoin_core::query;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_CALIBRATION: i32 = 3;

/// Directory holding `sigma_store.tsv` and `cost_model.tsv`:
/// `$APPROXJOIN_HOME`, defaulting to the working directory.
pub fn home_dir() -> PathBuf {
    std::env::var_os("APPROXJOIN_HOME")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn sigma_store_path() -> PathBuf {
    home_dir().join("sigma_store.tsv")
}

pub fn cost_model_path() -> PathBuf {
    home_dir().join("cost_model.tsv")
}

fn load_cost_model() -> CostModel<f64> {
    let path = cost_model_path();
    if path.exists() {
        match CostModel::load(&path) {
            Ok(m) => return m,
            Err(e) => eprintln!(
                "warning: ignoring unreadable cost model {}: {e}",
                path.display()
            ),
        }
    }
    CostModel::new(4.16e-9, 0.0)
}

/// Generate synthetic datasets from a spec file and write them as CSV
/// partition files; prints the realized overlap fraction.
pub fn cmd_gen(spec_file: &Path, out_dir: &Path) -> Result<i32> {
    let text = std::fs::read_to_string(spec_file)
        .with_context(|| format!("cannot read spec file {}", spec_file.display()))?;
    let spec = SyntheticSpec::parse(&text)?;
    let datasets = generate(&spec)?;
    for d in &datasets {
        write_dataset(d, out_dir)?;
    }
    let realized = if datasets.len() >= 2 {
        overlap_fraction(&datasets)?
    } else {
        0.0
    };
    println!("datasets\t{}", datasets.len());
    println!(
        "records\t{}",
        datasets.iter().map(|d| d.total_records()).sum::<u64>()
    );
    println!("overlap_fraction\t{realized:.6}");
    Ok(EXIT_OK)
}

pub struct RunArgs {
    pub query_text: String,
    pub data_dir: PathBuf,
    pub strategy: Strategy,
    pub workers: usize,
    pub fp: f64,
    pub seed: u64,
    pub placement: PlacementPolicy,
    pub ledger_out: Option<PathBuf>,
}

/// Execute one query and print the JoinReport as JSON on stdout.
pub fn cmd_run(args: &RunArgs) -> Result<i32> {
    let parsed = match query::parse(&args.query_text) {
        Ok(q) => q,
        Err(e) => {
            eprintln!("{e}");
            return Ok(EXIT_USAGE);
        }
    };

    let mut datasets = Vec::with_capacity(parsed.inputs.len());
    for (i, name) in parsed.inputs.iter().enumerate() {
        datasets.push(read_dataset(&args.data_dir, name, i).with_context(|| {
            format!(
                "cannot load dataset `{name}` from {}",
                args.data_dir.display()
            )
        })?);
    }

    let placed = place(
        &datasets,
        Cluster::new(args.workers),
        args.placement,
        args.seed,
    );
    let config = EngineConfig {
        target_fp: args.fp,
        seed: args.seed,
        cost_model: load_cost_model(),
        ..EngineConfig::default()
    };
    let engine = Engine::new(placed, config);
    let mut store = SigmaStore::open(&sigma_store_path())?;
    let report = engine.run(args.strategy, &parsed, &mut store)?;

    if let Some(path) = &args.ledger_out {
        std::fs::write(path, report.detail.to_tsv())
            .with_context(|| format!("cannot write ledger to {}", path.display()))?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    let infeasible =
        report.result.is_none() && report.plan.as_ref().map(|p| !p.feasible).unwrap_or(false);
    Ok(if infeasible { EXIT_INFEASIBLE } else { EXIT_OK })
}

/// The header line of the comparison table.
pub const COMPARE_HEADER: &str =
    "strategy\tp\tshuffled_bytes\tfilter_bytes\tpredicted_bytes\trecords\ttotal_seconds";

pub struct CompareArgs {
    pub data_dir: PathBuf,
    pub workers: usize,
    pub fp_list: Vec<f64>,
    pub seed: u64,
    pub placement: PlacementPolicy,
}

/// Discover dataset directories (those containing a `part-0.csv`), sorted by
/// name.
fn discover_datasets(data_dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(data_dir)
        .with_context(|| format!("cannot open data directory {}", data_dir.display()))?
    {
        let entry = entry?;
        if entry.path().is_dir() && entry.path().join("part-0.csv").exists() {
            names.push(entry.file_name().to_string_lossy().to_string());
        }
    }
    names.sort();
    if names.len() < 2 {
        return Err(anyhow!(
            "need at least two dataset directories under {}, found {}",
            data_dir.display(),
            names.len()
        ));
    }
    Ok(names)
}

/// Run all four strategies (the exact ones once, the filtered ones per
/// false-positive target) and print a TSV of measured and predicted volumes.
pub fn cmd_compare(args: &CompareArgs) -> Result<i32> {
    let names = discover_datasets(&args.data_dir)?;
    let mut datasets = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        datasets.push(read_dataset(&args.data_dir, name, i)?);
    }
    let size_bytes: Vec<f64> = datasets.iter().map(|d| d.total_bytes() as f64).collect();
    let query_text = format!(
        "SELECT SUM({}) FROM {} WHERE {}",
        names
            .iter()
            .map(|n| format!("{n}.V"))
            .collect::<Vec<_>>()
            .join(" + "),
        names.join(", "),
        names
            .iter()
            .map(|n| format!("{n}.A"))
            .collect::<Vec<_>>()
            .join(" = "),
    );
    let parsed = query::parse(&query_text).map_err(|e| anyhow!("internal query error: {e}"))?;

    println!("{COMPARE_HEADER}");
    let print_row =
        |strategy: &str, p: Option<f64>, report: &approxjoin_core::JoinReport, predicted: f64| {
            let shuffle = report.detail.phase_totals(Phase::Shuffle);
            let broadcast = report.detail.phase_totals(Phase::Broadcast);
            let filter = report.detail.phase_totals(Phase::FilterBuild).bytes
                + report.detail.phase_totals(Phase::FilterBroadcast).bytes;
            let record_bytes = shuffle.bytes + broadcast.bytes;
            let records = shuffle.records + broadcast.records;
            println!(
                "{strategy}\t{}\t{record_bytes}\t{filter}\t{predicted:.1}\t{records}\t{:.6}",
                p.map(|v| v.to_string()).unwrap_or_else(|| "-".into()),
                report.timings.total_seconds
            );
        };

    let cluster = Cluster::new(args.workers);
    let base_config = EngineConfig {
        seed: args.seed,
        ..EngineConfig::default()
    };
    let placed = place(&datasets, cluster, args.placement, args.seed);

    {
        let engine = Engine::new(placed.clone(), base_config);
        let repart = engine.run_repartition(None, 0.95)?;
        print_row(
            "repartition",
            None,
            &repart,
            predict_repartition(&size_bytes, args.workers),
        );
        let broad = engine.run_broadcast(None, 0.95)?;
        print_row(
            "broadcast",
            None,
            &broad,
            predict_broadcast(&size_bytes, args.workers),
        );
    }

    for &p in &args.fp_list {
        let config = EngineConfig {
            target_fp: p,
            ..base_config
        };
        let engine = Engine::new(placed.clone(), config);

        // Predicted volume evaluated on the measured post-filter survivors,
        // with the filter term at its analytic blob size.
        let sizing = engine.filter_sizing()?;
        let join_filter = approxjoin_core::filter::build_join_filter(&datasets, &sizing)?;
        let survivor_bytes: Vec<f64> = datasets
            .iter()
            .map(|d| {
                approxjoin_core::filter::apply_filter(d, &join_filter)
                    .filtered
                    .total_bytes() as f64
            })
            .collect();
        let predicted =
            predict_bloom(&survivor_bytes, args.workers, join_filter.model_bytes()).total();

        let bloom = engine.run_bloom_exact(None, 0.95)?;
        print_row("bloom", Some(p), &bloom, predicted);

        let mut store = SigmaStore::in_memory();
        let approx = engine.run_approx(&parsed, &mut store)?;
        print_row("approx", Some(p), &approx, predicted);
    }
    Ok(EXIT_OK)
}

pub struct CalibrateArgs {
    pub sizes: Vec<u64>,
    pub repeats: usize,
}

/// Profile cross products at the given sizes, fit the latency model, and
/// persist it. Each size keeps the fastest of its repeats; the minimum
/// filters scheduler noise out of the wall-clock measurements.
pub fn cmd_calibrate(args: &CalibrateArgs) -> Result<i32> {
    let mut distinct = args.sizes.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 {
        eprintln!(
            "calibration needs at least 3 distinct sizes, got {}",
            distinct.len()
        );
        return Ok(EXIT_USAGE);
    }
    let mut samples = Vec::new();
    for &size in &distinct {
        let mut best: Option<(u64, f64)> = None;
        for _ in 0..args.repeats.max(1) {
            let (rows, seconds) = profile_cross_product(size);
            if best.map(|(_, s)| seconds < s).unwrap_or(true) {
                best = Some((rows, seconds));
            }
        }
        samples.push(best.unwrap());
    }
    match calibrate(&samples) {
        Ok(fit) => {
            fit.model.save(&cost_model_path())?;
            println!("beta\t{:e}", fit.model.beta);
            println!("epsilon\t{:e}", fit.model.epsilon);
            println!("r_squared\t{:.6}", fit.r_squared);
            println!("stored\t{}", cost_model_path().display());
            Ok(EXIT_OK)
        }
        Err(e) => {
            eprintln!("calibration failed: {e}");
            Ok(EXIT_CALIBRATION)
        }
    }
}
