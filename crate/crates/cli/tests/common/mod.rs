//! Shared helpers for the CLI and acceptance test suites.

// Each test binary compiles this module and uses its own subset.
#![allow(dead_code)]

use approxjoin_testkit::schema::Val;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_approxjoin")
}

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .unwrap()
}

/// Run the CLI with APPROXJOIN_HOME pointed at `home`.
pub fn run_cli(args: &[&str], home: &Path) -> Output {
    Command::new(binary())
        .args(args)
        .env("APPROXJOIN_HOME", home)
        .output()
        .expect("binary must spawn")
}

pub fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

/// Convert serde_json values into the schema validator's representation.
pub fn to_val(v: &serde_json::Value) -> Val {
    match v {
        serde_json::Value::Null => Val::Null,
        serde_json::Value::Bool(b) => Val::Bool(*b),
        serde_json::Value::Number(n) => Val::Num(n.as_f64().unwrap()),
        serde_json::Value::String(s) => Val::Str(s.clone()),
        serde_json::Value::Array(items) => Val::Arr(items.iter().map(to_val).collect()),
        serde_json::Value::Object(fields) => {
            Val::Obj(fields.iter().map(|(k, v)| (k.clone(), to_val(v))).collect())
        }
    }
}

pub fn load_schema(name: &str) -> Val {
    let path = workspace_root().join("schemas").join(name);
    let text = std::fs::read_to_string(&path)
        .unwrap_or_else(|e| panic!("cannot read schema {}: {e}", path.display()));
    to_val(&serde_json::from_str(&text).expect("schema file must be valid JSON"))
}

/// Validate a join-report JSON string against the checked-in schema.
pub fn validate_report(json: &str) {
    let schema = load_schema("join_report.schema.json");
    let value: serde_json::Value = serde_json::from_str(json).expect("report must be JSON");
    approxjoin_testkit::schema::validate(&schema, &to_val(&value))
        .unwrap_or_else(|e| panic!("report violates schema: {e}"));
}

/// Drop execution-environment-dependent fields before comparing reports:
/// always the timings; the ledger too when comparing across worker counts
/// (transfer volumes legitimately depend on the cluster size).
pub fn strip_volatile(json: &str, strip_ledger: bool) -> String {
    let mut value: serde_json::Value = serde_json::from_str(json).expect("report must be JSON");
    if let Some(obj) = value.as_object_mut() {
        obj.remove("timings");
        if strip_ledger {
            obj.remove("ledger");
        }
    }
    serde_json::to_string(&value).unwrap()
}

/// Write a synthetic-spec file and generate the datasets with `gen`.
pub fn gen_data(tmp: &Path, spec_text: &str) -> PathBuf {
    let spec = tmp.join("spec.conf");
    std::fs::write(&spec, spec_text).unwrap();
    let data = tmp.join("data");
    let out = run_cli(
        &[
            "gen",
            "--spec",
            spec.to_str().unwrap(),
            "--out",
            data.to_str().unwrap(),
        ],
        tmp,
    );
    assert!(
        out.status.success(),
        "gen failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    data
}
