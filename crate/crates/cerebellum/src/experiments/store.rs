//! Append-only result store.
//!
//! ```text
//! <dir>/store.json      {"schema_version": 1}
//! <dir>/results.jsonl   one ResultRow per line
//! <dir>/results.csv     the same rows, header first
//! ```
//!
//! CSV columns are the [`ResultRow`] fields in declaration order. Rows are
//! keyed by `experiment_id`; appending a row whose id already has an `ok`
//! row is a no-op, so reruns are idempotent. Failed rows are kept and the
//! point is retried on the next run.

use std::collections::HashSet;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STORE_SCHEMA_VERSION: u32 = 1;
const STORE_FILE: &str = "store.json";
const JSONL_FILE: &str = "results.jsonl";
const CSV_FILE: &str = "results.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RowStatus {
    Ok,
    Failed,
}

/// One (model, attack) measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRow {
    pub schema_version: u32,
    /// Content hash of everything that determines the row's numbers.
    pub experiment_id: String,
    pub plan_index: usize,
    pub kind: String,
    pub dataset: String,
    pub d: usize,
    pub m: usize,
    pub k: usize,
    pub c: usize,
    pub ltd: bool,
    /// Seed of the evaluated model.
    pub seed: u64,
    /// Seed of the model the attack was crafted on (differs only in transfer rows).
    pub source_seed: u64,
    pub epochs: usize,
    pub attack: String,
    pub family: String,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub n_eval: usize,
    pub clean_accuracy: Option<f64>,
    pub perturbed_accuracy: Option<f64>,
    pub fooling_rate: Option<f64>,
    /// Fooling rate at `steps` and `steps / 2` within 0.5pp; iterative attacks only.
    pub converged: Option<bool>,
    pub budget_violations: Option<usize>,
    pub masking_suspected: Option<bool>,
    pub status: RowStatus,
    pub error: Option<String>,
    /// Unix seconds.
    pub timestamp: u64,
    pub code_version: String,
    /// Content hash of the network config and hyperparameters.
    pub config_hash: String,
}

impl ResultRow {
    pub fn is_ok(&self) -> bool {
        self.status == RowStatus::Ok
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoreHeader {
    schema_version: u32,
}

#[derive(Debug)]
pub struct Store {
    dir: PathBuf,
    rows: Vec<ResultRow>,
    done: HashSet<String>,
}

fn malformed(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: malformed result store: {msg}", path.display()))
}

impl Store {
    /// Opens the store in `dir`, creating an empty one if `dir` has none.
    pub fn open(dir: &Path) -> Result<Self> {
        let header = dir.join(STORE_FILE);
        if !header.exists() {
            fs::create_dir_all(dir).map_err(Error::io(dir))?;
            let text = serde_json::to_string(&StoreHeader {
                schema_version: STORE_SCHEMA_VERSION,
            })
            .expect("header serializes");
            fs::write(&header, text + "\n").map_err(Error::io(&header))?;
            fs::write(dir.join(JSONL_FILE), "").map_err(Error::io(dir.join(JSONL_FILE)))?;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(Self::columns())
                .map_err(|e| malformed(dir, e))?;
            let bytes = w.into_inner().map_err(|e| malformed(dir, e))?;
            fs::write(dir.join(CSV_FILE), bytes).map_err(Error::io(dir.join(CSV_FILE)))?;
        }
        Self::load(dir)
    }

    /// Opens an existing store; a missing or malformed store is a data error.
    pub fn load(dir: &Path) -> Result<Self> {
        let header = dir.join(STORE_FILE);
        let text = fs::read_to_string(&header).map_err(Error::io(&header))?;
        let h: StoreHeader = serde_json::from_str(&text).map_err(|e| malformed(&header, e))?;
        if h.schema_version != STORE_SCHEMA_VERSION {
            return Err(malformed(
                &header,
                format!(
                    "schema version {} (supported: {STORE_SCHEMA_VERSION})",
                    h.schema_version
                ),
            ));
        }

        let jsonl = dir.join(JSONL_FILE);
        let text = fs::read_to_string(&jsonl).map_err(Error::io(&jsonl))?;
        let mut rows = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let row: ResultRow = serde_json::from_str(line)
                .map_err(|e| malformed(&jsonl, format!("line {}: {e}", i + 1)))?;
            if row.schema_version != STORE_SCHEMA_VERSION {
                return Err(malformed(
                    &jsonl,
                    format!("line {}: schema version {}", i + 1, row.schema_version),
                ));
            }
            rows.push(row);
        }

        let csv_path = dir.join(CSV_FILE);
        let mut reader = csv::Reader::from_path(&csv_path).map_err(|e| malformed(&csv_path, e))?;
        let headers = reader.headers().map_err(|e| malformed(&csv_path, e))?;
        if headers.iter().ne(Self::columns().iter().copied()) {
            return Err(malformed(&csv_path, "unexpected header"));
        }
        let mut count = 0;
        for (i, record) in reader.deserialize::<ResultRow>().enumerate() {
            let row = record.map_err(|e| malformed(&csv_path, e))?;
            if rows.get(i) != Some(&row) {
                return Err(malformed(
                    &csv_path,
                    format!("row {} disagrees with {JSONL_FILE}", i + 1),
                ));
            }
            count += 1;
        }
        if count != rows.len() {
            return Err(malformed(
                &csv_path,
                format!("{count} rows, {JSONL_FILE} has {}", rows.len()),
            ));
        }

        let done = rows
            .iter()
            .filter(|r| r.is_ok())
            .map(|r| r.experiment_id.clone())
            .collect();
        Ok(Self {
            dir: dir.to_path_buf(),
            rows,
            done,
        })
    }

    pub fn columns() -> &'static [&'static str] {
        &[
            "schema_version",
            "experiment_id",
            "plan_index",
            "kind",
            "dataset",
            "d",
            "m",
            "k",
            "c",
            "ltd",
            "seed",
            "source_seed",
            "epochs",
            "attack",
            "family",
            "epsilon",
            "steps",
            "step_size",
            "n_eval",
            "clean_accuracy",
            "perturbed_accuracy",
            "fooling_rate",
            "converged",
            "budget_violations",
            "masking_suspected",
            "status",
            "error",
            "timestamp",
            "code_version",
            "config_hash",
        ]
    }

    /// Store files relative to the store directory.
    pub fn files() -> [&'static str; 3] {
        [STORE_FILE, JSONL_FILE, CSV_FILE]
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn rows(&self) -> &[ResultRow] {
        &self.rows
    }

    /// `ok` rows, first occurrence per experiment id, in store order.
    pub fn ok_rows(&self) -> Vec<&ResultRow> {
        let mut seen = HashSet::new();
        self.rows
            .iter()
            .filter(|r| r.is_ok() && seen.insert(r.experiment_id.as_str()))
            .collect()
    }

    pub fn contains_ok(&self, experiment_id: &str) -> bool {
        self.done.contains(experiment_id)
    }

    /// Appends rows not already stored as `ok`; returns how many were written.
    pub fn append(&mut self, rows: &[ResultRow]) -> Result<usize> {
        let fresh: Vec<&ResultRow> = rows
            .iter()
            .filter(|r| !self.contains_ok(&r.experiment_id))
            .collect();
        if fresh.is_empty() {
            return Ok(0);
        }
        let mut lines = String::new();
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(Vec::new());
        for r in &fresh {
            lines.push_str(&serde_json::to_string(r).expect("row serializes"));
            lines.push('\n');
            w.serialize(r).map_err(|e| malformed(&self.dir, e))?;
        }
        let csv_bytes = w.into_inner().map_err(|e| malformed(&self.dir, e))?;
        append_bytes(&self.dir.join(JSONL_FILE), lines.as_bytes())?;
        append_bytes(&self.dir.join(CSV_FILE), &csv_bytes)?;
        for r in fresh.iter() {
            if r.is_ok() {
                self.done.insert(r.experiment_id.clone());
            }
            self.rows.push((*r).clone());
        }
        Ok(fresh.len())
    }
}

fn append_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(Error::io(path))?;
    f.write_all(bytes).map_err(Error::io(path))?;
    f.sync_data().map_err(Error::io(path))
}

#[cfg(test)]
pub(crate) fn fixture_row(id: &str, status: RowStatus) -> ResultRow {
    ResultRow {
        schema_version: STORE_SCHEMA_VERSION,
        experiment_id: id.into(),
        plan_index: 3,
        kind: "width".into(),
        dataset: "mnist-test".into(),
        d: 784,
        m: 1000,
        k: 784,
        c: 10,
        ltd: false,
        seed: 123,
        source_seed: 123,
        epochs: 3,
        attack: "pgd eps=0.1 steps=40".into(),
        family: "pgd".into(),
        epsilon: 0.1,
        steps: 40,
        step_size: 0.01,
        n_eval: 1000,
        clean_accuracy: Some(0.9123456789012345),
        perturbed_accuracy: Some(1.0 / 3.0),
        fooling_rate: Some(0.1 + 0.2),
        converged: Some(true),
        budget_violations: Some(0),
        masking_suspected: Some(false),
        status,
        error: (status == RowStatus::Failed).then(|| "boom, \"quoted\"\nline".into()),
        timestamp: 1_700_000_000,
        code_version: "cerebellum 0.1.0".into(),
        config_hash: "ab".repeat(32),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn columns_match_fields() {
        let row = fixture_row("x", RowStatus::Ok);
        let value = serde_json::to_value(&row).unwrap();
        let keys: Vec<&str> = value
            .as_object()
            .unwrap()
            .keys()
            .map(|k| k.as_str())
            .collect();
        let mut cols = Store::columns().to_vec();
        cols.sort_unstable();
        let mut keys = keys;
        keys.sort_unstable();
        assert_eq!(cols, keys);
    }

    #[test]
    fn rows_round_trip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let rows = [
            fixture_row("a", RowStatus::Ok),
            fixture_row("b", RowStatus::Failed),
        ];
        let mut store = Store::open(dir.path()).unwrap();
        assert_eq!(store.append(&rows).unwrap(), 2);
        let back = Store::load(dir.path()).unwrap();
        assert_eq!(back.rows(), rows);
    }

    #[test]
    fn duplicates_are_skipped_but_failures_retried() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path()).unwrap();
        store
            .append(&[
                fixture_row("a", RowStatus::Ok),
                fixture_row("b", RowStatus::Failed),
            ])
            .unwrap();
        let before = fs::read(dir.path().join(JSONL_FILE)).unwrap();
        assert_eq!(store.append(&[fixture_row("a", RowStatus::Ok)]).unwrap(), 0);
        assert_eq!(fs::read(dir.path().join(JSONL_FILE)).unwrap(), before);
        assert_eq!(store.append(&[fixture_row("b", RowStatus::Ok)]).unwrap(), 1);
        let back = Store::open(dir.path()).unwrap();
        assert_eq!(back.rows().len(), 3);
        assert_eq!(back.ok_rows().len(), 2);
    }

    #[test]
    fn malformed_stores_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(dir.path()).unwrap();
        store.append(&[fixture_row("a", RowStatus::Ok)]).unwrap();
        let jsonl = dir.path().join(JSONL_FILE);
        let good = fs::read_to_string(&jsonl).unwrap();

        fs::write(&jsonl, good.replace("\"width\"", "\"width\"x")).unwrap();
        assert!(matches!(Store::load(dir.path()), Err(Error::Data(_))));

        fs::write(&jsonl, format!("{good}{good}")).unwrap();
        assert!(matches!(Store::load(dir.path()), Err(Error::Data(_))));

        fs::write(&jsonl, &good).unwrap();
        fs::write(dir.path().join(STORE_FILE), "{\"schema_version\": 9}").unwrap();
        assert!(matches!(Store::load(dir.path()), Err(Error::Data(_))));
    }
}
