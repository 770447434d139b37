//! Plot-data CSVs and a text summary from the `ok` rows of a result store.
//!
//! | file | one row per | columns |
//! |---|---|---|
//! | `width_curve.csv` | (m, ltd, attack, seed) | `kind,m,ltd,attack,family,epsilon,seed,clean_accuracy,perturbed_accuracy,fooling_rate` |
//! | `sparsity_curve.csv` | (k, attack, seed) | `k,m,attack,family,epsilon,seed,clean_accuracy,perturbed_accuracy,fooling_rate` |
//! | `ablation.csv` | (dataset, k, ltd, attack, seed) | `dataset,model,k,m,ltd,attack,seed,clean_accuracy,perturbed_accuracy,fooling_rate` |
//! | `transfer_heatmap.csv` | (model, source seed) | `m,k,ltd,attack,source_seed,target_<seed>...` |
//!
//! The heatmap is `s x s` per transfer model: entry (source, target) is the
//! fooling rate on the target model of inputs crafted on the source.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::experiments::{ResultRow, Store};

pub const WIDTH_CSV: &str = "width_curve.csv";
pub const SPARSITY_CSV: &str = "sparsity_curve.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const TRANSFER_CSV: &str = "transfer_heatmap.csv";
pub const SUMMARY_TXT: &str = "summary.txt";

pub fn outputs() -> Vec<String> {
    [
        WIDTH_CSV,
        SPARSITY_CSV,
        ABLATION_CSV,
        TRANSFER_CSV,
        SUMMARY_TXT,
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    fs::write(path, bytes).map_err(Error::io(path))
}

fn model_name(r: &ResultRow) -> &'static str {
    match (r.k == r.d, r.ltd) {
        (true, false) => "dense",
        (true, true) => "dense+ltd",
        (false, false) => "sparse",
        (false, true) => "cerebellum",
    }
}

/// Mean and range of a metric across seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl Spread {
    fn of(values: impl Iterator<Item = f64>) -> Option<Self> {
        let v: Vec<f64> = values.collect();
        if v.is_empty() {
            return None;
        }
        Some(Self {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v.iter().cloned().fold(f64::INFINITY, f64::min),
            max: v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            n: v.len(),
        })
    }
}

impl std::fmt::Display for Spread {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} [{:.4}, {:.4}]", self.mean, self.min, self.max)
    }
}

type GroupKey = (String, String, usize, usize, bool, String);
/// `(m, k, ltd, attack)` of a transfer run.
type TransferModel = (usize, usize, bool, String);

/// Rows grouped by everything but the seed (white-box rows only).
fn groups<'a>(rows: &[&'a ResultRow]) -> BTreeMap<GroupKey, Vec<&'a ResultRow>> {
    let mut out: BTreeMap<GroupKey, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.seed == r.source_seed) {
        out.entry((
            r.kind.clone(),
            r.dataset.clone(),
            r.m,
            r.k,
            r.ltd,
            r.attack.clone(),
        ))
        .or_default()
        .push(r);
    }
    out
}

pub fn summary(rows: &[&ResultRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{} result rows", rows.len());
    let _ = writeln!(
        s,
        "\n{:<9} {:<10} {:>6} {:>5} {:<4} {:<26} {:>5}  {:<26} {:<26} {:<26}",
        "kind",
        "dataset",
        "m",
        "k",
        "ltd",
        "attack",
        "seeds",
        "clean acc",
        "perturbed acc",
        "fooling rate"
    );
    let grouped = groups(rows);
    for ((kind, dataset, m, k, ltd, attack), g) in &grouped {
        let spread = |f: fn(&ResultRow) -> Option<f64>| {
            Spread::of(g.iter().filter_map(|r| f(r)))
                .map(|x| x.to_string())
                .unwrap_or_else(|| "-".into())
        };
        let _ = writeln!(
            s,
            "{:<9} {:<10} {:>6} {:>5} {:<4} {:<26} {:>5}  {:<26} {:<26} {:<26}",
            kind,
            dataset,
            m,
            k,
            if *ltd { "on" } else { "off" },
            attack,
            g.len(),
            spread(|r| r.clean_accuracy),
            spread(|r| r.perturbed_accuracy),
            spread(|r| r.fooling_rate),
        );
    }

    // Best in-degree per attack among sparsity rows.
    let mut best: BTreeMap<&str, (usize, usize, Spread)> = BTreeMap::new();
    for ((kind, _, m, k, _, attack), g) in &grouped {
        if kind != "sparsity" {
            continue;
        }
        let Some(p) = Spread::of(g.iter().filter_map(|r| r.perturbed_accuracy)) else {
            continue;
        };
        let slot = best.entry(attack.as_str()).or_insert((*k, *m, p));
        if p.mean > slot.2.mean {
            *slot = (*k, *m, p);
        }
    }
    if !best.is_empty() {
        let _ = writeln!(s, "\nbest k by perturbed accuracy (mean over seeds):");
        for (attack, (k, m, p)) in best {
            let _ = writeln!(s, "  {attack:<26} k = {k} (m = {m}): {p}");
        }
    }
    s
}

/// Writes every report file into `out`; returns their names.
pub fn write_report(store: &Store, out: &Path) -> Result<Vec<String>> {
    let rows = store.ok_rows();
    if rows.is_empty() {
        return Err(Error::Config(format!(
            "result store {} has no successful rows",
            store.dir().display()
        )));
    }
    fs::create_dir_all(out).map_err(Error::io(out))?;

    let metrics = |r: &ResultRow| {
        vec![
            num(r.clean_accuracy),
            num(r.perturbed_accuracy),
            num(r.fooling_rate),
        ]
    };

    let width: Vec<Vec<String>> = rows
        .iter()
        .filter(|r| r.kind == "width" || r.kind == "ltd")
        .map(|r| {
            let mut v = vec![
                r.kind.clone(),
                r.m.to_string(),
                r.ltd.to_string(),
                r.attack.clone(),
                r.family.clone(),
                r.epsilon.to_string(),
                r.seed.to_string(),
            ];
            v.extend(metrics(r));
            v
        })
        .collect();
    write_csv(
        &out.join(WIDTH_CSV),
        &[
            "kind",
            "m",
            "ltd",
            "attack",
            "family",
            "epsilon",
            "seed",
            "clean_accuracy",
            "perturbed_accuracy",
            "fooling_rate",
        ],
        width,
    )?;

    let sparsity: Vec<Vec<String>> = rows
        .iter()
        .filter(|r| r.kind == "sparsity")
        .map(|r| {
            let mut v = vec![
                r.k.to_string(),
                r.m.to_string(),
                r.attack.clone(),
                r.family.clone(),
                r.epsilon.to_string(),
                r.seed.to_string(),
            ];
            v.extend(metrics(r));
            v
        })
        .collect();
    write_csv(
        &out.join(SPARSITY_CSV),
        &[
            "k",
            "m",
            "attack",
            "family",
            "epsilon",
            "seed",
            "clean_accuracy",
            "perturbed_accuracy",
            "fooling_rate",
        ],
        sparsity,
    )?;

    let ablation: Vec<Vec<String>> = rows
        .iter()
        .filter(|r| r.kind == "ablation")
        .map(|r| {
            let mut v = vec![
                r.dataset.clone(),
                model_name(r).into(),
                r.k.to_string(),
                r.m.to_string(),
                r.ltd.to_string(),
                r.attack.clone(),
                r.seed.to_string(),
            ];
            v.extend(metrics(r));
            v
        })
        .collect();
    write_csv(
        &out.join(ABLATION_CSV),
        &[
            "dataset",
            "model",
            "k",
            "m",
            "ltd",
            "attack",
            "seed",
            "clean_accuracy",
            "perturbed_accuracy",
            "fooling_rate",
        ],
        ablation,
    )?;

    // One s x s block per transfer model; seeds in ascending order.
    let mut blocks: BTreeMap<TransferModel, BTreeMap<(u64, u64), Option<f64>>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.kind == "transfer") {
        blocks
            .entry((r.m, r.k, r.ltd, r.attack.clone()))
            .or_default()
            .insert((r.source_seed, r.seed), r.fooling_rate);
    }
    let mut seeds: Vec<u64> = blocks
        .values()
        .flat_map(|b| b.keys().flat_map(|&(a, b)| [a, b]))
        .collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut header: Vec<String> = ["m", "k", "ltd", "attack", "source_seed"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(seeds.iter().map(|s| format!("target_{s}")));
    let mut heat = Vec::new();
    for ((m, k, ltd, attack), block) in &blocks {
        for &src in &seeds {
            if !block.keys().any(|&(a, _)| a == src) {
                continue;
            }
            let mut v = vec![
                m.to_string(),
                k.to_string(),
                ltd.to_string(),
                attack.clone(),
                src.to_string(),
            ];
            v.extend(
                seeds
                    .iter()
                    .map(|&t| num(block.get(&(src, t)).copied().flatten())),
            );
            heat.push(v);
        }
    }
    let header: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
    write_csv(&out.join(TRANSFER_CSV), &header, heat)?;

    let text = summary(&rows);
    let path = out.join(SUMMARY_TXT);
    fs::write(&path, text).map_err(Error::io(&path))?;
    Ok(outputs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::STORE_SCHEMA_VERSION;

    fn row(kind: &str, k: usize, seed: u64, source: u64, perturbed: f64) -> ResultRow {
        ResultRow {
            schema_version: STORE_SCHEMA_VERSION,
            experiment_id: format!("{kind}-{k}-{seed}-{source}"),
            plan_index: 0,
            kind: kind.into(),
            dataset: "mnist-test".into(),
            d: 784,
            m: 4_800_000 / (k + 20),
            k,
            c: 10,
            ltd: false,
            seed,
            source_seed: source,
            epochs: 3,
            attack: "pgd eps=0.1 steps=40".into(),
            family: "pgd".into(),
            epsilon: 0.1,
            steps: 40,
            step_size: 0.01,
            n_eval: 100,
            clean_accuracy: Some(0.9),
            perturbed_accuracy: Some(perturbed),
            fooling_rate: Some(1.0 - perturbed / 0.9),
            converged: Some(true),
            budget_violations: Some(0),
            masking_suspected: Some(false),
            status: crate::experiments::RowStatus::Ok,
            error: None,
            timestamp: 0,
            code_version: "test".into(),
            config_hash: String::new(),
        }
    }

    #[test]
    fn best_k_and_heatmap_shape() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = Store::open(&dir.path().join("store")).unwrap();
        store
            .append(&[
                row("sparsity", 4, 0, 0, 0.30),
                row("sparsity", 4, 123, 123, 0.40),
                row("sparsity", 784, 0, 0, 0.10),
                row("sparsity", 784, 123, 123, 0.20),
                row("transfer", 784, 0, 0, 0.1),
                row("transfer", 784, 123, 0, 0.5),
                row("transfer", 784, 0, 123, 0.6),
                row("transfer", 784, 123, 123, 0.2),
            ])
            .unwrap();
        let out = dir.path().join("report");
        write_report(&store, &out).unwrap();
        let text = fs::read_to_string(out.join(SUMMARY_TXT)).unwrap();
        assert!(
            text.contains("k = 4 (m = 200000): 0.3500 [0.3000, 0.4000]"),
            "{text}"
        );

        let mut r = csv::Reader::from_path(out.join(TRANSFER_CSV)).unwrap();
        let rates: Vec<Vec<String>> = r
            .records()
            .map(|rec| rec.unwrap().iter().skip(5).map(String::from).collect())
            .collect();
        assert_eq!(rates.len(), 2);
        assert!(rates.iter().all(|v| v.len() == 2));
        assert_eq!(rates[0][1].parse::<f64>().unwrap(), 1.0 - 0.5 / 0.9);

        let sparsity = fs::read_to_string(out.join(SPARSITY_CSV)).unwrap();
        assert_eq!(sparsity.lines().count(), 5);
    }

    #[test]
    fn empty_store_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert!(matches!(
            write_report(&store, &dir.path().join("out")),
            Err(Error::Config(_))
        ));
    }
}
