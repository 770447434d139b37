use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cerebellum::checkpoint;
use cerebellum::error::{Error, Result};
use cerebellum::experiments::{
    run_plan, DataSource, ExperimentKind, RunSummary, Store, SweepPlan, DESK_MAX_CELLS,
    DESK_MAX_EPOCHS,
};
use cerebellum::manifest::RunManifest;
use cerebellum::protocol::{
    run_protocol, ProtocolOptions, ProtocolReport, Stage, UNBOUNDED_STEP_SIZE,
};
use cerebellum::report;
use cerebellum_core::attacks::{EvalOptions, Subsample};
use cerebellum_core::{
    train as train_network, AttackSpec, Hyperparams, LabeledDataset, NetworkConfig,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::{AttackArgs, DataArgs, OnlyArg, ReportArgs, SweepArgs, TrainArgs, TransferArgs};

pub struct Output {
    pub text: String,
    pub json: Value,
}

pub struct Failure {
    pub error: Error,
    /// Results written before the failure was declared.
    pub output: Option<Output>,
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        Self {
            error,
            output: None,
        }
    }
}

impl From<cerebellum_core::Error> for Failure {
    fn from(error: cerebellum_core::Error) -> Self {
        Error::from(error).into()
    }
}

type CmdResult = std::result::Result<Output, Failure>;

impl DataArgs {
    fn source(&self) -> Result<DataSource> {
        match (&self.train_features, &self.test_features) {
            (Some(train), Some(test)) => Ok(DataSource::Features {
                train: train.clone(),
                test: test.clone(),
            }),
            (None, Some(_)) => Err(Error::Config(
                "--test-features needs --train-features".into(),
            )),
            _ => Ok(DataSource::Mnist {
                dir: self.data_dir.clone(),
            }),
        }
    }

    /// The test set and the files it came from.
    fn test_set(&self) -> Result<(LabeledDataset, Vec<PathBuf>)> {
        if let Some(path) = &self.test_features {
            return Ok((cerebellum::data::load_features(path)?, vec![path.clone()]));
        }
        let dir = self.data_dir.clone().ok_or_else(|| {
            Error::Config(format!(
                "give --data-dir or set ${}",
                cerebellum::data::DATA_DIR_ENV
            ))
        })?;
        let split = cerebellum::data::Split::Test;
        let (images, labels) = cerebellum::data::mnist_paths(&dir, split)?;
        let set = cerebellum::data::load_idx(&images, &labels, split.provenance())?;
        Ok((set, vec![images, labels]))
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(Error::io(path))
}

fn pretty<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    s
}

/// Train options from a `--config` file; flags override them.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    preset: Option<String>,
    m: Option<usize>,
    k: Option<usize>,
    ltd: Option<bool>,
    seed: Option<u64>,
    hyperparams: Option<Hyperparams>,
    train_limit: Option<usize>,
    #[serde(default)]
    desk: bool,
}

#[derive(Debug, Serialize)]
struct ResolvedTrain {
    network: NetworkConfig,
    hyperparams: Hyperparams,
    train_limit: Option<usize>,
    desk: bool,
    data: DataSource,
}

const METRICS_CSV: &str = "metrics.csv";
const CHECKPOINT_DIR: &str = "checkpoint";
const CHECKPOINT_FILES: [&str; 5] = [
    "indices.u64",
    "weights.f64",
    "readout.f64",
    "mu.f64",
    "metadata.json",
];

fn resolve_train(a: &TrainArgs, d: usize, c: usize) -> Result<(ResolvedTrain, Vec<String>)> {
    let file: TrainFile = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).map_err(Error::io(p))?)?,
        None => TrainFile::default(),
    };
    let mut notes = Vec::new();
    let preset_name = a.preset.clone().or(file.preset);
    let mut net = match &preset_name {
        Some(name) => {
            let p = NetworkConfig::preset(name).ok_or_else(|| {
                Error::Config(format!(
                    "unknown preset {name:?}; known: {}",
                    NetworkConfig::PRESETS.join(", ")
                ))
            })?;
            let mut net = p.clone();
            if p.d != d {
                net.d = d;
                if p.is_dense() {
                    net.k = d;
                }
                notes.push(format!(
                    "preset {name} has d = {}; using the data's d = {d}",
                    p.d
                ));
            }
            net
        }
        None => NetworkConfig::new(d, 5_000, d, c),
    };
    net.c = c;
    if let Some(m) = a.m.or(file.m) {
        net.m = m;
    }
    if let Some(k) = a.k.or(file.k) {
        net.k = k;
    }
    if let Some(ltd) = a.ltd.or(file.ltd) {
        net.ltd_enabled = ltd;
    }
    net.seed = a.seed.or(file.seed).unwrap_or(0);

    let mut hp = file.hyperparams.unwrap_or_default();
    if let Some(v) = a.epochs {
        hp.epochs = v;
    }
    if let Some(v) = a.batch_size {
        hp.batch_size = v;
    }
    if let Some(v) = a.lr_numerator {
        hp.lr_numerator = v;
    }
    if let Some(v) = a.decay {
        hp.optimizer_decay = v;
    }
    if let Some(v) = a.beta {
        hp.ltd_beta = v;
    }
    hp.seeds = vec![net.seed];
    let desk = a.desk || file.desk;
    if desk {
        if net.m > DESK_MAX_CELLS {
            notes.push(format!("desk scale: m {} -> {DESK_MAX_CELLS}", net.m));
            net.m = DESK_MAX_CELLS;
        }
        if hp.epochs > DESK_MAX_EPOCHS {
            notes.push(format!(
                "desk scale: epochs {} -> {DESK_MAX_EPOCHS}",
                hp.epochs
            ));
            hp.epochs = DESK_MAX_EPOCHS;
        }
    }
    net.validate()?;
    hp.validate()?;
    let resolved = ResolvedTrain {
        network: net,
        hyperparams: hp,
        train_limit: a.train_limit.or(file.train_limit),
        desk,
        data: a.data.source()?,
    };
    Ok((resolved, notes))
}

pub fn train(a: &TrainArgs) -> CmdResult {
    let source = a.data.source()?;
    let inputs = source.files()?;
    let (mut train_set, test_set) = source.load()?;
    let (cfg, notes) = resolve_train(a, train_set.dim(), train_set.classes())?;
    for n in &notes {
        eprintln!("note: {n}");
    }
    if let Some(n) = cfg.train_limit {
        if n == 0 {
            return Err(Error::Config("--train-limit must be at least 1".into()).into());
        }
        train_set = train_set.head(n)?;
    }

    let mut outputs: Vec<String> = CHECKPOINT_FILES
        .iter()
        .map(|f| format!("{CHECKPOINT_DIR}/{f}"))
        .collect();
    outputs.push(METRICS_CSV.into());
    let mut manifest_inputs = inputs.clone();
    if let Some(p) = &a.config {
        manifest_inputs.push(p.clone());
    }
    let manifest = RunManifest::new(
        "train",
        serde_json::to_value(&cfg).expect("config serializes"),
        &manifest_inputs,
        vec![cfg.network.seed],
        outputs,
    )?;
    manifest.write(&a.out)?;

    let origin = Instant::now();
    let mut clock = || origin.elapsed().as_secs_f64();
    let (net, rep) = train_network(
        &cfg.network,
        &cfg.hyperparams,
        &train_set,
        Some(&test_set),
        &mut clock,
    )?;
    checkpoint::save(&net, &a.out.join(CHECKPOINT_DIR))?;

    let mut csv = String::from("epoch,loss,test_accuracy\n");
    let mut text = String::new();
    for (i, loss) in rep.epoch_loss.iter().enumerate() {
        let acc = rep.test_accuracy[i]
            .map(|v| v.to_string())
            .unwrap_or_default();
        let _ = writeln!(csv, "{},{loss},{acc}", i + 1);
        let _ = writeln!(
            text,
            "epoch {:>2}  loss {loss:.6}  test accuracy {acc}",
            i + 1
        );
        eprintln!("epoch {} took {:.1}s", i + 1, rep.epoch_seconds[i]);
    }
    write_file(&a.out.join(METRICS_CSV), csv)?;
    let _ = writeln!(
        text,
        "checkpoint written to {}",
        a.out.join(CHECKPOINT_DIR).display()
    );
    let json = json!({
        "manifest": manifest.id,
        "config": cfg,
        "checkpoint": a.out.join(CHECKPOINT_DIR),
        "epoch_loss": rep.epoch_loss,
        "test_accuracy": rep.test_accuracy,
    });
    Ok(Output { text, json })
}

const REPORT_JSON: &str = "report.json";
const HISTOGRAM_CSV: &str = "histogram.csv";
const CONVERGENCE_CSV: &str = "convergence.csv";

fn histogram_csv(report: &ProtocolReport) -> String {
    let mut s = String::from("bin,lower,upper,norm_count,element_count\n");
    if let Some(h) = report.histogram() {
        let _ = writeln!(s, "zero,0,0,{},{}", h.norm_zero, h.element_zero);
        for i in 0..h.norm_counts.len() {
            let _ = writeln!(
                s,
                "{i},{},{},{},{}",
                h.edges[i],
                h.edges[i + 1],
                h.norm_counts[i],
                h.element_counts[i]
            );
        }
    }
    s
}

fn convergence_csv(report: &ProtocolReport) -> String {
    let mut s = String::from("attack,step,fooling_rate\n");
    for r in &report.reports {
        for p in &r.convergence {
            let _ = writeln!(s, "{},{},{}", r.attack.label(), p.step, p.fooling_rate);
        }
    }
    if let Some(d) = &report.doubling {
        let label = format!("doubling pgd eps={}", d.attack.epsilon);
        for (l, f) in d.curve.levels.iter().zip(&d.curve.fooling_rate) {
            let _ = writeln!(s, "{label},{l},{f}");
        }
    }
    s
}

pub fn attack(a: &AttackArgs) -> CmdResult {
    let net = checkpoint::load(&a.checkpoint)?;
    let (test, data_files) = a.data.test_set()?;
    if test.dim() != net.input_dim() || test.classes() != net.classes() {
        return Err(Error::Data(format!(
            "data has d = {}, c = {}; checkpoint expects d = {}, c = {}",
            test.dim(),
            test.classes(),
            net.input_dim(),
            net.classes()
        ))
        .into());
    }
    let feature_space = a.data.test_features.is_some();
    let only: Vec<Stage> = a
        .only
        .iter()
        .map(|o| match o {
            OnlyArg::Fgsm => Stage::Fgsm,
            OnlyArg::Pgd => Stage::Pgd,
            OnlyArg::Unbounded => Stage::Unbounded,
            OnlyArg::Doubling => Stage::Doubling,
        })
        .collect();
    let epsilons = if !a.epsilons.is_empty() {
        a.epsilons.clone()
    } else if feature_space {
        let needs = only.is_empty() || only.iter().any(|s| *s != Stage::Unbounded);
        if needs {
            return Err(
                Error::Config("feature-space attacks need explicit --epsilons".into()).into(),
            );
        }
        Vec::new()
    } else {
        cerebellum_core::attacks::MNIST_EPSILONS.to_vec()
    };
    let (lo, hi) = test.bounds();
    let mut eval = EvalOptions {
        histogram_samples: a.histogram_samples,
        ..EvalOptions::default()
    };
    if let Some(n) = a.subsample {
        eval.subsample = Some(Subsample {
            n,
            seed: a.subsample_seed,
        });
    }
    let opts = ProtocolOptions {
        epsilons,
        pgd_steps: a.steps,
        pgd_step_size: a.step_size,
        random_start: !a.no_random_start,
        attack_seed: a.attack_seed,
        unbounded_steps: a.unbounded_steps,
        unbounded_step_size: a.unbounded_step_size.unwrap_or(if feature_space {
            UNBOUNDED_STEP_SIZE * (hi - lo)
        } else {
            UNBOUNDED_STEP_SIZE
        }),
        doubling_start: a.doubling_start,
        doublings: a.doublings,
        doubling_epsilon: a.doubling_epsilon,
        feature_space,
        eval,
        only,
    };

    let mut inputs: Vec<PathBuf> = CHECKPOINT_FILES
        .iter()
        .map(|f| a.checkpoint.join(f))
        .collect();
    inputs.extend(data_files);
    let manifest = RunManifest::new(
        "attack",
        json!({ "checkpoint": a.checkpoint, "protocol": opts }),
        &inputs,
        vec![net.config().seed, opts.attack_seed],
        vec![
            REPORT_JSON.into(),
            HISTOGRAM_CSV.into(),
            CONVERGENCE_CSV.into(),
        ],
    )?;
    manifest.write(&a.out)?;

    let report = run_protocol(&net, &test, &opts, &mut std::io::stderr())?;
    write_file(&a.out.join(REPORT_JSON), pretty(&report))?;
    write_file(&a.out.join(HISTOGRAM_CSV), histogram_csv(&report))?;
    write_file(&a.out.join(CONVERGENCE_CSV), convergence_csv(&report))?;

    let mut text = String::new();
    for r in &report.reports {
        let _ = writeln!(
            text,
            "{:<28} n {}  clean {:.4}  perturbed {:.4}  fooling {:.4}",
            r.attack.label(),
            r.n,
            r.clean_accuracy,
            r.adversarial_accuracy,
            r.fooling_rate
        );
    }
    if let Some(d) = &report.doubling {
        let _ = writeln!(
            text,
            "doubling levels {:?}: {:?}",
            d.curve.levels, d.curve.fooling_rate
        );
    }
    for g in &report.gates {
        let _ = writeln!(
            text,
            "[{}] {}: {}",
            if g.passed { "PASS" } else { "FAIL" },
            g.name,
            g.detail
        );
    }
    let json = serde_json::to_value(&report).expect("report serializes");
    let failed: Vec<&str> = report
        .gates
        .iter()
        .filter(|g| !g.passed)
        .map(|g| g.name.as_str())
        .collect();
    let output = Output { text, json };
    if failed.is_empty() {
        Ok(output)
    } else {
        Err(Failure {
            error: Error::Failed(format!("sanity gates failed: {}", failed.join("; "))),
            output: Some(output),
        })
    }
}

fn execute_plan(
    plan: &SweepPlan,
    plan_file: Option<&Path>,
    store_dir: &Path,
    subcommand: &str,
) -> std::result::Result<(Store, RunSummary), Failure> {
    let mut store = Store::open(store_dir)?;
    let mut inputs = plan.data.files()?;
    if let Some(p) = plan_file {
        inputs.push(p.to_path_buf());
    }
    let manifest = RunManifest::new(
        subcommand,
        serde_json::to_value(plan).expect("plan serializes"),
        &inputs,
        plan.seeds(),
        Store::files().iter().map(|s| s.to_string()).collect(),
    )?;
    manifest.write_as(
        &store_dir.join("manifests"),
        &format!("{subcommand}-{}.json", &manifest.id[..16]),
    )?;
    let summary = run_plan(plan, &mut store, &mut |line| eprintln!("{line}"))?;
    Ok((store, summary))
}

fn summary_json(summary: &RunSummary, rows: &[&cerebellum::experiments::ResultRow]) -> Value {
    json!({
        "jobs": summary.jobs,
        "skipped": summary.skipped,
        "rows_written": summary.rows_written,
        "failed_rows": summary.failed_rows,
        "rows": rows,
    })
}

fn finish_plan(summary: RunSummary, text: String, json: Value) -> CmdResult {
    let output = Output { text, json };
    if summary.failed_rows > 0 {
        Err(Failure {
            error: Error::Failed(format!("{} result rows failed", summary.failed_rows)),
            output: Some(output),
        })
    } else {
        Ok(output)
    }
}

fn plan_rows<'a>(
    store: &'a Store,
    summary: &RunSummary,
) -> Vec<&'a cerebellum::experiments::ResultRow> {
    let ids: std::collections::HashSet<&str> = summary.ids.iter().map(|s| s.as_str()).collect();
    store
        .ok_rows()
        .into_iter()
        .filter(|r| ids.contains(r.experiment_id.as_str()))
        .collect()
}

pub fn sweep(a: &SweepArgs) -> CmdResult {
    let plan = SweepPlan::read(&a.plan)?;
    let (store, summary) = execute_plan(&plan, Some(&a.plan), &a.store, "sweep")?;
    let rows = plan_rows(&store, &summary);
    let mut text = format!(
        "{} jobs: {} run, {} already stored; {} rows written, {} failed\n",
        summary.jobs,
        summary.jobs - summary.skipped,
        summary.skipped,
        summary.rows_written,
        summary.failed_rows
    );
    text.push_str(&report::summary(&rows));
    let json = summary_json(&summary, &rows);
    finish_plan(summary, text, json)
}

pub fn transfer(a: &TransferArgs) -> CmdResult {
    let data = a.data.source()?;
    let attack = if data.is_features() {
        AttackSpec::pgd_feature_space(a.epsilon, cerebellum_core::attacks::PGD_STEPS, (0.0, 1.0))
    } else {
        AttackSpec::pgd(a.epsilon)
    };
    let mut eval = EvalOptions::default();
    if let Some(n) = a.subsample {
        eval.subsample = Some(Subsample {
            n,
            seed: a.subsample_seed,
        });
    }
    let plan = SweepPlan {
        schema_version: cerebellum::experiments::PLAN_SCHEMA_VERSION,
        kind: ExperimentKind::Transfer,
        data,
        grid: None,
        budget: None,
        hyperparams: a.epochs.map(|epochs| Hyperparams {
            epochs,
            ..Hyperparams::default()
        }),
        attacks: vec![attack],
        seeds: Some(a.seeds.clone()),
        eval,
        train_limit: a.train_limit,
        full_scale: a.full_scale,
        ltd: Some(a.ltd),
        m: Some(a.m),
        k: a.k,
    };
    plan.validate()?;
    let (store, summary) = execute_plan(&plan, None, &a.store, "transfer")?;
    let rows = plan_rows(&store, &summary);

    let seeds = plan.seeds();
    let rate = |src: u64, dst: u64| {
        rows.iter()
            .find(|r| r.source_seed == src && r.seed == dst)
            .and_then(|r| r.fooling_rate)
    };
    let mut text = String::from("fooling rate (rows: crafted on, columns: evaluated on)\n");
    let _ = write!(text, "{:>10}", "");
    for s in &seeds {
        let _ = write!(text, " {:>10}", s);
    }
    text.push('\n');
    let mut matrix = Vec::new();
    for &src in &seeds {
        let _ = write!(text, "{src:>10}");
        let mut row = Vec::new();
        for &dst in &seeds {
            let v = rate(src, dst);
            let _ = match v {
                Some(v) => write!(text, " {v:>10.4}"),
                None => write!(text, " {:>10}", "-"),
            };
            row.push(v);
        }
        text.push('\n');
        matrix.push(row);
    }
    let mut json = summary_json(&summary, &rows);
    json["seeds"] = json!(seeds);
    json["rates"] = json!(matrix);
    finish_plan(summary, text, json)
}

pub fn report(a: &ReportArgs) -> CmdResult {
    if !a.store.join(Store::files()[0]).exists() {
        return Err(Error::Config(format!("no result store at {}", a.store.display())).into());
    }
    let store = Store::load(&a.store)?;
    if store.ok_rows().is_empty() {
        return Err(Error::Config(format!(
            "result store {} has no successful rows",
            a.store.display()
        ))
        .into());
    }
    let inputs: Vec<PathBuf> = Store::files().iter().map(|f| a.store.join(f)).collect();
    let manifest = RunManifest::new(
        "report",
        json!({ "store": a.store }),
        &inputs,
        Vec::new(),
        report::outputs(),
    )?;
    manifest.write(&a.out)?;
    let written = report::write_report(&store, &a.out)?;
    let text = fs::read_to_string(a.out.join(report::SUMMARY_TXT))
        .map_err(Error::io(a.out.join(report::SUMMARY_TXT)))?;
    Ok(Output {
        text,
        json: json!({ "manifest": manifest.id, "outputs": written }),
    })
}
