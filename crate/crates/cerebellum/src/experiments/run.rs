//! Executes a plan job by job, in plan order, persisting after each job.

use std::time::{Instant, SystemTime, UNIX_EPOCH};

use cerebellum_core::attacks::CONVERGENCE_TOLERANCE;
use cerebellum_core::attacks::{evaluate_robustness, transfer_matrix, Assessment};
use cerebellum_core::{
    train, AttackFamily, AttackSpec, Hyperparams, LabeledDataset, Network, NetworkConfig,
    RobustnessReport,
};
use serde::Serialize;

use super::store::{ResultRow, RowStatus, Store, STORE_SCHEMA_VERSION};
use super::{ExperimentKind, Job, SweepPlan};
use crate::error::{Error, Result};
use crate::hash::{code_version, content_hash, sha256_file};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub jobs: usize,
    /// Jobs whose rows were all already stored.
    pub skipped: usize,
    pub rows_written: usize,
    pub failed_rows: usize,
    /// Experiment ids of every row the plan covers, in plan order.
    pub ids: Vec<String>,
}

/// Everything a row's numbers depend on.
#[derive(Serialize)]
struct RowKey<'a> {
    kind: ExperimentKind,
    data: &'a [String],
    train_limit: Option<usize>,
    config: &'a NetworkConfig,
    hyperparams: &'a Hyperparams,
    attack: &'a AttackSpec,
    eval: &'a cerebellum_core::attacks::EvalOptions,
    source_seed: u64,
    code_version: String,
}

struct Context<'a> {
    plan: &'a SweepPlan,
    /// Hyperparameters with the seed list cleared: each row has its own seed.
    hp: Hyperparams,
    attacks: Vec<AttackSpec>,
    data_hashes: Vec<String>,
    train: LabeledDataset,
    test: LabeledDataset,
}

impl Context<'_> {
    fn row(&self, job: &Job, attack: &AttackSpec, seed: u64, source_seed: u64) -> ResultRow {
        let config = job.config.clone().with_seed(seed);
        let key = RowKey {
            kind: self.plan.kind,
            data: &self.data_hashes,
            train_limit: self.plan.train_limit,
            config: &config,
            hyperparams: &self.hp,
            attack,
            eval: &self.plan.eval,
            source_seed,
            code_version: code_version(),
        };
        ResultRow {
            schema_version: STORE_SCHEMA_VERSION,
            experiment_id: content_hash(&key),
            plan_index: job.plan_index,
            kind: self.plan.kind.name().into(),
            dataset: self.test.provenance().into(),
            d: config.d,
            m: config.m,
            k: config.k,
            c: config.c,
            ltd: config.ltd_enabled,
            seed,
            source_seed,
            epochs: self.hp.epochs,
            attack: attack.label(),
            family: attack.family.name().into(),
            epsilon: attack.epsilon,
            steps: attack.steps,
            step_size: attack.step_size,
            n_eval: 0,
            clean_accuracy: None,
            perturbed_accuracy: None,
            fooling_rate: None,
            converged: None,
            budget_violations: None,
            masking_suspected: None,
            status: RowStatus::Failed,
            error: None,
            timestamp: 0,
            code_version: code_version(),
            config_hash: content_hash(&(&config, &self.hp)),
        }
    }

    /// Row skeletons for `job`, in output order.
    fn rows(&self, job: &Job) -> Vec<ResultRow> {
        if self.plan.kind == ExperimentKind::Transfer {
            let attack = &self.attacks[0];
            let mut rows = Vec::new();
            for &source in &job.seeds {
                for &target in &job.seeds {
                    rows.push(self.row(job, attack, target, source));
                }
            }
            rows
        } else {
            let seed = job.seeds[0];
            self.attacks
                .iter()
                .map(|a| self.row(job, a, seed, seed))
                .collect()
        }
    }

    fn train(&self, config: &NetworkConfig) -> Result<Network> {
        let (net, _) = train(config, &self.hp, &self.train, None, &mut || 0.0)?;
        Ok(net)
    }
}

fn now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn fail(row: &mut ResultRow, e: &Error) {
    row.status = RowStatus::Failed;
    row.error = Some(e.to_string());
}

/// Fooling rates at `T` and `T/2` within the tolerance.
fn converged(spec: &AttackSpec, report: &RobustnessReport) -> Option<bool> {
    let t = report.convergence.len();
    if spec.family == AttackFamily::Fgsm || t < 2 {
        return None;
    }
    let last = report.convergence[t - 1].fooling_rate;
    let half = report.convergence[t / 2 - 1].fooling_rate;
    Some((last - half).abs() < CONVERGENCE_TOLERANCE)
}

fn fill_report(row: &mut ResultRow, spec: &AttackSpec, r: &RobustnessReport) {
    row.status = RowStatus::Ok;
    row.n_eval = r.n;
    row.clean_accuracy = Some(r.clean_accuracy);
    row.perturbed_accuracy = Some(r.adversarial_accuracy);
    row.fooling_rate = Some(r.fooling_rate);
    row.converged = converged(spec, r);
    row.budget_violations = Some(r.budget_violations + r.domain_violations);
    row.masking_suspected = r.histogram.as_ref().map(|h| h.masking_suspected);
}

fn fill_assessment(row: &mut ResultRow, a: &Assessment) {
    let n = a.n as f64;
    row.status = RowStatus::Ok;
    row.n_eval = a.n;
    row.clean_accuracy = Some(a.clean_correct as f64 / n);
    row.perturbed_accuracy = Some(a.perturbed_correct as f64 / n);
    row.fooling_rate = Some(a.fooling_rate);
    row.budget_violations = Some(a.budget_violations + a.domain_violations);
}

fn run_job(ctx: &Context, job: &Job, rows: &mut [ResultRow], log: &mut dyn FnMut(&str)) {
    if ctx.plan.kind == ExperimentKind::Transfer {
        let nets: Result<Vec<Network>> = job
            .seeds
            .iter()
            .map(|&s| ctx.train(&job.config.clone().with_seed(s)))
            .collect();
        let result = nets.and_then(|nets| {
            let refs: Vec<&Network> = nets.iter().collect();
            Ok(transfer_matrix(
                &refs,
                &ctx.test,
                &ctx.attacks[0],
                &ctx.plan.eval,
            )?)
        });
        match result {
            Ok(matrix) => {
                let s = job.seeds.len();
                for a in 0..s {
                    for b in 0..s {
                        fill_assessment(&mut rows[a * s + b], &matrix.entries[a][b]);
                        if a != b && matrix.rates[a][b] > matrix.rates[b][b] {
                            log(&format!(
                                "warning: transfer from seed {} fools seed {} more often ({:.4}) than a white-box attack ({:.4})",
                                job.seeds[a], job.seeds[b], matrix.rates[a][b], matrix.rates[b][b]
                            ));
                        }
                    }
                }
            }
            Err(e) => rows.iter_mut().for_each(|r| fail(r, &e)),
        }
        return;
    }

    let net = match ctx.train(&job.config) {
        Ok(net) => net,
        Err(e) => {
            rows.iter_mut().for_each(|r| fail(r, &e));
            return;
        }
    };
    for (row, spec) in rows.iter_mut().zip(&ctx.attacks) {
        if row.is_ok() {
            continue;
        }
        match evaluate_robustness(&net, &ctx.test, spec, &ctx.plan.eval) {
            Ok(report) => {
                fill_report(row, spec, &report);
                for w in &report.warnings {
                    log(&format!("warning: {}: {w}", row.attack));
                }
            }
            Err(e) => fail(row, &e.into()),
        }
    }
}

/// Runs every job of `plan` whose rows are not all stored yet, appending
/// results after each job. Failed points are recorded and do not stop the
/// run; the caller decides what a failure means for its exit status.
pub fn run_plan(
    plan: &SweepPlan,
    store: &mut Store,
    log: &mut dyn FnMut(&str),
) -> Result<RunSummary> {
    plan.validate()?;
    let data_hashes = plan
        .data
        .files()?
        .iter()
        .map(|p| sha256_file(p))
        .collect::<Result<Vec<_>>>()?;
    let (mut train_set, test) = plan.data.load()?;
    if let Some(n) = plan.train_limit {
        train_set = train_set.head(n.min(train_set.len()))?;
    }
    let mut attacks = plan.attacks();
    if plan.data.is_features() {
        let (lo, hi) = test.bounds();
        attacks = attacks.into_iter().map(|a| a.with_clamp(lo, hi)).collect();
    }
    let jobs = plan.expand(test.dim(), test.classes())?;
    let mut hp = plan.hyperparams();
    hp.seeds.clear();
    let ctx = Context {
        plan,
        hp,
        attacks,
        data_hashes,
        train: train_set,
        test,
    };

    let mut summary = RunSummary {
        jobs: jobs.len(),
        ..RunSummary::default()
    };
    for job in &jobs {
        let mut rows = ctx.rows(job);
        summary
            .ids
            .extend(rows.iter().map(|r| r.experiment_id.clone()));
        if rows.iter().all(|r| store.contains_ok(&r.experiment_id)) {
            summary.skipped += 1;
            log(&format!(
                "[{}/{}] already stored",
                job.plan_index + 1,
                jobs.len()
            ));
            continue;
        }
        let started = Instant::now();
        log(&format!(
            "[{}/{}] m={} k={} ltd={} seeds={:?}",
            job.plan_index + 1,
            jobs.len(),
            job.config.m,
            job.config.k,
            job.config.ltd_enabled,
            job.seeds
        ));
        // Rows stored in an earlier run are recomputed but not re-appended.
        run_job(&ctx, job, &mut rows, log);
        let stamp = now();
        for r in rows.iter_mut() {
            r.timestamp = stamp;
            if !r.is_ok() {
                summary.failed_rows += 1;
                log(&format!(
                    "failed: {} seed {}: {}",
                    r.attack,
                    r.seed,
                    r.error.as_deref().unwrap_or("unknown error")
                ));
            }
        }
        summary.rows_written += store.append(&rows)?;
        log(&format!(
            "    done in {:.1}s",
            started.elapsed().as_secs_f64()
        ));
    }
    Ok(summary)
}
