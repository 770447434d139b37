//! Sweep plans: the width, LTD, sparsity, ablation and transfer experiments
//! as JSON documents, expanded into training jobs.
//!
//! A plan runs at desk scale unless `full_scale` is set: granule layers are
//! capped at [`DESK_MAX_CELLS`] cells and training at [`DESK_MAX_EPOCHS`]
//! epochs, and budget-derived widths use [`desk_budget`] instead of the
//! anatomical 4.8M synapses.

mod run;
mod store;

use std::path::{Path, PathBuf};

use cerebellum_core::attacks::EvalOptions;
use cerebellum_core::{AttackSpec, Hyperparams, LabeledDataset, NetworkConfig, SynapseBudget};
use serde::{Deserialize, Serialize};

use crate::data::{load_features, load_mnist, mnist_paths, Split, DATA_DIR_ENV};
use crate::error::{Error, Result};

pub use run::{run_plan, RunSummary};
pub use store::{ResultRow, RowStatus, Store, STORE_SCHEMA_VERSION};

pub const PLAN_SCHEMA_VERSION: u32 = 1;
pub const DESK_MAX_CELLS: usize = 20_000;
pub const DESK_MAX_EPOCHS: usize = 3;
pub const WIDTH_GRID: [usize; 6] = [1_000, 2_000, 5_000, 10_000, 20_000, 50_000];
pub const SPARSITY_GRID: [usize; 7] = [1, 2, 4, 10, 50, 200, 784];
/// In-degree of the sparse arm of the ablation grid.
pub const ABLATION_SPARSE_K: usize = 4;
/// Width of the transfer models when the plan gives none.
pub const TRANSFER_DEFAULT_M: usize = 5_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Width,
    Ltd,
    Sparsity,
    Ablation,
    Transfer,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Width => "width",
            ExperimentKind::Ltd => "ltd",
            ExperimentKind::Sparsity => "sparsity",
            ExperimentKind::Ablation => "ablation",
            ExperimentKind::Transfer => "transfer",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    /// IDX files; `dir` falls back to `$CEREBELLUM_DATA_DIR`.
    Mnist {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dir: Option<PathBuf>,
    },
    /// Feature containers (e.g. CIFAR-10 encoder outputs).
    Features { train: PathBuf, test: PathBuf },
}

impl DataSource {
    fn mnist_dir(dir: &Option<PathBuf>) -> Result<PathBuf> {
        match dir {
            Some(d) => Ok(d.clone()),
            None => std::env::var_os(DATA_DIR_ENV)
                .map(PathBuf::from)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "no MNIST directory given and ${DATA_DIR_ENV} is unset"
                    ))
                }),
        }
    }

    /// Files the source reads, for manifests.
    pub fn files(&self) -> Result<Vec<PathBuf>> {
        match self {
            DataSource::Mnist { dir } => {
                let dir = Self::mnist_dir(dir)?;
                let (a, b) = mnist_paths(&dir, Split::Train)?;
                let (c, d) = mnist_paths(&dir, Split::Test)?;
                Ok(vec![a, b, c, d])
            }
            DataSource::Features { train, test } => Ok(vec![train.clone(), test.clone()]),
        }
    }

    /// `(train, test)`.
    pub fn load(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        match self {
            DataSource::Mnist { dir } => {
                let dir = Self::mnist_dir(dir)?;
                Ok((
                    load_mnist(&dir, Split::Train)?,
                    load_mnist(&dir, Split::Test)?,
                ))
            }
            DataSource::Features { train, test } => {
                let (a, b) = (load_features(train)?, load_features(test)?);
                if a.dim() != b.dim() || a.classes() != b.classes() {
                    return Err(Error::Data(format!(
                        "feature files disagree: train d={} c={}, test d={} c={}",
                        a.dim(),
                        a.classes(),
                        b.dim(),
                        b.classes()
                    )));
                }
                Ok((a, b))
            }
        }
    }

    pub fn is_features(&self) -> bool {
        matches!(self, DataSource::Features { .. })
    }
}

fn default_schema() -> u32 {
    PLAN_SCHEMA_VERSION
}

/// A plan file.
///
/// ```json
/// {
///   "schema_version": 1,
///   "kind": "sparsity",
///   "data": { "kind": "mnist", "dir": "data/mnist" },
///   "attacks": [ { "family": "pgd", "epsilon": 0.1 } ],
///   "seeds": [0, 123],
///   "eval": { "subsample": { "n": 1000, "seed": 0 } }
/// }
/// ```
///
/// `grid` holds widths `m` (width, ltd) or in-degrees `k` (sparsity) and is
/// rejected for the other kinds. `m`/`k` configure the transfer models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepPlan {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub kind: ExperimentKind,
    pub data: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<SynapseBudget>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyperparams: Option<Hyperparams>,
    /// Empty: FGSM and PGD at both MNIST budgets (PGD at 0.1 for transfer).
    #[serde(default)]
    pub attacks: Vec<AttackSpec>,
    /// Overrides the hyperparameter seeds.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub eval: EvalOptions,
    /// Train on the first `n` training instances only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(default)]
    pub full_scale: bool,
    /// LTD for width and transfer models (default off).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ltd: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
}

/// Budget used for budget-derived widths at desk scale: just enough for
/// [`DESK_MAX_CELLS`] cells at `k = 1`.
pub fn desk_budget(classes: u64) -> SynapseBudget {
    SynapseBudget::new(DESK_MAX_CELLS as u64 * (1 + 2 * classes), classes)
}

/// One unit of work: train `config` at each of `seeds` and run `attacks`.
/// Transfer jobs train every seed before attacking; the others treat each
/// seed independently.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub plan_index: usize,
    pub config: NetworkConfig,
    pub seeds: Vec<u64>,
}

impl SweepPlan {
    pub fn from_json(text: &str) -> Result<Self> {
        let plan: Self = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_json(&text)
    }

    pub fn seeds(&self) -> Vec<u64> {
        match (&self.seeds, &self.hyperparams) {
            (Some(s), _) => s.clone(),
            (None, Some(hp)) => hp.seeds.clone(),
            (None, None) => Hyperparams::default().seeds,
        }
    }

    /// Resolved hyperparameters: desk scale trains for 3 epochs by default.
    pub fn hyperparams(&self) -> Hyperparams {
        let mut hp = self.hyperparams.clone().unwrap_or_else(|| Hyperparams {
            epochs: if self.full_scale {
                Hyperparams::default().epochs
            } else {
                DESK_MAX_EPOCHS
            },
            ..Hyperparams::default()
        });
        hp.seeds = self.seeds();
        hp
    }

    pub fn attacks(&self) -> Vec<AttackSpec> {
        if !self.attacks.is_empty() {
            // FGSM has no step schedule; drop the PGD defaults serde filled in.
            return self
                .attacks
                .iter()
                .map(|a| match a.family {
                    cerebellum_core::AttackFamily::Fgsm => AttackSpec {
                        clamp: a.clamp,
                        seed: a.seed,
                        objective: a.objective,
                        ..AttackSpec::fgsm(a.epsilon)
                    },
                    _ => a.clone(),
                })
                .collect();
        }
        use cerebellum_core::attacks::MNIST_EPSILONS;
        if self.kind == ExperimentKind::Transfer {
            return vec![AttackSpec::pgd(MNIST_EPSILONS[0])];
        }
        let mut v: Vec<AttackSpec> = MNIST_EPSILONS
            .iter()
            .map(|&e| AttackSpec::fgsm(e))
            .collect();
        v.extend(MNIST_EPSILONS.iter().map(|&e| AttackSpec::pgd(e)));
        v
    }

    /// Checks that do not need the data.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.schema_version != PLAN_SCHEMA_VERSION {
            return bad(format!(
                "plan schema version {} (supported: {PLAN_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        let seeds = self.seeds();
        if seeds.is_empty() {
            return bad("plan has no seeds".into());
        }
        let mut unique = seeds.clone();
        unique.sort_unstable();
        unique.dedup();
        if unique.len() != seeds.len() {
            return bad("plan seeds must be distinct".into());
        }
        let hp = self.hyperparams();
        hp.validate()?;
        if !self.full_scale && hp.epochs > DESK_MAX_EPOCHS {
            return bad(format!(
                "{} epochs exceeds the desk-scale cap of {DESK_MAX_EPOCHS}; set \"full_scale\": true",
                hp.epochs
            ));
        }
        if self.data.is_features() && self.attacks.is_empty() {
            return bad(
                "feature-file plans must list their attacks (feature-space budgets)".into(),
            );
        }
        for a in &self.attacks() {
            a.validate()?;
        }
        if self.eval.batch_size == 0 {
            return bad("eval batch size must be at least 1".into());
        }
        if self.train_limit == Some(0) {
            return bad("train_limit must be at least 1".into());
        }
        match self.kind {
            ExperimentKind::Width | ExperimentKind::Ltd | ExperimentKind::Sparsity => {
                if let Some(g) = &self.grid {
                    if g.is_empty() {
                        return bad(format!("{} plan has an empty grid", self.kind.name()));
                    }
                }
            }
            _ => {
                if self.grid.is_some() {
                    return bad(format!("{} plans take no grid", self.kind.name()));
                }
            }
        }
        if self.kind == ExperimentKind::Transfer {
            if seeds.len() < 2 {
                return bad("transfer needs at least two seeds".into());
            }
            if self.attacks().len() != 1 {
                return bad("transfer takes exactly one attack".into());
            }
        } else if self.m.is_some() || self.k.is_some() {
            return bad("\"m\" and \"k\" apply to transfer plans only".into());
        }
        if self.ltd.is_some()
            && !matches!(self.kind, ExperimentKind::Width | ExperimentKind::Transfer)
        {
            return bad(format!("{} plans set LTD themselves", self.kind.name()));
        }
        Ok(())
    }

    fn budget(&self, classes: usize) -> Result<SynapseBudget> {
        let b = match self.budget {
            Some(b) => b,
            None if self.full_scale => {
                SynapseBudget::new(cerebellum_core::budget::ANATOMICAL_SYNAPSES, classes as u64)
            }
            None => desk_budget(classes as u64),
        };
        if b.classes != classes as u64 {
            return Err(Error::Config(format!(
                "budget is for c = {}, data has c = {classes}",
                b.classes
            )));
        }
        Ok(b)
    }

    fn budget_width(&self, budget: &SynapseBudget, k: usize) -> Result<usize> {
        Ok(budget.granule_cells(k as u64)? as usize)
    }

    /// Expands the plan for data of dimension `d` with `c` classes.
    pub fn expand(&self, d: usize, c: usize) -> Result<Vec<Job>> {
        self.validate()?;
        let seeds = self.seeds();
        let mut configs = Vec::new();
        match self.kind {
            ExperimentKind::Width | ExperimentKind::Ltd => {
                let grid = match &self.grid {
                    Some(g) => g.clone(),
                    None if self.full_scale => WIDTH_GRID.to_vec(),
                    None => WIDTH_GRID
                        .iter()
                        .copied()
                        .filter(|&m| m <= DESK_MAX_CELLS)
                        .collect(),
                };
                for m in grid {
                    if self.kind == ExperimentKind::Ltd {
                        configs.push(NetworkConfig::new(d, m, d, c).with_ltd(false));
                        configs.push(NetworkConfig::new(d, m, d, c).with_ltd(true));
                    } else {
                        configs.push(
                            NetworkConfig::new(d, m, d, c).with_ltd(self.ltd.unwrap_or(false)),
                        );
                    }
                }
            }
            ExperimentKind::Sparsity => {
                let budget = self.budget(c)?;
                let grid = match &self.grid {
                    Some(g) => g.clone(),
                    None => SPARSITY_GRID
                        .iter()
                        .map(|&k| if k == 784 { d } else { k })
                        .collect(),
                };
                for k in grid {
                    if k > d {
                        return Err(Error::Config(format!("in-degree k = {k} exceeds d = {d}")));
                    }
                    let m = self.budget_width(&budget, k)?;
                    configs.push(NetworkConfig::new(d, m, k, c));
                }
            }
            ExperimentKind::Ablation => {
                let budget = self.budget(c)?;
                if ABLATION_SPARSE_K > d {
                    return Err(Error::Config(format!(
                        "ablation needs d >= {ABLATION_SPARSE_K}, data has d = {d}"
                    )));
                }
                for k in [d, ABLATION_SPARSE_K] {
                    let m = self.budget_width(&budget, k)?;
                    for ltd in [false, true] {
                        configs.push(NetworkConfig::new(d, m, k, c).with_ltd(ltd));
                    }
                }
            }
            ExperimentKind::Transfer => {
                let k = self.k.unwrap_or(d);
                let m = self.m.unwrap_or(TRANSFER_DEFAULT_M);
                configs.push(NetworkConfig::new(d, m, k, c).with_ltd(self.ltd.unwrap_or(false)));
            }
        }
        if configs.is_empty() {
            return Err(Error::Config("plan expands to no configurations".into()));
        }
        let mut jobs = Vec::new();
        for config in configs {
            config.validate()?;
            if !self.full_scale && config.m > DESK_MAX_CELLS {
                return Err(Error::Config(format!(
                    "m = {} exceeds the desk-scale cap of {DESK_MAX_CELLS}; set \"full_scale\": true",
                    config.m
                )));
            }
            if self.kind == ExperimentKind::Transfer {
                jobs.push(Job {
                    plan_index: jobs.len(),
                    config,
                    seeds: seeds.clone(),
                });
            } else {
                for &seed in &seeds {
                    jobs.push(Job {
                        plan_index: jobs.len(),
                        config: config.clone().with_seed(seed),
                        seeds: vec![seed],
                    });
                }
            }
        }
        Ok(jobs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plan(kind: &str, extra: &str) -> Result<SweepPlan> {
        SweepPlan::from_json(&format!(
            r#"{{"kind": "{kind}", "data": {{"kind": "mnist", "dir": "x"}}{extra}}}"#
        ))
    }

    #[test]
    fn desk_width_grid_is_capped() {
        let jobs = plan("width", "").unwrap().expand(784, 10).unwrap();
        let ms: Vec<usize> = jobs.iter().map(|j| j.config.m).collect();
        assert_eq!(
            ms,
            [1000, 1000, 2000, 2000, 5000, 5000, 10000, 10000, 20000, 20000]
        );
        assert!(jobs
            .iter()
            .all(|j| j.config.k == 784 && !j.config.ltd_enabled));
        let full = plan("width", r#", "full_scale": true"#)
            .unwrap()
            .expand(784, 10)
            .unwrap();
        assert_eq!(full.len(), 12);
        assert!(plan("width", r#", "grid": [50000]"#)
            .unwrap()
            .expand(784, 10)
            .is_err());
    }

    #[test]
    fn sparsity_points_follow_the_budget() {
        let full = plan("sparsity", r#", "full_scale": true, "seeds": [0]"#)
            .unwrap()
            .expand(784, 10)
            .unwrap();
        let got: Vec<(usize, usize)> = full.iter().map(|j| (j.config.k, j.config.m)).collect();
        assert_eq!(
            got,
            [
                (1, 228_571),
                (2, 218_181),
                (4, 200_000),
                (10, 160_000),
                (50, 68_571),
                (200, 21_818),
                (784, 5_970)
            ]
        );
        let desk = plan("sparsity", "").unwrap().expand(784, 10).unwrap();
        assert_eq!(desk.len(), 14);
        let b = desk_budget(10);
        assert!(desk
            .iter()
            .all(|j| b.satisfied_by(j.config.m as u64, j.config.k as u64)
                && j.config.m <= DESK_MAX_CELLS));
        assert!(plan("sparsity", r#", "grid": [785]"#)
            .unwrap()
            .expand(784, 10)
            .is_err());
    }

    #[test]
    fn ltd_points_are_paired() {
        let jobs = plan("ltd", r#", "grid": [1000], "seeds": [7]"#)
            .unwrap()
            .expand(784, 10)
            .unwrap();
        assert_eq!(jobs.len(), 2);
        let mut a = jobs[0].config.clone();
        assert!(!a.ltd_enabled && jobs[1].config.ltd_enabled);
        a.ltd_enabled = true;
        assert_eq!(a, jobs[1].config);
    }

    #[test]
    fn ablation_is_two_by_two() {
        let jobs = plan("ablation", r#", "full_scale": true, "seeds": [0]"#)
            .unwrap()
            .expand(784, 10)
            .unwrap();
        let got: Vec<(usize, usize, bool)> = jobs
            .iter()
            .map(|j| (j.config.k, j.config.m, j.config.ltd_enabled))
            .collect();
        assert_eq!(
            got,
            [
                (784, 5970, false),
                (784, 5970, true),
                (4, 200_000, false),
                (4, 200_000, true)
            ]
        );
        let cifar = plan("ablation", r#", "full_scale": true, "seeds": [0]"#)
            .unwrap()
            .expand(4096, 10)
            .unwrap();
        assert_eq!(cifar[0].config.m, 1166);
    }

    #[test]
    fn invalid_plans_are_config_errors() {
        for (kind, extra) in [
            ("width", r#", "grid": []"#),
            ("width", r#", "seeds": []"#),
            ("width", r#", "seeds": [1, 1]"#),
            ("width", r#", "hyperparams": {"epochs": 10}"#),
            ("ablation", r#", "grid": [4]"#),
            ("transfer", r#", "seeds": [0]"#),
            ("sparsity", r#", "ltd": true"#),
            ("width", r#", "m": 5"#),
            ("width", r#", "bogus": 1"#),
            ("nope", ""),
        ] {
            assert!(
                matches!(plan(kind, extra), Err(Error::Config(_))),
                "{kind} {extra}"
            );
        }
        assert!(matches!(SweepPlan::from_json("{}"), Err(Error::Config(_))));
    }

    #[test]
    fn transfer_is_one_job_over_all_seeds() {
        let jobs = plan("transfer", r#", "m": 100"#)
            .unwrap()
            .expand(784, 10)
            .unwrap();
        assert_eq!(jobs.len(), 1);
        assert_eq!(jobs[0].seeds, [0, 123]);
        assert_eq!((jobs[0].config.m, jobs[0].config.k), (100, 784));
    }
}
