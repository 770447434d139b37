//! The attack protocol run against one trained model, with its sanity gates:
//!
//! - FGSM fooling rate ≤ PGD fooling rate at every budget;
//! - the unbounded attack fools at least [`UNBOUNDED_FLOOR`] of the
//!   clean-correct instances;
//! - the doubling-iterations curve converges;
//! - no emitted input leaves its l∞ ball or the input domain.
//!
//! A failed gate does not stop the protocol; callers decide what it means.

use std::io::Write;

use cerebellum_core::attacks::{
    doubling_iterations_test, evaluate_robustness, ConvergenceCurve, EvalOptions,
    GradientHistogram, RobustnessReport, PGD_STEPS, PGD_STEP_SIZE,
};
use cerebellum_core::{AttackFamily, AttackSpec, LabeledDataset, Network};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNBOUNDED_FLOOR: f64 = 0.99;
pub const UNBOUNDED_STEPS: usize = 1_000;
pub const UNBOUNDED_STEP_SIZE: f64 = 0.01;
pub const DOUBLING_START: usize = 40;
pub const DOUBLINGS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Fgsm,
    Pgd,
    Unbounded,
    Doubling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolOptions {
    pub epsilons: Vec<f64>,
    pub pgd_steps: usize,
    /// `None`: 0.01 in pixel space, `2.5 eps / steps` in feature space.
    pub pgd_step_size: Option<f64>,
    pub random_start: bool,
    pub attack_seed: u64,
    pub unbounded_steps: usize,
    pub unbounded_step_size: f64,
    pub doubling_start: usize,
    pub doublings: u32,
    /// Budget of the doubling test; `None` uses the first epsilon.
    pub doubling_epsilon: Option<f64>,
    /// Feature-space inputs: attacks clamp to the data's bounds.
    pub feature_space: bool,
    pub eval: EvalOptions,
    /// Run only these stages (all when empty).
    pub only: Vec<Stage>,
}

impl Default for ProtocolOptions {
    fn default() -> Self {
        Self {
            epsilons: cerebellum_core::attacks::MNIST_EPSILONS.to_vec(),
            pgd_steps: PGD_STEPS,
            pgd_step_size: None,
            random_start: true,
            attack_seed: 0,
            unbounded_steps: UNBOUNDED_STEPS,
            unbounded_step_size: UNBOUNDED_STEP_SIZE,
            doubling_start: DOUBLING_START,
            doublings: DOUBLINGS,
            doubling_epsilon: None,
            feature_space: false,
            eval: EvalOptions::default(),
            only: Vec::new(),
        }
    }
}

impl ProtocolOptions {
    fn runs(&self, stage: Stage) -> bool {
        self.only.is_empty() || self.only.contains(&stage)
    }

    fn finish(&self, spec: AttackSpec, data: &LabeledDataset) -> AttackSpec {
        let spec = spec.with_seed(self.attack_seed);
        if self.feature_space {
            let (lo, hi) = data.bounds();
            spec.with_clamp(lo, hi)
        } else {
            spec
        }
    }

    pub fn pgd(&self, epsilon: f64, data: &LabeledDataset) -> AttackSpec {
        let mut spec = if self.feature_space {
            AttackSpec::pgd_feature_space(epsilon, self.pgd_steps, data.bounds())
        } else {
            AttackSpec::pgd(epsilon).with_steps(self.pgd_steps)
        };
        spec.step_size = self.pgd_step_size.unwrap_or(if self.feature_space {
            spec.step_size
        } else {
            PGD_STEP_SIZE
        });
        self.finish(spec.with_random_start(self.random_start), data)
    }

    pub fn fgsm(&self, epsilon: f64, data: &LabeledDataset) -> AttackSpec {
        self.finish(AttackSpec::fgsm(epsilon), data)
    }

    pub fn unbounded(&self, data: &LabeledDataset) -> AttackSpec {
        self.finish(
            AttackSpec::unbounded(self.unbounded_steps, self.unbounded_step_size),
            data,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoublingResult {
    pub attack: AttackSpec,
    pub curve: ConvergenceCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub dataset: String,
    pub options: ProtocolOptions,
    pub reports: Vec<RobustnessReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doubling: Option<DoublingResult>,
    pub gates: Vec<Gate>,
}

impl ProtocolReport {
    pub fn passed(&self) -> bool {
        self.gates.iter().all(|g| g.passed)
    }

    pub fn find(&self, family: AttackFamily, epsilon: f64) -> Option<&RobustnessReport> {
        self.reports.iter().find(|r| {
            r.attack.family == family
                && (family == AttackFamily::PgdUnbounded || r.attack.epsilon == epsilon)
        })
    }

    /// Histogram of the first report that has one.
    pub fn histogram(&self) -> Option<&GradientHistogram> {
        self.reports.iter().find_map(|r| r.histogram.as_ref())
    }

    /// Emitted inputs outside their ball or the domain, over all stages.
    pub fn violations(&self) -> usize {
        self.reports
            .iter()
            .map(|r| r.budget_violations + r.domain_violations)
            .sum::<usize>()
            + self
                .doubling
                .as_ref()
                .map_or(0, |d| d.curve.budget_violations + d.curve.domain_violations)
    }
}

/// Runs the protocol; progress lines go to `log`.
pub fn run_protocol(
    net: &Network,
    data: &LabeledDataset,
    opts: &ProtocolOptions,
    log: &mut dyn Write,
) -> Result<ProtocolReport> {
    if opts.epsilons.is_empty() && (opts.runs(Stage::Fgsm) || opts.runs(Stage::Pgd)) {
        return Err(Error::Config("no attack budgets given".into()));
    }
    let mut reports = Vec::new();
    let run = |spec: AttackSpec, log: &mut dyn Write| -> Result<RobustnessReport> {
        let t = std::time::Instant::now();
        let r = evaluate_robustness(net, data, &spec, &opts.eval)?;
        let _ = writeln!(
            log,
            "{:<28} clean {:.4}  perturbed {:.4}  fooling {:.4}  ({:.1}s)",
            spec.label(),
            r.clean_accuracy,
            r.adversarial_accuracy,
            r.fooling_rate,
            t.elapsed().as_secs_f64()
        );
        for w in &r.warnings {
            let _ = writeln!(log, "  warning: {w}");
        }
        Ok(r)
    };
    for &eps in &opts.epsilons {
        if opts.runs(Stage::Fgsm) {
            reports.push(run(opts.fgsm(eps, data), log)?);
        }
        if opts.runs(Stage::Pgd) {
            reports.push(run(opts.pgd(eps, data), log)?);
        }
    }
    if opts.runs(Stage::Unbounded) {
        reports.push(run(opts.unbounded(data), log)?);
    }
    let doubling = if opts.runs(Stage::Doubling) {
        let eps = opts
            .doubling_epsilon
            .or(opts.epsilons.first().copied())
            .ok_or_else(|| Error::Config("the doubling test needs a budget".into()))?;
        let attack = opts.pgd(eps, data).with_steps(opts.doubling_start);
        let t = std::time::Instant::now();
        let curve = doubling_iterations_test(
            net,
            data,
            &attack,
            opts.doubling_start,
            opts.doublings,
            &opts.eval,
        )?;
        let _ = writeln!(
            log,
            "doubling test eps={eps}: levels {:?} fooling {:?} ({:.1}s)",
            curve.levels,
            curve.fooling_rate,
            t.elapsed().as_secs_f64()
        );
        Some(DoublingResult { attack, curve })
    } else {
        None
    };

    let mut report = ProtocolReport {
        dataset: data.provenance().into(),
        options: opts.clone(),
        reports,
        doubling,
        gates: Vec::new(),
    };
    report.gates = gates(&report);
    Ok(report)
}

fn gates(report: &ProtocolReport) -> Vec<Gate> {
    let mut gates = Vec::new();
    for &eps in &report.options.epsilons {
        if let (Some(f), Some(p)) = (
            report.find(AttackFamily::Fgsm, eps),
            report.find(AttackFamily::Pgd, eps),
        ) {
            gates.push(Gate {
                name: format!("fgsm <= pgd at eps={eps}"),
                passed: f.fooling_rate <= p.fooling_rate,
                detail: format!("fgsm {:.4}, pgd {:.4}", f.fooling_rate, p.fooling_rate),
            });
        }
    }
    if let Some(u) = report.find(AttackFamily::PgdUnbounded, 0.0) {
        gates.push(Gate {
            name: format!("unbounded fooling >= {UNBOUNDED_FLOOR}"),
            passed: u.fooling_rate >= UNBOUNDED_FLOOR,
            detail: format!("{:.4} after {} steps", u.fooling_rate, u.attack.steps),
        });
    }
    if let Some(d) = &report.doubling {
        let n = d.curve.fooling_rate.len();
        gates.push(Gate {
            name: "doubling-iterations convergence".into(),
            passed: d.curve.converged,
            detail: format!(
                "{} steps {:.4}, {} steps {:.4} (tolerance {})",
                d.curve.levels[n - 2],
                d.curve.fooling_rate[n - 2],
                d.curve.levels[n - 1],
                d.curve.fooling_rate[n - 1],
                d.curve.tolerance
            ),
        });
    }
    let v = report.violations();
    gates.push(Gate {
        name: "budget and domain respected".into(),
        passed: v == 0,
        detail: format!("{v} violations"),
    });
    gates
}

#[cfg(test)]
mod tests {
    use super::*;
    use cerebellum_core::{train, Hyperparams, NetworkConfig};

    fn blobs() -> LabeledDataset {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..60 {
            let label = (i % 2) as u32;
            for j in 0..4 {
                let jitter = ((i * 7 + j * 3) % 11) as f64 / 100.0;
                xs.push(if label == 0 { 0.3 } else { 0.7 } + jitter - 0.05);
            }
            ys.push(label);
        }
        LabeledDataset::new(xs, ys, 4, 2, (0.0, 1.0), "blobs").unwrap()
    }

    #[test]
    fn protocol_runs_every_stage_and_gates() {
        let data = blobs();
        let hp = Hyperparams {
            epochs: 5,
            ..Hyperparams::default()
        };
        let (net, _) = train(
            &NetworkConfig::new(4, 40, 4, 2),
            &hp,
            &data,
            None,
            &mut || 0.0,
        )
        .unwrap();
        let opts = ProtocolOptions {
            epsilons: vec![0.05, 0.3],
            unbounded_steps: 200,
            doubling_start: 5,
            doublings: 2,
            ..ProtocolOptions::default()
        };
        let report = run_protocol(&net, &data, &opts, &mut std::io::sink()).unwrap();
        assert_eq!(report.reports.len(), 5);
        assert_eq!(report.doubling.as_ref().unwrap().curve.levels, [5, 10, 20]);
        // Two fgsm/pgd gates, unbounded, convergence, audit.
        assert_eq!(report.gates.len(), 5);
        assert_eq!(report.violations(), 0);
        let json = serde_json::to_string(&report).unwrap();
        let back: ProtocolReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }

    #[test]
    fn only_restricts_stages() {
        let data = blobs();
        let net = Network::new(NetworkConfig::new(4, 8, 4, 2), 0.99).unwrap();
        let opts = ProtocolOptions {
            epsilons: vec![0.0],
            only: vec![Stage::Pgd],
            ..ProtocolOptions::default()
        };
        let report = run_protocol(&net, &data, &opts, &mut std::io::sink()).unwrap();
        assert_eq!(report.reports.len(), 1);
        let r = &report.reports[0];
        assert_eq!(r.adversarial_accuracy, r.clean_accuracy);
        assert_eq!(report.gates.len(), 1);
    }
}
