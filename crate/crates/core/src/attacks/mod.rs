//! l∞ white-box attacks and gradient-masking diagnostics.
//!
//! FGSM and PGD ascend the training loss `½‖yhat - e_y‖²`. The unbounded
//! attack by default descends the same loss toward the one-hot vector of the
//! runner-up class instead: once the true-class score overshoots its target,
//! plain ascent keeps raising that score and can stall short of a label flip.

mod diagnostics;
mod evaluate;
mod gradient;
mod iterative;

use alloc::format;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use diagnostics::{
    doubling_iterations_test, gradient_histogram, ConvergenceCurve, GradientHistogram,
    HISTOGRAM_BINS, HISTOGRAM_MAX, HISTOGRAM_MIN, MASKING_ZERO_FRACTION,
};
pub use evaluate::{
    assess, craft, evaluate_robustness, transfer_matrix, Assessment, CraftedSet, CurvePoint,
    EvalOptions, RobustnessReport, Subsample, TransferMatrix,
};
pub use gradient::{input_gradient, loss_and_gradient};
pub use iterative::{fgsm, pgd, pgd_traced, unbounded_attack, PgdTrace};

/// Convergence tolerance of the doubling test, as a fraction (0.5 percentage points).
pub const CONVERGENCE_TOLERANCE: f64 = 0.005;
/// Slack allowed on `‖x_adv - x‖∞ <= eps` for rounding in `x + eps`.
pub const BUDGET_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum AttackFamily {
    Fgsm,
    Pgd,
    PgdUnbounded,
}

impl AttackFamily {
    pub fn name(self) -> &'static str {
        match self {
            AttackFamily::Fgsm => "fgsm",
            AttackFamily::Pgd => "pgd",
            AttackFamily::PgdUnbounded => "pgd-unbounded",
        }
    }
}

/// Which loss the attack drives and in which direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum AttackObjective {
    /// Ascend the loss against the true label.
    Ascend,
    /// Descend the loss against the one-hot of the highest-scoring wrong class
    /// at the clean input.
    RunnerUp,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct AttackSpec {
    pub family: AttackFamily,
    /// l∞ budget; ignored by the unbounded family.
    pub epsilon: f64,
    /// Iterations (PGD families).
    #[cfg_attr(feature = "serde", serde(default = "default_steps"))]
    pub steps: usize,
    /// Per-step l∞ move (PGD families).
    #[cfg_attr(feature = "serde", serde(default = "default_step_size"))]
    pub step_size: f64,
    #[cfg_attr(feature = "serde", serde(default = "default_true"))]
    pub random_start: bool,
    /// Input domain `[lo, hi]`.
    #[cfg_attr(feature = "serde", serde(default = "default_clamp"))]
    pub clamp: (f64, f64),
    /// Seed for random starts.
    #[cfg_attr(feature = "serde", serde(default))]
    pub seed: u64,
    /// `None` picks the family default (ascend for FGSM/PGD, runner-up for unbounded).
    #[cfg_attr(
        feature = "serde",
        serde(default, skip_serializing_if = "Option::is_none")
    )]
    pub objective: Option<AttackObjective>,
}

#[cfg(feature = "serde")]
fn default_steps() -> usize {
    PGD_STEPS
}
#[cfg(feature = "serde")]
fn default_step_size() -> f64 {
    PGD_STEP_SIZE
}
#[cfg(feature = "serde")]
fn default_true() -> bool {
    true
}
#[cfg(feature = "serde")]
fn default_clamp() -> (f64, f64) {
    (0.0, 1.0)
}

pub const PGD_STEPS: usize = 40;
pub const PGD_STEP_SIZE: f64 = 0.01;
/// MNIST l∞ budgets.
pub const MNIST_EPSILONS: [f64; 2] = [0.1, 0.3];
/// CIFAR-10 l∞ budgets (pixel scale).
pub const CIFAR_EPSILONS: [f64; 2] = [2.0 / 255.0, 8.0 / 255.0];

impl AttackSpec {
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            family: AttackFamily::Fgsm,
            epsilon,
            steps: 1,
            step_size: epsilon,
            random_start: false,
            clamp: (0.0, 1.0),
            seed: 0,
            objective: None,
        }
    }

    /// PGD with the default 40 steps of 0.01 and a random start.
    pub fn pgd(epsilon: f64) -> Self {
        Self {
            family: AttackFamily::Pgd,
            epsilon,
            steps: PGD_STEPS,
            step_size: PGD_STEP_SIZE,
            random_start: true,
            clamp: (0.0, 1.0),
            seed: 0,
            objective: None,
        }
    }

    /// PGD for feature-space inputs: step size `2.5 eps / steps`.
    pub fn pgd_feature_space(epsilon: f64, steps: usize, clamp: (f64, f64)) -> Self {
        Self {
            step_size: 2.5 * epsilon / steps.max(1) as f64,
            steps,
            clamp,
            ..Self::pgd(epsilon)
        }
    }

    pub fn unbounded(steps: usize, step_size: f64) -> Self {
        Self {
            family: AttackFamily::PgdUnbounded,
            epsilon: 0.0,
            steps,
            step_size,
            random_start: false,
            clamp: (0.0, 1.0),
            seed: 0,
            objective: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_clamp(mut self, lo: f64, hi: f64) -> Self {
        self.clamp = (lo, hi);
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn with_random_start(mut self, on: bool) -> Self {
        self.random_start = on;
        self
    }

    pub fn with_objective(mut self, objective: AttackObjective) -> Self {
        self.objective = Some(objective);
        self
    }

    pub fn objective(&self) -> AttackObjective {
        self.objective.unwrap_or(match self.family {
            AttackFamily::PgdUnbounded => AttackObjective::RunnerUp,
            _ => AttackObjective::Ascend,
        })
    }

    /// Radius of the l∞ ball; infinite for the unbounded family.
    pub fn radius(&self) -> f64 {
        match self.family {
            AttackFamily::PgdUnbounded => f64::INFINITY,
            _ => self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.clamp;
        if !(lo <= hi) {
            return Err(Error::Param(format!("clamp bounds [{lo}, {hi}] are empty")));
        }
        if self.family != AttackFamily::PgdUnbounded
            && !(self.epsilon >= 0.0 && self.epsilon.is_finite())
        {
            return Err(Error::Param(format!(
                "epsilon = {} must be finite and nonnegative",
                self.epsilon
            )));
        }
        if self.family != AttackFamily::Fgsm {
            if self.steps < 1 {
                return Err(Error::Param("PGD needs at least one step".into()));
            }
            if !(self.step_size > 0.0 && self.step_size.is_finite()) {
                return Err(Error::Param(format!(
                    "step size = {} must be positive",
                    self.step_size
                )));
            }
        }
        Ok(())
    }

    /// Short label like `pgd eps=0.1 steps=40`.
    pub fn label(&self) -> alloc::string::String {
        match self.family {
            AttackFamily::Fgsm => format!("fgsm eps={}", self.epsilon),
            AttackFamily::Pgd => format!("pgd eps={} steps={}", self.epsilon, self.steps),
            AttackFamily::PgdUnbounded => format!("pgd-unbounded steps={}", self.steps),
        }
    }
}

#[inline]
pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
