//! Gradient-masking checks: input-gradient histograms and the
//! doubling-iterations convergence test.

use alloc::{format, vec, vec::Vec};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use super::evaluate::{assess, craft, EvalOptions};
use super::gradient::Probe;
use super::{AttackFamily, AttackSpec, CONVERGENCE_TOLERANCE};
use crate::dataset::{one_hot, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::Network;

/// Log-spaced bins between these magnitudes; exact zeros get their own bin.
pub const HISTOGRAM_BINS: usize = 15;
pub const HISTOGRAM_MIN: f64 = 1e-12;
pub const HISTOGRAM_MAX: f64 = 1e2;
/// Zero-norm fraction at or above which masking is flagged.
pub const MASKING_ZERO_FRACTION: f64 = 0.05;

/// Magnitudes of `dl/dx` at clean inputs against their true labels.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct GradientHistogram {
    /// `HISTOGRAM_BINS + 1` bin edges; values outside land in the end bins.
    pub edges: Vec<f64>,
    /// Per-instance `‖g‖∞`.
    pub norm_counts: Vec<u64>,
    pub norm_zero: u64,
    /// Every `|g_i|`.
    pub element_counts: Vec<u64>,
    pub element_zero: u64,
    pub samples: usize,
    pub median_norm: f64,
    pub zero_norm_fraction: f64,
    pub masking_suspected: bool,
}

fn bin_of(v: f64) -> usize {
    let span = libm::log10(HISTOGRAM_MAX) - libm::log10(HISTOGRAM_MIN);
    let pos = (libm::log10(v) - libm::log10(HISTOGRAM_MIN)) / span * HISTOGRAM_BINS as f64;
    if pos <= 0.0 {
        0
    } else {
        (pos as usize).min(HISTOGRAM_BINS - 1)
    }
}

/// Histogram of input gradients at `data` rows `indices`.
pub fn gradient_histogram(
    net: &Network,
    data: &LabeledDataset,
    indices: &[usize],
) -> Result<GradientHistogram> {
    if indices.is_empty() {
        return Err(Error::Param(
            "gradient histogram needs at least one sample".into(),
        ));
    }
    let (d, c) = (net.input_dim(), net.classes());
    let span = libm::log10(HISTOGRAM_MAX) - libm::log10(HISTOGRAM_MIN);
    let edges = (0..=HISTOGRAM_BINS)
        .map(|i| {
            libm::pow(
                10.0,
                libm::log10(HISTOGRAM_MIN) + span * i as f64 / HISTOGRAM_BINS as f64,
            )
        })
        .collect();
    let mut hist = GradientHistogram {
        edges,
        norm_counts: vec![0; HISTOGRAM_BINS],
        norm_zero: 0,
        element_counts: vec![0; HISTOGRAM_BINS],
        element_zero: 0,
        samples: indices.len(),
        median_norm: 0.0,
        zero_norm_fraction: 0.0,
        masking_suspected: false,
    };
    let mut norms = Vec::with_capacity(indices.len());
    let mut probe = Probe::default();
    let mut xs = Vec::new();
    let mut targets = Vec::new();
    for chunk in indices.chunks(64) {
        xs.clear();
        targets.clear();
        for &i in chunk {
            if i >= data.len() {
                return Err(Error::Param(format!("sample index {i} beyond dataset")));
            }
            xs.extend_from_slice(data.input(i));
            targets.extend(one_hot(data.label(i), c)?);
        }
        probe.run(net, &xs, &targets, true)?;
        for g in probe.grad.chunks_exact(d) {
            let mut norm = 0.0f64;
            for &gi in g {
                let a = gi.abs();
                norm = norm.max(a);
                if a == 0.0 {
                    hist.element_zero += 1;
                } else {
                    hist.element_counts[bin_of(a)] += 1;
                }
            }
            if norm == 0.0 {
                hist.norm_zero += 1;
            } else {
                hist.norm_counts[bin_of(norm)] += 1;
            }
            norms.push(norm);
        }
    }
    norms.sort_by(f64::total_cmp);
    let n = norms.len();
    hist.median_norm = if n % 2 == 1 {
        norms[n / 2]
    } else {
        0.5 * (norms[n / 2 - 1] + norms[n / 2])
    };
    hist.zero_norm_fraction = hist.norm_zero as f64 / n as f64;
    hist.masking_suspected = hist.zero_norm_fraction >= MASKING_ZERO_FRACTION;
    Ok(hist)
}

/// Fooling rate against iteration count, at doubling levels.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct ConvergenceCurve {
    pub levels: Vec<usize>,
    pub fooling_rate: Vec<f64>,
    /// The last two levels differ by less than `tolerance`.
    pub converged: bool,
    pub tolerance: f64,
    /// Budget and domain audit of the inputs returned at the top level.
    pub budget_violations: usize,
    pub domain_violations: usize,
}

/// Runs the iterative attack at `start_steps · 2^i` iterations for
/// `i = 0..=doublings`. Iterates do not depend on the total step count, so a
/// single run to the top level is read off at each level.
pub fn doubling_iterations_test(
    net: &Network,
    data: &LabeledDataset,
    spec: &AttackSpec,
    start_steps: usize,
    doublings: u32,
    opts: &EvalOptions,
) -> Result<ConvergenceCurve> {
    if spec.family == AttackFamily::Fgsm {
        return Err(Error::Param(
            "the doubling test needs an iterative attack".into(),
        ));
    }
    if start_steps == 0 || doublings == 0 {
        return Err(Error::Param(
            "the doubling test needs start_steps >= 1 and at least one doubling".into(),
        ));
    }
    let levels: Vec<usize> = (0..=doublings).map(|i| start_steps << i).collect();
    let top = *levels.last().unwrap_or(&start_steps);
    let spec = spec.clone().with_steps(top);
    let crafted = craft(net, data, &spec, opts)?;
    let denom = crafted.source_clean_correct.max(1) as f64;
    let fooling_rate: Vec<f64> = levels
        .iter()
        .map(|&l| crafted.fooled_by_step[l - 1] as f64 / denom)
        .collect();
    let n = fooling_rate.len();
    let converged = (fooling_rate[n - 1] - fooling_rate[n - 2]).abs() < CONVERGENCE_TOLERANCE;
    let audit = assess(net, data, &crafted)?;
    Ok(ConvergenceCurve {
        levels,
        fooling_rate,
        converged,
        tolerance: CONVERGENCE_TOLERANCE,
        budget_violations: audit.budget_violations,
        domain_violations: audit.domain_violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::NetworkConfig;

    #[test]
    fn bins_cover_the_range() {
        assert_eq!(bin_of(1e-30), 0);
        assert_eq!(bin_of(HISTOGRAM_MIN), 0);
        assert_eq!(bin_of(1e5), HISTOGRAM_BINS - 1);
        assert_eq!(bin_of(HISTOGRAM_MAX), HISTOGRAM_BINS - 1);
        // Bins are 14/15 decade wide.
        assert_eq!(bin_of(1.0), 12);
    }

    #[test]
    fn zero_readout_is_flagged_as_masked() {
        let net = Network::new(NetworkConfig::new(4, 8, 2, 2), 0.9).unwrap();
        let data = LabeledDataset::new(
            vec![0.1, 0.2, 0.3, 0.4, 0.9, 0.8, 0.7, 0.6],
            vec![0, 1],
            4,
            2,
            (0.0, 1.0),
            "toy",
        )
        .unwrap();
        let h = gradient_histogram(&net, &data, &[0, 1]).unwrap();
        // yhat = 0 against a one-hot target still gives a gradient unless W = 0.
        assert_eq!(h.norm_zero, 2);
        assert!(h.masking_suspected);
        assert_eq!(h.edges.len(), HISTOGRAM_BINS + 1);
        assert!((h.edges[0] - HISTOGRAM_MIN).abs() < 1e-24);
    }

    #[test]
    fn fgsm_is_rejected() {
        let net = Network::new(NetworkConfig::new(4, 8, 2, 2), 0.9).unwrap();
        let data = LabeledDataset::new(vec![0.5; 4], vec![0], 4, 2, (0.0, 1.0), "toy").unwrap();
        let r = doubling_iterations_test(
            &net,
            &data,
            &AttackSpec::fgsm(0.1),
            1,
            1,
            &EvalOptions::default(),
        );
        assert!(r.is_err());
    }
}
