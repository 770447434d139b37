//! Dataset-level robustness evaluation and cross-model transfer.
//!
//! Evaluation is split into `craft` (attack one model) and `assess` (score
//! any model on the crafted inputs) so that transfer entries and
//! self-attack reports go through the same code.

use alloc::{format, string::String, vec, vec::Vec};

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use super::diagnostics::{gradient_histogram, GradientHistogram};
use super::gradient::Probe;
use super::iterative::{fgsm_core, pgd_core, prepare, unbounded_core};
use super::{AttackFamily, AttackSpec, BUDGET_SLACK};
use crate::dataset::{subsample_indices, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::Network;

/// Evaluate on `n` instances drawn with `seed` instead of the full set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Subsample {
    pub n: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct EvalOptions {
    pub subsample: Option<Subsample>,
    /// Instances attacked together; affects speed only.
    pub batch_size: usize,
    /// Clean inputs used for the gradient histogram (0 disables it).
    pub histogram_samples: usize,
    pub histogram_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            subsample: None,
            batch_size: 100,
            histogram_samples: 256,
            histogram_seed: 0,
        }
    }
}

impl EvalOptions {
    pub fn with_subsample(mut self, n: usize, seed: u64) -> Self {
        self.subsample = Some(Subsample { n, seed });
        self
    }

    fn indices(&self, len: usize) -> Vec<usize> {
        match self.subsample {
            Some(s) => subsample_indices(len, s.n, s.seed),
            None => (0..len).collect(),
        }
    }
}

/// Adversarial inputs crafted against one model.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct CraftedSet {
    pub spec: AttackSpec,
    /// Dataset rows attacked, ascending.
    pub indices: Vec<usize>,
    /// Row-major adversarial inputs, one per index.
    pub inputs: Vec<f64>,
    pub dim: usize,
    /// Instances the source model classified correctly before the attack.
    pub source_clean_correct: u64,
    /// After each iteration, how many of those the attack had fooled so
    /// far (iterative families only).
    pub fooled_by_step: Vec<u64>,
}

impl CraftedSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn input(&self, row: usize) -> &[f64] {
        &self.inputs[row * self.dim..(row + 1) * self.dim]
    }
}

fn check_compatible(net: &Network, data: &LabeledDataset) -> Result<()> {
    if data.dim() != net.input_dim() {
        return Err(Error::Shape {
            what: "dataset dimension",
            expected: net.input_dim(),
            actual: data.dim(),
        });
    }
    if data.classes() != net.classes() {
        return Err(Error::Shape {
            what: "dataset classes",
            expected: net.classes(),
            actual: data.classes(),
        });
    }
    Ok(())
}

struct ChunkOut {
    adv: Vec<f64>,
    clean_correct: u64,
    fooled_by_step: Vec<u64>,
}

/// Attacks `net` on `data` (or its subsample).
pub fn craft(
    net: &Network,
    data: &LabeledDataset,
    spec: &AttackSpec,
    opts: &EvalOptions,
) -> Result<CraftedSet> {
    spec.validate()?;
    check_compatible(net, data)?;
    let indices = opts.indices(data.len());
    let d = data.dim();
    let iterative = spec.family != AttackFamily::Fgsm;
    let curve_len = if iterative { spec.steps } else { 0 };

    let chunks = crate::par::map_chunks(indices.len(), opts.batch_size, |range| {
        let idx = &indices[range];
        let mut x0 = Vec::with_capacity(idx.len() * d);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            x0.extend_from_slice(data.input(i));
            labels.push(data.label(i));
        }
        let mut probe = Probe::default();
        let prep = prepare(net, &x0, &labels, spec.objective(), &mut probe)?;
        let correct: Vec<bool> = prep
            .clean_pred
            .iter()
            .zip(&labels)
            .map(|(p, l)| p == l)
            .collect();
        let mut fooled_by_step = vec![0u64; curve_len];
        let adv = match spec.family {
            AttackFamily::Fgsm => fgsm_core(net, &x0, &prep, spec, &mut probe)?,
            AttackFamily::Pgd => pgd_core(
                net,
                &x0,
                idx,
                &prep,
                spec,
                &mut probe,
                |t, best_pred| {
                    fooled_by_step[t - 1] = best_pred
                        .iter()
                        .zip(&labels)
                        .zip(&correct)
                        .filter(|&((p, l), &ok)| ok && p != l)
                        .count() as u64;
                },
                None,
            )?,
            AttackFamily::PgdUnbounded => {
                unbounded_core(net, &x0, &labels, &prep, spec, &mut probe, |t, flipped| {
                    fooled_by_step[t - 1] = flipped.iter().filter(|&&f| f).count() as u64;
                })?
            }
        };
        Ok(ChunkOut {
            adv,
            clean_correct: correct.iter().filter(|&&ok| ok).count() as u64,
            fooled_by_step,
        })
    });

    let mut crafted = CraftedSet {
        spec: spec.clone(),
        inputs: Vec::with_capacity(indices.len() * d),
        indices: Vec::new(),
        dim: d,
        source_clean_correct: 0,
        fooled_by_step: vec![0; curve_len],
    };
    for chunk in chunks {
        let chunk: ChunkOut = chunk?;
        crafted.inputs.extend(chunk.adv);
        crafted.source_clean_correct += chunk.clean_correct;
        for (total, v) in crafted.fooled_by_step.iter_mut().zip(chunk.fooled_by_step) {
            *total += v;
        }
    }
    crafted.indices = indices;
    Ok(crafted)
}

/// How one model fares on a crafted set.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Assessment {
    pub n: usize,
    pub clean_correct: usize,
    pub perturbed_correct: usize,
    /// Clean-correct instances whose perturbed prediction is wrong.
    pub fooled: usize,
    pub initially_wrong: usize,
    /// `fooled / clean_correct`; zero when nothing was correct.
    pub fooling_rate: f64,
    pub linf_mean: f64,
    pub linf_median: f64,
    pub linf_max: f64,
    /// Instances with `‖x_adv - x‖∞ > radius + BUDGET_SLACK`.
    pub budget_violations: usize,
    /// Instances with a coordinate outside the clamp bounds.
    pub domain_violations: usize,
}

/// Scores `net` on `crafted` against the clean rows of `data`.
pub fn assess(net: &Network, data: &LabeledDataset, crafted: &CraftedSet) -> Result<Assessment> {
    check_compatible(net, data)?;
    if crafted.dim != data.dim() || crafted.inputs.len() != crafted.len() * crafted.dim {
        return Err(Error::Shape {
            what: "crafted inputs",
            expected: crafted.len() * data.dim(),
            actual: crafted.inputs.len(),
        });
    }
    if let Some(&i) = crafted.indices.iter().find(|&&i| i >= data.len()) {
        return Err(Error::Param(format!("crafted index {i} beyond dataset")));
    }
    let d = data.dim();
    let radius = crafted.spec.radius();
    let (lo, hi) = crafted.spec.clamp;
    let chunk = 64;
    let parts = crate::par::map_chunks(crafted.len(), chunk, |range| {
        let mut clean = Vec::with_capacity(range.len() * d);
        for &i in &crafted.indices[range.clone()] {
            clean.extend_from_slice(data.input(i));
        }
        let adv = &crafted.inputs[range.start * d..range.end * d];
        let mut probe = Probe::default();
        let targets = vec![0.0; range.len() * net.classes()];
        probe.run(net, &clean, &targets, false)?;
        let clean_pred = core::mem::take(&mut probe.pred);
        probe.run(net, adv, &targets, false)?;
        let linf: Vec<f64> = clean
            .chunks_exact(d)
            .zip(adv.chunks_exact(d))
            .map(|(x, a)| {
                x.iter()
                    .zip(a)
                    .map(|(p, q)| (p - q).abs())
                    .fold(0.0, f64::max)
            })
            .collect();
        let out_of_domain = adv
            .chunks_exact(d)
            .filter(|a| a.iter().any(|v| !(lo..=hi).contains(v)))
            .count();
        Ok((
            clean_pred,
            core::mem::take(&mut probe.pred),
            linf,
            out_of_domain,
        ))
    });

    let mut a = Assessment {
        n: crafted.len(),
        clean_correct: 0,
        perturbed_correct: 0,
        fooled: 0,
        initially_wrong: 0,
        fooling_rate: 0.0,
        linf_mean: 0.0,
        linf_median: 0.0,
        linf_max: 0.0,
        budget_violations: 0,
        domain_violations: 0,
    };
    let mut linf_all = Vec::with_capacity(crafted.len());
    let mut row = 0;
    for part in parts {
        let (clean_pred, adv_pred, linf, out_of_domain): (Vec<usize>, Vec<usize>, Vec<f64>, usize) =
            part?;
        a.domain_violations += out_of_domain;
        for ((cp, ap), dist) in clean_pred.into_iter().zip(adv_pred).zip(linf) {
            let label = data.label(crafted.indices[row]);
            row += 1;
            if cp == label {
                a.clean_correct += 1;
                if ap != label {
                    a.fooled += 1;
                }
            } else {
                a.initially_wrong += 1;
            }
            if ap == label {
                a.perturbed_correct += 1;
            }
            if dist > radius + BUDGET_SLACK {
                a.budget_violations += 1;
            }
            linf_all.push(dist);
        }
    }
    if a.clean_correct > 0 {
        a.fooling_rate = a.fooled as f64 / a.clean_correct as f64;
    }
    if !linf_all.is_empty() {
        a.linf_mean = linf_all.iter().sum::<f64>() / linf_all.len() as f64;
        a.linf_max = linf_all.iter().cloned().fold(0.0, f64::max);
        linf_all.sort_by(f64::total_cmp);
        let n = linf_all.len();
        a.linf_median = if n % 2 == 1 {
            linf_all[n / 2]
        } else {
            0.5 * (linf_all[n / 2 - 1] + linf_all[n / 2])
        };
    }
    Ok(a)
}

/// Fooling rate after `step` iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct CurvePoint {
    pub step: usize,
    pub fooling_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct RobustnessReport {
    pub attack: AttackSpec,
    pub dataset: String,
    pub n: usize,
    pub subsample: Option<Subsample>,
    pub clean_correct: usize,
    pub perturbed_correct: usize,
    pub fooled: usize,
    /// Clean-correct instances that survived the attack.
    pub robust: usize,
    pub initially_wrong: usize,
    pub clean_accuracy: f64,
    pub adversarial_accuracy: f64,
    pub fooling_rate: f64,
    pub linf_mean: f64,
    pub linf_median: f64,
    pub linf_max: f64,
    pub budget_violations: usize,
    pub domain_violations: usize,
    pub histogram: Option<GradientHistogram>,
    /// Fooling rate after every iteration (iterative families only).
    pub convergence: Vec<CurvePoint>,
    pub warnings: Vec<String>,
}

/// Attacks `net` on `data` and reports accuracy, fooling rate, perturbation
/// sizes and gradient diagnostics.
pub fn evaluate_robustness(
    net: &Network,
    data: &LabeledDataset,
    spec: &AttackSpec,
    opts: &EvalOptions,
) -> Result<RobustnessReport> {
    let crafted = craft(net, data, spec, opts)?;
    let a = assess(net, data, &crafted)?;
    let mut warnings = Vec::new();

    let histogram = if opts.histogram_samples > 0 {
        let picks = subsample_indices(crafted.len(), opts.histogram_samples, opts.histogram_seed);
        let rows: Vec<usize> = picks.iter().map(|&p| crafted.indices[p]).collect();
        let h = gradient_histogram(net, data, &rows)?;
        if h.masking_suspected {
            warnings.push(format!(
                "{:.1}% of sampled input gradients are exactly zero; gradient masking suspected",
                100.0 * h.zero_norm_fraction
            ));
        }
        Some(h)
    } else {
        None
    };
    if a.clean_correct == 0 {
        warnings.push(
            "no instance is classified correctly; fooling rate is undefined (reported as 0)".into(),
        );
    }
    if a.budget_violations > 0 {
        warnings.push(format!(
            "{} perturbations exceed the l∞ budget",
            a.budget_violations
        ));
    }
    if a.domain_violations > 0 {
        warnings.push(format!(
            "{} perturbed inputs leave the input domain",
            a.domain_violations
        ));
    }

    let denom = crafted.source_clean_correct.max(1) as f64;
    let convergence = crafted
        .fooled_by_step
        .iter()
        .enumerate()
        .map(|(t, &f)| CurvePoint {
            step: t + 1,
            fooling_rate: f as f64 / denom,
        })
        .collect();

    let n = a.n as f64;
    Ok(RobustnessReport {
        attack: spec.clone(),
        dataset: data.provenance().into(),
        n: a.n,
        subsample: opts.subsample,
        clean_correct: a.clean_correct,
        perturbed_correct: a.perturbed_correct,
        fooled: a.fooled,
        robust: a.clean_correct - a.fooled,
        initially_wrong: a.initially_wrong,
        clean_accuracy: a.clean_correct as f64 / n,
        adversarial_accuracy: a.perturbed_correct as f64 / n,
        fooling_rate: a.fooling_rate,
        linf_mean: a.linf_mean,
        linf_median: a.linf_median,
        linf_max: a.linf_max,
        budget_violations: a.budget_violations,
        domain_violations: a.domain_violations,
        histogram,
        convergence,
        warnings,
    })
}

/// `rates[a][b]`: fraction of model `b`'s clean-correct instances fooled by
/// inputs crafted against model `a`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct TransferMatrix {
    pub attack: AttackSpec,
    pub rates: Vec<Vec<f64>>,
    /// Full assessment behind each rate.
    pub entries: Vec<Vec<Assessment>>,
    /// Clean-correct count of each target model on the evaluated rows.
    pub clean_correct: Vec<usize>,
    pub n: usize,
}

pub fn transfer_matrix(
    nets: &[&Network],
    data: &LabeledDataset,
    spec: &AttackSpec,
    opts: &EvalOptions,
) -> Result<TransferMatrix> {
    if nets.is_empty() {
        return Err(Error::Param(
            "transfer matrix needs at least one model".into(),
        ));
    }
    let mut rates = Vec::with_capacity(nets.len());
    let mut entries = Vec::with_capacity(nets.len());
    let mut clean_correct = vec![0; nets.len()];
    let mut n = 0;
    for source in nets {
        let crafted = craft(source, data, spec, opts)?;
        n = crafted.len();
        let mut row = Vec::with_capacity(nets.len());
        for (b, target) in nets.iter().enumerate() {
            let a = assess(target, data, &crafted)?;
            clean_correct[b] = a.clean_correct;
            row.push(a);
        }
        rates.push(row.iter().map(|a| a.fooling_rate).collect());
        entries.push(row);
    }
    Ok(TransferMatrix {
        attack: spec.clone(),
        rates,
        entries,
        clean_correct,
        n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learning::{train, Hyperparams};
    use crate::model::NetworkConfig;
    use rand::{Rng, SeedableRng};

    /// Two Gaussian blobs in [0,1]^6.
    fn blobs(n: usize, seed: u64) -> LabeledDataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..n {
            let label = (i % 2) as u32;
            let centre = if label == 0 { 0.3 } else { 0.7 };
            for _ in 0..6 {
                let v: f64 = centre + rng.random_range(-0.15..0.15);
                xs.push(v.clamp(0.0, 1.0));
            }
            ys.push(label);
        }
        LabeledDataset::new(xs, ys, 6, 2, (0.0, 1.0), "blobs").unwrap()
    }

    fn trained(seed: u64) -> (Network, LabeledDataset) {
        let data = blobs(200, 9);
        let cfg = NetworkConfig::new(6, 60, 3, 2).with_seed(seed);
        let hp = Hyperparams {
            epochs: 5,
            ..Hyperparams::default()
        };
        let (net, _) = train(&cfg, &hp, &data, None, &mut || 0.0).unwrap();
        (net, data)
    }

    #[test]
    fn transfer_diagonal_matches_self_attack() {
        let (a, data) = trained(1);
        let (b, _) = trained(2);
        let spec = AttackSpec::pgd(0.2).with_seed(4);
        let opts = EvalOptions::default();
        let t = transfer_matrix(&[&a, &b], &data, &spec, &opts).unwrap();
        for (i, net) in [&a, &b].into_iter().enumerate() {
            let r = evaluate_robustness(net, &data, &spec, &opts).unwrap();
            assert_eq!(t.rates[i][i], r.fooling_rate);
        }
    }

    #[test]
    fn batch_size_does_not_change_results() {
        let (net, data) = trained(3);
        for spec in [
            AttackSpec::fgsm(0.1),
            AttackSpec::pgd(0.1).with_seed(7),
            AttackSpec::unbounded(30, 0.02),
        ] {
            let one = craft(
                &net,
                &data,
                &spec,
                &EvalOptions {
                    batch_size: 1,
                    ..Default::default()
                },
            )
            .unwrap();
            let many = craft(
                &net,
                &data,
                &spec,
                &EvalOptions {
                    batch_size: 37,
                    ..Default::default()
                },
            )
            .unwrap();
            assert_eq!(one, many, "{}", spec.label());
        }
    }

    #[test]
    fn curve_ends_at_the_reported_rate() {
        let (net, data) = trained(5);
        let r = evaluate_robustness(&net, &data, &AttackSpec::pgd(0.15), &EvalOptions::default())
            .unwrap();
        assert_eq!(r.convergence.len(), 40);
        assert_eq!(r.convergence.last().unwrap().fooling_rate, r.fooling_rate);
        assert_eq!(r.budget_violations, 0);
        assert_eq!(r.robust + r.fooled, r.clean_correct);
    }

    #[test]
    fn subsample_is_respected() {
        let (net, data) = trained(6);
        let opts = EvalOptions::default().with_subsample(50, 1);
        let r = evaluate_robustness(&net, &data, &AttackSpec::fgsm(0.1), &opts).unwrap();
        assert_eq!(r.n, 50);
        assert!(r.convergence.is_empty());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let (net, _) = trained(1);
        let other = LabeledDataset::new(vec![0.5; 8], vec![0, 1], 4, 2, (0.0, 1.0), "x").unwrap();
        assert!(matches!(
            craft(
                &net,
                &other,
                &AttackSpec::fgsm(0.1),
                &EvalOptions::default()
            ),
            Err(Error::Shape { .. })
        ));
    }
}
