//! FGSM, PGD and unbounded PGD, batched in lockstep.
//!
//! Instances in a batch never interact: every quantity is computed per row,
//! so results do not depend on batch composition. PGD random starts come
//! from the instance's own stream (keyed by its dataset index).

use alloc::{vec, vec::Vec};

use rand::Rng;

use super::gradient::Probe;
use super::{sign, AttackFamily, AttackObjective, AttackSpec};
use crate::dataset::one_hot;
use crate::error::{check_len, Error, Result};
use crate::model::{predict, Network};
use crate::rng::{substream, Domain};

/// Attack targets and step direction for a batch.
pub(crate) struct Prepared {
    pub targets: Vec<f64>,
    /// +1 ascends the loss, -1 descends it.
    pub direction: f64,
    pub clean_pred: Vec<usize>,
}

/// Evaluates the clean batch and derives the objective's target vectors.
pub(crate) fn prepare(
    net: &Network,
    x0: &[f64],
    labels: &[usize],
    objective: AttackObjective,
    probe: &mut Probe,
) -> Result<Prepared> {
    let c = net.classes();
    let mut targets = Vec::with_capacity(labels.len() * c);
    for &l in labels {
        targets.extend(one_hot(l, c)?);
    }
    probe.run(net, x0, &targets, false)?;
    let clean_pred = probe.pred.clone();
    match objective {
        AttackObjective::Ascend => Ok(Prepared {
            targets,
            direction: 1.0,
            clean_pred,
        }),
        AttackObjective::RunnerUp => {
            let mut runner = Vec::with_capacity(labels.len() * c);
            for (b, &l) in labels.iter().enumerate() {
                let yhat = &probe.yhat()[b * c..(b + 1) * c];
                let mut best: Option<usize> = None;
                for k in 0..c {
                    if k != l && best.map_or(true, |j| yhat[k] > yhat[j]) {
                        best = Some(k);
                    }
                }
                runner.extend(one_hot(best.unwrap_or(0), c)?);
            }
            Ok(Prepared {
                targets: runner,
                direction: -1.0,
                clean_pred,
            })
        }
    }
}

#[inline]
fn project(v: f64, lower: f64, upper: f64) -> f64 {
    v.max(lower).min(upper)
}

/// `clamp(x + dir eps sign(g), lo, hi)`.
pub(crate) fn fgsm_core(
    net: &Network,
    x0: &[f64],
    prep: &Prepared,
    spec: &AttackSpec,
    probe: &mut Probe,
) -> Result<Vec<f64>> {
    probe.run(net, x0, &prep.targets, true)?;
    let (lo, hi) = spec.clamp;
    Ok(x0
        .iter()
        .zip(&probe.grad)
        .map(|(&x, &g)| project(x + spec.epsilon * (prep.direction * sign(g)), lo, hi))
        .collect())
}

/// Projected sign-gradient iterations inside `B∞(x0, eps) ∩ [lo, hi]`.
///
/// Returns the best-loss iterate per instance (over iterates after each
/// step; ties keep the earlier one). An instance whose gradient vanished at
/// every iterate gets `x0` back: random-start noise alone is not an attack.
/// `observe(t, best_pred)` runs after step `t`; `losses`, when given,
/// receives every iterate's loss per instance.
#[allow(clippy::too_many_arguments)]
pub(crate) fn pgd_core(
    net: &Network,
    x0: &[f64],
    indices: &[usize],
    prep: &Prepared,
    spec: &AttackSpec,
    probe: &mut Probe,
    mut observe: impl FnMut(usize, &[usize]),
    mut losses: Option<&mut Vec<Vec<f64>>>,
) -> Result<Vec<f64>> {
    let d = net.input_dim();
    let batch = indices.len();
    check_len("attack batch", batch * d, x0.len())?;
    let eps = spec.epsilon;
    let (lo, hi) = spec.clamp;
    let lower: Vec<f64> = x0.iter().map(|&x| (x - eps).max(lo)).collect();
    let upper: Vec<f64> = x0.iter().map(|&x| (x + eps).min(hi)).collect();

    let mut cur = x0.to_vec();
    if spec.random_start {
        for (b, &index) in indices.iter().enumerate() {
            let mut rng = substream(spec.seed, Domain::AttackStart, index as u64);
            for i in b * d..(b + 1) * d {
                let u: f64 = rng.random();
                cur[i] = project(x0[i] + (2.0 * u - 1.0) * eps, lower[i], upper[i]);
            }
        }
    }
    if let Some(l) = losses.as_deref_mut() {
        l.clear();
        l.resize(batch, Vec::with_capacity(spec.steps));
    }

    let mut best = cur.clone();
    let mut best_loss = vec![f64::NEG_INFINITY; batch];
    let mut best_pred = vec![0usize; batch];
    let mut moved = vec![false; batch];
    probe.run(net, &cur, &prep.targets, true)?;
    let step = spec.step_size * prep.direction;
    for t in 1..=spec.steps {
        for (b, g) in probe.grad.chunks_exact(d).enumerate() {
            moved[b] |= g.iter().any(|&v| v != 0.0);
        }
        for ((x, &g), (&lw, &up)) in cur
            .iter_mut()
            .zip(&probe.grad)
            .zip(lower.iter().zip(&upper))
        {
            *x = project(*x + step * sign(g), lw, up);
        }
        probe.run(net, &cur, &prep.targets, t < spec.steps)?;
        for b in 0..batch {
            let loss = prep.direction * probe.loss[b];
            if t == 1 || loss > best_loss[b] {
                best_loss[b] = loss;
                best_pred[b] = probe.pred[b];
                best[b * d..(b + 1) * d].copy_from_slice(&cur[b * d..(b + 1) * d]);
            }
            if let Some(l) = losses.as_deref_mut() {
                l[b].push(probe.loss[b]);
            }
        }
        observe(t, &best_pred);
    }
    for b in (0..batch).filter(|&b| !moved[b]) {
        best[b * d..(b + 1) * d].copy_from_slice(&x0[b * d..(b + 1) * d]);
    }
    Ok(best)
}

/// Sign-gradient iterations clamped only to the domain. An instance stops
/// at the first iterate its prediction leaves `labels[b]`; instances that
/// never flip return their final iterate. `observe(t, fooled)` runs after
/// every step with the per-instance flipped flags.
pub(crate) fn unbounded_core(
    net: &Network,
    x0: &[f64],
    labels: &[usize],
    prep: &Prepared,
    spec: &AttackSpec,
    probe: &mut Probe,
    mut observe: impl FnMut(usize, &[bool]),
) -> Result<Vec<f64>> {
    let (d, c) = (net.input_dim(), net.classes());
    let batch = labels.len();
    let (lo, hi) = spec.clamp;
    let step = spec.step_size * prep.direction;
    let mut cur = x0.to_vec();
    // Already-wrong instances have nothing to attack.
    let mut done: Vec<bool> = prep
        .clean_pred
        .iter()
        .zip(labels)
        .map(|(p, l)| p != l)
        .collect();
    let mut flipped = vec![false; batch];
    let mut xs = Vec::with_capacity(batch * d);
    let mut targets = Vec::with_capacity(batch * c);
    let mut active: Vec<usize> = (0..batch).filter(|&b| !done[b]).collect();

    for t in 1..=spec.steps {
        if active.is_empty() {
            observe(t, &flipped);
            continue;
        }
        xs.clear();
        targets.clear();
        for &b in &active {
            xs.extend_from_slice(&cur[b * d..(b + 1) * d]);
            targets.extend_from_slice(&prep.targets[b * c..(b + 1) * c]);
        }
        probe.run(net, &xs, &targets, true)?;
        for (slot, &b) in active.iter().enumerate() {
            let g = &probe.grad[slot * d..(slot + 1) * d];
            for (x, &gi) in cur[b * d..(b + 1) * d].iter_mut().zip(g) {
                *x = project(*x + step * sign(gi), lo, hi);
            }
        }
        xs.clear();
        for &b in &active {
            xs.extend_from_slice(&cur[b * d..(b + 1) * d]);
        }
        probe.run(net, &xs, &targets, false)?;
        for (slot, &b) in active.iter().enumerate() {
            if probe.pred[slot] != labels[b] {
                flipped[b] = true;
                done[b] = true;
            }
        }
        active.retain(|&b| !done[b]);
        observe(t, &flipped);
    }
    Ok(cur)
}

fn single_label(y: &[f64]) -> Result<usize> {
    predict(y)
}

/// Fast gradient sign method on one input: `clamp(x + eps sign(dl/dx))`.
pub fn fgsm(net: &Network, x: &[f64], y: &[f64], spec: &AttackSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if spec.family != AttackFamily::Fgsm {
        return Err(Error::Param("fgsm called with a non-FGSM spec".into()));
    }
    check_len("attack input", net.input_dim(), x.len())?;
    check_len("attack target", net.classes(), y.len())?;
    let mut probe = Probe::default();
    let prep = direct(net, x, y, spec, &mut probe)?;
    fgsm_core(net, x, &prep, spec, &mut probe)
}

/// Targets taken verbatim from `y` for the ascend objective; the runner-up
/// objective reads the label as `argmax y`.
fn direct(
    net: &Network,
    x: &[f64],
    y: &[f64],
    spec: &AttackSpec,
    probe: &mut Probe,
) -> Result<Prepared> {
    match spec.objective() {
        AttackObjective::Ascend => {
            probe.run(net, x, y, false)?;
            Ok(Prepared {
                targets: y.to_vec(),
                direction: 1.0,
                clean_pred: probe.pred.clone(),
            })
        }
        AttackObjective::RunnerUp => prepare(
            net,
            x,
            &[single_label(y)?],
            AttackObjective::RunnerUp,
            probe,
        ),
    }
}

/// PGD on one input. The random start uses stream item 0 of `spec.seed`.
pub fn pgd(net: &Network, x: &[f64], y: &[f64], spec: &AttackSpec) -> Result<Vec<f64>> {
    Ok(pgd_traced(net, x, y, spec)?.adv)
}

/// PGD result with the loss of every iterate.
#[derive(Debug, Clone, PartialEq)]
pub struct PgdTrace {
    pub adv: Vec<f64>,
    /// Loss after each step, in order.
    pub losses: Vec<f64>,
    /// Loss of the returned iterate.
    pub best_loss: f64,
}

pub fn pgd_traced(net: &Network, x: &[f64], y: &[f64], spec: &AttackSpec) -> Result<PgdTrace> {
    spec.validate()?;
    if spec.family != AttackFamily::Pgd {
        return Err(Error::Param("pgd called with a non-PGD spec".into()));
    }
    check_len("attack input", net.input_dim(), x.len())?;
    check_len("attack target", net.classes(), y.len())?;
    let mut probe = Probe::default();
    let prep = direct(net, x, y, spec, &mut probe)?;
    let mut losses = Vec::new();
    let adv = pgd_core(
        net,
        x,
        &[0],
        &prep,
        spec,
        &mut probe,
        |_, _| {},
        Some(&mut losses),
    )?;
    let losses = losses.pop().unwrap_or_default();
    let best_loss = crate::model::mse_loss(&net.forward(&adv)?.yhat, y)?;
    Ok(PgdTrace {
        adv,
        losses,
        best_loss,
    })
}

/// PGD with an infinite budget: only the domain clamp applies.
pub fn unbounded_attack(
    net: &Network,
    x: &[f64],
    y: &[f64],
    steps: usize,
    step_size: f64,
) -> Result<Vec<f64>> {
    let spec = AttackSpec::unbounded(steps, step_size);
    spec.validate()?;
    check_len("attack input", net.input_dim(), x.len())?;
    check_len("attack target", net.classes(), y.len())?;
    let label = single_label(y)?;
    let mut probe = Probe::default();
    let prep = prepare(net, x, &[label], spec.objective(), &mut probe)?;
    unbounded_core(net, x, &[label], &prep, &spec, &mut probe, |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GranuleLayer, NetworkConfig, PurkinjeLayer};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_net(seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, m, k, c) = (12, 30, 4, 3);
        let cfg = NetworkConfig::new(d, m, k, c).with_seed(seed);
        let granule = GranuleLayer::random(d, m, k, seed).unwrap();
        let w: Vec<f64> = (0..m * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let purkinje = PurkinjeLayer::from_parts(m, c, w, vec![0.0; m], 0.9, false).unwrap();
        Network::from_parts(cfg, granule, purkinje).unwrap()
    }

    fn random_point(seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        (0..12).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    fn linf(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_budget_fgsm_is_identity() {
        let net = random_net(1);
        let x = random_point(1);
        let y = one_hot(0, 3).unwrap();
        assert_eq!(fgsm(&net, &x, &y, &AttackSpec::fgsm(0.0)).unwrap(), x);
    }

    #[test]
    fn single_step_pgd_is_fgsm() {
        for seed in 0..20 {
            let net = random_net(seed);
            let x = random_point(seed);
            let y = one_hot(seed as usize % 3, 3).unwrap();
            let eps = 0.05 + 0.01 * seed as f64;
            let f = fgsm(&net, &x, &y, &AttackSpec::fgsm(eps)).unwrap();
            let spec = AttackSpec {
                steps: 1,
                step_size: eps,
                random_start: false,
                ..AttackSpec::pgd(eps)
            };
            let p = pgd(&net, &x, &y, &spec).unwrap();
            assert_eq!(
                f.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                p.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn outputs_respect_budget_and_domain() {
        for seed in 0..20 {
            let net = random_net(seed);
            let x = random_point(seed);
            let y = one_hot(1, 3).unwrap();
            for eps in [0.0, 0.1, 0.3] {
                let f = fgsm(&net, &x, &y, &AttackSpec::fgsm(eps)).unwrap();
                let p = pgd(&net, &x, &y, &AttackSpec::pgd(eps).with_seed(seed)).unwrap();
                for adv in [&f, &p] {
                    assert!(linf(adv, &x) <= eps + 1e-12);
                    assert!(adv.iter().all(|&v| (0.0..=1.0).contains(&v)));
                }
            }
        }
    }

    #[test]
    fn returned_iterate_has_the_maximal_loss() {
        for seed in 0..10 {
            let net = random_net(seed);
            let x = random_point(seed);
            let y = one_hot(2, 3).unwrap();
            let trace = pgd_traced(&net, &x, &y, &AttackSpec::pgd(0.2).with_seed(seed)).unwrap();
            assert_eq!(trace.losses.len(), 40);
            let max = trace
                .losses
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(trace.best_loss, max);
        }
    }

    #[test]
    fn zero_readout_leaves_inputs_unchanged() {
        let net = Network::new(NetworkConfig::new(12, 30, 4, 3), 0.9).unwrap();
        let x = random_point(3);
        let y = one_hot(0, 3).unwrap();
        assert_eq!(fgsm(&net, &x, &y, &AttackSpec::fgsm(0.3)).unwrap(), x);
        assert_eq!(pgd(&net, &x, &y, &AttackSpec::pgd(0.3)).unwrap(), x);
        assert_eq!(unbounded_attack(&net, &x, &y, 50, 0.01).unwrap(), x);
    }

    #[test]
    fn unbounded_rejects_zero_steps() {
        let net = random_net(0);
        let x = random_point(0);
        let y = one_hot(0, 3).unwrap();
        assert!(matches!(
            unbounded_attack(&net, &x, &y, 0, 0.01),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn family_mismatch_is_rejected() {
        let net = random_net(0);
        let x = random_point(0);
        let y = one_hot(0, 3).unwrap();
        assert!(fgsm(&net, &x, &y, &AttackSpec::pgd(0.1)).is_err());
        assert!(pgd(&net, &x, &y, &AttackSpec::fgsm(0.1)).is_err());
    }
}
