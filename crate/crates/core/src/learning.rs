//! Purkinje learning rule, LTD centering, RMSprop, and the training loop.
//!
//! Per batch: forward every instance, fold the batch-mean granule response
//! into `mu` (LTD on), center, read out, average the outer-product
//! gradients `z eᵀ` over the batch, then take one RMSprop step.

use alloc::{format, vec, vec::Vec};

use rand::seq::SliceRandom;
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledDataset;
use crate::error::{check_len, Error, Result};
use crate::model::{predict, BatchTrace, Network, NetworkConfig};
use crate::rng::{substream, Domain};

/// Granule responses buffered ahead during training, in values.
const RESPONSE_BUFFER: usize = 1 << 24;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Hyperparams {
    pub batch_size: usize,
    pub epochs: usize,
    /// The learning rate is `lr_numerator / m`.
    pub lr_numerator: f64,
    /// RMSprop decay `rho`.
    pub optimizer_decay: f64,
    pub ltd_beta: f64,
    pub seeds: Vec<u64>,
    /// RMSprop denominator offset.
    pub rms_epsilon: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            batch_size: 10,
            epochs: 10,
            lr_numerator: 0.5,
            optimizer_decay: 0.99,
            ltd_beta: 0.99,
            seeds: vec![0, 123],
            rms_epsilon: 1e-8,
        }
    }
}

impl Hyperparams {
    pub fn learning_rate(&self, m: usize) -> f64 {
        self.lr_numerator / m as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.lr_numerator > 0.0 && self.lr_numerator.is_finite()) {
            return Err(Error::Config(
                "learning rate numerator must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.optimizer_decay) {
            return Err(Error::Config(format!(
                "optimizer decay {} must lie in [0, 1)",
                self.optimizer_decay
            )));
        }
        if !(0.0..1.0).contains(&self.ltd_beta) {
            return Err(Error::Config(format!(
                "LTD beta {} must lie in [0, 1)",
                self.ltd_beta
            )));
        }
        if !(self.rms_epsilon >= 0.0) {
            return Err(Error::Config("RMSprop epsilon must be nonnegative".into()));
        }
        Ok(())
    }
}

/// RMSprop second-moment accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub second_moment: Vec<f64>,
    pub epsilon: f64,
    /// Steps taken, reported in diagnostics.
    pub steps: u64,
}

impl OptimizerState {
    pub fn new(len: usize, epsilon: f64) -> Self {
        Self {
            second_moment: vec![0.0; len],
            epsilon,
            steps: 0,
        }
    }
}

/// `e = yhat - y`, the climbing-fiber error.
pub fn error_vector(yhat: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    check_len("error target", yhat.len(), y.len())?;
    Ok(yhat.iter().zip(y).map(|(a, b)| a - b).collect())
}

/// `dl/dW` for one instance: `G[j][k] = z_j e_k`, row-major `m x c`.
pub fn purkinje_gradient(e: &[f64], z: &[f64]) -> Vec<f64> {
    let mut g = Vec::with_capacity(z.len() * e.len());
    for &zj in z {
        g.extend(e.iter().map(|&ek| zj * ek));
    }
    g
}

/// `beta mu + (1 - beta) h_mean`.
pub fn ltd_update(mu: &[f64], h_mean: &[f64], beta: f64) -> Result<Vec<f64>> {
    check_len("batch-mean response", mu.len(), h_mean.len())?;
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::Config(format!(
            "LTD beta = {beta} must lie in [0, 1)"
        )));
    }
    Ok(mu
        .iter()
        .zip(h_mean)
        .map(|(&m, &h)| beta * m + (1.0 - beta) * h)
        .collect())
}

/// `S = rho S + (1 - rho) G²`, `W -= lr G / (sqrt(S) + eps)`, elementwise.
///
/// Fails before touching anything if `G` holds a non-finite entry.
pub fn rmsprop_step(
    state: &mut OptimizerState,
    w: &mut [f64],
    g: &[f64],
    lr: f64,
    decay: f64,
) -> Result<()> {
    check_len("gradient", w.len(), g.len())?;
    check_len("optimizer state", w.len(), state.second_moment.len())?;
    if let Some(index) = g.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "gradient",
            step: state.steps,
            index,
            value: g[index],
        });
    }
    let fresh = 1.0 - decay;
    for ((s, wi), &gi) in state.second_moment.iter_mut().zip(w.iter_mut()).zip(g) {
        *s = decay * *s + fresh * (gi * gi);
        *wi -= lr * gi / (libm::sqrt(*s) + state.epsilon);
    }
    state.steps += 1;
    if let Some(index) = w.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "readout weight",
            step: state.steps,
            index,
            value: w[index],
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct TrainReport {
    /// Mean per-instance loss over each epoch, measured before each update.
    pub epoch_loss: Vec<f64>,
    /// Clean accuracy on the held-out set after each epoch, when one is given.
    pub test_accuracy: Vec<Option<f64>>,
    /// Wall-clock seconds per epoch, from the caller-supplied clock.
    pub epoch_seconds: Vec<f64>,
    pub steps: u64,
    pub final_mu: Vec<f64>,
}

/// Builds a network from `cfg` and trains its readout.
///
/// `clock` returns seconds from any fixed origin; pass `&mut || 0.0` when
/// timing does not matter. Results are a pure function of the inputs.
pub fn train(
    cfg: &NetworkConfig,
    hp: &Hyperparams,
    data: &LabeledDataset,
    test: Option<&LabeledDataset>,
    clock: &mut dyn FnMut() -> f64,
) -> Result<(Network, TrainReport)> {
    hp.validate()?;
    cfg.validate()?;
    for (name, set) in [("training", Some(data)), ("test", test)] {
        let Some(set) = set else { continue };
        if set.dim() != cfg.d || set.classes() != cfg.c {
            return Err(Error::Data(format!(
                "{name} data has d = {}, c = {}; network expects d = {}, c = {}",
                set.dim(),
                set.classes(),
                cfg.d,
                cfg.c
            )));
        }
    }

    let mut net = Network::new(cfg.clone(), hp.ltd_beta)?;
    let (d, m, c) = (cfg.d, cfg.m, cfg.c);
    let n = data.len();
    let lr = hp.learning_rate(m);
    let mut opt = OptimizerState::new(m * c, hp.rms_epsilon);
    let mut report = TrainReport {
        epoch_loss: Vec::with_capacity(hp.epochs),
        test_accuracy: Vec::with_capacity(hp.epochs),
        epoch_seconds: Vec::with_capacity(hp.epochs),
        steps: 0,
        final_mu: Vec::new(),
    };

    let mut order: Vec<usize> = (0..n).collect();
    // Granule responses do not depend on training state, so they are
    // computed ahead for several mini-batches at once (bounded memory).
    let ahead = (RESPONSE_BUFFER / (m * hp.batch_size)).clamp(1, 100) * hp.batch_size;
    let mut xs = Vec::with_capacity(ahead * d);
    let mut responses = vec![0.0; ahead * m];
    let mut trace = BatchTrace::default();
    let mut h_mean = vec![0.0; m];
    let mut err = vec![0.0; hp.batch_size * c];
    let mut grad = vec![0.0; m * c];

    for epoch in 0..hp.epochs {
        let started = clock();
        let mut rng = substream(cfg.seed, Domain::Shuffle, epoch as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;

        for block_order in order.chunks(ahead) {
            xs.clear();
            for &i in block_order {
                xs.extend_from_slice(data.input(i));
            }
            let filled = &mut responses[..block_order.len() * m];
            net.granule().forward_batch(&xs, filled)?;
            for (offset, batch) in block_order.chunks(hp.batch_size).enumerate() {
                let size = batch.len();
                let start = offset * hp.batch_size * m;
                trace.h.clear();
                trace
                    .h
                    .extend_from_slice(&responses[start..start + size * m]);

                if cfg.ltd_enabled {
                    h_mean.fill(0.0);
                    for h in trace.h.chunks_exact(m) {
                        for (acc, &v) in h_mean.iter_mut().zip(h) {
                            *acc += v;
                        }
                    }
                    for v in h_mean.iter_mut() {
                        *v /= size as f64;
                    }
                    net.purkinje_mut().apply_ltd(&h_mean)?;
                }
                net.center_and_read(size, &mut trace);

                for (b, &i) in batch.iter().enumerate() {
                    let label = data.label(i);
                    let yhat = &trace.yhat[b * c..(b + 1) * c];
                    let e = &mut err[b * c..(b + 1) * c];
                    let mut loss = 0.0;
                    for (k, (ek, &yk)) in e.iter_mut().zip(yhat).enumerate() {
                        *ek = yk - if k == label { 1.0 } else { 0.0 };
                        loss += *ek * *ek;
                    }
                    loss_sum += 0.5 * loss;
                }

                grad.fill(0.0);
                for b in 0..size {
                    let z = &trace.z[b * m..(b + 1) * m];
                    let e = &err[b * c..(b + 1) * c];
                    for (row, &zj) in grad.chunks_exact_mut(c).zip(z) {
                        if zj == 0.0 {
                            continue;
                        }
                        for (g, &ek) in row.iter_mut().zip(e) {
                            *g += zj * ek;
                        }
                    }
                }
                let scale = size as f64;
                for g in grad.iter_mut() {
                    *g /= scale;
                }
                rmsprop_step(
                    &mut opt,
                    net.purkinje_mut().weights_mut(),
                    &grad,
                    lr,
                    hp.optimizer_decay,
                )?;
            }
        }

        report.epoch_loss.push(loss_sum / n as f64);
        report
            .test_accuracy
            .push(test.map(|t| accuracy(&net, t)).transpose()?);
        report.epoch_seconds.push(clock() - started);
    }
    report.steps = opt.steps;
    report.final_mu = net.purkinje().mu().to_vec();
    Ok((net, report))
}

/// Predicted class of every instance, in dataset order.
pub fn predict_all(net: &Network, data: &LabeledDataset) -> Result<Vec<usize>> {
    const CHUNK: usize = 64;
    if data.dim() != net.input_dim() {
        return Err(Error::Shape {
            what: "dataset dimension",
            expected: net.input_dim(),
            actual: data.dim(),
        });
    }
    let c = net.classes();
    let chunks = crate::par::map_chunks(data.len(), CHUNK, |range| {
        let d = data.dim();
        let xs = &data.inputs()[range.start * d..range.end * d];
        let mut trace = BatchTrace::default();
        net.forward_batch(xs, &mut trace)?;
        trace
            .yhat
            .chunks_exact(c)
            .map(predict)
            .collect::<Result<Vec<_>>>()
    });
    let mut out = Vec::with_capacity(data.len());
    for chunk in chunks {
        out.extend(chunk?);
    }
    Ok(out)
}

/// Fraction of instances classified correctly.
pub fn accuracy(net: &Network, data: &LabeledDataset) -> Result<f64> {
    let preds = predict_all(net, data)?;
    let correct = preds
        .iter()
        .enumerate()
        .filter(|&(i, &p)| p == data.label(i))
        .count();
    Ok(correct as f64 / data.len() as f64)
}
