//! Closed-form input gradients of the squared-error loss.
//!
//! With `e = yhat - y` and `v = W e`, the gradient with respect to input `i`
//! is `sum_j J_ij [pre_j > 0] v_j`. The ReLU subgradient at zero is zero.

use alloc::vec::Vec;

use crate::error::{check_len, Result};
use crate::model::{predict, BatchTrace, Network};

/// Reusable buffers for batched loss/gradient evaluation.
#[derive(Debug, Default)]
pub(crate) struct Probe {
    trace: BatchTrace,
    err: Vec<f64>,
    signal: Vec<f64>,
    pull: Vec<f64>,
    pub grad: Vec<f64>,
    pub loss: Vec<f64>,
    pub pred: Vec<usize>,
}

impl Probe {
    /// Outputs of the last `run`, row-major.
    pub fn yhat(&self) -> &[f64] {
        &self.trace.yhat
    }

    /// Evaluates loss and prediction for every row of `xs` against the
    /// matching row of `targets`; computes input gradients when `want_grad`.
    pub fn run(
        &mut self,
        net: &Network,
        xs: &[f64],
        targets: &[f64],
        want_grad: bool,
    ) -> Result<()> {
        let (d, m, c) = (net.config().d, net.config().m, net.config().c);
        let batch = xs.len() / d;
        check_len("attack batch", batch * d, xs.len())?;
        check_len("attack targets", batch * c, targets.len())?;
        net.forward_batch(xs, &mut self.trace)?;

        self.err.resize(batch * c, 0.0);
        self.loss.clear();
        self.pred.clear();
        for b in 0..batch {
            let yhat = &self.trace.yhat[b * c..(b + 1) * c];
            let e = &mut self.err[b * c..(b + 1) * c];
            let mut loss = 0.0;
            for ((ek, &yk), &tk) in e.iter_mut().zip(yhat).zip(&targets[b * c..(b + 1) * c]) {
                *ek = yk - tk;
                loss += *ek * *ek;
            }
            self.loss.push(0.5 * loss);
            self.pred.push(predict(yhat)?);
        }
        if !want_grad {
            return Ok(());
        }

        self.signal.resize(batch * m, 0.0);
        self.pull.resize(m, 0.0);
        for b in 0..batch {
            net.purkinje()
                .pull_back(&self.err[b * c..(b + 1) * c], &mut self.pull);
            let h = &self.trace.h[b * m..(b + 1) * m];
            let s = &mut self.signal[b * m..(b + 1) * m];
            for ((sj, &hj), &vj) in s.iter_mut().zip(h).zip(&self.pull) {
                // h > 0 exactly when the pre-activation is positive.
                *sj = if hj > 0.0 { vj } else { 0.0 };
            }
        }
        self.grad.resize(batch * d, 0.0);
        net.granule().backward_batch(&self.signal, &mut self.grad)
    }
}

/// `dl/dx` for one input against target vector `y` (usually one-hot).
/// `mu` is treated as a constant.
pub fn input_gradient(net: &Network, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    check_len("attack input", net.input_dim(), x.len())?;
    check_len("attack target", net.classes(), y.len())?;
    let mut probe = Probe::default();
    probe.run(net, x, y, true)?;
    Ok(core::mem::take(&mut probe.grad))
}

/// Loss and gradient together, for callers that need both.
pub fn loss_and_gradient(net: &Network, x: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len("attack input", net.input_dim(), x.len())?;
    check_len("attack target", net.classes(), y.len())?;
    let mut probe = Probe::default();
    probe.run(net, x, y, true)?;
    Ok((probe.loss[0], core::mem::take(&mut probe.grad)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::one_hot;
    use crate::model::{GranuleLayer, NetworkConfig, PurkinjeLayer};
    use alloc::vec;

    #[test]
    fn perfect_prediction_has_zero_gradient() {
        let cfg = NetworkConfig::new(4, 6, 2, 3);
        let net = Network::new(cfg, 0.9).unwrap();
        // Zero readout predicts the zero vector; target it exactly.
        let g = input_gradient(&net, &[0.2, 0.4, 0.6, 0.8], &[0.0; 3]).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_two_by_two_by_hand() {
        // J (cell-major): cell 0 = [1, 2], cell 1 = [0.5, -1]; W = [[3], [2]].
        let granule =
            GranuleLayer::from_parts(2, 2, 2, vec![0, 1, 0, 1], vec![1.0, 2.0, 0.5, -1.0]).unwrap();
        let purkinje =
            PurkinjeLayer::from_parts(2, 1, vec![3.0, 2.0], vec![0.0; 2], 0.9, false).unwrap();
        // A single output is below the network's class minimum, so the
        // chain rule is checked through the layers directly.
        let x = [1.0, 0.1];
        let h = granule.forward(&x).unwrap();
        assert_eq!(h, vec![1.2, 0.4]);
        let (_, yhat) = purkinje.forward(&h).unwrap();
        let e = yhat[0] - 1.0; // 3*1.2 + 2*0.4 - 1 = 3.4
        assert!((e - 3.4).abs() < 1e-12);
        let mut g = vec![0.0; 2];
        granule.backward_batch(&[3.0 * e, 2.0 * e], &mut g).unwrap();
        // g = J (W e) = [1*3e + 0.5*2e, 2*3e - 1*2e] = [4e, 4e]
        assert!((g[0] - 4.0 * e).abs() < 1e-12);
        assert!((g[1] - 4.0 * e).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        for seed in 0..20 {
            let cfg = NetworkConfig::new(20, 40, 5, 10).with_seed(seed);
            let granule = GranuleLayer::random(20, 40, 5, seed).unwrap();
            let w: Vec<f64> = (0..400).map(|_| rng.random_range(-1.0..1.0)).collect();
            let purkinje = PurkinjeLayer::from_parts(40, 10, w, vec![0.0; 40], 0.9, false).unwrap();
            let net = Network::from_parts(cfg, granule, purkinje).unwrap();
            let x: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..1.0)).collect();
            let y = one_hot(seed as usize % 10, 10).unwrap();
            let h = 1e-6;
            // Skip points whose pre-activations sit near a kink.
            let near_kink = (0..40).any(|j| {
                let (idx, wt) = net.granule().cell(j);
                let pre: f64 = idx.iter().zip(wt).map(|(&i, &w)| w * x[i as usize]).sum();
                pre.abs() < 1e-4
            });
            if near_kink {
                continue;
            }
            let g = input_gradient(&net, &x, &y).unwrap();
            for i in 0..20 {
                let mut up = x.clone();
                up[i] += h;
                let mut down = x.clone();
                down[i] -= h;
                let fd = (net.loss(&up, &y).unwrap() - net.loss(&down, &y).unwrap()) / (2.0 * h);
                let scale = g[i].abs().max(fd.abs()).max(1e-3);
                assert!(
                    (fd - g[i]).abs() / scale < 1e-6,
                    "seed {seed} input {i}: {fd} vs {}",
                    g[i]
                );
            }
            checked += 1;
        }
        assert!(checked >= 10);
    }
}
