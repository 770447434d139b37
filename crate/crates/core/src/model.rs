//! Granule and Purkinje layers and the forward pass.
//!
//! `h = relu(Jᵀx)`, `z = h - mu`, `yhat = Wᵀz`, loss `½‖yhat - y‖²`.
//!
//! Every granule cell accumulates its pre-activation in ascending input-index
//! order at `f64`, whichever kernel runs it, so the single-instance and the
//! batched paths agree bit for bit.

use alloc::{format, string::String, vec, vec::Vec};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::kernel::Panels;
use crate::rng::{substream, Domain};

/// Mossy fibers per Purkinje cell in the rat cerebellum.
pub const ANATOMICAL_INPUTS: usize = 7_000;
/// Granule cells per Purkinje cell.
pub const ANATOMICAL_GRANULE_CELLS: usize = 200_000;
/// Mossy-fiber inputs per granule cell.
pub const ANATOMICAL_IN_DEGREE: usize = 4;

pub const MNIST_INPUTS: usize = 784;
pub const CIFAR_FEATURES: usize = 4_096;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct NetworkConfig {
    /// Input dimension (mossy fibers).
    pub d: usize,
    /// Granule cells.
    pub m: usize,
    /// Inputs per granule cell.
    pub k: usize,
    /// Classes (Purkinje outputs).
    pub c: usize,
    #[cfg_attr(feature = "serde", serde(default))]
    pub ltd_enabled: bool,
    #[cfg_attr(feature = "serde", serde(default))]
    pub seed: u64,
    #[cfg_attr(
        feature = "serde",
        serde(default, skip_serializing_if = "Option::is_none")
    )]
    pub preset: Option<String>,
}

impl NetworkConfig {
    pub fn new(d: usize, m: usize, k: usize, c: usize) -> Self {
        Self {
            d,
            m,
            k,
            c,
            ltd_enabled: false,
            seed: 0,
            preset: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_ltd(mut self, enabled: bool) -> Self {
        self.ltd_enabled = enabled;
        self
    }

    /// Named parameter sets.
    ///
    /// | name | d | m | k | LTD |
    /// |---|---|---|---|---|
    /// | `anatomical` | 7000 | 200000 | 4 | on |
    /// | `mnist-cerebellum` | 784 | 200000 | 4 | on |
    /// | `mnist-dense` | 784 | 5970 | 784 | off |
    /// | `cifar-cerebellum` | 4096 | 200000 | 4 | on |
    /// | `cifar-dense` | 4096 | 1166 | 4096 | off |
    /// | `desk-dense` | 784 | 5000 | 784 | off |
    ///
    /// All presets use 10 classes and seed 0.
    pub fn preset(name: &str) -> Option<Self> {
        let (d, m, k, ltd) = match name {
            "anatomical" => (
                ANATOMICAL_INPUTS,
                ANATOMICAL_GRANULE_CELLS,
                ANATOMICAL_IN_DEGREE,
                true,
            ),
            "mnist-cerebellum" => (MNIST_INPUTS, ANATOMICAL_GRANULE_CELLS, 4, true),
            "mnist-dense" => (MNIST_INPUTS, 5_970, MNIST_INPUTS, false),
            "cifar-cerebellum" => (CIFAR_FEATURES, ANATOMICAL_GRANULE_CELLS, 4, true),
            "cifar-dense" => (CIFAR_FEATURES, 1_166, CIFAR_FEATURES, false),
            "desk-dense" => (MNIST_INPUTS, 5_000, MNIST_INPUTS, false),
            _ => return None,
        };
        let mut cfg = Self::new(d, m, k, 10).with_ltd(ltd);
        cfg.preset = Some(name.into());
        Some(cfg)
    }

    pub const PRESETS: &'static [&'static str] = &[
        "anatomical",
        "mnist-cerebellum",
        "mnist-dense",
        "cifar-cerebellum",
        "cifar-dense",
        "desk-dense",
    ];

    pub fn is_dense(&self) -> bool {
        self.k == self.d
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Config("input dimension d must be at least 1".into()));
        }
        if self.k < 1 || self.k > self.d {
            return Err(Error::Config(format!(
                "in-degree k = {} must satisfy 1 <= k <= d = {}",
                self.k, self.d
            )));
        }
        if self.m < 1 {
            return Err(Error::Config("granule count m must be at least 1".into()));
        }
        if self.c < 2 {
            return Err(Error::Config(format!(
                "class count c = {} must be at least 2",
                self.c
            )));
        }
        if self.d > u32::MAX as usize {
            return Err(Error::Config(format!("d = {} exceeds u32 range", self.d)));
        }
        self.m
            .checked_mul(self.k)
            .ok_or_else(|| Error::Config("m * k overflows".into()))?;
        Ok(())
    }
}

/// Fixed sparse random projection, stored per granule cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GranuleLayer {
    d: usize,
    m: usize,
    k: usize,
    /// `m * k` input indices, cell-major, ascending within a cell.
    indices: Vec<u32>,
    /// `m * k` weights aligned with `indices`.
    weights: Vec<f64>,
    by_input: InputMajor,
}

/// Transposed copy used by the batched forward kernel.
#[derive(Debug, Clone, PartialEq)]
enum InputMajor {
    /// `J` (`d x m`) for the forward product and `Jᵀ` for the backward one.
    Dense {
        forward: Panels<FWD_LANES>,
        backward: Panels<BWD_LANES>,
    },
    /// CSR over inputs; cells ascending within a row.
    Sparse {
        offsets: Vec<usize>,
        cells: Vec<u32>,
        weights: Vec<f64>,
    },
}

// Kernel shapes. Single-row tiles skip zero inputs best; wider tiles
// reuse weights better once most inputs are nonzero.
const FWD_LANES: usize = 16;
const FWD_TILE_SPARSE: usize = 1;
const FWD_TILE_DENSE: usize = 4;
const BWD_LANES: usize = 16;
const BWD_TILE: usize = 4;

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

impl GranuleLayer {
    /// Random connectivity: each cell draws `k` distinct inputs uniformly
    /// (partial Fisher-Yates) and then `k` weights from `N(0, 1/k)`, all from
    /// that cell's own substream of `seed`.
    pub fn random(d: usize, m: usize, k: usize, seed: u64) -> Result<Self> {
        NetworkConfig::new(d, m, k, 2).validate()?;
        let scale = 1.0 / libm::sqrt(k as f64);
        let mut pool: Vec<u32> = (0..d as u32).collect();
        let mut swaps = vec![0usize; k];
        let mut indices = Vec::with_capacity(m * k);
        let mut weights = Vec::with_capacity(m * k);

        for cell in 0..m {
            let mut rng = substream(seed, Domain::Construction, cell as u64);
            for (t, slot) in swaps.iter_mut().enumerate() {
                let r = rng.random_range(t as u32..d as u32) as usize;
                pool.swap(t, r);
                *slot = r;
            }
            let start = indices.len();
            indices.extend_from_slice(&pool[..k]);
            indices[start..].sort_unstable();
            for (t, &r) in swaps.iter().enumerate().rev() {
                pool.swap(t, r);
            }
            for _ in 0..k {
                let z: f64 = StandardNormal.sample(&mut rng);
                weights.push(z * scale);
            }
        }
        Ok(Self::assemble(d, m, k, indices, weights))
    }

    /// Rebuilds a layer from stored arrays, checking every structural invariant.
    pub fn from_parts(
        d: usize,
        m: usize,
        k: usize,
        indices: Vec<u32>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        NetworkConfig::new(d, m, k, 2).validate()?;
        check_len("granule indices", m * k, indices.len())?;
        check_len("granule weights", m * k, weights.len())?;
        for (cell, idx) in indices.chunks_exact(k).enumerate() {
            if idx.windows(2).any(|p| p[0] >= p[1]) {
                return Err(Error::Config(format!(
                    "cell {cell}: indices must be strictly ascending"
                )));
            }
            if let Some(&last) = idx.last() {
                if last as usize >= d {
                    return Err(Error::Config(format!(
                        "cell {cell}: index {last} out of range for d = {d}"
                    )));
                }
            }
        }
        if let Some(pos) = weights.iter().position(|w| !w.is_finite()) {
            return Err(Error::Config(format!("granule weight {pos} is not finite")));
        }
        Ok(Self::assemble(d, m, k, indices, weights))
    }

    fn assemble(d: usize, m: usize, k: usize, indices: Vec<u32>, weights: Vec<f64>) -> Self {
        let by_input = if k == d {
            InputMajor::Dense {
                forward: Panels::pack(d, m, |i, j| weights[j * d + i]),
                backward: Panels::pack(m, d, |j, i| weights[j * d + i]),
            }
        } else {
            let mut offsets = vec![0usize; d + 1];
            for &i in &indices {
                offsets[i as usize + 1] += 1;
            }
            for i in 0..d {
                offsets[i + 1] += offsets[i];
            }
            let mut fill = offsets.clone();
            let mut cells = vec![0u32; m * k];
            let mut row_weights = vec![0.0; m * k];
            // Cells are visited in ascending order, so rows stay sorted.
            for cell in 0..m {
                for t in cell * k..(cell + 1) * k {
                    let i = indices[t] as usize;
                    cells[fill[i]] = cell as u32;
                    row_weights[fill[i]] = weights[t];
                    fill[i] += 1;
                }
            }
            InputMajor::Sparse {
                offsets,
                cells,
                weights: row_weights,
            }
        };
        Self {
            d,
            m,
            k,
            indices,
            weights,
            by_input,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.d
    }

    pub fn cells(&self) -> usize {
        self.m
    }

    pub fn in_degree(&self) -> usize {
        self.k
    }

    pub fn is_dense(&self) -> bool {
        self.k == self.d
    }

    /// Input indices and weights of one granule cell.
    pub fn cell(&self, j: usize) -> (&[u32], &[f64]) {
        let span = j * self.k..(j + 1) * self.k;
        (&self.indices[span.clone()], &self.weights[span])
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `h_j = relu(sum_i J_ij x_i)` for one input.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("granule input", self.d, x.len())?;
        let mut h = vec![0.0; self.m];
        for (j, out) in h.iter_mut().enumerate() {
            let (idx, w) = self.cell(j);
            let mut acc = 0.0;
            for (&i, &wt) in idx.iter().zip(w) {
                acc += wt * x[i as usize];
            }
            *out = relu(acc);
        }
        Ok(h)
    }

    /// Batched forward over `xs` (`B x d`, row-major) into `hs` (`B x m`).
    ///
    /// Walks inputs in ascending order and may skip zero inputs. A skipped term
    /// is a signed zero, which never changes a running sum that started at
    /// `+0.0`, so results match [`forward`](Self::forward) exactly.
    pub fn forward_batch(&self, xs: &[f64], hs: &mut [f64]) -> Result<()> {
        if self.d == 0 || xs.len() % self.d != 0 {
            return Err(Error::Shape {
                what: "granule batch input",
                expected: self.d,
                actual: xs.len(),
            });
        }
        let batch = xs.len() / self.d;
        check_len("granule batch output", batch * self.m, hs.len())?;
        let (d, m) = (self.d, self.m);
        hs.fill(0.0);
        match &self.by_input {
            InputMajor::Dense { forward, .. } => {
                let zeros = xs.iter().filter(|&&v| v == 0.0).count();
                if 2 * zeros > xs.len() {
                    forward.product::<FWD_TILE_SPARSE>(xs, hs)
                } else {
                    forward.product::<FWD_TILE_DENSE>(xs, hs)
                }
            }
            InputMajor::Sparse {
                offsets,
                cells,
                weights,
            } => {
                for b in 0..batch {
                    let x = &xs[b * d..(b + 1) * d];
                    let out = &mut hs[b * m..(b + 1) * m];
                    for (i, &xv) in x.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let row = offsets[i]..offsets[i + 1];
                        for (&cell, &w) in cells[row.clone()].iter().zip(&weights[row]) {
                            out[cell as usize] += w * xv;
                        }
                    }
                }
            }
        }
        for h in hs.iter_mut() {
            *h = relu(*h);
        }
        Ok(())
    }

    /// Pulls per-cell signals back to the inputs: `g_b = sum_j s_bj J_j`,
    /// accumulated over cells in ascending order. Cells with a zero signal
    /// are skipped. `s` is `B x m`, `gs` is `B x d`.
    pub fn backward_batch(&self, s: &[f64], gs: &mut [f64]) -> Result<()> {
        if s.len() % self.m != 0 {
            return Err(Error::Shape {
                what: "granule batch signal",
                expected: self.m,
                actual: s.len(),
            });
        }
        let batch = s.len() / self.m;
        check_len("granule batch gradient", batch * self.d, gs.len())?;
        let (d, m) = (self.d, self.m);
        gs.fill(0.0);
        if let InputMajor::Dense { backward, .. } = &self.by_input {
            backward.product::<BWD_TILE>(s, gs);
        } else {
            for b in 0..batch {
                let g = &mut gs[b * d..(b + 1) * d];
                for (j, &sv) in s[b * m..(b + 1) * m].iter().enumerate() {
                    if sv == 0.0 {
                        continue;
                    }
                    let (idx, w) = self.cell(j);
                    for (&i, &wt) in idx.iter().zip(w) {
                        g[i as usize] += wt * sv;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Trainable readout `W` (`m x c`, row-major) with the LTD centering state.
#[derive(Debug, Clone, PartialEq)]
pub struct PurkinjeLayer {
    m: usize,
    c: usize,
    w: Vec<f64>,
    mu: Vec<f64>,
    beta: f64,
    ltd_enabled: bool,
}

impl PurkinjeLayer {
    /// Zero readout and zero centering.
    pub fn new(m: usize, c: usize, beta: f64, ltd_enabled: bool) -> Result<Self> {
        Self::from_parts(m, c, vec![0.0; m * c], vec![0.0; m], beta, ltd_enabled)
    }

    pub fn from_parts(
        m: usize,
        c: usize,
        w: Vec<f64>,
        mu: Vec<f64>,
        beta: f64,
        ltd_enabled: bool,
    ) -> Result<Self> {
        check_len("readout weights", m * c, w.len())?;
        check_len("LTD mean", m, mu.len())?;
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::Config(format!(
                "LTD beta = {beta} must lie in [0, 1)"
            )));
        }
        if let Some(pos) = w.iter().position(|v| !v.is_finite()) {
            return Err(Error::Config(format!("readout weight {pos} is not finite")));
        }
        if !ltd_enabled && mu.iter().any(|&v| v != 0.0) {
            return Err(Error::Config("LTD disabled but mean is nonzero".into()));
        }
        Ok(Self {
            m,
            c,
            w,
            mu,
            beta,
            ltd_enabled,
        })
    }

    pub fn cells(&self) -> usize {
        self.m
    }

    pub fn classes(&self) -> usize {
        self.c
    }

    pub fn weights(&self) -> &[f64] {
        &self.w
    }

    pub(crate) fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.w
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn ltd_enabled(&self) -> bool {
        self.ltd_enabled
    }

    /// Moves `mu` toward the batch-mean response: `mu = beta mu + (1 - beta) h_mean`.
    pub fn apply_ltd(&mut self, h_mean: &[f64]) -> Result<()> {
        if !self.ltd_enabled {
            return Err(Error::State("LTD update on a layer with LTD disabled"));
        }
        check_len("batch-mean response", self.m, h_mean.len())?;
        let keep = self.beta;
        let take = 1.0 - self.beta;
        for (mu, &h) in self.mu.iter_mut().zip(h_mean) {
            *mu = keep * *mu + take * h;
        }
        Ok(())
    }

    /// Returns `(z, yhat)` with `z = h - mu` and `yhat = Wᵀz`. `mu` is only read.
    pub fn forward(&self, h: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len("Purkinje input", self.m, h.len())?;
        let z: Vec<f64> = h.iter().zip(&self.mu).map(|(h, mu)| h - mu).collect();
        let mut yhat = vec![0.0; self.c];
        self.readout(&z, &mut yhat);
        Ok((z, yhat))
    }

    /// `yhat = Wᵀz`, summing cells in ascending order.
    pub(crate) fn readout(&self, z: &[f64], yhat: &mut [f64]) {
        yhat.fill(0.0);
        for (zj, row) in z.iter().zip(self.w.chunks_exact(self.c)) {
            if *zj == 0.0 {
                continue;
            }
            for (y, &w) in yhat.iter_mut().zip(row) {
                *y += w * zj;
            }
        }
    }

    /// `v = W e`.
    pub(crate) fn pull_back(&self, e: &[f64], v: &mut [f64]) {
        for (vj, row) in v.iter_mut().zip(self.w.chunks_exact(self.c)) {
            let mut acc = 0.0;
            for (&w, &ek) in row.iter().zip(e) {
                acc += w * ek;
            }
            *vj = acc;
        }
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// Granule responses, nonnegative.
    pub h: Vec<f64>,
    /// Centered responses `h - mu`.
    pub z: Vec<f64>,
    pub yhat: Vec<f64>,
}

/// Batched forward results, row-major.
#[derive(Debug, Clone, Default)]
pub(crate) struct BatchTrace {
    pub h: Vec<f64>,
    pub z: Vec<f64>,
    pub yhat: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    granule: GranuleLayer,
    purkinje: PurkinjeLayer,
}

impl Network {
    /// Fresh network: random granule layer from `config.seed`, zero readout.
    pub fn new(config: NetworkConfig, beta: f64) -> Result<Self> {
        config.validate()?;
        let granule = GranuleLayer::random(config.d, config.m, config.k, config.seed)?;
        let purkinje = PurkinjeLayer::new(config.m, config.c, beta, config.ltd_enabled)?;
        Ok(Self {
            config,
            granule,
            purkinje,
        })
    }

    pub fn from_parts(
        config: NetworkConfig,
        granule: GranuleLayer,
        purkinje: PurkinjeLayer,
    ) -> Result<Self> {
        config.validate()?;
        let dims_match = granule.d == config.d
            && granule.m == config.m
            && granule.k == config.k
            && purkinje.m == config.m
            && purkinje.c == config.c
            && purkinje.ltd_enabled == config.ltd_enabled;
        if !dims_match {
            return Err(Error::Config(
                "layer dimensions disagree with the network configuration".into(),
            ));
        }
        Ok(Self {
            config,
            granule,
            purkinje,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn granule(&self) -> &GranuleLayer {
        &self.granule
    }

    pub fn purkinje(&self) -> &PurkinjeLayer {
        &self.purkinje
    }

    pub(crate) fn purkinje_mut(&mut self) -> &mut PurkinjeLayer {
        &mut self.purkinje
    }

    pub fn input_dim(&self) -> usize {
        self.config.d
    }

    pub fn classes(&self) -> usize {
        self.config.c
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        let h = self.granule.forward(x)?;
        let (z, yhat) = self.purkinje.forward(&h)?;
        Ok(ForwardTrace { h, z, yhat })
    }

    /// Loss of the prediction for `x` against target vector `y`.
    pub fn loss(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        mse_loss(&self.forward(x)?.yhat, y)
    }

    pub fn classify(&self, x: &[f64]) -> Result<usize> {
        predict(&self.forward(x)?.yhat)
    }

    /// Forward pass over `B` inputs with the current (frozen) `mu`.
    pub(crate) fn forward_batch(&self, xs: &[f64], out: &mut BatchTrace) -> Result<()> {
        let (d, m, c) = (self.config.d, self.config.m, self.config.c);
        let batch = xs.len() / d;
        out.h.resize(batch * m, 0.0);
        self.granule.forward_batch(xs, &mut out.h)?;
        self.center_and_read(batch, out);
        assert_eq!(out.yhat.len(), batch * c);
        Ok(())
    }

    /// Fills `z` and `yhat` from `h` already present in `out`.
    pub(crate) fn center_and_read(&self, batch: usize, out: &mut BatchTrace) {
        let (m, c) = (self.config.m, self.config.c);
        out.z.resize(batch * m, 0.0);
        out.yhat.resize(batch * c, 0.0);
        let mu = self.purkinje.mu();
        for b in 0..batch {
            let h = &out.h[b * m..(b + 1) * m];
            let z = &mut out.z[b * m..(b + 1) * m];
            for ((zj, &hj), &mj) in z.iter_mut().zip(h).zip(mu) {
                *zj = hj - mj;
            }
            self.purkinje.readout(z, &mut out.yhat[b * c..(b + 1) * c]);
        }
    }
}

/// `½ Σ (yhat_j - y_j)²`.
pub fn mse_loss(yhat: &[f64], y: &[f64]) -> Result<f64> {
    check_len("loss target", yhat.len(), y.len())?;
    let mut acc = 0.0;
    for (a, b) in yhat.iter().zip(y) {
        let e = a - b;
        acc += e * e;
    }
    Ok(0.5 * acc)
}

/// Index of the largest output; the lowest index wins ties.
pub fn predict(yhat: &[f64]) -> Result<usize> {
    if yhat.is_empty() {
        return Err(Error::Shape {
            what: "prediction vector",
            expected: 1,
            actual: 0,
        });
    }
    let mut best = 0;
    for (j, &v) in yhat.iter().enumerate().skip(1) {
        if v > yhat[best] {
            best = j;
        }
    }
    Ok(best)
}
