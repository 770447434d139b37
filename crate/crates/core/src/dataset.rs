//! In-memory labeled data shared by training and attacks.

use alloc::{format, string::String, vec, vec::Vec};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{substream, Domain};

/// `n` inputs of dimension `d` (row-major) with class labels in `[0, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Vec<f64>,
    labels: Vec<u32>,
    d: usize,
    c: usize,
    bounds: (f64, f64),
    provenance: String,
}

impl LabeledDataset {
    pub fn new(
        inputs: Vec<f64>,
        labels: Vec<u32>,
        d: usize,
        c: usize,
        bounds: (f64, f64),
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 || d == 0 {
            return Err(Error::Data("dataset must be nonempty".into()));
        }
        if inputs.len() != n * d {
            return Err(Error::Data(format!(
                "{} input values for {n} labels of dimension {d}",
                inputs.len()
            )));
        }
        let (lo, hi) = bounds;
        if !(lo <= hi) {
            return Err(Error::Data(format!("invalid domain bounds [{lo}, {hi}]")));
        }
        if let Some(pos) = inputs.iter().position(|v| !(lo..=hi).contains(v)) {
            return Err(Error::Data(format!(
                "input value {} at instance {} lies outside [{lo}, {hi}]",
                inputs[pos],
                pos / d
            )));
        }
        if let Some(pos) = labels.iter().position(|&l| l as usize >= c) {
            return Err(Error::Data(format!(
                "label {} at instance {pos} is not below c = {c}",
                labels[pos]
            )));
        }
        Ok(Self {
            inputs,
            labels,
            d,
            c,
            bounds,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn classes(&self) -> usize {
        self.c
    }

    pub fn bounds(&self) -> (f64, f64) {
        self.bounds
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.d..(i + 1) * self.d]
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// New dataset holding the given instances in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut inputs = Vec::with_capacity(indices.len() * self.d);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Data(format!("instance {i} out of range")));
            }
            inputs.extend_from_slice(self.input(i));
            labels.push(self.labels[i]);
        }
        Self::new(
            inputs,
            labels,
            self.d,
            self.c,
            self.bounds,
            self.provenance.clone(),
        )
    }

    /// The first `n` instances (all of them when `n >= len`).
    pub fn head(&self, n: usize) -> Result<Self> {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }
}

/// `n` distinct indices from `[0, len)` chosen uniformly with `seed`, ascending.
/// Returns all indices when `n >= len`.
pub fn subsample_indices(len: usize, n: usize, seed: u64) -> Vec<usize> {
    if n >= len {
        return (0..len).collect();
    }
    let mut rng = substream(seed, Domain::Subsample, 0);
    let mut pool: Vec<usize> = (0..len).collect();
    for t in 0..n {
        let r = rng.random_range(t as u64..len as u64) as usize;
        pool.swap(t, r);
    }
    let mut picked = pool[..n].to_vec();
    picked.sort_unstable();
    picked
}

/// Unit basis vector `e_label` of length `c`.
pub fn one_hot(label: usize, c: usize) -> Result<Vec<f64>> {
    if label >= c {
        return Err(Error::Data(format!(
            "label {label} out of range for {c} classes"
        )));
    }
    let mut v = vec![0.0; c];
    v[label] = 1.0;
    Ok(v)
}
