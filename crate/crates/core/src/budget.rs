//! Fixed synapse budget for comparing connectivity degrees.
//!
//! Each granule cell costs `k` input synapses plus one Purkinje and one
//! climbing-fiber synapse per class, so `m` cells cost `m (k + 2c)`.

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Synapses of the anatomical model: 200,000 cells at `k = 4`, `c = 10`.
pub const ANATOMICAL_SYNAPSES: u64 = 4_800_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct SynapseBudget {
    pub total: u64,
    pub classes: u64,
}

impl Default for SynapseBudget {
    fn default() -> Self {
        Self {
            total: ANATOMICAL_SYNAPSES,
            classes: 10,
        }
    }
}

impl SynapseBudget {
    pub fn new(total: u64, classes: u64) -> Self {
        Self { total, classes }
    }

    pub fn cost_per_cell(&self, k: u64) -> u64 {
        k + 2 * self.classes
    }

    /// Largest `m` with `m (k + 2c) <= total`.
    pub fn granule_cells(&self, k: u64) -> Result<u64> {
        if k == 0 {
            return Err(Error::Config("in-degree k must be at least 1".into()));
        }
        let m = self.total / self.cost_per_cell(k);
        if m == 0 {
            return Err(Error::Config(alloc::format!(
                "budget {} cannot afford one cell at k = {k}",
                self.total
            )));
        }
        Ok(m)
    }

    pub fn satisfied_by(&self, m: u64, k: u64) -> bool {
        let cost = self.cost_per_cell(k);
        m * cost <= self.total && (m + 1) * cost > self.total
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_points() {
        let b = SynapseBudget::default();
        assert_eq!(b.granule_cells(4).unwrap(), 200_000);
        assert_eq!(b.granule_cells(784).unwrap(), 5_970);
        assert_eq!(b.granule_cells(4096).unwrap(), 1_166);
    }

    #[test]
    fn floor_rule_for_the_sparsity_grid() {
        let b = SynapseBudget::default();
        let expect = [
            (1, 228_571),
            (2, 218_181),
            (4, 200_000),
            (10, 160_000),
            (50, 68_571),
            (200, 21_818),
            (784, 5_970),
        ];
        for (k, m) in expect {
            assert_eq!(b.granule_cells(k).unwrap(), m, "k = {k}");
            assert!(b.satisfied_by(m, k));
            assert!(!b.satisfied_by(m + 1, k));
        }
    }

    #[test]
    fn degenerate_budgets_error() {
        assert!(SynapseBudget::default().granule_cells(0).is_err());
        assert!(SynapseBudget::new(10, 10).granule_cells(1).is_err());
    }
}
