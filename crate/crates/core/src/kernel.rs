//! Ordered dense products for the dense granule layer.
//!
//! `out[b, col] = Σ_r a[b, r] · P[r, col]`, accumulated over `r` in ascending
//! order with a separate multiply and add per term, so every output is
//! bit-identical to a plain loop. Rows of `a` are processed in tiles of
//! `TILE`; an `r` is visited when any row of the tile has `a[b, r] != 0`.
//! The extra terms are signed zeros, which never change a sum that started
//! at `+0.0` (such a sum can never become `-0.0`).

use alloc::{vec, vec::Vec};

/// `P` (`rows x cols`) packed into column panels of `LANES`, each stored
/// row by row and zero-padded.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Panels<const LANES: usize> {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl<const LANES: usize> Panels<LANES> {
    pub fn pack(rows: usize, cols: usize, get: impl Fn(usize, usize) -> f64) -> Self {
        let panels = cols.div_ceil(LANES);
        let mut data = vec![0.0; panels * rows * LANES];
        for p in 0..panels {
            for r in 0..rows {
                for l in 0..LANES {
                    let col = p * LANES + l;
                    if col < cols {
                        data[(p * rows + r) * LANES + l] = get(r, col);
                    }
                }
            }
        }
        Self { rows, cols, data }
    }

    /// `out = a · P` for `a` of shape `batch x rows`.
    pub fn product<const TILE: usize>(&self, a: &[f64], out: &mut [f64]) {
        #[cfg(all(feature = "std", target_arch = "x86_64"))]
        {
            if std::is_x86_feature_detected!("avx512f") {
                // SAFETY: AVX-512F support was just checked.
                return unsafe { self.product_avx512::<TILE>(a, out) };
            }
            if std::is_x86_feature_detected!("avx2") {
                // SAFETY: AVX2 support was just checked.
                return unsafe { self.product_avx2::<TILE>(a, out) };
            }
        }
        self.product_portable::<TILE>(a, out)
    }

    // Same arithmetic, compiled with wider vectors. No FMA contraction
    // happens in Rust, so the results are identical on every path.
    #[cfg(all(feature = "std", target_arch = "x86_64"))]
    #[target_feature(enable = "avx512f")]
    unsafe fn product_avx512<const TILE: usize>(&self, a: &[f64], out: &mut [f64]) {
        self.product_portable::<TILE>(a, out)
    }

    #[cfg(all(feature = "std", target_arch = "x86_64"))]
    #[target_feature(enable = "avx2")]
    unsafe fn product_avx2<const TILE: usize>(&self, a: &[f64], out: &mut [f64]) {
        self.product_portable::<TILE>(a, out)
    }

    #[inline(always)]
    fn product_portable<const TILE: usize>(&self, a: &[f64], out: &mut [f64]) {
        let (rows, cols) = (self.rows, self.cols);
        let batch = a.len() / rows;
        assert_eq!(out.len(), batch * cols);
        let tiles = batch.div_ceil(TILE);

        // Per tile: the visited rows and their `a` values, interleaved.
        let mut starts = Vec::with_capacity(tiles + 1);
        let mut active: Vec<u32> = Vec::new();
        let mut values: Vec<f64> = Vec::new();
        starts.push(0);
        for t in 0..tiles {
            let b0 = t * TILE;
            let n = TILE.min(batch - b0);
            for r in 0..rows {
                if (0..n).any(|s| a[(b0 + s) * rows + r] != 0.0) {
                    active.push(r as u32);
                    for s in 0..TILE {
                        values.push(if s < n { a[(b0 + s) * rows + r] } else { 0.0 });
                    }
                }
            }
            starts.push(active.len());
        }

        for p in 0..cols.div_ceil(LANES) {
            let panel = &self.data[p * rows * LANES..(p + 1) * rows * LANES];
            let width = LANES.min(cols - p * LANES);
            for t in 0..tiles {
                let mut acc = [[0.0f64; LANES]; TILE];
                let span = starts[t]..starts[t + 1];
                for (&r, av) in active[span.clone()]
                    .iter()
                    .zip(values[span.start * TILE..span.end * TILE].chunks_exact(TILE))
                {
                    let w: &[f64; LANES] = panel[r as usize * LANES..(r as usize + 1) * LANES]
                        .try_into()
                        .unwrap();
                    for s in 0..TILE {
                        let x = av[s];
                        for l in 0..LANES {
                            acc[s][l] += w[l] * x;
                        }
                    }
                }
                let b0 = t * TILE;
                for (s, row) in acc.iter().enumerate().take(TILE.min(batch - b0)) {
                    let o = (b0 + s) * cols + p * LANES;
                    out[o..o + width].copy_from_slice(&row[..width]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn bits(v: &[f64]) -> Vec<u64> {
        v.iter().map(|x| x.to_bits()).collect()
    }

    #[test]
    fn matches_naive_loop_bitwise() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for &(batch, rows, cols) in &[(1, 1, 1), (3, 7, 9), (9, 20, 17), (4, 33, 8), (13, 5, 30)] {
            let p: Vec<f64> = (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            let a: Vec<f64> = (0..batch * rows)
                .map(|_| {
                    if rng.random_bool(0.4) {
                        0.0
                    } else {
                        rng.random_range(-1.0..1.0)
                    }
                })
                .collect();
            let panels = Panels::<8>::pack(rows, cols, |r, c| p[r * cols + c]);
            let mut out = vec![f64::NAN; batch * cols];
            panels.product::<3>(&a, &mut out);
            let mut portable = vec![f64::NAN; batch * cols];
            panels.product_portable::<3>(&a, &mut portable);
            assert_eq!(bits(&out), bits(&portable));
            for b in 0..batch {
                for c in 0..cols {
                    let mut acc = 0.0;
                    for r in 0..rows {
                        acc += p[r * cols + c] * a[b * rows + r];
                    }
                    assert_eq!(out[b * cols + c].to_bits(), acc.to_bits());
                }
            }
        }
    }
}
