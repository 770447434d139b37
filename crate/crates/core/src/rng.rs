//! Deterministic random streams.
//!
//! Every stream is ChaCha8 keyed by `(seed, domain)`: the 32-byte key holds
//! the seed in bytes 0..8 and the domain tag in bytes 8..16 (little endian,
//! remaining bytes zero). The ChaCha stream id selects an item within the
//! domain (a granule cell, a test instance). Streams for different items never
//! share state, so construction order and batch composition do not matter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tag mixed into the key, keeping unrelated draws independent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Domain {
    /// Granule connectivity and weights; item = cell index.
    Construction = 1,
    /// Per-epoch shuffling; item = epoch.
    Shuffle = 2,
    /// PGD random starts; item = dataset index of the attacked instance.
    AttackStart = 3,
    /// Evaluation subsampling; item = 0.
    Subsample = 4,
}

pub fn substream(seed: u64, domain: Domain, item: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(domain as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(item);
    rng
}
