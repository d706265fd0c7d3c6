//! Seeded random streams.
//!
//! Every stochastic routine takes a `u64` seed and derives independent
//! per-worker streams from it, so results do not depend on thread count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;

pub type StreamRng = ChaCha8Rng;

/// Number of work chunks used for parallel episode collection. Fixed so the
/// partition (and therefore every random draw) is independent of the pool size.
pub const WORK_CHUNKS: usize = 32;

pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of sub-stream `stream` of `base`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream))
}

pub fn stream_rng(base: u64, stream: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream))
}

pub fn seeded(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Symmetric Dirichlet(alpha) draw of length `len`.
pub fn dirichlet<R: Rng + ?Sized>(rng: &mut R, len: usize, alpha: f64) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    let gamma = Gamma::new(alpha, 1.0).expect("alpha > 0");
    loop {
        let draws: Vec<f64> = (0..len).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 {
            return draws.into_iter().map(|g| g / total).collect();
        }
    }
}

/// Index drawn from a probability vector by inversion.
pub fn categorical<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding left u above the cumulative sum: take the last positive entry.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Splits `total` work items into [`WORK_CHUNKS`] deterministic chunks and runs
/// `work(rng, chunk_len)` on each in parallel; results come back in chunk order.
pub fn par_chunked<T, F>(total: usize, seed: u64, work: F) -> Vec<T>
where
    T: Send,
    F: Fn(&mut StreamRng, usize) -> T + Sync,
{
    let base = total / WORK_CHUNKS;
    let extra = total % WORK_CHUNKS;
    (0..WORK_CHUNKS)
        .into_par_iter()
        .map(|chunk| {
            let len = base + usize::from(chunk < extra);
            let mut rng = stream_rng(seed, chunk as u64);
            work(&mut rng, len)
        })
        .collect()
}
