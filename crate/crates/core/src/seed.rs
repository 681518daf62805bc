//! Deterministic RNG streams for replica ensembles.
//!
//! Every replica draws from its own ChaCha8 stream: the master seed keys the
//! generator and the stream index selects one of 2^64 independent streams.
//! Nested loops (bisection probe, then replica) derive a sub-master with
//! [`derive_seed`] first. Results of parallel loops are always collected in
//! replica-index order, so outputs do not depend on the worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub type SimRng = ChaCha8Rng;

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sub-master seed for a labelled sub-experiment of `master`.
pub fn derive_seed(master: u64, label: u64) -> u64 {
    splitmix64(master ^ splitmix64(label.wrapping_add(0x5EED)))
}

/// RNG for replica `index` under `master`.
pub fn stream_rng(master: u64, index: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng
}

/// Runs `f(index, rng)` for every replica in parallel and returns the results
/// in index order.
pub fn replicate<T, F>(master: u64, replicas: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &mut SimRng) -> T + Sync + Send,
{
    (0..replicas)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(master, i as u64);
            f(i, &mut rng)
        })
        .collect()
}
