//! Shared helpers for unit tests.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, SparseVector};

/// Random sparse dataset with ±1 labels: `n` samples over `dim` features.
pub fn random_dataset(n: usize, dim: u32, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let mut entries = Vec::new();
        for idx in 1..=dim {
            if rng.gen_bool(0.6) {
                entries.push((idx, rng.gen_range(-2.0..2.0)));
            }
        }
        samples.push(SparseVector::new(entries).unwrap());
        labels.push(if rng.gen_bool(0.5) { 1.0 } else { -1.0 });
    }
    Dataset::new(samples, labels).unwrap()
}
