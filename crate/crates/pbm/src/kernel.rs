//! Kernel evaluation, `Q`-matrix entries and columns, and an LRU column cache.
//!
//! `Q[i][j] = y_i * y_j * K(x_i, x_j)`. Columns of `Q` are the unit of
//! caching because the outer loop consumes whole columns when it forms
//! `Q[:, S_r] * d[S_r]`.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SparseVector};
use crate::{Error, Result};

pub const BYTES_PER_ENTRY: usize = std::mem::size_of::<f64>();

/// Kernel function selection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelSpec {
    /// `K(x, z) = exp(-gamma * |x - z|^2)`, gamma > 0.
    Gaussian { gamma: f64 },
    /// `K(x, z) = x . z`
    Linear,
}

impl KernelSpec {
    pub fn gaussian(gamma: f64) -> Result<Self> {
        if gamma > 0.0 {
            Ok(Self::Gaussian { gamma })
        } else {
            Err(Error::InvalidArgument(format!(
                "gamma must be positive, got {gamma}"
            )))
        }
    }
}

/// Evaluates the kernel function. Symmetric in its vector arguments; the
/// Gaussian value lies in (0, 1].
pub fn kernel_eval(spec: KernelSpec, x: &SparseVector, z: &SparseVector) -> f64 {
    match spec {
        KernelSpec::Gaussian { gamma } => (-gamma * x.distance_squared(z)).exp(),
        KernelSpec::Linear => x.dot(z),
    }
}

/// One entry of `Q`: `y_i * y_j * K(x_i, x_j)`.
pub fn q_entry(dataset: &Dataset, spec: KernelSpec, i: usize, j: usize) -> Result<f64> {
    let n = dataset.n();
    for idx in [i, j] {
        if idx >= n {
            return Err(Error::IndexOutOfRange { index: idx, n });
        }
    }
    Ok(q_entry_unchecked(dataset, spec, i, j))
}

#[inline]
pub(crate) fn q_entry_unchecked(dataset: &Dataset, spec: KernelSpec, i: usize, j: usize) -> f64 {
    dataset.label(i) * dataset.label(j) * kernel_eval(spec, dataset.sample(i), dataset.sample(j))
}

/// Computes column `j` of `Q` into a fresh vector.
pub(crate) fn compute_q_column(dataset: &Dataset, spec: KernelSpec, j: usize) -> Vec<f64> {
    let xj = dataset.sample(j);
    let yj = dataset.label(j);
    (0..dataset.n())
        .map(|i| dataset.label(i) * yj * kernel_eval(spec, dataset.sample(i), xj))
        .collect()
}

/// Diagonal of `Q` (`Q_ii = K(x_i, x_i)`, exactly 1 for the Gaussian kernel).
pub fn q_diagonal(dataset: &Dataset, spec: KernelSpec) -> Vec<f64> {
    match spec {
        KernelSpec::Gaussian { .. } => vec![1.0; dataset.n()],
        KernelSpec::Linear => (0..dataset.n())
            .map(|i| dataset.sample(i).norm_squared())
            .collect(),
    }
}

struct CacheEntry {
    column: Arc<Vec<f64>>,
    last_use: u64,
}

struct CacheInner {
    columns: HashMap<usize, CacheEntry>,
    stored_bytes: usize,
    tick: u64,
}

/// LRU cache of `Q` columns, bounded by payload bytes.
///
/// Readers run concurrently; insertion is exclusive. Columns are handed out
/// as `Arc`s, so eviction never invalidates a vector a caller already holds.
/// A cached column is bit-identical to fresh recomputation because both go
/// through the same evaluation path.
pub struct KernelCache {
    capacity_bytes: usize,
    inner: Mutex<CacheInner>,
    hits: AtomicU64,
    misses: AtomicU64,
}

/// Default cache capacity: 1 GiB.
pub const DEFAULT_CACHE_BYTES: usize = 1 << 30;

impl KernelCache {
    pub fn new(capacity_bytes: usize) -> Self {
        Self {
            capacity_bytes,
            inner: Mutex::new(CacheInner {
                columns: HashMap::new(),
                stored_bytes: 0,
                tick: 0,
            }),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    pub fn capacity_bytes(&self) -> usize {
        self.capacity_bytes
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }

    /// Column `j` of `Q`, from the cache when present, computed (and
    /// inserted if it fits) otherwise.
    pub fn q_column(&self, dataset: &Dataset, spec: KernelSpec, j: usize) -> Arc<Vec<f64>> {
        {
            let mut inner = self.inner.lock().expect("kernel cache poisoned");
            inner.tick += 1;
            let tick = inner.tick;
            if let Some(entry) = inner.columns.get_mut(&j) {
                entry.last_use = tick;
                self.hits.fetch_add(1, Ordering::Relaxed);
                return Arc::clone(&entry.column);
            }
        }
        // Miss: compute outside the lock so other columns stay available.
        self.misses.fetch_add(1, Ordering::Relaxed);
        let column = Arc::new(compute_q_column(dataset, spec, j));
        let bytes = column.len() * BYTES_PER_ENTRY;
        if bytes <= self.capacity_bytes {
            let mut inner = self.inner.lock().expect("kernel cache poisoned");
            inner.tick += 1;
            let tick = inner.tick;
            if !inner.columns.contains_key(&j) {
                while inner.stored_bytes + bytes > self.capacity_bytes {
                    let lru = inner
                        .columns
                        .iter()
                        .min_by_key(|(_, e)| e.last_use)
                        .map(|(&k, _)| k)
                        .expect("stored_bytes > 0 implies a column exists");
                    let evicted = inner.columns.remove(&lru).expect("key just found");
                    inner.stored_bytes -= evicted.column.len() * BYTES_PER_ENTRY;
                }
                inner.stored_bytes += bytes;
                inner.columns.insert(
                    j,
                    CacheEntry {
                        column: Arc::clone(&column),
                        last_use: tick,
                    },
                );
            }
        }
        column
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::parse_libsvm;
    use crate::testutil::random_dataset;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vec_of(entries: &[(u32, f64)]) -> SparseVector {
        SparseVector::new(entries.to_vec()).unwrap()
    }

    #[test]
    fn gaussian_same_point_is_one() {
        let x = vec_of(&[(1, 1.0), (4, -2.0)]);
        let spec = KernelSpec::gaussian(0.7).unwrap();
        assert_eq!(kernel_eval(spec, &x, &x), 1.0);
    }

    #[test]
    fn gaussian_unit_distance() {
        let x = vec_of(&[(1, 1.0)]);
        let z = vec_of(&[(1, 2.0)]);
        let spec = KernelSpec::gaussian(1.0).unwrap();
        assert_relative_eq!(kernel_eval(spec, &x, &z), (-1.0f64).exp(), epsilon = 1e-12);
        assert_relative_eq!(kernel_eval(spec, &x, &z), 0.367879441, epsilon = 1e-9);
    }

    #[test]
    fn linear_dot() {
        let x = vec_of(&[(1, 2.0)]);
        let z = vec_of(&[(1, 3.0)]);
        assert_eq!(kernel_eval(KernelSpec::Linear, &x, &z), 6.0);
    }

    #[test]
    fn kernel_symmetry_random_corpus() {
        let d = random_dataset(20, 6, 3);
        let spec = KernelSpec::gaussian(0.5).unwrap();
        for i in 0..d.n() {
            for j in 0..d.n() {
                assert_eq!(
                    kernel_eval(spec, d.sample(i), d.sample(j)),
                    kernel_eval(spec, d.sample(j), d.sample(i))
                );
            }
        }
    }

    #[test]
    fn q_entry_signs_and_diagonal() {
        let d = parse_libsvm("+1 1:1.0\n-1 1:1.5".as_bytes()).unwrap();
        let spec = KernelSpec::gaussian(2.0).unwrap();
        // diagonal is exactly 1 regardless of label
        assert_eq!(q_entry(&d, spec, 0, 0).unwrap(), 1.0);
        assert_eq!(q_entry(&d, spec, 1, 1).unwrap(), 1.0);
        // opposite labels flip the sign
        let k = kernel_eval(spec, d.sample(0), d.sample(1));
        assert_eq!(q_entry(&d, spec, 0, 1).unwrap(), -k);
        assert!(q_entry(&d, spec, 0, 5).is_err());
    }

    #[test]
    fn q_entry_sign_rule_half() {
        // y_i=+1, y_j=-1, K=0.5 -> -0.5: pick gamma so that K is exactly 0.5
        let d = parse_libsvm("+1 1:1.0\n-1 1:2.0".as_bytes()).unwrap();
        let gamma = std::f64::consts::LN_2; // exp(-ln2 * 1) = 0.5
        let spec = KernelSpec::gaussian(gamma).unwrap();
        assert_relative_eq!(q_entry(&d, spec, 0, 1).unwrap(), -0.5, epsilon = 1e-15);
    }

    #[test]
    fn five_by_five_q_is_symmetric_psd() {
        let d = parse_libsvm(
            "+1 1:0.1 2:1.0\n-1 1:2.0\n+1 2:-1.0\n-1 1:0.5 2:0.5\n+1 1:-1.5 2:0.3".as_bytes(),
        )
        .unwrap();
        let spec = KernelSpec::gaussian(0.8).unwrap();
        let n = d.n();
        let mut q = nalgebra::DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                q[(i, j)] = q_entry(&d, spec, i, j).unwrap();
            }
        }
        assert_eq!(q, q.transpose());
        let eig = q.symmetric_eigenvalues();
        let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(min >= -1e-10, "min eigenvalue {min}");
    }

    #[test]
    fn cache_hit_and_lru_eviction() {
        let d = random_dataset(8, 4, 11);
        let spec = KernelSpec::gaussian(1.0).unwrap();
        let n_bytes = d.n() * BYTES_PER_ENTRY;

        // capacity for exactly one column
        let cache = KernelCache::new(n_bytes);
        let c1 = cache.q_column(&d, spec, 0);
        assert_eq!(cache.misses(), 1);
        let c1_again = cache.q_column(&d, spec, 0);
        assert_eq!(cache.hits(), 1);
        assert_eq!(c1.as_slice(), c1_again.as_slice());

        cache.q_column(&d, spec, 1); // evicts column 0
        let _ = cache.q_column(&d, spec, 0); // recomputed
        assert_eq!(cache.misses(), 3);
        // the Arc handed out earlier still holds the evicted data
        assert_eq!(c1.len(), d.n());
    }

    #[test]
    fn cached_column_equals_recomputation() {
        let d = random_dataset(17, 5, 23);
        let spec = KernelSpec::gaussian(0.9).unwrap();
        let cache = KernelCache::new(DEFAULT_CACHE_BYTES);
        for j in 0..d.n() {
            let cached = cache.q_column(&d, spec, j);
            let fresh = compute_q_column(&d, spec, j);
            assert_eq!(cached.as_slice(), fresh.as_slice());
        }
        // second pass: all hits, still identical
        for j in 0..d.n() {
            let cached = cache.q_column(&d, spec, j);
            let fresh = compute_q_column(&d, spec, j);
            assert_eq!(cached.as_slice(), fresh.as_slice());
        }
        assert_eq!(cache.hits(), d.n() as u64);
    }

    #[test]
    fn cache_transparency_zero_vs_unbounded() {
        let d = random_dataset(12, 4, 5);
        let spec = KernelSpec::gaussian(1.3).unwrap();
        let zero = KernelCache::new(0);
        let unbounded = KernelCache::new(usize::MAX);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let j = rng.gen_range(0..d.n());
            let a = zero.q_column(&d, spec, j);
            let b = unbounded.q_column(&d, spec, j);
            assert_eq!(a.as_slice(), b.as_slice());
        }
        assert_eq!(zero.hits(), 0);
    }

    #[test]
    fn cache_capacity_respected() {
        let d = random_dataset(10, 4, 8);
        let spec = KernelSpec::gaussian(1.0).unwrap();
        let cap = 3 * d.n() * BYTES_PER_ENTRY;
        let cache = KernelCache::new(cap);
        for j in 0..d.n() {
            cache.q_column(&d, spec, j);
            let inner = cache.inner.lock().unwrap();
            assert!(inner.stored_bytes <= cap);
        }
    }

    #[test]
    fn concurrent_readers_get_correct_columns() {
        let d = random_dataset(30, 6, 77);
        let spec = KernelSpec::gaussian(0.6).unwrap();
        let cache = KernelCache::new(8 * d.n() * BYTES_PER_ENTRY);
        std::thread::scope(|s| {
            for t in 0..4 {
                let cache = &cache;
                let d = &d;
                s.spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(1000 + t);
                    for _ in 0..300 {
                        let j = rng.gen_range(0..d.n());
                        let col = cache.q_column(d, spec, j);
                        let fresh = compute_q_column(d, spec, j);
                        assert_eq!(col.as_slice(), fresh.as_slice());
                    }
                });
            }
        });
    }
}
