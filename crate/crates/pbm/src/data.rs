//! Sparse sample storage and LIBSVM text-format I/O.
//!
//! A data file holds one sample per line, `label index:value index:value ...`
//! with 1-based, strictly increasing feature indices. Files ending in `.gz`
//! are decompressed transparently.

use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Sparse feature vector with 1-based, strictly increasing indices.
///
/// Zero values are never stored; [`SparseVector::new`] drops them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseVector {
    indices: Vec<u32>,
    values: Vec<f64>,
}

impl SparseVector {
    /// Builds a vector from `(index, value)` pairs, dropping explicit zeros.
    ///
    /// Fails when indices are not strictly increasing or contain zero.
    pub fn new(entries: Vec<(u32, f64)>) -> Result<Self> {
        let mut indices = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        let mut prev = 0u32;
        for (idx, val) in entries {
            if idx == 0 {
                return Err(Error::InvalidArgument(
                    "feature indices are 1-based; got 0".into(),
                ));
            }
            if idx <= prev {
                return Err(Error::InvalidArgument(format!(
                    "feature indices must be strictly increasing; {idx} follows {prev}"
                )));
            }
            prev = idx;
            if val != 0.0 {
                indices.push(idx);
                values.push(val);
            }
        }
        Ok(Self { indices, values })
    }

    pub fn empty() -> Self {
        Self {
            indices: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    /// 1-based feature indices, strictly increasing.
    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, f64)> + '_ {
        self.indices
            .iter()
            .copied()
            .zip(self.values.iter().copied())
    }

    /// Largest feature index, or 0 for the empty vector.
    pub fn max_index(&self) -> u32 {
        self.indices.last().copied().unwrap_or(0)
    }

    pub fn norm_squared(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    /// Dot product by merging the two sorted index lists.
    pub fn dot(&self, other: &SparseVector) -> f64 {
        let (mut i, mut j, mut acc) = (0usize, 0usize, 0.0);
        while i < self.indices.len() && j < other.indices.len() {
            match self.indices[i].cmp(&other.indices[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += self.values[i] * other.values[j];
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    /// Squared Euclidean distance by merging the sorted entry lists.
    ///
    /// Differences are formed entrywise rather than via
    /// `|x|^2 + |z|^2 - 2 x.z`, which cancels catastrophically when the
    /// vectors are close.
    pub fn distance_squared(&self, other: &SparseVector) -> f64 {
        let (mut i, mut j, mut acc) = (0usize, 0usize, 0.0);
        while i < self.indices.len() && j < other.indices.len() {
            match self.indices[i].cmp(&other.indices[j]) {
                std::cmp::Ordering::Less => {
                    acc += self.values[i] * self.values[i];
                    i += 1;
                }
                std::cmp::Ordering::Greater => {
                    acc += other.values[j] * other.values[j];
                    j += 1;
                }
                std::cmp::Ordering::Equal => {
                    let d = self.values[i] - other.values[j];
                    acc += d * d;
                    i += 1;
                    j += 1;
                }
            }
        }
        for v in &self.values[i..] {
            acc += v * v;
        }
        for v in &other.values[j..] {
            acc += v * v;
        }
        acc
    }
}

/// An immutable training or test set: sparse samples with ±1 labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<SparseVector>,
    labels: Vec<f64>,
    dim: u32,
}

impl Dataset {
    /// Builds a dataset, validating the label alphabet and inferring `dim`.
    pub fn new(samples: Vec<SparseVector>, labels: Vec<f64>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("dataset must be non-empty".into()));
        }
        if samples.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} samples but {} labels",
                samples.len(),
                labels.len()
            )));
        }
        if let Some(y) = labels.iter().find(|&&y| y != 1.0 && y != -1.0) {
            return Err(Error::InvalidArgument(format!("label {y} is not +1/-1")));
        }
        let dim = samples
            .iter()
            .map(SparseVector::max_index)
            .max()
            .unwrap_or(0);
        Ok(Self {
            samples,
            labels,
            dim,
        })
    }

    pub fn n(&self) -> usize {
        self.samples.len()
    }

    /// Largest feature index over all samples.
    pub fn dim(&self) -> u32 {
        self.dim
    }

    pub fn sample(&self, i: usize) -> &SparseVector {
        &self.samples[i]
    }

    pub fn label(&self, i: usize) -> f64 {
        self.labels[i]
    }

    pub fn samples(&self) -> &[SparseVector] {
        &self.samples
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// Serializes back to LIBSVM text; `parse_libsvm` of the output
    /// reproduces the dataset exactly.
    pub fn to_libsvm(&self) -> String {
        let mut out = String::new();
        for (x, y) in self.samples.iter().zip(&self.labels) {
            out.push_str(if *y > 0.0 { "+1" } else { "-1" });
            for (idx, val) in x.iter() {
                out.push_str(&format!(" {idx}:{val}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Parses LIBSVM text into a dataset.
///
/// Raw labels are mapped onto {+1, -1}: a label alphabet of exactly
/// `{+1, -1}` is kept as-is, otherwise the first-seen raw label becomes +1
/// and the second -1. More than two distinct raw labels is an error.
pub fn parse_libsvm<R: Read>(reader: R) -> Result<Dataset> {
    let reader = BufReader::new(reader);
    let mut samples = Vec::new();
    let mut raw_labels = Vec::new();
    let mut distinct: Vec<f64> = Vec::new();

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let label_tok = tokens.next().expect("non-empty line has a first token");
        let raw: f64 = label_tok.parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("bad label {label_tok:?}"),
        })?;
        if !distinct.contains(&raw) {
            distinct.push(raw);
            if distinct.len() > 2 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!(
                        "more than two distinct labels (saw {:?}); only binary data is supported",
                        distinct
                    ),
                });
            }
        }
        let mut entries = Vec::new();
        let mut prev = 0u32;
        for tok in tokens {
            let (idx_s, val_s) = tok.split_once(':').ok_or_else(|| Error::Parse {
                line: lineno,
                msg: format!("expected index:value, got {tok:?}"),
            })?;
            let idx: u32 = idx_s.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad feature index {idx_s:?}"),
            })?;
            let val: f64 = val_s.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("bad feature value {val_s:?}"),
            })?;
            if idx == 0 || idx <= prev {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("feature index {idx} not strictly increasing (previous {prev})"),
                });
            }
            prev = idx;
            if val != 0.0 {
                entries.push((idx, val));
            }
        }
        samples.push(SparseVector::new(entries).expect("entries validated during parse"));
        raw_labels.push(raw);
    }

    if samples.is_empty() {
        return Err(Error::Parse {
            line: 0,
            msg: "empty input".into(),
        });
    }

    let keep_raw = distinct.iter().all(|&y| y == 1.0 || y == -1.0);
    let labels: Vec<f64> = raw_labels
        .into_iter()
        .map(|raw| {
            if keep_raw {
                raw
            } else if raw == distinct[0] {
                1.0
            } else {
                -1.0
            }
        })
        .collect();

    Dataset::new(samples, labels)
}

/// Loads a LIBSVM file, decompressing transparently when the path ends in `.gz`.
pub fn load_libsvm(path: &Path) -> Result<Dataset> {
    let file = File::open(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        parse_libsvm(flate2::read::GzDecoder::new(file))
    } else {
        parse_libsvm(file)
    }
}

/// Writes a dataset as LIBSVM text (gzip-compressed when the path ends in `.gz`).
pub fn save_libsvm(dataset: &Dataset, path: &Path) -> Result<()> {
    let text = dataset.to_libsvm();
    let mut file = File::create(path)?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = flate2::write::GzEncoder::new(file, flate2::Compression::default());
        enc.write_all(text.as_bytes())?;
        enc.finish()?;
    } else {
        file.write_all(text.as_bytes())?;
    }
    Ok(())
}

/// Uniform subsample of `m` samples without replacement, deterministic in `seed`.
///
/// `m` is clamped to the dataset size. Selected samples keep their original
/// relative order.
pub fn subsample(dataset: &Dataset, m: usize, seed: u64) -> Dataset {
    let n = dataset.n();
    let m = m.min(n);
    let picked = sample_indices(n, m, seed);
    let samples = picked.iter().map(|&i| dataset.sample(i).clone()).collect();
    let labels = picked.iter().map(|&i| dataset.label(i)).collect();
    Dataset::new(samples, labels).expect("subsample of a valid dataset is valid")
}

/// Synthetic 2-feature benchmark: `clusters` Gaussian-ish clouds arranged on
/// a circle of radius 8, labeled by cloud parity. Used by the examples and
/// the benchmark suite where a clustered, separable dataset is wanted.
pub fn gaussian_mixture(n: usize, clusters: usize, spread: f64, seed: u64) -> Dataset {
    assert!(n >= 1 && clusters >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % clusters;
        let angle = 2.0 * std::f64::consts::PI * c as f64 / clusters as f64;
        let (cx, cy) = (8.0 * angle.cos(), 8.0 * angle.sin());
        let x = cx + rng.gen_range(-spread..spread);
        let y = cy + rng.gen_range(-spread..spread);
        samples.push(SparseVector::new(vec![(1, x), (2, y)]).expect("feature indices fixed"));
        labels.push(if c.is_multiple_of(2) { 1.0 } else { -1.0 });
    }
    Dataset::new(samples, labels).expect("constructed labels are valid")
}

/// `m` distinct indices drawn uniformly from `0..n`, returned in ascending order.
pub(crate) fn sample_indices(n: usize, m: usize, seed: u64) -> Vec<usize> {
    let m = m.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Partial Fisher-Yates over an index pool.
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    let mut picked = pool[..m].to_vec();
    picked.sort_unstable();
    picked
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    #[test]
    fn parses_basic_file() {
        let d = parse_libsvm("+1 1:0.5 3:2.0\n-1 2:1.0".as_bytes()).unwrap();
        assert_eq!(d.n(), 2);
        assert_eq!(d.dim(), 3);
        assert_eq!(d.labels(), &[1.0, -1.0]);
        assert_eq!(d.sample(0).indices(), &[1, 3]);
        assert_eq!(d.sample(0).values(), &[0.5, 2.0]);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(parse_libsvm("".as_bytes()).is_err());
        assert!(parse_libsvm("\n \n".as_bytes()).is_err());
    }

    #[test]
    fn non_monotone_indices_rejected() {
        let err = parse_libsvm("+1 3:1.0 2:1.0".as_bytes()).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 1),
            other => panic!("unexpected error {other:?}"),
        }
        assert!(parse_libsvm("+1 2:1.0 2:3.0".as_bytes()).is_err());
    }

    #[test]
    fn more_than_two_labels_rejected() {
        assert!(parse_libsvm("1 1:1\n2 1:1\n3 1:1".as_bytes()).is_err());
    }

    #[test]
    fn non_pm1_labels_mapped_by_first_seen() {
        let d = parse_libsvm("3 1:1\n7 1:1\n3 2:1".as_bytes()).unwrap();
        assert_eq!(d.labels(), &[1.0, -1.0, 1.0]);
        // already ±1 stays put even when -1 comes first
        let d = parse_libsvm("-1 1:1\n+1 1:1".as_bytes()).unwrap();
        assert_eq!(d.labels(), &[-1.0, 1.0]);
    }

    #[test]
    fn explicit_zeros_dropped() {
        let d = parse_libsvm("+1 1:0 2:5.0\n-1 1:1".as_bytes()).unwrap();
        assert_eq!(d.sample(0).nnz(), 1);
        assert_eq!(d.sample(0).indices(), &[2]);
        // dim still counts the zero entry's index? No: the entry is dropped,
        // but index 2 is present anyway. A dropped trailing zero shrinks dim.
        assert_eq!(d.dim(), 2);
    }

    #[test]
    fn dim_invariant_under_reordering() {
        let a = parse_libsvm("+1 7:1.0\n-1 2:1.0".as_bytes()).unwrap();
        let b = parse_libsvm("-1 2:1.0\n+1 7:1.0".as_bytes()).unwrap();
        assert_eq!(a.dim(), b.dim());
    }

    #[test]
    fn subsample_full_and_deterministic() {
        let d = parse_libsvm("+1 1:1\n-1 2:1\n+1 3:1\n-1 4:1".as_bytes()).unwrap();
        let full = subsample(&d, 4, 7);
        assert_eq!(full, d); // ascending index order = original order

        let one_a = subsample(&d, 1, 42);
        let one_b = subsample(&d, 1, 42);
        assert_eq!(one_a, one_b);
        assert_eq!(one_a.n(), 1);

        let over = subsample(&d, 100, 3);
        assert_eq!(over.n(), 4);
    }

    #[test]
    fn subsample_varies_across_seeds() {
        // n=40, m=20: the chance two seeds pick the same index set is
        // astronomically small; require at least 15 of 20 seed pairs to differ.
        let n = 40;
        let mut distinct_sets = HashSet::new();
        for seed in 0..20u64 {
            distinct_sets.insert(sample_indices(n, n / 2, seed));
        }
        assert!(
            distinct_sets.len() >= 15,
            "only {} distinct sets",
            distinct_sets.len()
        );
    }

    #[test]
    fn gzip_roundtrip() {
        let d = parse_libsvm("+1 1:0.5 3:2.0\n-1 2:1.0".as_bytes()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.libsvm.gz");
        save_libsvm(&d, &path).unwrap();
        let back = load_libsvm(&path).unwrap();
        assert_eq!(d, back);
    }

    prop_compose! {
        fn arb_sparse_vector()(n in 0usize..8)(
            idxs in proptest::collection::btree_set(1u32..50, n),
            vals in proptest::collection::vec(-1e3f64..1e3, n),
        ) -> SparseVector {
            let entries: Vec<(u32, f64)> = idxs.into_iter().zip(vals).collect();
            SparseVector::new(entries).unwrap()
        }
    }

    prop_compose! {
        fn arb_dataset()(n in 1usize..100)(
            samples in proptest::collection::vec(arb_sparse_vector(), n),
            labels in proptest::collection::vec(prop_oneof![Just(1.0f64), Just(-1.0f64)], n),
        ) -> Dataset {
            Dataset::new(samples, labels).unwrap()
        }
    }

    proptest! {
        #[test]
        fn roundtrip_identity(d in arb_dataset()) {
            let text = d.to_libsvm();
            let back = parse_libsvm(text.as_bytes()).unwrap();
            prop_assert_eq!(back, d);
        }

        #[test]
        fn distance_matches_naive(a in arb_sparse_vector(), b in arb_sparse_vector()) {
            let merge = a.distance_squared(&b);
            let naive = a.norm_squared() + b.norm_squared() - 2.0 * a.dot(&b);
            prop_assert!((merge - naive).abs() <= 1e-7 * (1.0 + merge.abs()));
        }
    }
}
