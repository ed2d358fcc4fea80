//! Variable partitioning: random balanced blocks, or kmeans clusters fitted
//! on a subsample so that the block-diagonal part of `Q` captures as much of
//! its mass as possible.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_indices, Dataset, SparseVector};
use crate::kernel::{q_entry_unchecked, KernelSpec};
use crate::{Error, Result};

/// Disjoint index blocks `S_1..S_k` covering `0..n`, with the kmeans centers
/// retained when the partition came from clustering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    k: usize,
    /// `assignment[i]` is the 0-based block id of sample `i`.
    assignment: Vec<usize>,
    /// Dense cluster centers (kmeans partitions only), indexed `[block][feature-1]`.
    centers: Option<Vec<Vec<f64>>>,
    #[serde(skip)]
    blocks: Vec<Vec<usize>>,
}

impl Partition {
    fn from_assignment(
        k: usize,
        assignment: Vec<usize>,
        centers: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let mut blocks = vec![Vec::new(); k];
        for (i, &b) in assignment.iter().enumerate() {
            if b >= k {
                return Err(Error::InvalidArgument(format!("block id {b} out of range")));
            }
            blocks[b].push(i);
        }
        if blocks.iter().any(Vec::is_empty) {
            return Err(Error::InvalidArgument(
                "every block must be non-empty".into(),
            ));
        }
        Ok(Self {
            k,
            assignment,
            centers,
            blocks,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn block(&self, r: usize) -> &[usize] {
        &self.blocks[r]
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn centers(&self) -> Option<&[Vec<f64>]> {
        self.centers.as_deref()
    }

    pub fn max_block_len(&self) -> usize {
        self.blocks.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Partition = serde_json::from_str(text)?;
        Self::from_assignment(raw.k, raw.assignment, raw.centers)
    }
}

/// Balanced random partition: block sizes differ by at most one.
pub fn random_partition(n: usize, k: usize, seed: u64) -> Result<Partition> {
    validate_counts(n, k)?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let base = n / k;
    let extra = n % k;
    let mut assignment = vec![0usize; n];
    let mut pos = 0;
    for r in 0..k {
        let size = base + usize::from(r < extra);
        for &i in &order[pos..pos + size] {
            assignment[i] = r;
        }
        pos += size;
    }
    Partition::from_assignment(k, assignment, None)
}

fn validate_counts(n: usize, k: usize) -> Result<()> {
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= k <= n, got k={k}, n={n}"
        )));
    }
    Ok(())
}

/// Squared distance between a sparse sample and a dense center, computed
/// entrywise over the center's coordinates.
fn point_center_dist2(x: &SparseVector, center: &[f64]) -> f64 {
    let mut acc = 0.0;
    let mut entries = x.iter().peekable();
    for (d, &c) in center.iter().enumerate() {
        let idx = (d + 1) as u32;
        let xv = match entries.peek() {
            Some(&(i, v)) if i == idx => {
                entries.next();
                v
            }
            _ => 0.0,
        };
        let diff = xv - c;
        acc += diff * diff;
    }
    // features beyond the centers' dimensionality
    for (_, v) in entries {
        acc += v * v;
    }
    acc
}

fn nearest(centers: &[Vec<f64>], x: &SparseVector) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (r, c) in centers.iter().enumerate() {
        let d2 = point_center_dist2(x, c);
        if d2 < best.1 {
            best = (r, d2);
        }
    }
    best
}

/// Id of the center nearest to `x` (ties: lowest id). Shared by cluster
/// lookup at training time and test time so the tie rule cannot drift.
pub fn nearest_center_of(centers: &[Vec<f64>], x: &SparseVector) -> usize {
    nearest(centers, x).0
}

/// kmeans partition: kmeans++ seeding and Lloyd iterations on a subsample,
/// then a single nearest-center pass assigning all `n` points.
pub fn kmeans_partition(
    dataset: &Dataset,
    k: usize,
    subsample_size: usize,
    max_iters: usize,
    seed: u64,
) -> Result<Partition> {
    let n = dataset.n();
    validate_counts(n, k)?;
    if subsample_size < k {
        return Err(Error::InvalidArgument(format!(
            "subsample size {subsample_size} is smaller than k={k}"
        )));
    }
    let sub_idx = sample_indices(n, subsample_size, seed);
    let m = sub_idx.len();
    let dim = dataset.dim() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);

    let densify = |i: usize| {
        let mut v = vec![0.0; dim];
        for (idx, val) in dataset.sample(i).iter() {
            v[(idx - 1) as usize] = val;
        }
        v
    };

    // kmeans++ seeding over the subsample
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(densify(sub_idx[rng.gen_range(0..m)]));
    let mut d2: Vec<f64> = sub_idx
        .iter()
        .map(|&i| point_center_dist2(dataset.sample(i), &centers[0]))
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // all mass on existing centers; take any point
            sub_idx[rng.gen_range(0..m)]
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = m - 1;
            for (t, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = t;
                    break;
                }
                target -= w;
            }
            sub_idx[chosen]
        };
        let c = densify(next);
        for (t, &i) in sub_idx.iter().enumerate() {
            d2[t] = d2[t].min(point_center_dist2(dataset.sample(i), &c));
        }
        centers.push(c);
    }

    // Lloyd iterations
    let mut assign = vec![0usize; m];
    for (t, &i) in sub_idx.iter().enumerate() {
        assign[t] = nearest(&centers, dataset.sample(i)).0;
    }
    for _ in 0..max_iters {
        // means of assigned points
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (t, &i) in sub_idx.iter().enumerate() {
            counts[assign[t]] += 1;
            let s = &mut sums[assign[t]];
            for (idx, val) in dataset.sample(i).iter() {
                s[(idx - 1) as usize] += val;
            }
        }
        for r in 0..k {
            if counts[r] > 0 {
                for v in &mut sums[r] {
                    *v /= counts[r] as f64;
                }
                centers[r] = std::mem::take(&mut sums[r]);
            }
            // an empty cluster keeps its previous center; repaired below
        }

        let mut changed = false;
        for (t, &i) in sub_idx.iter().enumerate() {
            let r = nearest(&centers, dataset.sample(i)).0;
            if r != assign[t] {
                assign[t] = r;
                changed = true;
            }
        }
        repair_empty(&mut assign, &mut centers, dataset, &sub_idx, k, &densify);
        if !changed {
            break;
        }
    }

    // assign all n points to their nearest center
    let mut assignment: Vec<usize> = (0..n)
        .map(|i| nearest(&centers, dataset.sample(i)).0)
        .collect();
    repair_empty_full(&mut assignment, dataset, &centers, k);
    Partition::from_assignment(k, assignment, Some(centers))
}

/// Moves the point farthest from its center into each empty cluster.
fn repair_empty(
    assign: &mut [usize],
    centers: &mut [Vec<f64>],
    dataset: &Dataset,
    sub_idx: &[usize],
    k: usize,
    densify: &impl Fn(usize) -> Vec<f64>,
) {
    loop {
        let mut counts = vec![0usize; k];
        for &a in assign.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut worst = (0usize, f64::NEG_INFINITY);
        for (t, &i) in sub_idx.iter().enumerate() {
            if counts[assign[t]] <= 1 {
                continue; // do not empty another cluster
            }
            let d2 = point_center_dist2(dataset.sample(i), &centers[assign[t]]);
            if d2 > worst.1 {
                worst = (t, d2);
            }
        }
        assign[worst.0] = empty;
        centers[empty] = densify(sub_idx[worst.0]);
    }
}

fn repair_empty_full(assignment: &mut [usize], dataset: &Dataset, centers: &[Vec<f64>], k: usize) {
    loop {
        let mut counts = vec![0usize; k];
        for &a in assignment.iter() {
            counts[a] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let mut worst = (0usize, f64::NEG_INFINITY);
        for i in 0..dataset.n() {
            if counts[assignment[i]] <= 1 {
                continue;
            }
            let d2 = point_center_dist2(dataset.sample(i), &centers[assignment[i]]);
            if d2 > worst.1 {
                worst = (i, d2);
            }
        }
        assignment[worst.0] = empty;
    }
}

/// Block id of the nearest center; ties break toward the lowest id.
pub fn nearest_center(partition: &Partition, x: &SparseVector) -> Result<usize> {
    let centers = partition.centers().ok_or(Error::MissingCenters)?;
    Ok(nearest(centers, x).0)
}

/// Exact Frobenius error of the block-diagonal approximation,
/// `sum_{pi(i) != pi(j)} Q_ij^2`. Dense; diagnostic/test use only.
pub fn block_diag_error(dataset: &Dataset, spec: KernelSpec, partition: &Partition) -> f64 {
    let n = dataset.n();
    let assignment = partition.assignment();
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            if assignment[i] != assignment[j] {
                let q = q_entry_unchecked(dataset, spec, i, j);
                total += 2.0 * q * q;
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::parse_libsvm;
    use rand::Rng;

    fn cloud_dataset(n: usize, separation: f64, seed: u64) -> Dataset {
        // two clouds at +-separation on feature 1, jitter on feature 2
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            let x = SparseVector::new(vec![
                (1, sign * separation + rng.gen_range(-0.5..0.5)),
                (2, rng.gen_range(-0.5..0.5)),
            ])
            .unwrap();
            samples.push(x);
            labels.push(sign);
        }
        Dataset::new(samples, labels).unwrap()
    }

    #[test]
    fn random_partition_balance() {
        let p = random_partition(4, 2, 0).unwrap();
        assert_eq!(p.block(0).len(), 2);
        assert_eq!(p.block(1).len(), 2);

        let p = random_partition(5, 1, 0).unwrap();
        assert_eq!(p.block(0), &[0, 1, 2, 3, 4]);

        let p = random_partition(100, 7, 3).unwrap();
        let mut sizes: Vec<usize> = p.blocks().iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![14, 14, 14, 14, 14, 15, 15]);
    }

    #[test]
    fn random_partition_errors_and_determinism() {
        assert!(random_partition(3, 4, 0).is_err());
        assert!(random_partition(3, 0, 0).is_err());
        assert_eq!(
            random_partition(50, 5, 9).unwrap(),
            random_partition(50, 5, 9).unwrap()
        );
    }

    #[test]
    fn partition_invariants_hold() {
        for (n, k, seed) in [(10, 3, 0), (57, 8, 4), (200, 16, 1)] {
            let p = random_partition(n, k, seed).unwrap();
            let mut seen = vec![false; n];
            for r in 0..k {
                assert!(!p.block(r).is_empty());
                for &i in p.block(r) {
                    assert!(!seen[i], "index {i} in two blocks");
                    seen[i] = true;
                    assert_eq!(p.assignment()[i], r);
                }
            }
            assert!(seen.into_iter().all(|s| s));
        }
    }

    #[test]
    fn kmeans_separates_two_clouds() {
        let d = cloud_dataset(60, 10.0, 5);
        let p = kmeans_partition(&d, 2, 60, 20, 7).unwrap();
        // cluster id of every even sample equals that of sample 0, odd of sample 1
        let a = p.assignment();
        assert_ne!(a[0], a[1]);
        for i in 0..d.n() {
            assert_eq!(a[i], a[i % 2], "sample {i} crossed clouds");
        }
    }

    #[test]
    fn kmeans_single_cluster_center_is_subsample_mean() {
        let d = parse_libsvm("+1 1:1.0\n-1 1:3.0\n+1 2:4.0".as_bytes()).unwrap();
        let p = kmeans_partition(&d, 1, 3, 10, 0).unwrap();
        assert_eq!(p.block(0), &[0, 1, 2]);
        let c = &p.centers().unwrap()[0];
        assert!((c[0] - 4.0 / 3.0).abs() < 1e-12);
        assert!((c[1] - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn kmeans_deterministic_and_validates() {
        let d = cloud_dataset(40, 4.0, 2);
        let a = kmeans_partition(&d, 3, 30, 20, 11).unwrap();
        let b = kmeans_partition(&d, 3, 30, 20, 11).unwrap();
        assert_eq!(a, b);
        assert!(kmeans_partition(&d, 41, 40, 20, 0).is_err());
        assert!(kmeans_partition(&d, 5, 4, 20, 0).is_err());
    }

    #[test]
    fn nearest_center_rules() {
        let d = cloud_dataset(20, 5.0, 3);
        let mut p = kmeans_partition(&d, 2, 20, 20, 1).unwrap();
        // x equal to center 1 maps to block 1
        let c1 = p.centers().unwrap()[1].clone();
        let entries: Vec<(u32, f64)> = c1
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, &v)| ((i + 1) as u32, v))
            .collect();
        let x = SparseVector::new(entries).unwrap();
        assert_eq!(nearest_center(&p, &x).unwrap(), 1);

        // equidistant from both centers: lowest id wins
        p.centers = Some(vec![vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let origin = SparseVector::new(vec![(2, 3.0)]).unwrap();
        assert_eq!(nearest_center(&p, &origin).unwrap(), 0);

        // centers absent
        let rp = random_partition(20, 2, 0).unwrap();
        assert!(nearest_center(&rp, &x).is_err());
    }

    #[test]
    fn nearest_center_matches_exhaustive_scan() {
        let d = cloud_dataset(50, 3.0, 8);
        let p = kmeans_partition(&d, 4, 50, 20, 9).unwrap();
        let centers = p.centers().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let x = SparseVector::new(vec![
                (1, rng.gen_range(-6.0..6.0)),
                (2, rng.gen_range(-2.0..2.0)),
            ])
            .unwrap();
            let got = nearest_center(&p, &x).unwrap();
            let brute = centers
                .iter()
                .enumerate()
                .map(|(r, c)| {
                    let mut dense = vec![0.0; c.len()];
                    for (idx, val) in x.iter() {
                        dense[(idx - 1) as usize] = val;
                    }
                    let d2: f64 = dense.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                    (r, d2)
                })
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(got, brute);
        }
    }

    #[test]
    fn block_diag_error_cases() {
        let spec = KernelSpec::gaussian(0.5).unwrap();
        let d = cloud_dataset(12, 2.0, 4);
        // k=1: no off-diagonal blocks
        let p1 = kmeans_partition(&d, 1, 12, 5, 0).unwrap();
        assert_eq!(block_diag_error(&d, spec, &p1), 0.0);

        // n=2, blocks {0},{1}: error is 2*Q01^2
        let two = parse_libsvm("+1 1:1.0\n-1 1:2.0".as_bytes()).unwrap();
        let p = Partition::from_assignment(2, vec![0, 1], None).unwrap();
        let q01 = crate::kernel::q_entry(&two, spec, 0, 1).unwrap();
        assert!((block_diag_error(&two, spec, &p) - 2.0 * q01 * q01).abs() < 1e-15);
    }

    #[test]
    fn block_diag_error_matches_dense_oracle() {
        let d = crate::testutil::random_dataset(50, 4, 17);
        let spec = KernelSpec::gaussian(0.8).unwrap();
        let p = random_partition(50, 5, 2).unwrap();
        let q = crate::oracle::naive_q_matrix(&d, spec);
        let mut frob = 0.0;
        for i in 0..50 {
            for j in 0..50 {
                if p.assignment()[i] != p.assignment()[j] {
                    frob += q.at(i, j) * q.at(i, j);
                }
            }
        }
        let got = block_diag_error(&d, spec, &p);
        assert!((got - frob).abs() <= 1e-7 * (1.0 + frob), "{got} vs {frob}");
    }

    #[test]
    fn kmeans_beats_random_on_clustered_data() {
        let d = cloud_dataset(80, 8.0, 6);
        let spec = KernelSpec::gaussian(1.0).unwrap();
        let km = kmeans_partition(&d, 2, 80, 20, 3).unwrap();
        let rnd = random_partition(80, 2, 3).unwrap();
        assert!(
            block_diag_error(&d, spec, &km) < block_diag_error(&d, spec, &rnd),
            "kmeans should shed less off-diagonal mass"
        );
    }

    #[test]
    fn json_roundtrip_preserves_blocks() {
        let d = cloud_dataset(30, 5.0, 1);
        let p = kmeans_partition(&d, 3, 30, 20, 4).unwrap();
        let text = p.to_json().unwrap();
        let back = Partition::from_json(&text).unwrap();
        assert_eq!(back.assignment(), p.assignment());
        assert_eq!(back.centers(), p.centers());
        assert_eq!(back.blocks(), p.blocks());
    }
}
