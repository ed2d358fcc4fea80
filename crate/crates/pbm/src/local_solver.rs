//! Approximate solvers for one block subproblem.
//!
//! Worker `r` minimizes
//! `f_r(d) = 1/2 d' Q[S_r,S_r] d + sum_{i in S_r} (g_i(alpha_i + d_i) + (Q alpha)_i d_i)`
//! by greedy, stochastic, or cyclic coordinate descent, maintaining the
//! product `Q[S_r,S_r] * d` so that selection and updates cost `O(|S_r|)`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::kernel::{q_entry_unchecked, KernelCache, KernelSpec};
use crate::loss::{g_value, one_var_min, LossSpec};
use crate::{Error, Result};

/// Access to `Q[S_r, S_r]`, either fully materialized or routed through the
/// shared column cache when the dense block would not fit in memory.
pub enum BlockMatrix<'a> {
    Dense {
        m: usize,
        data: Vec<f64>,
        diag: Vec<f64>,
    },
    Cached {
        cache: &'a KernelCache,
        dataset: &'a Dataset,
        spec: KernelSpec,
        block: &'a [usize],
        diag: Vec<f64>,
    },
}

impl<'a> BlockMatrix<'a> {
    /// Materializes the dense block. `O(|S_r|^2)` kernel evaluations.
    pub fn dense(dataset: &Dataset, spec: KernelSpec, block: &[usize]) -> Self {
        let m = block.len();
        let mut data = vec![0.0; m * m];
        for li in 0..m {
            for lj in li..m {
                let v = q_entry_unchecked(dataset, spec, block[li], block[lj]);
                data[li * m + lj] = v;
                data[lj * m + li] = v;
            }
        }
        let diag = (0..m).map(|i| data[i * m + i]).collect();
        Self::Dense { m, data, diag }
    }

    /// Entries served through the LRU column cache.
    pub fn cached(
        cache: &'a KernelCache,
        dataset: &'a Dataset,
        spec: KernelSpec,
        block: &'a [usize],
    ) -> Self {
        let diag = block
            .iter()
            .map(|&g| q_entry_unchecked(dataset, spec, g, g))
            .collect();
        Self::Cached {
            cache,
            dataset,
            spec,
            block,
            diag,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Self::Dense { m, .. } => *m,
            Self::Cached { block, .. } => block.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn diag(&self, i: usize) -> f64 {
        match self {
            Self::Dense { diag, .. } | Self::Cached { diag, .. } => diag[i],
        }
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        match self {
            Self::Dense { m, data, .. } => data[i * m + j],
            Self::Cached {
                dataset,
                spec,
                block,
                ..
            } => q_entry_unchecked(dataset, *spec, block[i], block[j]),
        }
    }

    /// `out += scale * Q_block[:, j]`
    pub fn add_scaled_col(&self, j: usize, scale: f64, out: &mut [f64]) {
        match self {
            Self::Dense { m, data, .. } => {
                for (o, q) in out.iter_mut().zip(&data[j * m..(j + 1) * m]) {
                    *o += scale * q;
                }
            }
            Self::Cached {
                cache,
                dataset,
                spec,
                block,
                ..
            } => {
                let col = cache.q_column(dataset, *spec, block[j]);
                for (o, &gi) in out.iter_mut().zip(block.iter()) {
                    *o += scale * col[gi];
                }
            }
        }
    }
}

/// One block subproblem: slices of the global state owned by a worker.
pub struct Subproblem<'a> {
    /// Global sample indices of this block.
    pub block: &'a [usize],
    pub q_block: &'a BlockMatrix<'a>,
    /// `(Q alpha)_{S_r}` at the current outer iterate.
    pub q_alpha: &'a [f64],
    /// `alpha_{S_r}` at the current outer iterate.
    pub alpha: &'a [f64],
    pub loss: LossSpec,
    pub lower: &'a [f64],
    pub upper: &'a [f64],
}

impl<'a> Subproblem<'a> {
    pub fn len(&self) -> usize {
        self.block.len()
    }

    pub fn is_empty(&self) -> bool {
        self.block.is_empty()
    }

    /// `f_r(d) - f_r(0)`, assembled densely. Test/diagnostic use.
    pub fn objective_delta(&self, d: &[f64]) -> f64 {
        let m = self.len();
        let mut quad = 0.0;
        for (i, &di) in d.iter().enumerate() {
            if di == 0.0 {
                continue;
            }
            for (j, &dj) in d.iter().enumerate() {
                quad += di * self.q_block.entry(i, j) * dj;
            }
        }
        let mut sep = 0.0;
        for (i, &di) in d.iter().enumerate().take(m) {
            sep += g_value(self.loss, self.alpha[i] + di) - g_value(self.loss, self.alpha[i])
                + self.q_alpha[i] * di;
        }
        0.5 * quad + sep
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Greedy,
    Random,
    Cyclic,
}

/// Inner work budget: single-coordinate updates (greedy/random) or full
/// passes over the block (cyclic).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Budget {
    Updates(u64),
    Epochs(u64),
}

#[derive(Debug, Clone)]
pub struct SubproblemResult {
    /// The block direction `d_{S_r}`.
    pub d: Vec<f64>,
    /// `f_r(0) - f_r(d) >= 0`.
    pub objective_drop: f64,
    /// Number of one-variable minimizations performed.
    pub inner_updates: u64,
    /// The maintained `Q[S_r,S_r] * d` product, for consistency checks.
    pub q_block_d: Vec<f64>,
}

/// Projected-gradient score of coordinate `i` given the current direction
/// `d` and maintained product; the greedy rule picks the largest.
#[inline]
fn score(sub: &Subproblem<'_>, d: &[f64], maintained: &[f64], i: usize) -> f64 {
    let u = sub.alpha[i] + d[i];
    let grad = maintained[i] + sub.q_alpha[i] + crate::loss::g_grad(sub.loss, u);
    let projected = (u - grad).clamp(sub.lower[i], sub.upper[i]);
    (projected - u).abs()
}

/// Coordinate with the largest projected-gradient score (ties: lowest index).
/// Returns `(index, score)`. Costs `O(|S_r|)`.
pub fn greedy_select(sub: &Subproblem<'_>, d: &[f64], maintained: &[f64]) -> (usize, f64) {
    let mut best = (0usize, f64::NEG_INFINITY);
    #[allow(clippy::needless_range_loop)] // indexes four parallel slices
    for i in 0..sub.len() {
        let s = score(sub, d, maintained, i);
        if s > best.1 {
            best = (i, s);
        }
    }
    (best.0, best.1.max(0.0))
}

/// Approximately solves the block subproblem.
///
/// Stops early once the largest projected-gradient score drops to
/// `inner_tol` (checked per update for greedy, per sweep otherwise).
pub fn solve_block(
    sub: &Subproblem<'_>,
    strategy: Strategy,
    budget: Budget,
    inner_tol: f64,
    seed: u64,
) -> Result<SubproblemResult> {
    let m = sub.len();
    let max_updates = match (strategy, budget) {
        (Strategy::Cyclic, Budget::Epochs(e)) => e.saturating_mul(m as u64),
        (Strategy::Cyclic, Budget::Updates(_)) => {
            return Err(Error::InvalidArgument(
                "cyclic strategy takes an epoch budget".into(),
            ))
        }
        (_, Budget::Updates(u)) => u,
        (_, Budget::Epochs(e)) => e.saturating_mul(m as u64),
    };
    if max_updates == 0 {
        return Err(Error::InvalidArgument(
            "inner budget must be at least 1".into(),
        ));
    }

    let mut d = vec![0.0; m];
    let mut maintained = vec![0.0; m];
    let mut drop = 0.0;
    let mut updates = 0u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let update_coord =
        |i: usize, d: &mut Vec<f64>, maintained: &mut Vec<f64>, drop: &mut f64| -> Result<()> {
            let u = sub.alpha[i] + d[i];
            let lin = maintained[i] + sub.q_alpha[i];
            let qii = sub.q_block.diag(i);
            let delta = one_var_min(sub.loss, qii, lin, u, sub.lower[i], sub.upper[i])?;
            if delta != 0.0 {
                *drop -= 0.5 * qii * delta * delta + lin * delta + g_value(sub.loss, u + delta)
                    - g_value(sub.loss, u);
                d[i] += delta;
                sub.q_block.add_scaled_col(i, delta, maintained);
            }
            Ok(())
        };

    match strategy {
        Strategy::Greedy => {
            while updates < max_updates {
                let (i, s) = greedy_select(sub, &d, &maintained);
                if s <= inner_tol {
                    break;
                }
                update_coord(i, &mut d, &mut maintained, &mut drop)?;
                updates += 1;
            }
        }
        Strategy::Random => {
            while updates < max_updates {
                if updates.is_multiple_of(m as u64) {
                    let (_, s) = greedy_select(sub, &d, &maintained);
                    if s <= inner_tol {
                        break;
                    }
                }
                let i = rng.gen_range(0..m);
                update_coord(i, &mut d, &mut maintained, &mut drop)?;
                updates += 1;
            }
        }
        Strategy::Cyclic => {
            'outer: while updates < max_updates {
                let (_, s) = greedy_select(sub, &d, &maintained);
                if s <= inner_tol {
                    break;
                }
                for i in 0..m {
                    update_coord(i, &mut d, &mut maintained, &mut drop)?;
                    updates += 1;
                    if updates >= max_updates {
                        break 'outer;
                    }
                }
            }
        }
    }

    Ok(SubproblemResult {
        d,
        objective_drop: drop.max(0.0),
        inner_updates: updates,
        q_block_d: maintained,
    })
}
